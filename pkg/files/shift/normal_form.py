"""Normal form of the joint density and the general posterior correction.

h̄ = Σ_i h_i (q_i / p_i) 1_{A_i}, the correction it induces on posteriors, the
alternative representation through posterior ratios, and the inverse
(source-from-target) formulas for equivalent pairs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from files.shift.distribution import (
    ClassConditionalDensities,
    FiniteJointDistribution,
    JointDensity,
    PosteriorTable,
    as_array,
    class_densities,
    density,
    feature_density,
    posterior_rows,
    require_valid,
    safe_ratio,
)
from files.shift.errors import ImplicationViolation, NotEquivalent, ShapeMismatch
from files.utils.logging import get_logger

logger = get_logger('normal_form')


@dataclass(frozen=True, eq=False)
class NormalForm:
    class_densities: ClassConditionalDensities
    prior_ratios: np.ndarray

    def reconstruct(self) -> JointDensity:
        return JointDensity(self.class_densities.values * self.prior_ratios[None, :])

    def to_dict(self, dist: FiniteJointDistribution) -> dict:
        return {
            'features': list(dist.feature_labels),
            'classes': list(dist.class_labels),
            'class_densities': self.class_densities.values.tolist(),
            'prior_ratios': self.prior_ratios.tolist(),
        }


@dataclass(frozen=True, eq=False)
class ReverseResult:
    inverse_density: JointDensity
    source_posteriors: PosteriorTable


def normal_form(P: FiniteJointDistribution, Q: FiniteJointDistribution) -> NormalForm:
    require_valid(P, 'source')
    require_valid(Q, 'target')
    h_classes = class_densities(Q, P)
    ratios = Q.priors / P.priors
    ratios.setflags(write=False)
    return NormalForm(h_classes, ratios)


def correct_posteriors(P_posteriors, p, q, h_classes) -> PosteriorTable:
    """Target posteriors from source posteriors, priors and class densities.

    Rows whose denominator (the feature density h) vanishes are target-null and
    flagged.
    """
    posteriors = as_array(P_posteriors, ndim=2)
    p, q = as_array(p, ndim=1), as_array(q, ndim=1)
    h = as_array(h_classes, ndim=2)
    if not (posteriors.shape == h.shape and posteriors.shape[1] == p.size == q.size):
        raise ShapeMismatch('posterior, prior and density shapes disagree')

    numerators = h * (q / p)[None, :] * posteriors
    denominator = numerators.sum(axis=1)
    null = ~(denominator > 0)
    return PosteriorTable(safe_ratio(numerators, denominator[:, None]), null, denominator)


def alternative_density(P: FiniteJointDistribution, Q: FiniteJointDistribution) -> JointDensity:
    """h̄ = h Σ_i (Q[A_i|x] / P[A_i|x]) 1_{A_i}.

    The posterior implication is checked before absolute continuity, so a pair
    that breaks it reports ``ImplicationViolation`` rather than the broader error.
    """
    P.require_same_layout(Q)
    h = safe_ratio(Q.feature_marginal, P.feature_marginal)
    source = posterior_rows(P.weights).values
    target = posterior_rows(Q.weights).values

    on_h = (h > 0)[:, None]
    broken = on_h & ~(source > 0) & (target > 0)
    if broken.any():
        cells = [[P.feature_labels[x], P.class_labels[i]] for x, i in np.argwhere(broken)]
        raise ImplicationViolation(
            'target posterior positive where source posterior vanishes', cells=cells
        )
    h = feature_density(Q, P).values
    return JointDensity(h[:, None] * safe_ratio(target, source))


def reverse(P: FiniteJointDistribution, Q: FiniteJointDistribution) -> ReverseResult:
    """dP/dQ and the source posteriors recovered from the target side.

    Requires h̄ > 0 on the whole joint support of P (exact test, no tolerance).
    """
    h_bar = density(Q, P).values
    zeros = (P.weights > 0) & ~(h_bar > 0)
    if zeros.any():
        cells = [[P.feature_labels[x], P.class_labels[i]] for x, i in np.argwhere(zeros)]
        raise NotEquivalent(f'joint density vanishes on {len(cells)} source-support cell(s)', cells=cells)

    inverse = JointDensity(safe_ratio(1.0, h_bar))
    h_classes = class_densities(Q, P).values
    q_posteriors = posterior_rows(Q.weights).values
    numerators = safe_ratio(1.0, h_classes) * q_posteriors * (P.priors / Q.priors)[None, :]
    denominator = numerators.sum(axis=1)
    table = PosteriorTable(safe_ratio(numerators, denominator[:, None]), ~(denominator > 0), denominator)
    logger.info('Reverse densities computed for %d cells', P.m)
    return ReverseResult(inverse, table)
