"""Special cases of dataset shift: constructors, checks and their corrections."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from config import CHECK_ATOL, CHECK_RTOL, DENSITY_TOL
from files.shift.distribution import (
    ClassConditionalDensities,
    ClassPriors,
    FiniteJointDistribution,
    PosteriorTable,
    as_array,
    class_densities,
    density,
    feature_density,
    generalized_bayes_table,
    group_index,
    posterior_rows,
    require_valid,
    safe_ratio,
)
from files.shift.errors import (
    AbsoluteContinuityViolation,
    InconsistentInputs,
    InvalidInput,
    NotBinary,
    NotGroupInvariant,
    NotSufficient,
    PreconditionFailed,
    ShapeMismatch,
    Undetermined,
)
from files.shift.fjs import is_factorizable
from files.utils.logging import get_logger

logger = get_logger('taxonomy')


def _close(a, b, rtol: float = CHECK_RTOL) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) <= rtol * np.maximum(np.abs(a), np.abs(b)) + CHECK_ATOL


@dataclass(frozen=True)
class RepresentationMap:
    """Deterministic map T from feature cells to representation values."""
    groups: tuple[str, ...]

    def __post_init__(self):
        groups = tuple(str(g) for g in self.groups)
        if not groups:
            raise InvalidInput('representation map is empty')
        object.__setattr__(self, 'groups', groups)

    @property
    def group_index(self) -> np.ndarray:
        _, inverse = np.unique(np.array(self.groups), return_inverse=True)
        return inverse.reshape(len(self.groups))

    @property
    def labels(self) -> list[str]:
        return sorted(set(self.groups))

    @classmethod
    def from_mapping(cls, mapping: Mapping, features: Sequence[str]) -> RepresentationMap:
        features = [str(f) for f in features]
        mapping = {str(k): v for k, v in mapping.items()}
        missing = [f for f in features if f not in mapping]
        if missing:
            raise InvalidInput(f'representation map misses {len(missing)} cell(s)', cells=missing)
        unknown = sorted(set(mapping) - set(features))
        if unknown:
            raise ShapeMismatch('representation map names unknown cells', cells=unknown)
        return cls(tuple(str(mapping[f]) for f in features))

    @classmethod
    def identity(cls, features: Sequence[str]) -> RepresentationMap:
        return cls(tuple(str(f) for f in features))

    @classmethod
    def collapse(cls, features: Sequence[str], label: str = 'all') -> RepresentationMap:
        return cls(tuple(label for _ in features))

    def to_dict(self, dist: FiniteJointDistribution) -> dict:
        return {'groups': dict(zip(dist.feature_labels, self.groups))}


# -- constructors -------------------------------------------------------------

def make_prior_shift(P: FiniteJointDistribution, q) -> FiniteJointDistribution:
    """Target with P's class-conditional distributions and priors q."""
    require_valid(P, 'source')
    q = q if isinstance(q, ClassPriors) else ClassPriors(q)
    if len(q) != P.d:
        raise ShapeMismatch(f'{len(q)} priors for {P.d} classes')
    return P.with_weights(P.weights / P.priors[None, :] * q.values[None, :])


def make_covariate_shift(P: FiniteJointDistribution, t) -> FiniteJointDistribution:
    """Target with P's posteriors and feature marginal t."""
    require_valid(P, 'source')
    t = as_array(t, ndim=1)
    if t.shape != (P.m,):
        raise ShapeMismatch(f'target marginal has {t.size} entries, expected {P.m}')
    if np.any(~np.isfinite(t)) or np.any(t < 0) or abs(t.sum() - 1.0) > DENSITY_TOL:
        raise InvalidInput(f'target marginal must be non-negative and sum to 1 (sum = {t.sum()!r})')
    off = (t > 0) & ~P.support
    if off.any():
        raise AbsoluteContinuityViolation('target marginal has mass on source-null cells',
                                          cells=[P.feature_labels[x] for x in np.flatnonzero(off)])
    posteriors = posterior_rows(P.weights).values
    return P.with_weights(posteriors * t[:, None])


def covariate_rho(P: FiniteJointDistribution, Q: FiniteJointDistribution) -> np.ndarray:
    """ρ_i = (Q[A_d]/P[A_d])·(P[A_i]/Q[A_i]), the constants of a covariate-shift pair."""
    p, q = P.priors, Q.priors
    if not np.all(q > 0):
        raise InvalidInput('target priors must be positive')
    return (q[-1] / p[-1]) * (p[:-1] / q[:-1])


def correct_prior_shift(P_posteriors, p, q) -> PosteriorTable:
    posteriors = as_array(P_posteriors, ndim=2)
    p, q = as_array(p, ndim=1), as_array(q, ndim=1)
    if not posteriors.shape[1] == p.size == q.size:
        raise ShapeMismatch('posterior and prior shapes disagree')
    numerators = posteriors * (q / p)[None, :]
    denominator = numerators.sum(axis=1)
    return PosteriorTable(safe_ratio(numerators, denominator[:, None]), ~(denominator > 0), denominator)


# -- CSPD -----------------------------------------------------------------------

@dataclass(frozen=True)
class CspdCheck:
    cspd: bool
    order: tuple[str, ...] = ()
    violation: tuple[str, str] | None = None

    def to_dict(self) -> dict:
        return {'cspd': self.cspd, 'order': list(self.order),
                'violation': None if self.violation is None else list(self.violation)}


def check_cspd(P: FiniteJointDistribution, Q: FiniteJointDistribution, rtol: float = CHECK_RTOL) -> CspdCheck:
    """Comonotone class-1 posteriors; equal source posteriors must give equal target posteriors."""
    if P.d != 2 or Q.d != 2:
        raise NotBinary(f'CSPD needs two classes, got {P.d}')
    h = feature_density(Q, P).values
    cells = np.flatnonzero(h > 0)
    a = posterior_rows(P.weights).values[cells, 0]
    b = posterior_rows(Q.weights).values[cells, 0]

    tie_a = _close(a[:, None], a[None, :], rtol)
    tie_b = _close(b[:, None], b[None, :], rtol)
    reversed_ = ~tie_a & ~tie_b & ((a[:, None] - a[None, :]) * (b[:, None] - b[None, :]) < 0)
    broken_tie = tie_a & ~tie_b
    bad = np.argwhere(reversed_ | broken_tie)
    if bad.size:
        x, y = sorted(bad[0])
        pair = (P.feature_labels[cells[x]], P.feature_labels[cells[y]])
        logger.info('CSPD violated on cells %s', pair)
        return CspdCheck(False, violation=pair)
    order = tuple(P.feature_labels[cells[k]] for k in np.argsort(a, kind='stable'))
    return CspdCheck(True, order=order)


def cspd_class_densities(P: FiniteJointDistribution, Q: FiniteJointDistribution) -> ClassConditionalDensities:
    """h_i = (p_i/q_i)·h·Q[A_i|x]/P[A_i|x], the class densities through the posterior link."""
    check = check_cspd(P, Q)
    if not check.cspd:
        raise PreconditionFailed('pair is not CSPD', cells=list(check.violation))
    h = feature_density(Q, P).values
    source = posterior_rows(P.weights).values
    target = posterior_rows(Q.weights).values
    factors = safe_ratio(P.priors, Q.priors)
    return ClassConditionalDensities(h[:, None] * factors[None, :] * safe_ratio(target, source))


# -- representation-based checks --------------------------------------------------

@dataclass(frozen=True)
class GroupCheck:
    passed: bool
    reason: str = ''
    witness: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {'passed': self.passed}
        if not self.passed:
            out.update(reason=self.reason, witness=self.witness)
        return out


def _group_masses(dist: FiniteJointDistribution, groups: np.ndarray, k: int) -> np.ndarray:
    return np.stack([np.bincount(groups, weights=dist.weights[:, i], minlength=k) for i in range(dist.d)], axis=1)


def _sufficiency(dist: FiniteJointDistribution, T, role: str, rtol: float) -> GroupCheck:
    """Cell posteriors equal to group posteriors on the support of ``dist``."""
    cell = posterior_rows(dist.weights).values
    grouped = generalized_bayes_table(dist, np.ones(dist.weights.shape), T)
    off = ~_close(cell, grouped, rtol) & dist.support[:, None]
    if off.any():
        x, i = np.argwhere(off)[0]
        return GroupCheck(False, 'NotSufficient', {
            'measure': role, 'cell': dist.feature_labels[x], 'class': dist.class_labels[i],
            'group': T.groups[x] if isinstance(T, RepresentationMap) else str(T[x]),
        })
    return GroupCheck(True)


def _group_labels(T, m: int) -> tuple[np.ndarray, list[str]]:
    groups = group_index(T, m)
    names = T.groups if isinstance(T, RepresentationMap) else [str(v) for v in np.asarray(T)]
    labels = [''] * (int(groups.max()) + 1)
    for x, g in enumerate(groups):
        labels[g] = names[x]
    return groups, labels


def check_gls(P: FiniteJointDistribution, Q: FiniteJointDistribution, T,
              rtol: float = CHECK_RTOL) -> GroupCheck:
    """Group-conditional invariance given each class, plus sufficiency of T under P and Q."""
    density(Q, P)
    groups, labels = _group_labels(T, P.m)
    k = len(labels)
    source = safe_ratio(_group_masses(P, groups, k), P.priors[None, :])
    target = safe_ratio(_group_masses(Q, groups, k), Q.priors[None, :])
    off = ~_close(source, target, rtol) & (Q.priors > 0)[None, :]
    if off.any():
        g, i = np.argwhere(off)[0]
        return GroupCheck(False, 'NotGroupInvariant', {'group': labels[g], 'class': P.class_labels[i]})

    for dist, role in ((P, 'source'), (Q, 'target')):
        result = _sufficiency(dist, T, role, rtol)
        if not result.passed:
            return result
    return GroupCheck(True)


def gls_factorize(P: FiniteJointDistribution, Q: FiniteJointDistribution, T,
                  rtol: float = CHECK_RTOL) -> tuple[np.ndarray, np.ndarray]:
    """(g, b) with b_i = Q[A_i]/P[A_i] and g = h/γ, γ = Σ_i b_i P[A_i|T]."""
    check = check_gls(P, Q, T, rtol)
    if not check.passed:
        error = NotGroupInvariant if check.reason == 'NotGroupInvariant' else NotSufficient
        raise error(f'generalised label shift fails: {check.reason}', witness=check.witness)

    b = Q.priors / P.priors
    grouped = generalized_bayes_table(P, np.ones(P.weights.shape), T)
    gamma = grouped @ b
    g = safe_ratio(feature_density(Q, P).values, gamma)

    h_bar = density(Q, P).values
    gap = np.abs(np.outer(g, b) - h_bar)[P.weights > 0]
    if gap.size and gap.max() > DENSITY_TOL:
        raise InconsistentInputs(f'g·b differs from the joint density by {gap.max():.3e}', residual=float(gap.max()))
    return g, b


def check_domain_invariance(P: FiniteJointDistribution, Q: FiniteJointDistribution, T,
                            rtol: float = CHECK_RTOL) -> GroupCheck:
    """Equal (group × class) masses plus sufficiency of T under both measures."""
    density(Q, P)
    groups, labels = _group_labels(T, P.m)
    k = len(labels)
    off = ~_close(_group_masses(P, groups, k), _group_masses(Q, groups, k), rtol)
    if off.any():
        g, i = np.argwhere(off)[0]
        return GroupCheck(False, 'MassMismatch', {'group': labels[g], 'class': P.class_labels[i]})
    for dist, role in ((P, 'source'), (Q, 'target')):
        result = _sufficiency(dist, T, role, rtol)
        if not result.passed:
            return result

    if not _posteriors_invariant(P, Q, rtol):
        raise InconsistentInputs('domain invariance holds but posteriors differ')
    return GroupCheck(True)


# -- classification -------------------------------------------------------------------

def _posteriors_invariant(P, Q, rtol) -> bool:
    on_target = Q.support
    source = posterior_rows(P.weights).values[on_target]
    target = posterior_rows(Q.weights).values[on_target]
    return bool(_close(source, target, rtol).all())


def _class_conditionals_invariant(P, Q, rtol) -> bool:
    h = class_densities(Q, P).values
    present = P.weights > 0
    return bool(_close(h[present], 1.0, rtol).all())


@dataclass
class ShiftReport:
    no_shift: bool
    prior_shift: bool
    covariate_shift: bool
    fjs: bool
    rho: list | None = None
    cspd: bool | None = None
    gls: bool | None = None
    domain_invariance: bool | None = None
    tolerances: dict = field(default_factory=dict)
    witnesses: dict = field(default_factory=dict)
    implied: dict = field(default_factory=dict)

    def _imply(self, flag: str, because: str) -> None:
        if getattr(self, flag):
            return
        if getattr(self, flag) is False:
            logger.warning('%s check failed but %s implies it; the tolerances disagree', flag, because)
        setattr(self, flag, True)
        self.implied[flag] = because
        self.witnesses.pop(flag, None)

    def close(self, P: FiniteJointDistribution, Q: FiniteJointDistribution) -> ShiftReport:
        """Propagate implications between the flags.

        Every flag set here is listed in ``implied`` with the flag that forced it.
        """
        if self.no_shift:
            self._imply('prior_shift', 'no_shift')
            self._imply('covariate_shift', 'no_shift')
        if self.domain_invariance:
            self._imply('covariate_shift', 'domain_invariance')
        if not self.fjs:
            source = next((flag for flag in ('prior_shift', 'gls', 'covariate_shift') if getattr(self, flag)), None)
            if source is not None:
                self._imply('fjs', source)
                self.rho = covariate_rho(P, Q).tolist() if source == 'covariate_shift' else [1.0] * (P.d - 1)
        if self.fjs and P.d == 2:
            self._imply('cspd', 'fjs')
        return self

    def to_dict(self) -> dict:
        return {
            'no_shift': self.no_shift,
            'prior_shift': self.prior_shift,
            'covariate_shift': self.covariate_shift,
            'fjs': self.fjs,
            'rho': self.rho,
            'cspd': self.cspd,
            'gls': self.gls,
            'domain_invariance': self.domain_invariance,
            'tolerances': self.tolerances,
            'witnesses': self.witnesses,
            'implied': self.implied,
        }


def classify(P: FiniteJointDistribution, Q: FiniteJointDistribution, T=None,
             tol: float = CHECK_RTOL) -> ShiftReport:
    """Run every applicable check and report all flags."""
    require_valid(P, 'source')
    require_valid(Q, 'target')
    density(Q, P)
    witnesses = {}

    try:
        factorization = is_factorizable(P, Q, rtol=tol)
        fjs, rho = factorization.factorizable, factorization.rho
        if factorization.violation:
            witnesses['fjs'] = factorization.violation
    except Undetermined as e:
        fjs, rho = False, None
        witnesses['fjs'] = {'reason': e.message}

    report = ShiftReport(
        no_shift=bool(_close(P.weights, Q.weights, tol).all()),
        prior_shift=_class_conditionals_invariant(P, Q, tol),
        covariate_shift=_posteriors_invariant(P, Q, tol),
        fjs=fjs,
        rho=None if rho is None else rho.tolist(),
        tolerances={'rtol': tol, 'atol': CHECK_ATOL},
        witnesses=witnesses,
    )
    if P.d == 2:
        cspd = check_cspd(P, Q, tol)
        report.cspd = cspd.cspd
        if cspd.violation:
            witnesses['cspd'] = list(cspd.violation)
    if T is not None:
        gls = check_gls(P, Q, T, tol)
        invariance = check_domain_invariance(P, Q, T, tol)
        report.gls, report.domain_invariance = gls.passed, invariance.passed
        if not gls.passed:
            witnesses['gls'] = {'reason': gls.reason, **gls.witness}
        if not invariance.passed:
            witnesses['domain_invariance'] = {'reason': invariance.reason, **invariance.witness}

    report.close(P, Q)
    logger.info('Classified pair: %s', {k: v for k, v in report.to_dict().items() if isinstance(v, bool)})
    return report
