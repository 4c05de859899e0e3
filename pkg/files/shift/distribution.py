"""Exact arithmetic on finite joint distributions of (feature cell, class).

A ``FiniteJointDistribution`` is the discrete stand-in for a source or target
measure: rows are feature cells, columns are classes. Every density and
posterior in the package is a ratio of such tables, with 0/0 resolved to 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from config import DENSITY_TOL, STRUCTURE_TOL
from files.shift.errors import (
    AbsoluteContinuityViolation,
    InvalidDistribution,
    InvalidInput,
    ShapeMismatch,
)
from files.utils.logging import get_logger

logger = get_logger('dist_core')


def as_array(obj, ndim: int | None = None) -> np.ndarray:
    """Unwrap value types (anything with ``.values``) into a float array."""
    arr = np.asarray(getattr(obj, 'values', obj), dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeMismatch(f'expected a {ndim}-d table, got shape {arr.shape}')
    return arr


def _frozen(values, ndim: int) -> np.ndarray:
    arr = np.array(as_array(values), dtype=float)
    if arr.ndim != ndim:
        raise ShapeMismatch(f'expected a {ndim}-d table, got shape {arr.shape}')
    arr.setflags(write=False)
    return arr


def safe_ratio(numerator, denominator) -> np.ndarray:
    """Entrywise ratio with 0/0 (and x/0) resolved to 0."""
    num, den = np.broadcast_arrays(np.asarray(numerator, dtype=float), np.asarray(denominator, dtype=float))
    out = np.zeros(num.shape, dtype=float)
    np.divide(num, den, out=out, where=den > 0)
    return out


def group_index(conditioning, m: int) -> np.ndarray:
    """Integer group id per cell; ``None`` means the cell partition itself."""
    if conditioning is None:
        return np.arange(m)
    groups = getattr(conditioning, 'group_index', conditioning)
    groups = np.asarray(groups)
    if groups.shape != (m,):
        raise ShapeMismatch(f'conditioning partition has {groups.shape[0] if groups.ndim else 0} cells, expected {m}')
    _, inverse = np.unique(groups, return_inverse=True)
    return inverse.reshape(m)


@dataclass(frozen=True, eq=False)
class FiniteJointDistribution:
    feature_labels: tuple[str, ...]
    class_labels: tuple[str, ...]
    weights: np.ndarray

    def __post_init__(self):
        features = tuple(str(f) for f in self.feature_labels)
        classes = tuple(str(c) for c in self.class_labels)
        weights = np.array(as_array(self.weights), dtype=float)
        if weights.size == 0:
            weights = weights.reshape(len(features), len(classes))
        if weights.shape != (len(features), len(classes)):
            raise ShapeMismatch(
                f'weights have shape {weights.shape}, labels imply ({len(features)}, {len(classes)})'
            )
        weights.setflags(write=False)
        object.__setattr__(self, 'feature_labels', features)
        object.__setattr__(self, 'class_labels', classes)
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def from_table(cls, weights, features: Sequence | None = None, classes: Sequence | None = None):
        table = as_array(weights, ndim=2)
        m, d = table.shape
        features = features if features is not None else [f'x{k}' for k in range(m)]
        classes = classes if classes is not None else [str(k + 1) for k in range(d)]
        return cls(tuple(features), tuple(classes), table)

    @property
    def m(self) -> int:
        return len(self.feature_labels)

    @property
    def d(self) -> int:
        return len(self.class_labels)

    @property
    def priors(self) -> np.ndarray:
        return self.weights.sum(axis=0)

    @property
    def feature_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    @property
    def support(self) -> np.ndarray:
        return self.feature_marginal > 0

    def class_index(self, label) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= int(label) < self.d:
                raise InvalidInput(f'class index {label} out of range for {self.d} classes')
            return int(label)
        try:
            return self.class_labels.index(str(label))
        except ValueError:
            raise InvalidInput(f'unknown class label {label!r}') from None

    def require_same_layout(self, other: FiniteJointDistribution) -> None:
        if self.feature_labels != other.feature_labels or self.class_labels != other.class_labels:
            raise ShapeMismatch(
                'distributions disagree on labels',
                features=[list(self.feature_labels), list(other.feature_labels)],
                classes=[list(self.class_labels), list(other.class_labels)],
            )

    def with_weights(self, weights) -> FiniteJointDistribution:
        return FiniteJointDistribution(self.feature_labels, self.class_labels, weights)

    def to_dict(self) -> dict:
        return {
            'features': list(self.feature_labels),
            'classes': list(self.class_labels),
            'weights': self.weights.tolist(),
        }


@dataclass(frozen=True, eq=False)
class ClassPriors:
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values, 1)
        if values.size < 2:
            raise InvalidInput('priors need at least two classes')
        if not np.all(np.isfinite(values)) or np.any(values <= 0) or np.any(values >= 1):
            raise InvalidInput('priors must lie strictly between 0 and 1', values=values.tolist())
        if abs(values.sum() - 1.0) > STRUCTURE_TOL:
            raise InvalidInput(f'priors sum to {values.sum()!r}, not 1', values=values.tolist())
        object.__setattr__(self, 'values', values)

    @classmethod
    def of(cls, dist: FiniteJointDistribution) -> ClassPriors:
        return cls(dist.priors)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class FeatureDensity:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen(self.values, 1))

    def expectation(self, P: FiniteJointDistribution) -> float:
        return float(P.feature_marginal @ self.values)

    def require_valid_for(self, P: FiniteJointDistribution) -> None:
        if self.values.shape != (P.m,):
            raise ShapeMismatch(f'density has {self.values.size} cells, distribution has {P.m}')
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise InvalidInput('feature density must be finite and non-negative')
        if abs(self.expectation(P) - 1.0) > DENSITY_TOL:
            raise InvalidInput(f'E_P[h] = {self.expectation(P)!r}, expected 1')
        off_support = (~P.support) & (self.values != 0)
        if off_support.any():
            raise InvalidInput(
                'feature density must vanish where the source marginal is zero',
                cells=[P.feature_labels[k] for k in np.flatnonzero(off_support)],
            )


@dataclass(frozen=True, eq=False)
class ClassConditionalDensities:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen(self.values, 2))


@dataclass(frozen=True, eq=False)
class JointDensity:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen(self.values, 2))

    def expectation(self, P: FiniteJointDistribution) -> float:
        return float((P.weights * self.values).sum())

    def apply(self, P: FiniteJointDistribution) -> FiniteJointDistribution:
        """The measure with this density w.r.t. ``P``."""
        return P.with_weights(P.weights * self.values)


@dataclass(frozen=True, eq=False)
class PosteriorTable:
    """Posterior class probabilities per cell.

    ``null_cells`` marks rows where the conditioning probability is zero; those
    rows are all-zero rather than NaN.
    """

    values: np.ndarray
    null_cells: np.ndarray
    denominator: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen(self.values, 2))
        nulls = np.array(self.null_cells, dtype=bool)
        nulls.setflags(write=False)
        object.__setattr__(self, 'null_cells', nulls)
        if self.denominator is not None:
            object.__setattr__(self, 'denominator', _frozen(self.denominator, 1))

    def to_dict(self, dist: FiniteJointDistribution) -> dict:
        return {
            'features': list(dist.feature_labels),
            'classes': list(dist.class_labels),
            'posteriors': self.values.tolist(),
            'null_cells': [dist.feature_labels[k] for k in np.flatnonzero(self.null_cells)],
        }


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    message: str = ''
    offending: tuple = ()


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def valid(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> tuple[CheckResult, ...]:
        return tuple(c for c in self.checks if not c.passed)

    def failed(self, name: str) -> bool:
        return any(c.name == name for c in self.failures)

    def to_dict(self) -> dict:
        out = {'valid': self.valid}
        if not self.valid:
            out['failures'] = {
                c.name: {'message': c.message, 'offending': list(c.offending)} for c in self.failures
            }
        return out


class Marginals(NamedTuple):
    priors: ClassPriors
    feature_marginal: np.ndarray
    posteriors: PosteriorTable


def _duplicates(labels: Sequence[str]) -> list[str]:
    seen, dup = set(), []
    for label in labels:
        if label in seen and label not in dup:
            dup.append(label)
        seen.add(label)
    return dup


def validate(dist: FiniteJointDistribution) -> ValidationReport:
    w = dist.weights
    checks = [
        CheckResult('min_classes', dist.d >= 2, '' if dist.d >= 2 else 'need at least two classes'),
        CheckResult('min_features', dist.m >= 1, '' if dist.m >= 1 else 'need at least one feature cell'),
    ]

    dup_features, dup_classes = _duplicates(dist.feature_labels), _duplicates(dist.class_labels)
    unique = not dup_features and not dup_classes
    checks.append(CheckResult(
        'unique_labels', unique, '' if unique else 'labels not unique', tuple(dup_features + dup_classes)
    ))

    bad_entries = np.argwhere(~np.isfinite(w) | (w < 0) | (w > 1))
    checks.append(CheckResult(
        'entry_range', bad_entries.size == 0,
        '' if bad_entries.size == 0 else 'weights outside [0, 1]',
        tuple(tuple(int(v) for v in idx) for idx in bad_entries),
    ))

    total = float(np.nansum(w))
    normalized = abs(total - 1.0) <= STRUCTURE_TOL
    checks.append(CheckResult('normalized', normalized, '' if normalized else f'not normalized (sum = {total!r})'))

    zero_classes = np.flatnonzero(~(w.sum(axis=0) > 0)) if dist.d else np.array([], dtype=int)
    checks.append(CheckResult(
        'class_prior_positive', zero_classes.size == 0,
        '' if zero_classes.size == 0 else 'class prior zero',
        tuple(int(i) for i in zero_classes),
    ))
    return ValidationReport(tuple(checks))


def require_valid(dist: FiniteJointDistribution, role: str = 'distribution') -> None:
    report = validate(dist)
    if not report.valid:
        raise InvalidDistribution(
            f'{role} is invalid: ' + '; '.join(c.message for c in report.failures),
            failures=report.to_dict()['failures'],
        )


def posterior_rows(weights: np.ndarray) -> PosteriorTable:
    marginal = weights.sum(axis=1)
    null = ~(marginal > 0)
    return PosteriorTable(safe_ratio(weights, marginal[:, None]), null, marginal)


def marginals_and_posteriors(dist: FiniteJointDistribution) -> Marginals:
    require_valid(dist)
    table = posterior_rows(dist.weights)
    if table.null_cells.any():
        logger.info('%d feature cell(s) with zero marginal flagged', int(table.null_cells.sum()))
    return Marginals(ClassPriors.of(dist), dist.feature_marginal, table)


def class_conditionals(dist: FiniteJointDistribution) -> np.ndarray:
    """m×d table of P_i[x] = P[x, i] / P[A_i]."""
    require_valid(dist)
    return safe_ratio(dist.weights, dist.priors[None, :])


def _check_continuity(Q: FiniteJointDistribution, P: FiniteJointDistribution) -> None:
    P.require_same_layout(Q)
    bad = (Q.weights > 0) & ~(P.weights > 0)
    if bad.any():
        cells = [[P.feature_labels[x], P.class_labels[i]] for x, i in np.argwhere(bad)]
        raise AbsoluteContinuityViolation(
            f'target has mass on {len(cells)} source-null cell(s)', cells=cells
        )


def density(Q: FiniteJointDistribution, P: FiniteJointDistribution) -> JointDensity:
    """Density of Q w.r.t. P on the joint (cell, class) table."""
    _check_continuity(Q, P)
    return JointDensity(safe_ratio(Q.weights, P.weights))


def feature_density(Q: FiniteJointDistribution, P: FiniteJointDistribution) -> FeatureDensity:
    _check_continuity(Q, P)
    return FeatureDensity(safe_ratio(Q.feature_marginal, P.feature_marginal))


def class_densities(Q: FiniteJointDistribution, P: FiniteJointDistribution) -> ClassConditionalDensities:
    """Column i is h_i = dQ_i/dP_i on the support of P_i."""
    _check_continuity(Q, P)
    target = safe_ratio(Q.weights, Q.priors[None, :])
    source = safe_ratio(P.weights, P.priors[None, :])
    return ClassConditionalDensities(safe_ratio(target, source))


def conditional_expectation(P: FiniteJointDistribution, f, conditioning=None) -> np.ndarray:
    """E_P[f | conditioning] evaluated per cell (0 on P-null groups)."""
    values = as_array(f, ndim=2)
    if values.shape != P.weights.shape:
        raise ShapeMismatch(f'function has shape {values.shape}, distribution {P.weights.shape}')
    groups = group_index(conditioning, P.m)
    k = int(groups.max()) + 1 if groups.size else 0
    mass = np.bincount(groups, weights=(P.weights * values).sum(axis=1), minlength=k)
    prob = np.bincount(groups, weights=P.feature_marginal, minlength=k)
    return safe_ratio(mass, prob)[groups]


def generalized_bayes_table(P: FiniteJointDistribution, f, conditioning=None) -> np.ndarray:
    """E_P[f 1_{A_i} | G] / E_P[f | G] for every class, 0 where the denominator is 0."""
    values = as_array(f, ndim=2)
    if values.shape != P.weights.shape:
        raise ShapeMismatch(f'function has shape {values.shape}, distribution {P.weights.shape}')
    groups = group_index(conditioning, P.m)
    k = int(groups.max()) + 1 if groups.size else 0
    weighted = P.weights * values
    numerators = np.stack(
        [np.bincount(groups, weights=weighted[:, i], minlength=k) for i in range(P.d)], axis=1
    )
    denominators = numerators.sum(axis=1)
    return safe_ratio(numerators, denominators[:, None])[groups]


def generalized_bayes(P: FiniteJointDistribution, f, target_event, conditioning=None) -> np.ndarray:
    return generalized_bayes_table(P, f, conditioning)[:, P.class_index(target_event)]
