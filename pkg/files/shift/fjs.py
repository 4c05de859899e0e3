"""Factorizable joint shift (FJS).

The density of the target w.r.t. the source splits as h̄ = g·b with g a
function of the feature cell and b a function of the class. Given the source
P, the target feature density h and the target priors q, the factors are
determined by constants ρ_1..ρ_{d-1} (ρ_d = 1) solving

    p_j = ρ_j E_P[ h P[A_j|x] / D_ρ(x) ],   D_ρ = Σ_i ρ_i (q_i/p_i) P[A_i|x],

for j < d. ``RatioSystemSolver`` solves that system for any (posteriors,
base priors, target priors, target weights); the selection module reuses it
with source and target swapped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from config import CHECK_ATOL, CHECK_RTOL, DEFAULT_DAMPING, DEFAULT_MAX_ITER, DEFAULT_TOL, DENSITY_TOL, STRUCTURE_TOL
from files.shift.distribution import (
    ClassPriors,
    FeatureDensity,
    FiniteJointDistribution,
    JointDensity,
    PosteriorTable,
    as_array,
    class_densities,
    density,
    posterior_rows,
    require_valid,
    safe_ratio,
)
from files.shift.errors import (
    AbsoluteContinuityViolation,
    InconsistentInputs,
    InvalidInput,
    NoConvergence,
    NotBinary,
    PreconditionFailed,
    ShapeMismatch,
    Undetermined,
)
from files.utils.logging import get_logger

MIN_DAMPING = 2.0 ** -20
BOUNDARY_PRIOR = 1e-12


def full_rho(rho, d: int) -> np.ndarray:
    rho = np.atleast_1d(as_array(rho))
    if rho.shape != (d - 1,):
        raise ShapeMismatch(f'expected {d - 1} constant(s), got {rho.size}')
    if not np.all(np.isfinite(rho)) or np.any(rho <= 0):
        raise InvalidInput('constants must be positive and finite', rho=rho.tolist())
    return np.append(rho, 1.0)


def constant_columns(posteriors: np.ndarray, support: np.ndarray, tol: float = STRUCTURE_TOL) -> np.ndarray:
    """Classes whose posterior is constant across supported cells (independent of the features)."""
    rows = posteriors[support]
    if rows.shape[0] == 0:
        return np.zeros(posteriors.shape[1], dtype=bool)
    return (rows.max(axis=0) - rows.min(axis=0)) <= tol


@dataclass(frozen=True)
class SystemSolution:
    rho: np.ndarray
    residual: float
    iterations: int
    converged: bool
    method: str
    damping: float
    degenerate: bool


class RatioSystemSolver:
    """Damped fixed-point solver for the ρ-system, with bisection for two classes.

    The multiplicative update p_j / E_j(ρ) is taken for every class and rescaled
    so that ρ_d stays 1. The damping factor is halved whenever the residual
    grows while the step changes direction.
    """

    def __init__(self, tol: float | None = None, max_iter: int | None = None,
                 damping: float | None = None, name: str = 'fjs'):
        self.tol = DEFAULT_TOL if tol is None else float(tol)
        self.max_iter = DEFAULT_MAX_ITER if max_iter is None else int(max_iter)
        self.damping = DEFAULT_DAMPING if damping is None else float(damping)
        if not 0 < self.damping <= 1:
            raise InvalidInput(f'damping must lie in (0, 1], got {self.damping}')
        if self.max_iter < 1:
            raise InvalidInput(f'max_iter must be positive, got {self.max_iter}')
        self.logger = get_logger(name)

    @staticmethod
    def expectations(posteriors, base, target, weights, rho_full) -> np.ndarray:
        """E_j = Σ_x w(x) P[A_j|x] / D_ρ(x) for every class j."""
        coefficients = rho_full * target / base
        denominator = posteriors @ coefficients
        return safe_ratio(weights, denominator) @ posteriors

    @classmethod
    def residual(cls, posteriors, base, target, weights, rho_full) -> float:
        e = cls.expectations(posteriors, base, target, weights, rho_full)
        return float(np.max(np.abs(base[:-1] - rho_full[:-1] * e[:-1])))

    def solve(self, posteriors, base, target, weights) -> SystemSolution:
        posteriors = np.asarray(posteriors, dtype=float)
        base, target, weights = (np.asarray(v, dtype=float) for v in (base, target, weights))
        d = posteriors.shape[1]

        support = posteriors.sum(axis=1) > 0
        degenerate = bool(constant_columns(posteriors, support).any())
        if degenerate:
            self.logger.warning('A class is independent of the features under the source; '
                                'the constants may not be unique')

        solution = None
        if d == 2:
            solution = self._bisect(posteriors, base, target, weights, degenerate)
        if solution is None:
            solution = self._fixed_point(posteriors, base, target, weights, degenerate)

        self.logger.info('Solved %d-class system by %s: residual=%.3e after %d iterations (converged=%s)',
                         d, solution.method, solution.residual, solution.iterations, solution.converged)
        return solution

    def _bisect(self, posteriors, base, target, weights, degenerate) -> SystemSolution | None:
        support = posteriors.sum(axis=1) > 0
        r1 = posteriors[:, 0] / base[0]
        r2 = posteriors[:, 1] / base[1]
        q = target[0]

        def objective(log_rho: float) -> float:
            denominator = np.exp(log_rho) * q * r1 + (1 - q) * r2
            return float(safe_ratio(weights * r2, denominator)[support].sum() - 1.0)

        lo = hi = 0.0
        for _ in range(80):
            if objective(lo) > 0:
                break
            lo -= np.log(10.0)
        for _ in range(80):
            if objective(hi) < 0:
                break
            hi += np.log(10.0)
        if not (objective(lo) > 0 > objective(hi)):
            if objective(lo) == 0 or objective(hi) == 0:
                root = lo if objective(lo) == 0 else hi
                rho = np.array([np.exp(root), 1.0])
                res = self.residual(posteriors, base, target, weights, rho)
                return SystemSolution(rho, res, 0, res <= self.tol, 'bisect', 1.0, degenerate)
            self.logger.warning('No sign change found for the binary objective; '
                                'falling back to fixed-point iteration')
            return None

        found = optimize.root_scalar(objective, bracket=[lo, hi], method='bisect',
                                     xtol=1e-15, maxiter=self.max_iter)
        rho = np.array([np.exp(found.root), 1.0])
        res = self.residual(posteriors, base, target, weights, rho)
        return SystemSolution(rho, res, int(found.iterations), res <= self.tol, 'bisect', 1.0, degenerate)

    def _fixed_point(self, posteriors, base, target, weights, degenerate) -> SystemSolution:
        d = posteriors.shape[1]
        rho = np.ones(d)
        lam = self.damping
        best_rho, best_res = rho.copy(), np.inf
        prev_res, prev_step = np.inf, None
        iterations = 0

        for iterations in range(1, self.max_iter + 1):
            e = self.expectations(posteriors, base, target, weights, rho)
            res = float(np.max(np.abs(base[:-1] - rho[:-1] * e[:-1])))
            if res < best_res:
                best_rho, best_res = rho.copy(), res
            if res <= self.tol:
                break
            if not e[-1] > 0:
                self.logger.warning('Reference class has no target mass; stopping')
                break

            update = safe_ratio(base, e)
            step = update / update[-1] - rho
            if prev_step is not None and res > prev_res and np.any(step * prev_step < 0):
                lam = max(lam / 2, MIN_DAMPING)
                self.logger.warning('Oscillation at iteration %d; damping halved to %.3g', iterations, lam)
            rho = rho + lam * step
            prev_res, prev_step = res, step

        return SystemSolution(best_rho, best_res, iterations, best_res <= self.tol,
                              'fixed-point', lam, degenerate)


@dataclass(frozen=True, eq=False)
class FjsCharacterization:
    q: ClassPriors
    rho: np.ndarray
    g: np.ndarray
    b: np.ndarray
    residual: float
    iterations: int
    converged: bool
    degenerate: bool = False
    method: str = 'fixed-point'

    def joint_density(self) -> JointDensity:
        return JointDensity(np.outer(self.g, self.b))

    def correct(self, P_posteriors, p) -> PosteriorTable:
        return correct_posteriors_fjs(P_posteriors, p, self.q, self.rho)

    def to_dict(self, dist: FiniteJointDistribution) -> dict:
        return {
            'features': list(dist.feature_labels),
            'classes': list(dist.class_labels),
            'q': self.q.values.tolist(),
            'rho': self.rho.tolist(),
            'g': self.g.tolist(),
            'b': self.b.tolist(),
            'residual': self.residual,
            'iterations': self.iterations,
            'converged': self.converged,
            'degenerate': self.degenerate,
            'method': self.method,
        }


@dataclass(frozen=True, eq=False)
class FactorizabilityCheck:
    factorizable: bool
    rho: np.ndarray | None = None
    violation: dict | None = None

    def to_dict(self) -> dict:
        return {
            'factorizable': self.factorizable,
            'rho': None if self.rho is None else self.rho.tolist(),
            'violation': self.violation,
        }


@dataclass(frozen=True, eq=False)
class EmResult:
    q: np.ndarray
    iterations: int
    converged: bool
    residual: float
    boundary_collapse: bool = False

    def to_dict(self) -> dict:
        return {
            'q': self.q.tolist(),
            'iterations': self.iterations,
            'converged': self.converged,
            'residual': self.residual,
            'boundary_collapse': self.boundary_collapse,
        }


@dataclass(frozen=True)
class PhiPoint:
    q: float
    rho: float
    residual: float


@dataclass(frozen=True)
class PhiCurve:
    points: tuple[PhiPoint, ...]
    limit_q_to_0: float
    limit_q_to_1: float
    lower_bound: float
    upper_bound: float
    non_unique: bool = False

    def rows(self) -> list[tuple[float, float, float]]:
        return [(pt.q, pt.rho, pt.residual) for pt in self.points]

    def to_dict(self) -> dict:
        return {
            'points': [{'q': pt.q, 'rho': pt.rho, 'residual': pt.residual} for pt in self.points],
            'limit_q_to_0': self.limit_q_to_0,
            'limit_q_to_1': self.limit_q_to_1,
            'lower_bound': self.lower_bound,
            'upper_bound': self.upper_bound,
            'non_unique': self.non_unique,
        }


def _coerce_inputs(P, h, q) -> tuple[FeatureDensity, ClassPriors]:
    require_valid(P, 'source')
    h = h if isinstance(h, FeatureDensity) else FeatureDensity(h)
    h.require_valid_for(P)
    q = q if isinstance(q, ClassPriors) else ClassPriors(q)
    if len(q) != P.d:
        raise ShapeMismatch(f'{len(q)} target priors for {P.d} classes')
    return h, q


def _factors(posteriors, p, q, rho_full, h) -> tuple[np.ndarray, np.ndarray]:
    b = rho_full * q / p
    g = safe_ratio(h, posteriors @ b)
    return g, b


def rho_residual(P: FiniteJointDistribution, h, q, rho) -> float:
    h, q = _coerce_inputs(P, h, q)
    posteriors = posterior_rows(P.weights).values
    weights = P.feature_marginal * h.values
    return RatioSystemSolver.residual(posteriors, P.priors, q.values, weights, full_rho(rho, P.d))


def solve_rho(P: FiniteJointDistribution, h, q, tol: float | None = None,
              max_iter: int | None = None, damping: float | None = None) -> FjsCharacterization:
    """Constants ρ for known target priors q and target feature density h."""
    h, q = _coerce_inputs(P, h, q)
    posteriors = posterior_rows(P.weights).values
    solver = RatioSystemSolver(tol=tol, max_iter=max_iter, damping=damping)
    solution = solver.solve(posteriors, P.priors, q.values, P.feature_marginal * h.values)

    g, b = _factors(posteriors, P.priors, q.values, solution.rho, h.values)
    result = FjsCharacterization(
        q=q, rho=solution.rho[:-1], g=g, b=b,
        residual=solution.residual, iterations=solution.iterations, converged=solution.converged,
        degenerate=solution.degenerate, method=solution.method,
    )
    if not result.converged:
        raise NoConvergence(
            f'no solution within {solver.max_iter} iterations (best residual {solution.residual:.3e})',
            residual=solution.residual, result=result,
        )
    return result


def construct_fjs_target(P: FiniteJointDistribution, h, q, rho,
                         tol: float = DENSITY_TOL) -> FiniteJointDistribution:
    """Target distribution with feature density h, priors q and constants ρ."""
    h, q = _coerce_inputs(P, h, q)
    rho_full = full_rho(rho, P.d)
    posteriors = posterior_rows(P.weights).values
    residual = RatioSystemSolver.residual(posteriors, P.priors, q.values, P.feature_marginal * h.values, rho_full)
    if residual > tol:
        raise InconsistentInputs(
            f'(h, q, rho) do not solve the equation system: residual {residual:.3e} > {tol:.1e}',
            residual=residual,
        )
    g, b = _factors(posteriors, P.priors, q.values, rho_full, h.values)
    return JointDensity(np.outer(g, b)).apply(P)


def correct_posteriors_fjs(P_posteriors, p, q, rho) -> PosteriorTable:
    posteriors = as_array(P_posteriors, ndim=2)
    p, q = as_array(p, ndim=1), as_array(q, ndim=1)
    if not posteriors.shape[1] == p.size == q.size:
        raise ShapeMismatch('posterior and prior shapes disagree')
    coefficients = full_rho(rho, p.size) * q / p

    numerators = posteriors * coefficients[None, :]
    denominator = numerators.sum(axis=1)
    return PosteriorTable(safe_ratio(numerators, denominator[:, None]), ~(denominator > 0), denominator)


def em_priors(posteriors, base, weights, tol: float | None = None, max_iter: int | None = None,
              logger=None) -> EmResult:
    """Fixed point of q_j = Σ_x w(x) (q_j/p_j) P[A_j|x] / Σ_i (q_i/p_i) P[A_i|x], started at q = p."""
    logger = logger or get_logger('fjs')
    tol = DEFAULT_TOL if tol is None else float(tol)
    max_iter = DEFAULT_MAX_ITER if max_iter is None else int(max_iter)
    posteriors = np.asarray(posteriors, dtype=float)
    base, weights = np.asarray(base, dtype=float), np.asarray(weights, dtype=float)

    q = base.copy()
    converged, iterations = False, 0
    for iterations in range(1, max_iter + 1):
        numerators = posteriors * (q / base)[None, :]
        updated = safe_ratio(numerators, numerators.sum(axis=1)[:, None]).T @ weights
        change = float(np.max(np.abs(updated - q)))
        q = updated
        if change <= tol:
            converged = True
            break

    # collapsed classes carry no equation; the rest must satisfy p_j = E_j(1)
    e = RatioSystemSolver.expectations(posteriors, base, q, weights, np.ones(base.size))
    live = q >= BOUNDARY_PRIOR
    residual = float(np.max(np.abs(base - e)[live], initial=0.0))
    collapse = bool(np.any(q < BOUNDARY_PRIOR))
    if collapse:
        logger.warning('BoundaryCollapse: estimated prior(s) below %.0e: %s', BOUNDARY_PRIOR, q.tolist())
    logger.info('EM finished after %d iterations (converged=%s, residual=%.3e)', iterations, converged, residual)
    return EmResult(q, iterations, converged, float(residual), collapse)


def estimate_priors_em(P_posteriors, p, target_feature_marginal, tol: float | None = None,
                       max_iter: int | None = None) -> EmResult:
    """Target priors under the ρ ≡ 1 assumption (maximum likelihood for prior shift)."""
    posteriors = as_array(P_posteriors, ndim=2)
    p = as_array(p, ndim=1)
    t = as_array(target_feature_marginal, ndim=1)
    if t.shape != (posteriors.shape[0],) or p.size != posteriors.shape[1]:
        raise ShapeMismatch('target marginal, posteriors and priors disagree in shape')
    if np.any(t < 0) or abs(t.sum() - 1.0) > DENSITY_TOL:
        raise InvalidInput(f'target marginal must be non-negative and sum to 1 (sum = {t.sum()!r})')
    uncovered = (t > 0) & ~(posteriors.sum(axis=1) > 0)
    if uncovered.any():
        raise AbsoluteContinuityViolation('target marginal has mass on source-null cells',
                                          cells=np.flatnonzero(uncovered).tolist())

    result = em_priors(posteriors, p, t, tol=tol, max_iter=max_iter)
    if not result.converged:
        raise NoConvergence(f'EM did not converge in {result.iterations} iterations',
                            residual=result.residual, result=result)
    return result


def is_factorizable(P: FiniteJointDistribution, Q: FiniteJointDistribution,
                    rtol: float = CHECK_RTOL) -> FactorizabilityCheck:
    """Constant class-conditional density ratios h_j / h_d, verified cell by cell."""
    require_valid(P, 'source')
    require_valid(Q, 'target')
    h = class_densities(Q, P).values
    h_bar = density(Q, P).values
    present = P.weights > 0
    d = P.d

    rho = np.ones(d)
    for j in range(d - 1):
        overlap = present[:, j] & present[:, -1]
        if not overlap.any():
            raise Undetermined(f'classes {P.class_labels[j]!r} and {P.class_labels[-1]!r} '
                               'share no cell with positive source mass')
        cells = np.flatnonzero(overlap)
        hj, hd = h[cells, j], h[cells, -1]
        mixed = (hj > 0) ^ (hd > 0)
        if mixed.any():
            x = cells[np.flatnonzero(mixed)[0]]
            return FactorizabilityCheck(False, violation={
                'class': P.class_labels[j], 'cells': [P.feature_labels[x]],
                'reason': 'exactly one class-conditional density vanishes',
            })
        both = hd > 0
        if not both.any():
            raise Undetermined(f'class {P.class_labels[j]!r} has no target mass where the reference class does')
        ratios = hj[both] / hd[both]
        ref = float(np.median(ratios))
        off = np.abs(ratios - ref) > rtol * ref + CHECK_ATOL
        if off.any():
            used = cells[both]
            lo, hi = int(np.argmin(ratios)), int(np.argmax(ratios))
            return FactorizabilityCheck(False, violation={
                'class': P.class_labels[j],
                'cells': [P.feature_labels[used[lo]], P.feature_labels[used[hi]]],
                'ratios': [float(ratios[lo]), float(ratios[hi])],
                'reason': 'density ratio not constant',
            })
        rho[j] = ref

    b = rho * Q.priors / P.priors
    g = np.where(present, safe_ratio(h_bar, b[None, :]), np.nan)
    for x in np.flatnonzero(present.any(axis=1)):
        row = g[x][present[x]]
        if row.max() - row.min() > rtol * row.max() + CHECK_ATOL:
            return FactorizabilityCheck(False, violation={
                'cells': [P.feature_labels[x]],
                'classes': [P.class_labels[i] for i in np.flatnonzero(present[x])],
                'reason': 'feature factor differs across classes',
            })
    return FactorizabilityCheck(True, rho=rho[:-1])


def binary_rho_limits(P: FiniteJointDistribution, h) -> tuple[float, float]:
    """Closed-form limits of ρ as q → 0 and q → 1 in the binary case."""
    posteriors = posterior_rows(P.weights).values
    h = as_array(h, ndim=1)
    weights = P.feature_marginal * h
    p = P.priors[0]
    a = posteriors[:, 0]
    low = p / ((1 - p) * float(safe_ratio(weights * a, 1 - a).sum()))
    high = p / (1 - p) * float(safe_ratio(weights * (1 - a), a).sum())
    return low, high


def binary_phi(P: FiniteJointDistribution, h, q_grid, tol: float | None = None,
               max_iter: int | None = None) -> PhiCurve:
    """ρ as a function of the target positive-class prior q, for fixed h."""
    if P.d != 2:
        raise NotBinary(f'phi curve needs two classes, got {P.d}')
    h, _ = _coerce_inputs(P, h, P.priors)
    posteriors = posterior_rows(P.weights).values
    support = P.support
    a = posteriors[support, 0]
    if np.any(a <= 0) or np.any(a >= 1):
        raise PreconditionFailed('source posterior takes the value 0 or 1 on a cell with positive mass')

    solver = RatioSystemSolver(tol=tol, max_iter=max_iter, name='fjs')
    non_unique = bool(constant_columns(posteriors, support).any())
    if non_unique:
        solver.logger.warning('NonUnique: class independent of the features; phi is constant')

    weights = P.feature_marginal * h.values
    p = P.priors
    r1, r2 = posteriors[:, 0] / p[0], posteriors[:, 1] / p[1]
    lower = 1.0 / float(safe_ratio(weights * r1, r2)[support].sum())
    upper = float(safe_ratio(weights * r2, r1)[support].sum())
    low_limit, high_limit = binary_rho_limits(P, h.values)

    points = []
    for q in q_grid:
        q = float(q)
        if not 0 < q < 1:
            raise InvalidInput(f'grid value {q} outside (0, 1)')
        solution = solver.solve(posteriors, p, np.array([q, 1 - q]), weights)
        points.append(PhiPoint(q, float(solution.rho[0]), solution.residual))
    return PhiCurve(tuple(points), low_limit, high_limit, lower, upper, non_unique)
