"""Sample selection bias.

A population P is thinned by accepting each object with probability φ(x, i);
the accepted objects form the sample distribution Q. This module builds Q
exactly, simulates the thinning, and recovers population quantities from the
sample side.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from config import ADMISSIBILITY_TOL, DEFAULT_SEED, INDEPENDENCE_TOL
from files.shift.distribution import (
    FiniteJointDistribution,
    PosteriorTable,
    as_array,
    density,
    posterior_rows,
    require_valid,
    safe_ratio,
)
from files.shift.errors import (
    AllRejected,
    Inadmissible,
    InvalidInput,
    MissingInput,
    NoConvergence,
    NotFJS,
    ShapeMismatch,
    Undetermined,
)
from files.shift.fjs import RatioSystemSolver, em_priors, is_factorizable
from files.utils.logging import get_logger

logger = get_logger('selection')

MODES = ('known_population_priors', 'alpha_one')


@dataclass(frozen=True, eq=False)
class SelectionModel:
    """Selection probability φ per (cell, class), every entry in (0, 1]."""
    phi: np.ndarray

    def __post_init__(self):
        phi = np.array(as_array(self.phi, ndim=2), dtype=float)
        bad = ~np.isfinite(phi) | (phi <= 0) | (phi > 1)
        if bad.any():
            raise InvalidInput('selection probabilities must lie in (0, 1]',
                               cells=np.argwhere(bad).tolist())
        phi.setflags(write=False)
        object.__setattr__(self, 'phi', phi)

    @classmethod
    def cell_only(cls, values, d: int) -> SelectionModel:
        return cls(np.repeat(as_array(values, ndim=1)[:, None], d, axis=1))

    @classmethod
    def class_only(cls, values, m: int) -> SelectionModel:
        return cls(np.repeat(as_array(values, ndim=1)[None, :], m, axis=0))

    def require_fits(self, P: FiniteJointDistribution) -> None:
        if self.phi.shape != P.weights.shape:
            raise ShapeMismatch(f'selection table has shape {self.phi.shape}, distribution {P.weights.shape}')


@dataclass(frozen=True, eq=False)
class SelectionTables:
    p_s: float
    p_s_given_h: np.ndarray
    joint_given_h: np.ndarray
    classwise: np.ndarray
    sample: FiniteJointDistribution
    not_selected: FiniteJointDistribution | None


def sample_distribution(P: FiniteJointDistribution, sel: SelectionModel) -> tuple[FiniteJointDistribution, float]:
    require_valid(P, 'population')
    sel.require_fits(P)
    selected = P.weights * sel.phi
    p_s = float(selected.sum())
    return P.with_weights(selected / p_s), p_s


def selection_tables(P: FiniteJointDistribution, sel: SelectionModel) -> SelectionTables:
    Q, p_s = sample_distribution(P, sel)
    posteriors = posterior_rows(P.weights).values
    joint = posteriors * sel.phi
    classwise = np.where(P.weights > 0, sel.phi, 0.0)

    not_selected = None
    if p_s < 1.0:
        rest = P.weights * (1.0 - sel.phi)
        not_selected = P.with_weights(rest / (1.0 - p_s))
    return SelectionTables(p_s, joint.sum(axis=1), joint, classwise, Q, not_selected)


# -- simulation ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SimulationResult:
    counts: np.ndarray
    draws: int
    seed: int

    @property
    def accepted(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        return self.counts / self.accepted

    def to_dict(self, dist: FiniteJointDistribution) -> dict:
        return {
            'features': list(dist.feature_labels),
            'classes': list(dist.class_labels),
            'counts': self.counts.tolist(),
            'draws': self.draws,
            'accepted': self.accepted,
            'seed': self.seed,
        }


class SelectionSimulator:
    """Monte Carlo thinning: draw (x, i) from P by inversion, keep it when U ≤ φ(x, i)."""

    def __init__(self, seed: int | None = None):
        self.seed = DEFAULT_SEED if seed is None else int(seed)
        self.logger = get_logger('selection')

    def run(self, P: FiniteJointDistribution, sel: SelectionModel, n: int) -> SimulationResult:
        require_valid(P, 'population')
        sel.require_fits(P)
        if int(n) < 1:
            raise InvalidInput(f'sample size must be at least 1, got {n}')
        n = int(n)

        rng = np.random.default_rng(self.seed)
        uniforms = rng.random((n, 2))
        cumulative = np.cumsum(P.weights.ravel())
        cells = np.minimum(np.searchsorted(cumulative, uniforms[:, 0] * cumulative[-1], side='right'),
                           cumulative.size - 1)
        keep = uniforms[:, 1] <= sel.phi.ravel()[cells]
        counts = np.bincount(cells[keep], minlength=cumulative.size).reshape(P.weights.shape)

        result = SimulationResult(counts, n, self.seed)
        self.logger.info('Simulated %d draws with seed %d: %d accepted', n, self.seed, result.accepted)
        if result.accepted == 0:
            raise AllRejected(f'no object accepted in {n} draws; retry with a larger sample',
                              draws=n, seed=self.seed)
        return result


def simulate_selection(P: FiniteJointDistribution, sel: SelectionModel, n: int,
                       seed: int | None = None) -> SimulationResult:
    return SelectionSimulator(seed).run(P, sel, n)


# -- recovery -------------------------------------------------------------------------

def recover_posteriors_hein(p_s_given_h, Q_posteriors, Q_star_posteriors=None,
                            classwise_selection=None) -> PosteriorTable:
    """Population posteriors from the selected side.

    With the not-selected posteriors: Q[A_i|x]·s(x) + Q*[A_i|x]·(1 − s(x)).
    With class-wise selection: (s(x) / P_i[S|x])·Q[A_i|x] where P_i[S|x] > 0;
    other entries are 0 and their cells flagged.
    """
    if (Q_star_posteriors is None) == (classwise_selection is None):
        raise MissingInput('supply exactly one of the not-selected posteriors or the class-wise selection table')
    s = as_array(p_s_given_h, ndim=1)
    target = as_array(Q_posteriors, ndim=2)
    if target.shape[0] != s.size:
        raise ShapeMismatch('selection vector and posterior table disagree')

    if Q_star_posteriors is not None:
        rest = as_array(Q_star_posteriors, ndim=2)
        if rest.shape != target.shape:
            raise ShapeMismatch('posterior tables disagree in shape')
        values = target * s[:, None] + rest * (1.0 - s)[:, None]
        return PosteriorTable(values, ~(values.sum(axis=1) > 0))

    classwise = as_array(classwise_selection, ndim=2)
    if classwise.shape != target.shape:
        raise ShapeMismatch('class-wise selection and posterior tables disagree in shape')
    zero = ~(classwise > 0) & (target > 0)
    if zero.any():
        logger.warning('DivisionByZeroCell: class-wise selection vanishes on %d entries', int(zero.sum()))
    values = safe_ratio(s[:, None] * target, classwise)
    return PosteriorTable(values, zero.any(axis=1))


def covariate_selection_check(P: FiniteJointDistribution, sel: SelectionModel) -> bool:
    """Selection independent of the class given the features."""
    tables = selection_tables(P, sel)
    posteriors = posterior_rows(P.weights).values
    product = tables.p_s_given_h[:, None] * posteriors
    return bool(np.all(np.abs(tables.joint_given_h - product) <= INDEPENDENCE_TOL))


def necessary_criterion(P_priors, Q_priors, classwise_selection) -> np.ndarray:
    """Per-entry check of P_i[S|x] ≤ (Q[A_i]/P[A_i])·min_j(P[A_j]/Q[A_j])."""
    p, q = as_array(P_priors, ndim=1), as_array(Q_priors, ndim=1)
    classwise = as_array(classwise_selection, ndim=2)
    if not classwise.shape[1] == p.size == q.size:
        raise ShapeMismatch('prior and selection shapes disagree')
    bound = (q / p) * np.min(p / q)
    return classwise <= bound[None, :] + ADMISSIBILITY_TOL


@dataclass(frozen=True, eq=False)
class SelectionAnalysis:
    mode: str
    alpha: np.ndarray
    population_priors: np.ndarray
    recovered_population_posteriors: np.ndarray
    classwise_selection: np.ndarray
    g_star: np.ndarray
    b_star: np.ndarray
    admissible: bool
    necessary_bound_ok: bool
    necessary_flags: np.ndarray
    residuals: dict
    iterations: int
    converged: bool

    def to_dict(self, dist: FiniteJointDistribution) -> dict:
        return {
            'features': list(dist.feature_labels),
            'classes': list(dist.class_labels),
            'mode': self.mode,
            'alpha': self.alpha.tolist(),
            'population_priors': self.population_priors.tolist(),
            'recovered_population_posteriors': self.recovered_population_posteriors.tolist(),
            'classwise_selection': self.classwise_selection.tolist(),
            'g_star': self.g_star.tolist(),
            'b_star': self.b_star.tolist(),
            'admissible': self.admissible,
            'necessary_bound_ok': self.necessary_bound_ok,
            'residuals': self.residuals,
            'iterations': self.iterations,
            'converged': self.converged,
        }


def _normalize_mode(mode: str) -> str:
    key = mode.replace('-', '_')
    key = 'known_population_priors' if key == 'known_priors' else key
    if key not in MODES:
        raise InvalidInput(f'unknown mode {mode!r}; expected one of {", ".join(MODES)}')
    return key


def analyze_fjs_selection(P: FiniteJointDistribution, sel: SelectionModel,
                          mode: str = 'known_population_priors', tol: float | None = None,
                          max_iter: int | None = None, damping: float | None = None,
                          require_admissible: bool = False) -> SelectionAnalysis:
    """Constants α, recovered population posteriors and class-wise selection for an FJS selection."""
    mode = _normalize_mode(mode)
    tables = selection_tables(P, sel)
    Q = tables.sample
    try:
        check = is_factorizable(P, Q)
    except Undetermined as e:
        raise NotFJS(f'factorization undetermined: {e.message}') from e
    if not check.factorizable:
        raise NotFJS('sample and population are not related by factorizable joint shift',
                     witness=check.violation)

    sample_posteriors = posterior_rows(Q.weights).values
    q = Q.priors
    weights = P.feature_marginal

    if mode == 'known_population_priors':
        solver = RatioSystemSolver(tol=tol, max_iter=max_iter, damping=damping, name='selection')
        solution = solver.solve(sample_posteriors, q, P.priors, weights)
        alpha_full, p = solution.rho, P.priors
        residual, iterations, converged = solution.residual, solution.iterations, solution.converged
    else:
        estimate = em_priors(sample_posteriors, q, weights, tol=tol, max_iter=max_iter, logger=logger)
        alpha_full, p = np.ones(P.d), estimate.q
        residual, iterations, converged = estimate.residual, estimate.iterations, estimate.converged

    c = alpha_full * p / q
    mix = sample_posteriors @ c
    recovered = safe_ratio(sample_posteriors * c[None, :], mix[:, None])
    classwise = (q / (alpha_full * p))[None, :] * (tables.p_s_given_h * mix)[:, None]
    g_star = safe_ratio(tables.p_s, tables.p_s_given_h * mix)
    reciprocity = np.abs(np.outer(g_star, c) - safe_ratio(1.0, density(Q, P).values))[P.weights > 0]

    flags = necessary_criterion(p, q, classwise)
    admissible = bool(np.all(classwise <= 1.0 + ADMISSIBILITY_TOL))
    analysis = SelectionAnalysis(
        mode=mode, alpha=alpha_full[:-1], population_priors=p,
        recovered_population_posteriors=recovered, classwise_selection=classwise,
        g_star=g_star, b_star=c, admissible=admissible,
        necessary_bound_ok=bool(flags.all()), necessary_flags=flags,
        residuals={'system': float(residual), 'reciprocity': float(reciprocity.max(initial=0.0))},
        iterations=int(iterations), converged=bool(converged),
    )
    logger.info('Selection analysis (%s): alpha=%s admissible=%s', mode, analysis.alpha.tolist(), admissible)

    if not converged:
        raise NoConvergence(f'{mode} system did not converge (residual {residual:.3e})',
                            residual=float(residual), result=analysis)
    if not admissible:
        logger.warning('Inadmissible: class-wise selection exceeds 1 (max %.6g)', classwise.max())
        if require_admissible:
            raise Inadmissible('class-wise selection probabilities exceed 1; '
                               'the factorizable joint shift assumption fails for this selection',
                               max_selection=float(classwise.max()))
    return analysis
