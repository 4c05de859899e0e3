import numpy as np

from files.shift.distribution import FiniteJointDistribution


def random_distribution(rng, m: int, d: int, concentration: float = 1.0) -> FiniteJointDistribution:
    weights = rng.dirichlet(np.full(m * d, concentration)).reshape(m, d)
    return FiniteJointDistribution.from_table(weights / weights.sum())


def random_equivalent_pair(rng, m: int, d: int):
    P = random_distribution(rng, m, d)
    tilt = P.weights * rng.uniform(0.2, 5.0, size=(m, d))
    return P, P.with_weights(tilt / tilt.sum())


def random_feature_density(rng, P: FiniteJointDistribution) -> np.ndarray:
    u = rng.uniform(0.2, 5.0, size=P.m)
    return u / (P.feature_marginal @ u)


def factorized_target(P: FiniteJointDistribution, g, b) -> FiniteJointDistribution:
    weights = P.weights * np.outer(g, b)
    return P.with_weights(weights / weights.sum())
