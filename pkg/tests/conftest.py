import pytest

from config import EXAMPLES_DIR
from files.shift.distribution import FiniteJointDistribution


def pytest_addoption(parser):
    parser.addoption('--update-goldens', action='store_true', default=False,
                     help='rewrite tests/goldens from the current CLI output')


@pytest.fixture
def update_goldens(request):
    return request.config.getoption('--update-goldens')


@pytest.fixture
def examples_dir():
    return EXAMPLES_DIR


@pytest.fixture
def d1():
    return FiniteJointDistribution(('a', 'b'), ('1', '2'), [[0.4, 0.1], [0.1, 0.4]])


@pytest.fixture
def d1_prior():
    """D1 after prior shift to q = (0.7, 0.3)."""
    return FiniteJointDistribution(('a', 'b'), ('1', '2'), [[0.56, 0.06], [0.14, 0.24]])


@pytest.fixture
def d1_covariate():
    """D1 after covariate shift to feature marginal (0.7, 0.3)."""
    return FiniteJointDistribution(('a', 'b'), ('1', '2'), [[0.56, 0.14], [0.06, 0.24]])


@pytest.fixture
def gls_pair():
    """Four cells in two groups; group level is a prior shift, within-group splits differ."""
    features = ('a1', 'a2', 'b1', 'b2')
    P = FiniteJointDistribution(features, ('1', '2'), [[0.12, 0.03], [0.28, 0.07], [0.05, 0.2], [0.05, 0.2]])
    Q = FiniteJointDistribution(features, ('1', '2'),
                                [[0.336, 0.036], [0.224, 0.024], [0.028, 0.048], [0.112, 0.192]])
    return P, Q, {'a1': 'G1', 'a2': 'G1', 'b1': 'G2', 'b2': 'G2'}
