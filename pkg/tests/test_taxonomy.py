import logging

import numpy as np
import pytest

from files.shift.distribution import FiniteJointDistribution, class_densities, density, posterior_rows
from files.shift.errors import (
    InvalidInput,
    NotBinary,
    NotGroupInvariant,
    NotSufficient,
    PreconditionFailed,
    ShapeMismatch,
)
from files.shift import taxonomy
from files.shift.fjs import FactorizabilityCheck, correct_posteriors_fjs, is_factorizable, rho_residual
from files.shift.taxonomy import (
    RepresentationMap,
    check_cspd,
    check_domain_invariance,
    check_gls,
    classify,
    correct_prior_shift,
    covariate_rho,
    cspd_class_densities,
    gls_factorize,
    make_covariate_shift,
    make_prior_shift,
)
from helpers import factorized_target, random_distribution, random_equivalent_pair


def test_prior_shift_construction(d1, d1_prior):
    Q = make_prior_shift(d1, [0.7, 0.3])
    np.testing.assert_allclose(Q.weights, d1_prior.weights, rtol=0, atol=1e-15)
    np.testing.assert_allclose(class_densities(Q, d1).values, np.ones((2, 2)), atol=1e-12)
    np.testing.assert_allclose(make_prior_shift(d1, d1.priors).weights, d1.weights, atol=1e-15)


def test_prior_shift_scales_columns():
    P = FiniteJointDistribution.from_table(np.full((3, 3), 1 / 9))
    Q = make_prior_shift(P, [0.5, 0.3, 0.2])
    np.testing.assert_allclose(Q.weights / P.weights, np.tile([1.5, 0.9, 0.6], (3, 1)), atol=1e-12)


def test_prior_shift_correction_is_exact():
    rng = np.random.default_rng(4)
    for _ in range(20):
        P = random_distribution(rng, 7, 3)
        q = rng.dirichlet(np.ones(3))
        Q = make_prior_shift(P, q)
        corrected = correct_prior_shift(posterior_rows(P.weights), P.priors, Q.priors)
        np.testing.assert_allclose(corrected.values, posterior_rows(Q.weights).values, rtol=0, atol=1e-12)
        fjs = correct_posteriors_fjs(posterior_rows(P.weights), P.priors, Q.priors, np.ones(2))
        assert np.array_equal(corrected.values, fjs.values)


def test_covariate_shift_construction(d1, d1_covariate):
    Q = make_covariate_shift(d1, [0.7, 0.3])
    np.testing.assert_allclose(Q.weights, d1_covariate.weights, rtol=0, atol=1e-15)
    np.testing.assert_allclose(make_covariate_shift(d1, d1.feature_marginal).weights, d1.weights)


def test_covariate_shift_properties():
    rng = np.random.default_rng(12)
    for _ in range(20):
        P = random_distribution(rng, 6, 3)
        t = rng.dirichlet(np.ones(6))
        Q = make_covariate_shift(P, t)
        np.testing.assert_allclose(posterior_rows(Q.weights).values, posterior_rows(P.weights).values,
                                   rtol=0, atol=1e-15)
        h_bar = density(Q, P).values
        np.testing.assert_allclose(h_bar, np.repeat(h_bar[:, :1], 3, axis=1), rtol=0, atol=1e-12)
        h = Q.feature_marginal / P.feature_marginal
        assert rho_residual(P, h, Q.priors, covariate_rho(P, Q)) <= 1e-10


def test_covariate_rho_on_d1(d1, d1_covariate):
    assert covariate_rho(d1, d1_covariate)[0] == pytest.approx(19 / 31, abs=1e-15)


def test_covariate_shift_rejects_bad_marginal(d1):
    with pytest.raises(InvalidInput):
        make_covariate_shift(d1, [0.7, 0.4])
    with pytest.raises(ShapeMismatch):
        make_covariate_shift(d1, [0.5, 0.3, 0.2])


def test_cspd_holds_for_factorized_pairs():
    rng = np.random.default_rng(21)
    for _ in range(20):
        P = random_distribution(rng, 6, 2)
        Q = factorized_target(P, rng.uniform(0.3, 3.0, 6), rng.uniform(0.3, 3.0, 2))
        assert check_cspd(P, Q).cspd


def test_cspd_trivial_and_order(d1):
    result = check_cspd(d1, d1)
    assert result.cspd
    assert result.order == ('b', 'a')


def test_cspd_violation(d1):
    Q = FiniteJointDistribution(('a', 'b'), ('1', '2'), [[0.1, 0.4], [0.4, 0.1]])
    result = check_cspd(d1, Q)
    assert not result.cspd
    assert result.violation == ('a', 'b')
    with pytest.raises(PreconditionFailed):
        cspd_class_densities(d1, Q)


def test_cspd_tie_must_be_preserved():
    P = FiniteJointDistribution.from_table([[0.3, 0.2], [0.3, 0.2]], features=['a', 'b'])
    Q = FiniteJointDistribution.from_table([[0.4, 0.1], [0.2, 0.3]], features=['a', 'b'])
    assert not check_cspd(P, Q).cspd


def test_cspd_needs_two_classes():
    P = FiniteJointDistribution.from_table(np.full((2, 3), 1 / 6))
    with pytest.raises(NotBinary):
        check_cspd(P, P)


def test_cspd_class_densities(d1, d1_prior):
    np.testing.assert_allclose(cspd_class_densities(d1, d1).values, np.ones((2, 2)), atol=1e-12)
    np.testing.assert_allclose(cspd_class_densities(d1, d1_prior).values, np.ones((2, 2)), atol=1e-12)
    Q = factorized_target(d1, [1.3, 0.7], [2.0, 1.0])
    np.testing.assert_allclose(cspd_class_densities(d1, Q).values, class_densities(Q, d1).values,
                               rtol=0, atol=1e-10)


def test_representation_map_from_mapping():
    T = RepresentationMap.from_mapping({'a': 'g', 'b': 'g', 'c': 'h'}, ['a', 'b', 'c'])
    assert T.group_index.tolist() == [0, 0, 1]
    with pytest.raises(InvalidInput):
        RepresentationMap.from_mapping({'a': 'g'}, ['a', 'b'])
    with pytest.raises(ShapeMismatch):
        RepresentationMap.from_mapping({'a': 'g', 'b': 'g', 'z': 'g'}, ['a', 'b'])


def test_gls_with_identity_map(d1, d1_prior):
    T = RepresentationMap.identity(d1.feature_labels)
    assert check_gls(d1, d1_prior, T).passed
    g, b = gls_factorize(d1, d1_prior, T)
    np.testing.assert_allclose(b, [1.4, 0.6])
    np.testing.assert_allclose(g, [1.0, 1.0], atol=1e-12)


def test_gls_with_collapsed_map(d1):
    T = RepresentationMap.collapse(d1.feature_labels)
    Q = FiniteJointDistribution(('a', 'b'), ('1', '2'), [[0.3, 0.2], [0.2, 0.3]])
    result = check_gls(d1, Q, T)
    assert not result.passed and result.reason == 'NotSufficient'
    with pytest.raises(NotSufficient):
        gls_factorize(d1, Q, T)

    P = FiniteJointDistribution(('a', 'b'), ('1', '2'), [[0.3, 0.2], [0.3, 0.2]])
    Q = FiniteJointDistribution(('a', 'b'), ('1', '2'), [[0.18, 0.12], [0.42, 0.28]])
    assert check_gls(P, Q, T).passed


def test_gls_fails_group_invariance(d1, d1_covariate):
    T = RepresentationMap.identity(d1.feature_labels)
    result = check_gls(d1, d1_covariate, T)
    assert result.reason == 'NotGroupInvariant'
    assert result.witness == {'group': 'a', 'class': '1'}
    with pytest.raises(NotGroupInvariant):
        gls_factorize(d1, d1_covariate, T)


def test_gls_split_groups(gls_pair):
    P, Q, groups = gls_pair
    T = RepresentationMap.from_mapping(groups, P.feature_labels)
    assert check_gls(P, Q, T).passed
    g, b = gls_factorize(P, Q, T)
    np.testing.assert_allclose(np.outer(g, b)[P.weights > 0], density(Q, P).values[P.weights > 0],
                               rtol=0, atol=1e-10)

    corrected = correct_prior_shift(posterior_rows(P.weights), P.priors, Q.priors)
    np.testing.assert_allclose(corrected.values, posterior_rows(Q.weights).values, rtol=0, atol=1e-12)

    check = is_factorizable(P, Q)
    assert check.factorizable
    assert check.rho[0] == pytest.approx(1.0, abs=1e-9)

    report = classify(P, Q, T)
    assert report.gls and report.fjs
    assert not report.prior_shift


def test_domain_invariance(d1, d1_covariate, gls_pair):
    T = RepresentationMap.identity(d1.feature_labels)
    assert check_domain_invariance(d1, d1, T).passed
    assert not check_domain_invariance(d1, d1_covariate, T).passed
    assert classify(d1, d1_covariate, T).covariate_shift

    P, _, groups = gls_pair
    grouped = RepresentationMap.from_mapping(groups, P.feature_labels)
    Q = FiniteJointDistribution(P.feature_labels, P.class_labels,
                                [[0.24, 0.06], [0.16, 0.04], [0.02, 0.08], [0.08, 0.32]])
    assert check_domain_invariance(P, Q, grouped).passed
    report = classify(P, Q, grouped)
    assert report.domain_invariance and report.covariate_shift and report.fjs


def test_classify_identical(d1):
    report = classify(d1, d1, RepresentationMap.identity(d1.feature_labels))
    flags = report.to_dict()
    for key in ('no_shift', 'prior_shift', 'covariate_shift', 'fjs', 'cspd', 'gls', 'domain_invariance'):
        assert flags[key] is True


def test_classify_prior_pair(d1, d1_prior):
    report = classify(d1, d1_prior)
    assert report.prior_shift and report.fjs and report.cspd
    assert not report.covariate_shift and not report.no_shift
    assert report.rho[0] == pytest.approx(1.0, abs=1e-12)
    assert report.gls is None


def test_classify_generic_pair():
    rng = np.random.default_rng(40)
    P, Q = random_equivalent_pair(rng, 6, 3)
    report = classify(P, Q)
    assert not (report.no_shift or report.prior_shift or report.covariate_shift or report.fjs)
    assert 'fjs' in report.witnesses
    assert report.cspd is None


def test_implication_closure():
    rng = np.random.default_rng(41)
    pairs = []
    for _ in range(10):
        P = random_distribution(rng, 5, 2)
        pairs.append((P, make_prior_shift(P, rng.dirichlet(np.ones(2)))))
        pairs.append((P, make_covariate_shift(P, rng.dirichlet(np.ones(5)))))
        pairs.append((P, factorized_target(P, rng.uniform(0.5, 2.0, 5), rng.uniform(0.5, 2.0, 2))))
        pairs.append(random_equivalent_pair(rng, 5, 2))
    for P, Q in pairs:
        report = classify(P, Q)
        if report.prior_shift or report.covariate_shift:
            assert report.fjs
        if report.fjs:
            assert report.cspd
        if report.no_shift:
            assert report.prior_shift and report.covariate_shift


def test_raw_checks_hold_before_closure():
    rng = np.random.default_rng(42)
    for _ in range(10):
        P = random_distribution(rng, 5, 2)
        for Q in (make_prior_shift(P, rng.dirichlet(np.ones(2))),
                  make_covariate_shift(P, rng.dirichlet(np.ones(5))),
                  factorized_target(P, rng.uniform(0.5, 2.0, 5), rng.uniform(0.5, 2.0, 2))):
            assert is_factorizable(P, Q).factorizable
            assert check_cspd(P, Q).cspd
            report = classify(P, Q)
            assert 'fjs' not in report.implied and 'cspd' not in report.implied


def test_closure_override_is_reported(d1, d1_prior, monkeypatch, caplog):
    def refuse(P, Q, rtol):
        return FactorizabilityCheck(False, violation={'cell': 'a', 'ratio': 2.0})

    monkeypatch.setattr(taxonomy, 'is_factorizable', refuse)
    monkeypatch.setattr(taxonomy.logger, 'propagate', True)
    with caplog.at_level(logging.WARNING):
        report = classify(d1, d1_prior)

    assert report.fjs and report.rho == [1.0]
    assert 'fjs' not in report.witnesses
    assert report.implied == {'fjs': 'prior_shift'}
    assert report.to_dict()['implied'] == {'fjs': 'prior_shift'}
    assert any('fjs check failed' in r.getMessage() for r in caplog.records)


def test_closure_leaves_consistent_reports_alone(d1, d1_covariate):
    report = classify(d1, d1_covariate)
    assert report.implied == {}
    assert report.fjs and report.covariate_shift
