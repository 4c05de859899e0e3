import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from files.shift.distribution import class_densities, density, feature_density, posterior_rows
from files.shift.errors import AllRejected, Inadmissible, InvalidInput, MissingInput, NotFJS, ShapeMismatch
from files.shift.normal_form import reverse
from files.shift.selection import (
    SelectionModel,
    analyze_fjs_selection,
    covariate_selection_check,
    necessary_criterion,
    recover_posteriors_hein,
    sample_distribution,
    selection_tables,
    simulate_selection,
)
from helpers import random_distribution

CELL_ONLY = [0.5, 0.25]
CLASS_ONLY = [0.6, 0.3]


@pytest.fixture
def cell_bias():
    return SelectionModel.cell_only(CELL_ONLY, 2)


@pytest.fixture
def class_bias():
    return SelectionModel.class_only(CLASS_ONLY, 2)


def test_selection_model_bounds():
    with pytest.raises(InvalidInput):
        SelectionModel([[0.5, 0.0], [0.5, 0.5]])
    with pytest.raises(InvalidInput):
        SelectionModel([[0.5, 1.2], [0.5, 0.5]])


def test_selection_shape_must_fit(d1):
    with pytest.raises(ShapeMismatch):
        sample_distribution(d1, SelectionModel(np.full((3, 2), 0.5)))


@pytest.mark.parametrize('c', [0.1, 0.5, 1.0])
def test_uniform_selection_keeps_population(d1, c):
    Q, p_s = sample_distribution(d1, SelectionModel(np.full((2, 2), c)))
    assert p_s == pytest.approx(c)
    np.testing.assert_allclose(Q.weights, d1.weights, atol=1e-15)


def test_cell_only_selection_is_covariate_shift(d1, cell_bias):
    Q, p_s = sample_distribution(d1, cell_bias)
    assert p_s == pytest.approx(0.375)
    np.testing.assert_allclose(Q.priors, [0.6, 0.4])
    np.testing.assert_allclose(posterior_rows(Q.weights).values, posterior_rows(d1.weights).values, atol=1e-12)


def test_class_only_selection_is_prior_shift(d1, class_bias):
    Q, _ = sample_distribution(d1, class_bias)
    np.testing.assert_allclose(class_densities(Q, d1).values, np.ones((2, 2)), atol=1e-12)


def test_density_and_equivalence_on_random_models():
    rng = np.random.default_rng(60)
    for _ in range(30):
        P = random_distribution(rng, 5, 3)
        sel = SelectionModel(rng.uniform(0.05, 1.0, size=(5, 3)))
        Q, p_s = sample_distribution(P, sel)
        np.testing.assert_allclose(density(Q, P).values, sel.phi / p_s, rtol=0, atol=1e-12)
        reverse(P, Q)

        tables = selection_tables(P, sel)
        np.testing.assert_allclose(feature_density(Q, P).values, tables.p_s_given_h / p_s, rtol=0, atol=1e-12)
        class_selection = (P.weights / P.priors * sel.phi).sum(axis=0)
        np.testing.assert_allclose(class_densities(Q, P).values, tables.classwise / class_selection,
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(posterior_rows(Q.weights).values,
                                   tables.joint_given_h / tables.p_s_given_h[:, None], rtol=0, atol=1e-12)


def test_selection_tables_d1(d1, class_bias):
    tables = selection_tables(d1, class_bias)
    assert tables.p_s == pytest.approx(0.45)
    np.testing.assert_allclose(tables.p_s_given_h, [0.54, 0.36])
    np.testing.assert_allclose(tables.classwise, class_bias.phi)
    np.testing.assert_allclose(tables.not_selected.weights, d1.weights * (1 - class_bias.phi) / 0.55)


def test_full_selection_has_no_rejected_side(d1):
    tables = selection_tables(d1, SelectionModel(np.ones((2, 2))))
    assert tables.not_selected is None


def test_hein_routes(d1, class_bias):
    tables = selection_tables(d1, class_bias)
    sample = posterior_rows(tables.sample.weights)
    rejected = posterior_rows(tables.not_selected.weights)
    expected = posterior_rows(d1.weights).values

    second = recover_posteriors_hein(tables.p_s_given_h, sample, classwise_selection=tables.classwise)
    assert second.values[0, 0] == pytest.approx(0.8, abs=1e-12)
    np.testing.assert_allclose(second.values, expected, rtol=0, atol=1e-12)

    first = recover_posteriors_hein(tables.p_s_given_h, sample, Q_star_posteriors=rejected)
    np.testing.assert_allclose(first.values, expected, rtol=0, atol=1e-12)


def test_hein_routes_without_selection(d1):
    tables = selection_tables(d1, SelectionModel(np.ones((2, 2))))
    sample = posterior_rows(tables.sample.weights).values
    second = recover_posteriors_hein(tables.p_s_given_h, sample, classwise_selection=tables.classwise)
    first = recover_posteriors_hein(tables.p_s_given_h, sample, Q_star_posteriors=np.zeros((2, 2)))
    np.testing.assert_allclose(second.values, sample, atol=1e-15)
    np.testing.assert_allclose(first.values, sample, atol=1e-15)


def test_hein_needs_exactly_one_route(d1):
    s, posteriors = np.ones(2), posterior_rows(d1.weights).values
    with pytest.raises(MissingInput):
        recover_posteriors_hein(s, posteriors)
    with pytest.raises(MissingInput):
        recover_posteriors_hein(s, posteriors, np.zeros((2, 2)), np.ones((2, 2)))


def test_hein_flags_zero_selection():
    result = recover_posteriors_hein([0.5, 0.5], [[0.5, 0.5], [1.0, 0.0]], classwise_selection=[[0.5, 0.0], [0.5, 0.5]])
    assert result.null_cells.tolist() == [True, False]


def test_covariate_selection_check(d1, cell_bias, class_bias):
    assert covariate_selection_check(d1, cell_bias)
    assert not covariate_selection_check(d1, class_bias)
    product = SelectionModel(np.outer([0.9, 0.5], [1.0, 0.4]))
    assert not covariate_selection_check(d1, product)


def test_covariate_selection_biconditional():
    rng = np.random.default_rng(70)
    for k in range(100):
        P = random_distribution(rng, 4, 3)
        if k % 2:
            sel = SelectionModel.cell_only(rng.uniform(0.05, 1.0, 4), 3)
        else:
            sel = SelectionModel(rng.uniform(0.05, 1.0, size=(4, 3)))
        Q, _ = sample_distribution(P, sel)
        invariant = np.allclose(posterior_rows(Q.weights).values, posterior_rows(P.weights).values,
                                rtol=0, atol=1e-12)
        assert covariate_selection_check(P, sel) == invariant
        assert invariant == bool(k % 2)


def test_simulation_accepts_everything_with_full_selection(d1):
    result = simulate_selection(d1, SelectionModel(np.ones((2, 2))), 1000, seed=1)
    assert result.accepted == 1000
    single = simulate_selection(d1, SelectionModel(np.ones((2, 2))), 1, seed=1)
    assert single.accepted == 1


def test_simulation_is_deterministic(d1, cell_bias):
    first = simulate_selection(d1, cell_bias, 5000, seed=42)
    second = simulate_selection(d1, cell_bias, 5000, seed=42)
    assert np.array_equal(first.counts, second.counts)
    assert not np.array_equal(first.counts, simulate_selection(d1, cell_bias, 5000, seed=43).counts)


def test_simulation_matches_exact_sample(d1, cell_bias):
    Q, _ = sample_distribution(d1, cell_bias)
    result = simulate_selection(d1, cell_bias, 1_000_000, seed=42)
    n = result.accepted
    sigma = np.sqrt(Q.weights * (1 - Q.weights) / n)
    assert np.all(np.abs(result.frequencies() - Q.weights) <= 4 * sigma)


def test_simulation_rejects_everything(d1):
    with pytest.raises(AllRejected):
        simulate_selection(d1, SelectionModel(np.full((2, 2), 1e-300)), 5, seed=0)
    with pytest.raises(InvalidInput):
        simulate_selection(d1, SelectionModel(np.ones((2, 2))), 0)


def test_necessary_criterion():
    flags = necessary_criterion([0.5, 0.5], [0.6, 0.4], [[0.5, 0.7], [0.5, 0.5]])
    assert flags.tolist() == [[True, False], [True, True]]
    assert necessary_criterion([0.5, 0.5], [0.5, 0.5], np.full((3, 2), 0.9)).all()


def test_uniform_selection_analysis(d1):
    analysis = analyze_fjs_selection(d1, SelectionModel(np.full((2, 2), 0.5)))
    assert analysis.alpha[0] == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(analysis.recovered_population_posteriors, posterior_rows(d1.weights).values,
                               atol=1e-10)
    np.testing.assert_allclose(analysis.classwise_selection, np.full((2, 2), 0.5), atol=1e-10)
    assert analysis.admissible and analysis.necessary_bound_ok


def test_prior_bias_alpha_one(d1, class_bias):
    analysis = analyze_fjs_selection(d1, class_bias, mode='alpha_one')
    np.testing.assert_allclose(analysis.population_priors, [0.5, 0.5], rtol=0, atol=1e-8)
    np.testing.assert_allclose(analysis.classwise_selection, class_bias.phi, rtol=0, atol=1e-8)
    assert analysis.necessary_bound_ok


@pytest.mark.parametrize('scenario', ['cell', 'class'])
def test_known_priors_recovery(d1, cell_bias, class_bias, scenario):
    sel = cell_bias if scenario == 'cell' else class_bias
    analysis = analyze_fjs_selection(d1, sel, mode='known-priors')
    np.testing.assert_allclose(analysis.recovered_population_posteriors, posterior_rows(d1.weights).values,
                               rtol=0, atol=1e-8)
    np.testing.assert_allclose(analysis.classwise_selection, sel.phi, rtol=0, atol=1e-8)
    assert analysis.residuals['reciprocity'] <= 1e-10
    assert analysis.admissible


def test_covariate_bias_constants(d1, cell_bias):
    analysis = analyze_fjs_selection(d1, cell_bias)
    assert analysis.alpha[0] == pytest.approx(1.5, abs=1e-8)
    scaled = analysis.b_star
    assert scaled[0] == pytest.approx(scaled[1], rel=1e-8)
    tables = selection_tables(d1, cell_bias)
    np.testing.assert_allclose(analysis.classwise_selection, np.repeat(tables.p_s_given_h[:, None], 2, axis=1),
                               rtol=0, atol=1e-8)


def test_inadmissible_selection(d1):
    sel = SelectionModel.cell_only([1.0, 0.5], 2)
    analysis = analyze_fjs_selection(d1, sel, mode='alpha-one')
    np.testing.assert_allclose(analysis.population_priors, [0.3, 0.7], rtol=0, atol=1e-8)
    assert not analysis.admissible
    assert not analysis.necessary_bound_ok
    assert analysis.classwise_selection[0, 0] == pytest.approx(1.5, rel=1e-8)
    with pytest.raises(Inadmissible):
        analyze_fjs_selection(d1, sel, mode='alpha-one', require_admissible=True)


def test_generic_selection_is_not_fjs():
    rng = np.random.default_rng(80)
    P = random_distribution(rng, 4, 3)
    with pytest.raises(NotFJS):
        analyze_fjs_selection(P, SelectionModel(rng.uniform(0.1, 1.0, size=(4, 3))))


def test_unknown_mode(d1, cell_bias):
    with pytest.raises(InvalidInput):
        analyze_fjs_selection(d1, cell_bias, mode='guess')


@given(seed=st.integers(0, 2 ** 32 - 1), c=st.floats(0.01, 1.0))
@settings(max_examples=50, deadline=None)
def test_constant_selection_is_no_shift(seed, c):
    P = random_distribution(np.random.default_rng(seed), 4, 3)
    Q, p_s = sample_distribution(P, SelectionModel(np.full((4, 3), c)))
    assert p_s == pytest.approx(c, rel=1e-12)
    np.testing.assert_allclose(Q.weights, P.weights, rtol=1e-12, atol=1e-15)
