import math

import numpy as np
import pytest

from sml.core.bounds import (
    ENUMERATION_LIMIT,
    ClassMeans,
    ConsistencyInputs,
    FnnComplexityParams,
    class_means,
    consistency_condition,
    consistency_probability_bound,
    default_margin,
    empirical_rademacher_linear,
    evaluate_bounds,
    exact_rademacher_linear,
    fnn_complexity_params,
    fnn_rademacher_bound,
    logit_bound,
    network_average_risk,
)
from sml.core.classifier import LabeledDataset
from sml.core.engine import AgentEnsemble
from sml.core.topology import CombinationMatrix, with_perron
from sml.exceptions import CoverageError, MarginDomainError, RiskDomainError

from conftest import identity_net, zero_net

SKEWED = with_perron(CombinationMatrix(np.array([[0.8, 0.4], [0.2, 0.6]])))


def params(**overrides) -> FnnComplexityParams:
    values = dict(depth=1, weight_l1_bound=1.0, bias_bound=0.0, input_inf_bound=1.0, lipschitz=1.0, input_dim=2, sample_count=4)
    values.update(overrides)
    return FnnComplexityParams(**values)


def test_fnn_bound_hand_value():
    assert fnn_rademacher_bound(params()) == pytest.approx(math.sqrt(2 * math.log(4)), abs=1e-9)
    assert fnn_rademacher_bound(params()) == pytest.approx(1.665109, abs=1e-6)


def test_fnn_bound_quartering():
    base = fnn_rademacher_bound(params(bias_bound=0.3, depth=3, weight_l1_bound=0.7))
    quad = fnn_rademacher_bound(params(bias_bound=0.3, depth=3, weight_l1_bound=0.7, sample_count=16))
    assert quad == pytest.approx(base / 2, rel=1e-15)


def test_fnn_bound_zero_weights():
    assert fnn_rademacher_bound(params(weight_l1_bound=0.0, bias_bound=0.5, depth=3, sample_count=25)) == pytest.approx(2 * 0.5 / 5)


@pytest.mark.parametrize("field", ["weight_l1_bound", "bias_bound", "input_inf_bound", "input_dim"])
def test_fnn_bound_nondecreasing_in_parameters(field):
    overrides = dict(bias_bound=0.5, depth=2)
    base = params(**overrides)
    larger = params(**{**overrides, field: getattr(base, field) * 2})
    assert fnn_rademacher_bound(larger) >= fnn_rademacher_bound(base)


def test_fnn_bound_grows_with_depth_when_layers_expand():
    # 2 b L_sigma >= 1
    values = [fnn_rademacher_bound(params(depth=depth, bias_bound=0.2)) for depth in range(1, 6)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_fnn_bound_strictly_decreasing_in_sample_count():
    values = [fnn_rademacher_bound(params(bias_bound=0.2, depth=2, sample_count=n)) for n in (1, 2, 3, 10, 100, 10 ** 4)]
    assert all(b < a for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_fnn_bound_nondecreasing_in_lipschitz(depth):
    values = [fnn_rademacher_bound(params(depth=depth, bias_bound=0.3, lipschitz=lip)) for lip in (0.25, 0.5, 1.0, 2.0)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_rademacher_zero_samples():
    estimate = empirical_rademacher_linear(1.0, np.zeros((5, 3)), 100, seed=0)
    assert estimate.mean == 0.0


def test_rademacher_single_sample():
    estimate = empirical_rademacher_linear(1.0, np.array([[1.0]]), 2, seed=0)
    assert estimate.exhaustive
    assert estimate.mean == 1.0


def test_rademacher_duplicate_unit_samples():
    samples = np.array([[1.0], [1.0]])
    assert exact_rademacher_linear(1.0, samples) == pytest.approx(0.5, abs=1e-15)
    assert empirical_rademacher_linear(1.0, samples, 4, seed=3).mean == pytest.approx(0.5, abs=1e-15)


def test_rademacher_enumeration_equals_exhaustive(rng):
    for n in range(1, ENUMERATION_LIMIT + 1):
        samples = rng.normal(size=(n, 3))
        estimate = empirical_rademacher_linear(1.7, samples, 2 ** n, seed=0)
        assert estimate.exhaustive
        assert estimate.mean == pytest.approx(exact_rademacher_linear(1.7, samples), abs=1e-12)


def test_rademacher_monte_carlo_is_seeded(rng):
    samples = rng.normal(size=(40, 5))
    first = empirical_rademacher_linear(1.0, samples, 3000, seed=5)
    second = empirical_rademacher_linear(1.0, samples, 3000, seed=5)
    assert first.mean == second.mean
    assert not first.exhaustive
    assert first.standard_error > 0


def _holdout(plus, minus):
    features = np.array([[v] for v in plus + minus])
    return LabeledDataset(features, [1] * len(plus) + [-1] * len(minus))


def test_class_means_weighted_network_values():
    ensemble = AgentEnsemble((identity_net(), identity_net()), np.array([0.5, -1.0]), SKEWED)
    means = class_means(ensemble, [_holdout([3.0], [-1.0]), _holdout([0.0], [-4.0])], SKEWED.perron)
    assert means.agent_plus == [3.0, 0.0]
    # Perron vector is converged on the residual, not on its entries
    assert means.network_plus == pytest.approx(float(np.dot(means.agent_plus, SKEWED.perron)), abs=1e-15)
    assert means.network_plus == pytest.approx(2.0, abs=1e-10)
    assert means.network_minus == pytest.approx(-2.0, abs=1e-10)
    assert means.network_training == pytest.approx(0.0, abs=1e-10)


def test_class_means_zero_nets():
    single = with_perron(CombinationMatrix(np.ones((1, 1))))
    ensemble = AgentEnsemble((zero_net(input_dim=1),), np.zeros(1), single)
    means = class_means(ensemble, [_holdout([1.0, 2.0], [5.0])], single.perron)
    assert means.agent_plus == [0.0] and means.network_minus == 0.0


def test_class_means_missing_class():
    ensemble = AgentEnsemble((identity_net(), identity_net()), np.zeros(2), SKEWED)
    with pytest.raises(CoverageError) as info:
        class_means(ensemble, [_holdout([1.0], [-1.0]), _holdout([1.0, 2.0], [])], SKEWED.perron)
    assert (info.value.agent, info.value.label) == (1, -1)


def means_of(plus, minus, training):
    return ClassMeans(
        agent_plus=[plus], agent_minus=[minus], agent_training=[training], perron=[1.0],
        network_plus=plus, network_minus=minus, network_training=training,
    )


@pytest.mark.parametrize(
    "plus, minus, training, consistent",
    [(1.0, -1.0, 0.0, True), (0.0, 0.0, 0.0, False), (0.4, -0.1, 0.5, False)],
)
def test_consistency_condition(plus, minus, training, consistent):
    verdict = consistency_condition(means_of(plus, minus, training))
    assert verdict.consistent is consistent
    assert verdict.margin_plus == pytest.approx(plus - training)
    assert verdict.margin_minus == pytest.approx(training - minus)


@pytest.mark.parametrize("shift", [-3.5, 0.25, 10.0])
@pytest.mark.parametrize("plus, minus, training", [(1.0, -1.0, 0.0), (0.4, -0.1, 0.5), (0.2, 0.1, 0.15)])
def test_consistency_condition_invariant_to_common_shift(plus, minus, training, shift):
    base = consistency_condition(means_of(plus, minus, training))
    shifted = consistency_condition(means_of(plus + shift, minus + shift, training + shift))
    assert shifted.consistent is base.consistent
    assert shifted.margin_plus == pytest.approx(base.margin_plus, abs=1e-12)
    assert shifted.margin_minus == pytest.approx(base.margin_minus, abs=1e-12)


def test_class_means_reject_inconsistent_network_values():
    with pytest.raises(ValueError):
        ClassMeans(
            agent_plus=[1.0, 2.0], agent_minus=[0.0, 0.0], agent_training=[0.0, 0.0], perron=[0.5, 0.5],
            network_plus=1.0, network_minus=0.0, network_training=0.0,
        )


def inputs(counts=(10 ** 6,), rho=0.0, d=0.5, risk=0.4, b=1.0) -> ConsistencyInputs:
    return ConsistencyInputs(
        d=d, network_risk=risk, logit_bound=b, sample_counts=list(counts),
        complexities=[rho] * len(counts), perron=[1.0 / len(counts)] * len(counts),
    )


def test_probability_bound_worked_example():
    result = consistency_probability_bound(inputs())
    assert result.delta_term == pytest.approx(0.474077, abs=1e-6)
    assert result.bound == pytest.approx(1.0, abs=1e-12)
    assert result.bound > 1 - 1e-9
    assert not any(result.first_vacuous + result.second_vacuous)


def test_probability_bound_nondecreasing_in_sample_count():
    bounds = [consistency_probability_bound(inputs(counts=(n, 2 * n), rho=0.01)).bound for n in (10, 100, 1000, 10 ** 4, 10 ** 5)]
    assert all(b >= a for a, b in zip(bounds, bounds[1:]))


def test_probability_bound_nonincreasing_in_complexity():
    bounds = []
    for rho in (0.0, 0.005, 0.01, 0.02, 0.03):
        result = consistency_probability_bound(ConsistencyInputs(
            d=0.5, network_risk=0.4, logit_bound=1.0, sample_counts=[400, 400],
            complexities=[rho, 0.01], perron=[0.5, 0.5],
        ))
        assert not any(result.first_vacuous + result.second_vacuous)
        bounds.append(result.bound)
    assert all(b <= a for a, b in zip(bounds, bounds[1:]))
    assert bounds[-1] < bounds[0]


def test_probability_bound_vacuous_terms():
    result = consistency_probability_bound(inputs(counts=(100,), rho=0.6))
    assert result.first_vacuous == [True] and result.second_vacuous == [True]
    assert result.bound == pytest.approx(-2.0)
    assert result.bound_clamped == 0.0


def test_probability_bound_domain_errors():
    with pytest.raises(RiskDomainError):
        consistency_probability_bound(inputs(risk=0.7))
    with pytest.raises(MarginDomainError):
        consistency_probability_bound(inputs(d=0.8))


@pytest.mark.parametrize("d", [0.0, -0.1])
def test_nonpositive_margin_is_a_domain_error(d):
    with pytest.raises(MarginDomainError):
        consistency_probability_bound(inputs(d=d))


@pytest.mark.parametrize("risk", [0.0, -0.2, math.log(2.0)])
def test_risk_outside_range_is_a_domain_error(risk):
    with pytest.raises(RiskDomainError):
        consistency_probability_bound(inputs(risk=risk))


def test_evaluate_bounds_zero_margin():
    nets = [identity_net(1.0, 2)]
    with pytest.raises(MarginDomainError):
        evaluate_bounds(nets, [50], [0.3], [1.0], np.array([1.0]), d=0.0)


def test_default_margin_is_midpoint():
    ceiling = -math.log(math.expm1(0.4))
    assert default_margin(0.4) == pytest.approx(ceiling / 2)
    with pytest.raises(RiskDomainError):
        default_margin(0.7)


@pytest.mark.parametrize(
    "risks, perron, expected",
    [([0.3, 0.3, 0.3], [1 / 3] * 3, 0.3), ([0.25], [1.0], 0.25), ([0.8, 0.4], [0.25, 0.75], 0.5)],
)
def test_network_average_risk(risks, perron, expected):
    assert network_average_risk(risks, np.array(perron)) == pytest.approx(expected, abs=1e-15)


def test_complexity_params_read_off_net():
    net = identity_net().with_parameters(
        [np.array([[1.0, -2.0], [0.5, 0.5]]), np.array([[1.0, 1.0], [-3.0, 0.0]])],
        [np.array([0.1, -0.4]), np.array([0.0, 0.2])],
    )
    p = fnn_complexity_params(net, input_inf_bound=1.0, sample_count=50)
    assert (p.depth, p.weight_l1_bound, p.bias_bound, p.input_dim, p.sample_count) == (2, 3.0, 0.4, 2, 50)


def test_logit_bound():
    features = [np.array([[1.0], [-3.0]]), np.zeros((0, 1)), np.array([[2.0]])]
    assert logit_bound(identity_net(), features) == 3.0


def test_evaluate_bounds_chains_the_pieces(rng):
    nets = [identity_net(1.0, 2), identity_net(0.5, 2)]
    features = [rng.uniform(-1, 1, size=(100, 2)) for _ in nets]
    report = evaluate_bounds(
        nets, [100, 100], [0.3, 0.35], [2.0, 1.5], SKEWED.perron,
        train_features=features, rademacher_draws=64, seed=1,
    )
    assert report.inputs.network_risk == pytest.approx(2 / 3 * 0.3 + 1 / 3 * 0.35)
    assert report.inputs.logit_bound == 2.0
    assert report.inputs.d == pytest.approx(default_margin(report.inputs.network_risk))
    assert report.inputs.complexities == pytest.approx([2 * r for r in report.rademacher_bounds])
    assert len(report.first_layer_rademacher) == 2
    assert report.result.bound <= 1.0
