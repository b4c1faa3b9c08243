import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from conftest import make_model, random_in_bounds, standard_prior
from grasptype.classifier import predict_success
from grasptype.errors import NonFiniteObjective
from grasptype.gmm import prior_log_density
from grasptype.grasp import CONFIG_DIM, ConfigurationBounds, assemble_input
from grasptype.inference import (
    InferenceConfig,
    gradient,
    minimize_for_type,
    objective,
    plan_grasp,
    projected_gradient_norm,
)
from grasptype.model import ModelConfig, fit_model

FEATS = np.zeros(15)


def central_difference(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def random_spd(rng, scale=1.0, floor=0.05):
    A = rng.normal(size=(CONFIG_DIM, CONFIG_DIM))
    return scale * (A @ A.T / CONFIG_DIM + floor * np.eye(CONFIG_DIM))


def random_model(seed, k=2, name="precision"):
    rng = np.random.default_rng(seed)
    bounds = ConfigurationBounds.default()
    mid = (bounds.lower + bounds.upper) / 2
    comps = [(w, mid + 0.1 * rng.normal(size=CONFIG_DIM), random_spd(rng, 0.05))
             for w in rng.dirichlet(np.ones(k))]
    return make_model({name: rng.normal(size=30)}, {name: comps})


# objective


def test_objective_closed_form_example():
    model = make_model({"t": np.zeros(30)}, {"t": standard_prior()})
    value = objective(model, "t", FEATS, np.zeros(14), InferenceConfig(prior_weight=1.0))
    assert abs(value - (math.log(2) + 7 * math.log(2 * math.pi))) < 1e-12
    assert abs(value - 13.558287) < 1e-6


def test_objective_without_prior_is_negative_log_success():
    model = random_model(0)
    theta = np.random.default_rng(1).normal(size=14) * 0.1
    feats = np.random.default_rng(2).normal(size=15)
    value = objective(model, "precision", feats, theta, InferenceConfig(prior_weight=0.0))
    p = predict_success(model.classifier("precision"), assemble_input(theta, feats))
    assert abs(value + math.log(p)) <= 1e-14


def test_objective_matches_compositional_oracle():
    model = random_model(3, k=3)
    cfg = InferenceConfig()
    rng = np.random.default_rng(4)
    for _ in range(20):
        theta = random_in_bounds(model.bounds, 1, rng)[0]
        feats = rng.normal(size=15)
        p = predict_success(model.classifier("precision"), assemble_input(theta, feats))
        expected = -math.log(p) - 0.5 * prior_log_density(model.prior("precision"), theta)
        assert abs(objective(model, "precision", feats, theta, cfg) - expected) <= 1e-9 * max(1, abs(expected))


# gradient


def test_gradient_zero_at_the_mean_of_a_pure_prior():
    mu = np.random.default_rng(0).uniform(-0.1, 0.1, 14)
    model = make_model({"t": np.zeros(30)}, {"t": standard_prior(mu)})
    assert np.all(gradient(model, "t", FEATS, mu, InferenceConfig()) == 0.0)


def test_saturated_classifier_without_prior_has_vanishing_gradient():
    w = np.zeros(30)
    w[-1] = 60.0
    w[:14] = 1.0
    model = make_model({"t": w}, {"t": standard_prior()})
    g = gradient(model, "t", FEATS, np.zeros(14), InferenceConfig(prior_weight=0.0))
    assert np.max(np.abs(g)) < 1e-25


def _check_gradient(model, type_name, feats, thetas, cfg):
    worst = 0.0
    for theta in thetas:
        analytic = gradient(model, type_name, feats, theta, cfg)
        numeric = central_difference(lambda t: objective(model, type_name, feats, t, cfg), theta)
        worst = max(worst, np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))
    return worst


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences_on_random_models(seed):
    model = random_model(seed, k=4)
    rng = np.random.default_rng(seed + 10)
    mid = model.prior("precision").components[0].mean
    thetas = mid + 0.2 * rng.normal(size=(50, 14)) * np.sqrt(np.diag(model.prior("precision").components[0].covariance))
    thetas = np.clip(thetas, model.bounds.lower, model.bounds.upper)
    assert _check_gradient(model, "precision", rng.normal(size=15), thetas, InferenceConfig()) <= 1e-5


def test_gradient_matches_finite_differences_on_fitted_models(typed_model):
    rng = np.random.default_rng(0)
    feats = rng.normal(size=15)
    for t in typed_model.types:
        thetas = random_in_bounds(typed_model.bounds, 50, rng)
        assert _check_gradient(typed_model, t.name, feats, thetas, InferenceConfig()) <= 1e-5


# inner minimization


def test_pure_prior_converges_to_the_mean():
    rng = np.random.default_rng(0)
    bounds = ConfigurationBounds.default()
    mu = (bounds.lower + bounds.upper) / 2 + rng.uniform(-0.05, 0.05, 14)
    model = make_model({"t": np.zeros(30)}, {"t": [(1.0, mu, random_spd(rng, 0.01))]})
    for init in random_in_bounds(bounds, 10, rng):
        r = minimize_for_type(model, "t", FEATS, init, InferenceConfig())
        assert np.max(np.abs(r.theta - mu)) <= 1e-4


def brute_force_2d(model, type_name, feats, fixed, lo, hi, cfg, step=1e-3):
    """Vectorized objective over a dense grid of the two free coordinates."""
    xs = np.arange(lo[0], hi[0] + step / 2, step)
    ys = np.arange(lo[1], hi[1] + step / 2, step)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    thetas = np.repeat(fixed[None, :], X.size, axis=0)
    thetas[:, 0], thetas[:, 1] = X.ravel(), Y.ravel()
    w = model.classifier(type_name).weights
    s = thetas @ w[:14] + feats @ w[14:29] + w[29]
    value = np.logaddexp(0, -s)
    comps = model.prior(type_name).components
    log_terms = np.column_stack([math.log(c.weight) + multivariate_normal(c.mean, c.covariance).logpdf(thetas)
                                 for c in comps])
    value = value - cfg.prior_weight * logsumexp(log_terms, axis=1)
    best = int(np.argmin(value))
    return thetas[best, :2], value[best]


@pytest.mark.parametrize("seed", range(6))
def test_two_dimensional_restriction_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    fixed = rng.uniform(-0.05, 0.05, 14)
    fixed[6:] = ConfigurationBounds.default().lower[6:] + 0.1
    mu = fixed + np.concatenate([rng.uniform(-0.08, 0.08, 2), np.zeros(12)])
    cov = random_spd(rng, 0.002)
    w = np.zeros(30)
    w[:2] = rng.normal(size=2) * 10
    w[-1] = rng.normal()
    model = make_model({"t": w}, {"t": [(1.0, mu, cov)]})
    lo, hi = fixed.copy(), fixed.copy()
    lo[:2], hi[:2] = -0.1, 0.1
    bounds = ConfigurationBounds(lo, hi)
    cfg = InferenceConfig(bounds=bounds)
    r = minimize_for_type(model, "t", FEATS, fixed, cfg)
    grid_xy, grid_value = brute_force_2d(model, "t", FEATS, fixed, lo[:2], hi[:2], cfg)
    assert np.max(np.abs(r.theta[:2] - grid_xy)) <= 2e-3
    assert r.value <= grid_value + 1e-9
    np.testing.assert_array_equal(r.theta[2:], fixed[2:])


def test_optimum_outside_the_box_lands_on_the_boundary():
    mu = np.zeros(14)
    mu[0] = 0.5  # beyond the 0.3 position limit
    model = make_model({"t": np.zeros(30)}, {"t": [(1.0, mu, 0.01 * np.eye(14))]})
    bounds = ConfigurationBounds.default()
    init = bounds.clip(np.zeros(14))
    r = minimize_for_type(model, "t", FEATS, init, InferenceConfig())
    assert r.theta[0] == bounds.upper[0]
    assert projected_gradient_norm(r.theta, gradient(model, "t", FEATS, r.theta, InferenceConfig()), bounds) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_results_feasible_traces_monotone_and_no_worse_than_init(seed, typed_model):
    rng = np.random.default_rng(seed)
    cfg = InferenceConfig()
    feats = rng.normal(size=15)
    for t in typed_model.types:
        init = random_in_bounds(typed_model.bounds, 1, rng)[0]
        r = minimize_for_type(typed_model, t.name, feats, init, cfg)
        assert np.all(r.theta >= typed_model.bounds.lower) and np.all(r.theta <= typed_model.bounds.upper)
        assert np.all(np.diff(r.trace) <= 1e-8)
        assert r.value <= objective(typed_model, t.name, feats, init, cfg)


def test_init_outside_bounds_is_projected_with_a_warning(caplog):
    model = make_model({"t": np.zeros(30)}, {"t": standard_prior(scale=0.01)})
    init = np.zeros(14)
    init[0] = 5.0
    with caplog.at_level(logging.WARNING):
        r = minimize_for_type(model, "t", FEATS, init, InferenceConfig())
    assert "outside bounds" in caplog.text
    assert r.init[0] == model.bounds.upper[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_objective_at_init():
    model = make_model({"t": np.ones(30)}, {"t": standard_prior()})
    feats = np.full(15, np.nan)
    with pytest.raises(NonFiniteObjective):
        minimize_for_type(model, "t", feats, np.zeros(14), InferenceConfig())
    with pytest.raises(NonFiniteObjective):
        plan_grasp(model, feats, np.zeros(14))


@settings(max_examples=10, deadline=None)
@given(st.floats(0.05, 20.0), st.integers(0, 1000))
def test_pure_prior_argmin_invariant_to_prior_weight(c, seed):
    rng = np.random.default_rng(seed)
    mid = (ConfigurationBounds.default().lower + ConfigurationBounds.default().upper) / 2
    comps = [(0.5, mid + 0.05 * rng.normal(size=14), random_spd(rng, 0.01)),
             (0.5, mid + 0.05 * rng.normal(size=14), random_spd(rng, 0.01))]
    model = make_model({"t": np.zeros(30)}, {"t": comps})
    init = comps[0][1]
    a = minimize_for_type(model, "t", FEATS, init, InferenceConfig(prior_weight=1.0)).theta
    b = minimize_for_type(model, "t", FEATS, init, InferenceConfig(prior_weight=c)).theta
    assert np.max(np.abs(a - b)) <= 1e-4


# outer selection


def test_single_type_plan_equals_inner_result():
    model = random_model(5)
    init = model.prior("precision").components[0].mean
    result = plan_grasp(model, FEATS, init)
    inner = minimize_for_type(model, "precision", FEATS, init, InferenceConfig())
    assert result.type == "precision"
    np.testing.assert_array_equal(result.config, inner.theta)
    assert result.objective_value == inner.value


def test_planted_saturated_classifier_wins_the_outer_argmin():
    prior = standard_prior(scale=0.01)
    good = np.zeros(30)
    good[-1] = 30.0
    model = make_model({"precision": np.zeros(30), "power": good}, {"precision": prior, "power": prior})
    result = plan_grasp(model, FEATS, np.zeros(14))
    assert result.type == "power"
    assert result.objective_value == min(r.value for r in result.per_type_results)
    assert result.success_probability > 0.999


def test_ties_go_to_the_lower_type_index():
    prior = standard_prior(scale=0.01)
    model = make_model({"precision": np.zeros(30), "power": np.zeros(30)}, {"precision": prior, "power": prior})
    assert plan_grasp(model, FEATS, np.zeros(14)).type == "precision"


def test_forced_type_has_one_entry():
    prior = standard_prior(scale=0.01)
    model = make_model({"precision": np.zeros(30), "power": np.zeros(30)}, {"precision": prior, "power": prior})
    result = plan_grasp(model, FEATS, np.zeros(14), types=["power"])
    assert result.type == "power" and len(result.per_type_results) == 1


def test_inner_results_identical_for_joint_and_single_type_models(train_build, typed_model):
    init = train_build.dataset.samples[0].config
    feats = train_build.dataset.samples[0].features
    joint = plan_grasp(typed_model, feats, init)
    for t, r in zip(typed_model.types, joint.per_type_results):
        single = fit_model(train_build.dataset.of_type(t.name), ModelConfig())
        alone = plan_grasp(single, feats, init)
        assert np.max(np.abs(alone.config - r.theta)) <= 1e-9
        assert abs(alone.objective_value - r.value) <= 1e-9


def test_per_type_inits_mapping():
    prior = standard_prior(scale=0.01)
    model = make_model({"precision": np.zeros(30), "power": np.zeros(30)}, {"precision": prior, "power": prior})
    inits = {"precision": np.full(14, 0.01), "power": np.full(14, 0.02)}
    inits = {k: model.bounds.clip(v) for k, v in inits.items()}
    result = plan_grasp(model, FEATS, inits)
    np.testing.assert_array_equal(result.per_type_results[1].init, inits["power"])


def test_inference_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(prior_weight=-1)
    with pytest.raises(ValueError):
        InferenceConfig(gradient_tolerance=0)


def test_result_json_schema(typed_model, train_build):
    s = train_build.dataset.samples[0]
    doc = plan_grasp(typed_model, s.features, s.config).to_json()
    assert {"theta", "type", "objective", "success_probability", "per_type", "trace"} <= set(doc)
    assert len(doc["theta"]) == 14 and len(doc["per_type"]) == 2
