import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.stats import multivariate_normal

from conftest import planted_dataset
from grasptype.classifier import (
    TypeClassifier,
    fit_classifier,
    fit_logistic,
    penalized_log_likelihood,
    predict_success,
)
from grasptype.errors import FitError, InsufficientData, SingleClassData
from grasptype.gmm import GaussianComponent, GraspPrior, fit_gmm, fit_prior, prior_log_density
from grasptype.grasp import (
    CONFIG_DIM,
    FEATURE_DIM,
    DatasetFormatError,
    GraspConfiguration,
    GraspDataset,
    TrainingSample,
    assemble_input,
    split_input,
)
from grasptype.model import GraspModel, ModelConfig, evaluate_loo, fit_model, fit_type_free

LOG_2PI = math.log(2 * math.pi)


# input assembly and prediction


def test_assemble_input_layout():
    x = assemble_input(np.zeros(CONFIG_DIM), np.zeros(FEATURE_DIM))
    assert x.shape == (30,)
    np.testing.assert_array_equal(x, [0.0] * 29 + [1.0])


@settings(max_examples=50)
@given(st.lists(st.floats(-10, 10), min_size=14, max_size=14), st.lists(st.floats(-10, 10), min_size=15, max_size=15))
def test_assemble_input_round_trip(theta, feats):
    x = assemble_input(GraspConfiguration.from_vector(theta), feats)
    t, f = split_input(x)
    np.testing.assert_array_equal(t, theta)
    np.testing.assert_array_equal(f, feats)
    assert x[-1] == 1.0


def _clf_with_score(score):
    w = np.zeros(30)
    w[-1] = score
    return TypeClassifier(w, "t")


def test_predict_success_examples():
    x = assemble_input(np.ones(CONFIG_DIM), np.ones(FEATURE_DIM))
    assert predict_success(TypeClassifier(np.zeros(30), "t"), x) == 0.5
    assert abs(predict_success(_clf_with_score(40.0), x) - 1.0) <= 1e-15
    assert abs(predict_success(_clf_with_score(math.log(3)), x) - 0.75) <= 1e-15
    with np.errstate(over="raise"):
        assert predict_success(_clf_with_score(-800.0), x) >= 0.0


@settings(max_examples=100)
@given(st.floats(-700, 700), st.floats(0.0, 5.0))
def test_predict_success_in_open_interval_and_monotone(s, ds):
    x = assemble_input(np.zeros(CONFIG_DIM), np.zeros(FEATURE_DIM))
    p = predict_success(_clf_with_score(s), x)
    q = predict_success(_clf_with_score(s + ds), x)
    assert 0.0 <= p <= 1.0 and q >= p
    if abs(s) < 30:
        assert 0.0 < p < 1.0


# classifier fit


def test_classifier_separable_planted_data():
    ds, _ = planted_dataset()
    clf = fit_classifier(ds, "precision")
    theta, feats, y = ds.arrays()
    X = np.hstack([theta, feats, np.ones((len(y), 1))])
    acc = np.mean((clf.predict_proba(X) >= 0.5) == y)
    assert acc >= 0.99
    assert np.all(np.isfinite(clf.weights))


def test_classifier_single_class_is_rejected():
    ds, _ = planted_dataset(30)
    ones = GraspDataset([TrainingSample(s.config, s.type, s.features, 1, s.sample_id) for s in ds.samples])
    with pytest.raises(SingleClassData):
        fit_classifier(ones, "precision")


def test_classifier_matches_independent_quasi_newton_fit():
    ds, _ = planted_dataset(150, seed=4, noise_labels=True)
    theta, feats, y = ds.arrays()
    X = np.hstack([theta, feats, np.ones((len(y), 1))])
    l2 = 1e-2

    def neg(w):
        z = X @ w
        return -(np.sum(y * z - np.logaddexp(0, z)) - l2 * np.sum(w[:-1] ** 2))

    def neg_grad(w):
        g = X.T @ (y - 1 / (1 + np.exp(-(X @ w))))
        g[:-1] -= 2 * l2 * w[:-1]
        return -g

    ref = minimize(neg, np.zeros(30), jac=neg_grad, method="BFGS", options={"gtol": 1e-10, "maxiter": 10000}).x
    w, info = fit_logistic(X, y, l2)
    assert info.converged and info.gradient_norm <= 1e-6
    np.testing.assert_allclose(w, ref, atol=1e-5)


def test_classifier_objective_trace_non_decreasing_and_beats_zero():
    ds, _ = planted_dataset(120, seed=5, noise_labels=True)
    clf = fit_classifier(ds, "precision")
    trace = clf.info.objective_trace
    assert np.all(np.diff(trace) >= -1e-12)
    theta, feats, y = ds.arrays()
    X = np.hstack([theta, feats, np.ones((len(y), 1))])
    assert penalized_log_likelihood(clf.weights, X, y, 1e-4) >= penalized_log_likelihood(np.zeros(30), X, y, 1e-4)
    assert clf.info.converged and clf.info.gradient_norm <= 1e-6


def test_classifier_sweep_cap_is_reported():
    ds, _ = planted_dataset(100, seed=6)
    clf = fit_classifier(ds, "precision", max_sweeps=2)
    assert clf.info.sweeps == 2 and not clf.info.converged


def test_bias_is_not_penalized():
    # constant labels except one: a heavy penalty shrinks inputs, never the bias
    X = np.hstack([np.random.default_rng(0).normal(size=(50, 29)), np.ones((50, 1))])
    y = np.ones(50)
    y[0] = 0
    w, _ = fit_logistic(X, y, l2_strength=1e6)
    assert np.max(np.abs(w[:-1])) < 1e-3
    assert abs(w[-1] - math.log(49)) < 1e-3


# prior


def test_standard_normal_density_at_mean():
    prior = GraspPrior([GaussianComponent(1.0, np.zeros(14), np.eye(14))])
    assert abs(prior_log_density(prior, np.zeros(14)) - (-7 * LOG_2PI)) < 1e-12
    # -(14/2) ln(2 pi) = -12.865139...
    assert abs(prior_log_density(prior, np.zeros(14)) - (-12.865139)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_single_component_density_matches_closed_form_and_unimodal(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(14, 14))
    cov = A @ A.T / 14 + 0.1 * np.eye(14)
    mu = rng.normal(size=14)
    prior = GraspPrior([GaussianComponent(1.0, mu, cov)])
    x = mu + rng.normal(size=14)
    assert abs(prior_log_density(prior, x) - multivariate_normal(mu, cov).logpdf(x)) < 1e-9
    assert prior_log_density(prior, mu) >= prior_log_density(prior, x)


def test_mixture_density_matches_direct_sum():
    rng = np.random.default_rng(1)
    comps = []
    weights = rng.dirichlet(np.ones(3))
    for k in range(3):
        A = rng.normal(size=(14, 14))
        comps.append(GaussianComponent(weights[k], rng.normal(size=14), A @ A.T / 14 + 0.5 * np.eye(14)))
    prior = GraspPrior(comps)
    for _ in range(10):
        x = rng.normal(size=14)
        total = 0.0
        for c in comps:
            diff = x - c.mean
            quad = diff @ np.linalg.solve(c.covariance, diff)
            total += c.weight * math.exp(-0.5 * quad) / math.sqrt((2 * math.pi) ** 14 * np.linalg.det(c.covariance))
        assert abs(prior_log_density(prior, x) - math.log(total)) < 1e-9


def test_density_has_no_underflow_far_from_the_mixture():
    prior = GraspPrior([GaussianComponent(0.5, np.zeros(14), np.eye(14)),
                        GaussianComponent(0.5, np.ones(14), np.eye(14))])
    x = np.full(14, 12.0)  # component densities below exp(-800)
    value = prior_log_density(prior, x)
    assert np.isfinite(value) and value < -800
    expected = math.log(0.5) + np.logaddexp(
        multivariate_normal(np.zeros(14)).logpdf(x), multivariate_normal(np.ones(14)).logpdf(x)
    )
    assert abs(value - expected) < 1e-9


def test_k1_fit_is_sample_mean_and_covariance():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(40, 14)) @ rng.normal(size=(14, 14))
    prior = fit_gmm(data, 1, restarts=3)
    c = prior.components[0]
    centered = data - data.mean(axis=0)
    np.testing.assert_allclose(c.mean, data.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(c.covariance, centered.T @ centered / 40, atol=1e-9)
    assert c.weight == 1.0


def test_k1_covariance_floor_applies_to_eigenvalues():
    data = np.zeros((10, 14))
    data[:, 0] = np.arange(10.0)
    c = fit_gmm(data, 1).components[0]
    evals = np.linalg.eigvalsh(c.covariance)
    assert evals.min() >= 1e-6 * (1 - 1e-9)
    assert abs(evals.max() - np.var(np.arange(10.0))) < 1e-9


def test_two_separated_gaussians_are_recovered():
    rng = np.random.default_rng(3)
    centers = np.zeros((2, 14))
    centers[1, :3] = 5.0
    sep = np.linalg.norm(centers[1] - centers[0])
    data = np.vstack([rng.normal(size=(100, 14)) + centers[0], rng.normal(size=(100, 14)) + centers[1]])
    prior = fit_gmm(data, 2, restarts=5, rng=np.random.default_rng(0))
    means = np.array([c.mean for c in prior.components])
    for center in centers:
        assert np.min(np.linalg.norm(means - center, axis=1)) <= 0.1 * sep


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 4]))
def test_em_log_likelihood_non_decreasing(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 40))
    data = rng.normal(size=(n, 14)) * rng.uniform(0.01, 2, 14)
    prior = fit_gmm(data, k, restarts=2, rng=rng)
    for trace in prior.info.all_traces:
        assert np.all(np.diff(trace) >= -1e-10)
    assert abs(sum(c.weight for c in prior.components) - 1) <= 1e-9
    assert all(np.linalg.eigvalsh(c.covariance).min() >= 1e-6 * (1 - 1e-8) for c in prior.components)


def test_prior_needs_k_samples():
    with pytest.raises(InsufficientData):
        fit_gmm(np.zeros((3, 14)), 4)


def test_prior_label_filter():
    ds, _ = planted_dataset(60, seed=7)
    successes = np.vstack([s.config for s in ds.canonical().samples if s.label == 1])
    only = fit_prior(ds, "precision", 1, label_filter="success")
    every = fit_prior(ds, "precision", 1, label_filter="all")
    np.testing.assert_allclose(only.components[0].mean, successes.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(every.components[0].mean, np.vstack(ds.arrays()[0]).mean(axis=0), atol=1e-12)
    with pytest.raises(ValueError):
        fit_prior(ds, "precision", 1, label_filter="failures")


# whole model


def two_type_dataset(seed=0):
    a, _ = planted_dataset(60, seed=seed, type_name="precision", noise_labels=True)
    b, _ = planted_dataset(60, seed=seed + 100, type_name="power", noise_labels=True)
    return GraspDataset(a.samples + b.samples)


def assert_models_equal(m1, m2, atol=1e-9):
    assert [t.name for t in m1.types] == [t.name for t in m2.types]
    for c1, c2 in zip(m1.classifiers, m2.classifiers):
        np.testing.assert_allclose(c1.weights, c2.weights, atol=atol, rtol=0)
    for p1, p2 in zip(m1.priors, m2.priors):
        for a, b in zip(p1.components, p2.components):
            assert abs(a.weight - b.weight) <= atol
            np.testing.assert_allclose(a.mean, b.mean, atol=atol, rtol=0)
            np.testing.assert_allclose(a.covariance, b.covariance, atol=atol, rtol=0)


def test_fit_model_has_one_classifier_and_prior_per_type(typed_model, train_build):
    assert [t.name for t in typed_model.types] == ["precision", "power"]
    assert len(typed_model.classifiers) == 2 and len(typed_model.priors) == 2
    assert all(p.n_components == 4 for p in typed_model.priors)
    assert train_build.dataset.counts == {("precision", 1): 20, ("precision", 0): 40,
                                          ("power", 1): 20, ("power", 0): 40}
    assert abs(typed_model.type_prior.sum() - 1) < 1e-12


def test_fit_model_factorizes_over_types():
    ds = two_type_dataset()
    joint = fit_model(ds, ModelConfig(n_components=2))
    for t in joint.types:
        alone = fit_model(ds.of_type(t.name), ModelConfig(n_components=2))
        np.testing.assert_allclose(joint.classifier(t.name).weights, alone.classifiers[0].weights, atol=1e-9, rtol=0)
        for a, b in zip(joint.prior(t.name).components, alone.priors[0].components):
            np.testing.assert_allclose(a.mean, b.mean, atol=1e-9, rtol=0)
            np.testing.assert_allclose(a.covariance, b.covariance, atol=1e-9, rtol=0)


def test_single_type_dataset_gives_the_type_free_model():
    ds = two_type_dataset(1)
    config = ModelConfig(n_components=2)
    pooled = fit_model(ds.relabeled("type-free"), config)
    free = fit_type_free(ds, config)
    assert_models_equal(pooled, free, atol=0)
    assert free.n_types == 1


def test_sample_order_does_not_change_the_model():
    ds = two_type_dataset(2)
    shuffled = GraspDataset([ds.samples[i] for i in np.random.default_rng(0).permutation(len(ds))])
    config = ModelConfig(n_components=2)
    assert_models_equal(fit_model(ds, config), fit_model(shuffled, config))


def test_fit_errors_are_tagged_with_the_type():
    ds = two_type_dataset(3)
    broken = GraspDataset([s for s in ds.samples if s.type == "precision"] +
                          [s for s in ds.samples if s.type == "power" and s.label == 1])
    with pytest.raises(FitError) as err:
        fit_model(broken, ModelConfig(n_components=2))
    assert err.value.type_name == "power"


@pytest.mark.parametrize("seed", [8, 9, 10])
def test_loo_on_separable_data_is_perfect(seed):
    ds, _ = planted_dataset(80, seed=seed, margin=5.0)
    report = evaluate_loo(ds)
    assert report.overall.accuracy == 1.0
    assert report.per_type["precision"].accuracy == 1.0


def test_loo_random_labels_near_majority_rate():
    rng = np.random.default_rng(9)
    samples = [TrainingSample(rng.normal(size=14), "power", rng.normal(size=15), int(rng.uniform() < 0.7), f"s{i:03d}")
               for i in range(100)]
    ds = GraspDataset(samples)
    majority = max(np.mean([s.label for s in samples]), 1 - np.mean([s.label for s in samples]))
    report = evaluate_loo(ds, ModelConfig(l2_strength=1.0))
    assert abs(report.overall.accuracy - majority) <= 0.15


def test_loo_warm_start_matches_cold_fold_fits():
    ds = two_type_dataset(4).canonical()
    report = evaluate_loo(ds)
    for i in (0, 17, 63, 119):
        sample = ds.samples[i]
        clf = fit_classifier(ds.without(i), sample.type)
        p = predict_success(clf, assemble_input(sample.config, sample.features))
        assert abs(p - report.probabilities[i]) < 1e-6


def test_loo_report_shape(train_build):
    report = evaluate_loo(train_build.dataset)
    rows = report.rows()
    assert [r["type"] for r in rows] == ["precision", "power", "all"]
    for r in rows:
        assert 0 <= r["accuracy"] <= 1 and 0 <= r["f1"] <= 1
        assert r["tp"] + r["fp"] + r["tn"] + r["fn"] == r["n"]
    assert rows[-1]["n"] == 120


# files


def test_dataset_jsonl_round_trip_byte_identical(tmp_path, train_build):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    train_build.dataset.write_jsonl(a)
    GraspDataset.read_jsonl(a).write_jsonl(b)
    assert a.read_bytes() == b.read_bytes()
    first = a.read_text().splitlines()[0]
    assert set(__import__("json").loads(first)) == {"sample_id", "type", "theta", "features", "label"}


def test_corrupt_dataset_line_reports_line_number(tmp_path, train_build):
    path = tmp_path / "d.jsonl"
    train_build.dataset.write_jsonl(path)
    lines = path.read_text().splitlines()
    lines[6] = '{"sample_id": "x", "theta": [1, 2]'
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError) as err:
        GraspDataset.read_jsonl(path)
    assert err.value.lineno == 7


def test_model_json_round_trip(tmp_path, typed_model):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    typed_model.save(a)
    loaded = GraspModel.load(a)
    loaded.save(b)
    assert a.read_bytes() == b.read_bytes()
    assert_models_equal(typed_model, loaded, atol=0)
    doc = __import__("json").loads(a.read_text())
    assert len(doc["priors"][0]["components"][0]["sigma"]) == 196
    assert len(doc["classifiers"][0]["weights"]) == 30


def test_training_sample_validation():
    with pytest.raises(ValueError):
        TrainingSample(np.zeros(14), "power", np.zeros(15), 2, "s")
    with pytest.raises(ValueError):
        TrainingSample(np.zeros(13), "power", np.zeros(15), 1, "s")
