"""Grasp planning as MAP inference over the configuration, per grasp type.

For a type g the inner problem minimizes

    f(theta) = -log sigmoid(w_g . x) - prior_weight * log sum_k pi_k N(theta | mu_k, Sigma_k)

inside the joint-limit box; the outer problem picks the type with the lowest
inner optimum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from grasptype.errors import GraspTypeError, NonFiniteObjective
from grasptype.grasp import ConfigurationBounds, as_theta, assemble_input

logger = logging.getLogger(__name__)


@dataclass
class InferenceConfig:
    prior_weight: float = 0.5
    max_iterations: int = 1000
    gradient_tolerance: float = 1e-6
    bounds: Optional[ConfigurationBounds] = None
    memory: int = 10
    restarts: int = 0
    restart_sigma: float = 0.02

    def __post_init__(self):
        if self.prior_weight < 0:
            raise ValueError("prior_weight must be non-negative")
        if self.gradient_tolerance <= 0 or self.max_iterations <= 0:
            raise ValueError("tolerances and iteration caps must be positive")


def _features(features) -> np.ndarray:
    values = features.values if hasattr(features, "values") else features
    return np.asarray(values, dtype=float).reshape(-1)


def value_and_gradient(model, grasp_type, features, config, cfg: InferenceConfig):
    """Objective and its gradient with respect to the configuration."""
    theta = as_theta(config)
    clf = model.classifier(grasp_type)
    score = float(clf.weights @ assemble_input(theta, _features(features)))
    value = float(np.logaddexp(0.0, -score))
    grad = -clf.theta_weights * float(expit(-score))
    if cfg.prior_weight:
        log_prior, prior_grad = model.prior(grasp_type).value_and_gradient(theta)
        value -= cfg.prior_weight * log_prior
        grad = grad + cfg.prior_weight * prior_grad
    return value, grad


def objective(model, grasp_type, features, config, cfg: InferenceConfig) -> float:
    """Negative log posterior of a configuration for one grasp type."""
    return value_and_gradient(model, grasp_type, features, config, cfg)[0]


def gradient(model, grasp_type, features, config, cfg: InferenceConfig) -> np.ndarray:
    return value_and_gradient(model, grasp_type, features, config, cfg)[1]


def projected_gradient_norm(theta, grad, bounds: ConfigurationBounds) -> float:
    """Infinity norm of the projected gradient P(theta - g) - theta."""
    step = np.clip(theta - grad, bounds.lower, bounds.upper) - theta
    return float(np.max(np.abs(step)))


@dataclass
class InnerResult:
    type: str
    theta: np.ndarray
    value: float
    trace: list
    init: np.ndarray
    iterations: int
    converged: bool
    message: str = ""


def _run_lbfgsb(fun_and_grad, x0, bounds, cfg):
    last = {}

    def cached(x):
        key = x.tobytes()
        if key not in last:
            last.clear()
            last[key] = fun_and_grad(x)
        return last[key]

    trace = [float(cached(x0)[0])]

    def callback(xk):
        trace.append(float(cached(np.asarray(xk, dtype=float))[0]))

    res = minimize(
        cached,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(bounds.lower, bounds.upper)),
        callback=callback,
        options={
            "maxcor": cfg.memory,
            "maxiter": cfg.max_iterations,
            "gtol": cfg.gradient_tolerance,
            "ftol": 0.0,
            "maxls": 40,
        },
    )
    return res, trace


def minimize_for_type(model, grasp_type, features, init, cfg: InferenceConfig) -> InnerResult:
    """Bounded quasi-Newton descent from ``init`` for one grasp type."""
    bounds = cfg.bounds or model.bounds
    gtype = model.grasp_type(grasp_type)
    feats = _features(features)
    x0 = as_theta(init).copy()
    if not bounds.contains(x0):
        logger.warning("initial configuration outside bounds; projecting")
        x0 = bounds.clip(x0)

    def fun_and_grad(theta):
        return value_and_gradient(model, gtype, feats, np.asarray(theta, dtype=float), cfg)

    f0, g0 = fun_and_grad(x0)
    if not (np.isfinite(f0) and np.all(np.isfinite(g0))):
        raise NonFiniteObjective(f"objective or gradient not finite at the initial configuration for {gtype.name}")

    best_x, best_f, trace, iterations, message = x0, f0, [f0], 0, "initial point"
    starts = [x0]
    if cfg.restarts:
        rng = np.random.default_rng(0)
        for _ in range(cfg.restarts):
            jitter = np.zeros_like(x0)
            jitter[:3] = rng.normal(0.0, cfg.restart_sigma, size=3)
            starts.append(bounds.clip(x0 + jitter))

    for start in starts:
        res, run_trace = _run_lbfgsb(fun_and_grad, start, bounds, cfg)
        x = np.clip(res.x, bounds.lower, bounds.upper)
        fx = float(fun_and_grad(x)[0])
        if start is x0:
            trace, iterations, message = run_trace, int(res.nit), str(res.message)
        if np.isfinite(fx) and fx < best_f:
            best_x, best_f = x, fx
            if start is not x0:
                trace, iterations, message = run_trace, int(res.nit), str(res.message)

    pg = projected_gradient_norm(best_x, fun_and_grad(best_x)[1], bounds)
    converged = pg <= cfg.gradient_tolerance
    if not converged:
        logger.debug("%s: stopped with projected gradient %.3g (%s)", gtype.name, pg, message)
    return InnerResult(
        type=gtype.name,
        theta=best_x,
        value=best_f,
        trace=trace,
        init=x0,
        iterations=iterations,
        converged=converged,
        message=message,
    )


@dataclass
class InferenceResult:
    config: np.ndarray
    type: str
    objective_value: float
    success_probability: float
    per_type_results: list
    trace: list = field(default_factory=list)
    init: Optional[np.ndarray] = None

    def to_json(self) -> dict:
        return {
            "theta": self.config.tolist(),
            "type": self.type,
            "objective": self.objective_value,
            "success_probability": self.success_probability,
            "per_type": [
                {
                    "type": r.type,
                    "theta": r.theta.tolist(),
                    "objective": r.value,
                    "init": r.init.tolist(),
                    "iterations": r.iterations,
                    "converged": r.converged,
                    "trace": r.trace,
                }
                for r in self.per_type_results
            ],
            "trace": self.trace,
        }


def plan_grasp(
    model,
    features,
    inits,
    cfg: Optional[InferenceConfig] = None,
    types: Optional[Sequence] = None,
) -> InferenceResult:
    """Solve the inner problem for each type and keep the best type.

    ``inits`` is either one configuration shared by all types or a mapping
    from type name to its initial configuration.
    """
    cfg = cfg or InferenceConfig()
    selected = [model.grasp_type(t) for t in types] if types else list(model.types)
    results, failures = [], []
    for gtype in selected:
        init = inits[gtype.name] if isinstance(inits, Mapping) else inits
        try:
            results.append((gtype, minimize_for_type(model, gtype, features, init, cfg)))
        except GraspTypeError as exc:
            logger.warning("inference failed for %s: %s", gtype.name, exc)
            failures.append((gtype.name, exc))
    if not results:
        raise NonFiniteObjective(f"inference failed for every grasp type: {failures}")

    # the type prior enters the outer comparison only; a uniform prior is a constant
    if np.allclose(model.type_prior, model.type_prior[0], rtol=0, atol=1e-15):
        log_type_prior = np.zeros(model.n_types)
    else:
        log_type_prior = np.log(model.type_prior)
    keyed = [(r.value - log_type_prior[g.index], g.index, g, r) for g, r in results]
    _, _, best_type, best = min(keyed, key=lambda item: (item[0], item[1]))
    x = assemble_input(best.theta, _features(features))
    return InferenceResult(
        config=best.theta,
        type=best_type.name,
        objective_value=best.value,
        success_probability=float(expit(model.classifier(best_type).weights @ x)),
        per_type_results=[r for _, r in results],
        trace=best.trace,
        init=best.init,
    )
