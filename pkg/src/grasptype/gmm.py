"""Gaussian mixture priors over grasp configurations, fitted by EM."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from grasptype.errors import InsufficientData
from grasptype.grasp import GraspDataset, as_theta

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianComponent:
    """One weighted Gaussian, kept in eigen form (covariance = V diag(lam) V^T)."""

    weight: float
    mean: np.ndarray
    covariance: np.ndarray
    eigvals: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    eigvecs: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.eigvals is None:
            self.eigvals, self.eigvecs = np.linalg.eigh(0.5 * (self.covariance + self.covariance.T))
        if np.any(self.eigvals <= 0):
            raise ValueError("component covariance must be positive definite")
        self._log_det = float(np.sum(np.log(self.eigvals)))
        self._precision = (self.eigvecs / self.eigvals) @ self.eigvecs.T

    @classmethod
    def from_eigen(cls, weight, mean, eigvals, eigvecs) -> "GaussianComponent":
        cov = (eigvecs * eigvals) @ eigvecs.T
        return cls(weight, mean, 0.5 * (cov + cov.T), eigvals, eigvecs)

    @property
    def precision(self) -> np.ndarray:
        return self._precision

    def log_pdf(self, points: np.ndarray) -> np.ndarray:
        """Gaussian log density at each row of ``points``."""
        proj = (np.atleast_2d(points) - self.mean) @ self.eigvecs
        maha = np.sum(proj * proj / self.eigvals, axis=1)
        d = self.mean.shape[0]
        return -0.5 * (d * LOG_2PI + self._log_det + maha)


@dataclass
class EMInfo:
    log_likelihood_trace: list
    iterations: int
    restart: int
    all_traces: list = field(default_factory=list, repr=False)

    @property
    def log_likelihood(self) -> float:
        return float(self.log_likelihood_trace[-1])


@dataclass
class GraspPrior:
    components: list
    type: str = ""
    info: Optional[EMInfo] = field(default=None, repr=False, compare=False)

    @property
    def n_components(self) -> int:
        return len(self.components)

    def _stacked(self):
        cache = self.__dict__.get("_stack")
        if cache is None or cache[0] is not self.components or cache[1] != len(self.components):
            comps = self.components
            log_w = np.log([c.weight for c in comps])
            means = np.stack([c.mean for c in comps])
            vecs = np.stack([c.eigvecs for c in comps])
            inv_vals = np.stack([1.0 / c.eigvals for c in comps])
            const = np.array([-0.5 * (c.mean.size * LOG_2PI + c._log_det) for c in comps])
            cache = (comps, len(comps), log_w + const, means, vecs, inv_vals)
            self.__dict__["_stack"] = cache
        return cache[2:]

    def component_log_terms(self, points: np.ndarray) -> np.ndarray:
        """log(pi_k) + log N(x | mu_k, Sigma_k), shape (n, K)."""
        offset, means, vecs, inv_vals = self._stacked()
        diff = np.atleast_2d(points)[:, None, :] - means[None]
        proj = np.einsum("nkd,kde->nke", diff, vecs)
        return offset - 0.5 * np.einsum("nke,ke->nk", proj * proj, inv_vals)

    def log_density(self, points: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_terms(points), axis=1)

    def value_and_gradient(self, theta: np.ndarray):
        """(log p(theta), gradient of -log p(theta)) for a single configuration.

        The gradient is the responsibility-weighted sum of Sigma_k^-1 (theta - mu_k).
        """
        offset, means, vecs, inv_vals = self._stacked()
        diff = theta[None, :] - means
        proj = np.einsum("kd,kde->ke", diff, vecs)
        terms = offset - 0.5 * np.einsum("ke,ke->k", proj * proj, inv_vals)
        top = terms.max()
        weights = np.exp(terms - top)
        total = weights.sum()
        resp = weights / total
        grad = np.einsum("k,kde,ke->d", resp, vecs, proj * inv_vals)
        return float(top + np.log(total)), grad

    def neg_log_density_gradient(self, theta: np.ndarray) -> np.ndarray:
        return self.value_and_gradient(np.asarray(theta, dtype=float))[1]


def prior_log_density(prior: GraspPrior, config) -> float:
    return float(prior.log_density(as_theta(config))[0])


def floor_covariance(cov: np.ndarray, floor: float):
    """Clip eigenvalues from below; this is the constrained MLE of the covariance.

    Returns (eigvals, eigvecs) of the floored matrix.
    """
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return np.maximum(evals, floor), evecs


def _kmeanspp_centers(data, k, rng):
    n = data.shape[0]
    centers = [data[rng.integers(n)]]
    closest = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(data[idx])
        closest = np.minimum(closest, np.sum((data - data[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(data, resp, floor, previous=None):
    n = data.shape[0]
    nk = resp.sum(axis=0)
    components = []
    for k in range(resp.shape[1]):
        if nk[k] < 1e-12 * n:
            # an empty component leaves the expected log-likelihood unchanged
            weight = max(nk[k] / n, 1e-300)
            if previous is not None:
                old = previous[k]
                components.append(GaussianComponent.from_eigen(weight, old.mean, old.eigvals, old.eigvecs))
            else:
                mean = data.mean(axis=0)
                diff = data - mean
                evals, evecs = floor_covariance(diff.T @ diff / n, floor)
                components.append(GaussianComponent.from_eigen(weight, mean, evals, evecs))
            continue
        mean = resp[:, k] @ data / nk[k]
        diff = data - mean
        cov = (resp[:, k, None] * diff).T @ diff / nk[k]
        evals, evecs = floor_covariance(cov, floor)
        components.append(GaussianComponent.from_eigen(nk[k] / n, mean, evals, evecs))
    total = sum(c.weight for c in components)
    for c in components:
        c.weight = c.weight / total
    return components


def _run_em(data, resp, floor, tol, max_iter):
    components = _m_step(data, resp, floor)
    trace = []
    iterations = 0
    while True:
        prior = GraspPrior(components)
        terms = prior.component_log_terms(data)
        norm = logsumexp(terms, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        if iterations >= max_iter:
            break
        resp = np.exp(terms - norm[:, None])
        components = _m_step(data, resp, floor, components)
        iterations += 1
    return components, trace, iterations


def fit_gmm(
    data: np.ndarray,
    n_components: int = 4,
    restarts: int = 5,
    rng: Optional[np.random.Generator] = None,
    tol: float = 1e-8,
    max_iter: int = 500,
    covariance_floor: float = 1e-6,
) -> GraspPrior:
    """EM with k-means++ seeding; the best log-likelihood over restarts wins."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    n = data.shape[0]
    if n < n_components:
        raise InsufficientData(f"GMM with K={n_components} needs >= {n_components} samples, got {n}")
    rng = np.random.default_rng(0) if rng is None else rng
    best = None
    traces = []
    for restart in range(max(1, restarts)):
        centers = _kmeanspp_centers(data, n_components, rng)
        dist = ((data[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        resp = np.zeros((n, n_components))
        resp[np.arange(n), np.argmin(dist, axis=1)] = 1.0
        # a seed center always owns itself, so no component starts empty
        for k in range(n_components):
            if resp[:, k].sum() == 0:
                resp[np.argmin(dist[:, k])] = 0.0
                resp[np.argmin(dist[:, k]), k] = 1.0
        components, trace, iterations = _run_em(data, resp, covariance_floor, tol, max_iter)
        traces.append(trace)
        if best is None or trace[-1] > best[1][-1]:
            best = (components, trace, iterations, restart)
        if n_components == 1:
            break
    components, trace, iterations, restart = best
    info = EMInfo(log_likelihood_trace=trace, iterations=iterations, restart=restart, all_traces=traces)
    return GraspPrior(components=components, info=info)


def fit_prior(
    dataset: GraspDataset,
    type_name: str,
    n_components: int = 4,
    restarts: int = 5,
    rng: Optional[np.random.Generator] = None,
    label_filter: str = "success",
    tol: float = 1e-8,
    max_iter: int = 500,
    covariance_floor: float = 1e-6,
) -> GraspPrior:
    """Fit the configuration prior of one grasp type.

    ``label_filter`` is ``"success"`` (only y=1 samples) or ``"all"``.
    """
    if label_filter not in ("success", "all"):
        raise ValueError(f"unknown prior label filter {label_filter!r}")
    subset = dataset.of_type(type_name).canonical()
    if label_filter == "success":
        subset.samples = [s for s in subset.samples if s.label == 1]
    if len(subset) < n_components:
        raise InsufficientData(
            f"type {type_name!r}: prior with K={n_components} needs >= {n_components} samples, got {len(subset)}"
        )
    data = np.vstack([s.config for s in subset.samples])
    prior = fit_gmm(data, n_components, restarts, rng, tol, max_iter, covariance_floor)
    prior.type = type_name
    return prior
