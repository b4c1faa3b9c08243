"""Type-specific logistic regression success classifiers.

Weights are fitted by cyclic coordinate descent on the L2-penalized
log-likelihood. Every coordinate takes a safeguarded one-dimensional Newton
step, so the objective never decreases between sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import expit

from grasptype.errors import SingleClassData
from grasptype.grasp import CONFIG_DIM, GraspDataset, stack_inputs

INPUT_DIM = 30
BASIS_REFRESH_SWEEPS = 20


@dataclass
class FitInfo:
    sweeps: int
    gradient_norm: float
    converged: bool
    objective_trace: np.ndarray = field(repr=False)

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1])


@dataclass
class TypeClassifier:
    weights: np.ndarray
    type: str
    info: FitInfo = field(default=None, repr=False, compare=False)

    @property
    def theta_weights(self) -> np.ndarray:
        return self.weights[:CONFIG_DIM]

    def score(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.weights

    def predict_proba(self, x) -> np.ndarray:
        return expit(self.score(x))


def predict_success(classifier: TypeClassifier, x) -> float:
    """Success probability 1 / (1 + exp(-w.x)), overflow-safe."""
    return float(expit(np.dot(classifier.weights, np.asarray(x, dtype=float))))


@njit(cache=True)
def _softplus(z):
    if z > 0:
        return z + np.log1p(np.exp(-z))
    return np.log1p(np.exp(z))


@njit(cache=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def _softplus_change(a, d):
    """softplus(a + d) - softplus(a), accurate for small d."""
    if abs(d) < 1e-3:
        return np.log1p(_sigmoid(a) * np.expm1(d))
    return _softplus(a + d) - _softplus(a)


@njit(cache=True)
def _penalty(u, Q):
    return u @ (Q @ u)


@njit(cache=True)
def _objective(z, y, u, l2, Q):
    total = 0.0
    for i in range(z.shape[0]):
        total += y[i] * z[i] - _softplus(z[i])
    return total - l2 * _penalty(u, Q)


@njit(cache=True)
def _gradient_norm(Z, y, z, Qu, l2):
    n, d = Z.shape
    sq = 0.0
    for j in range(d):
        g = 0.0
        for i in range(n):
            g += (y[i] - _sigmoid(z[i])) * Z[i, j]
        g -= 2.0 * l2 * Qu[j]
        sq += g * g
    return np.sqrt(sq)


@njit(cache=True)
def _coordinate_descent(Z, y, u, l2, Q, tol, max_sweeps):
    """Cyclic coordinate ascent on sum loglik(Z u) - l2 u'Qu.

    Each coordinate takes a Newton step, halved until the objective does
    not decrease.
    """
    n, d = Z.shape
    z = Z @ u
    Qu = Q @ u
    trace = np.empty(max_sweeps + 1)
    trace[0] = _objective(z, y, u, l2, Q)
    gnorm = _gradient_norm(Z, y, z, Qu, l2)
    sweeps = 0
    while gnorm > tol and sweeps < max_sweeps:
        for j in range(d):
            g = 0.0
            h = 0.0
            for i in range(n):
                p = _sigmoid(z[i])
                g += (y[i] - p) * Z[i, j]
                h += p * (1.0 - p) * Z[i, j] * Z[i, j]
            g -= 2.0 * l2 * Qu[j]
            h += 2.0 * l2 * Q[j, j]
            if g == 0.0 or h <= 0.0:
                continue
            step = g / h
            accepted = False
            for _ in range(60):
                # the change is summed per sample; differencing two totals
                # would drown small Newton gains in round-off
                gain = -l2 * (2.0 * step * Qu[j] + step * step * Q[j, j])
                for i in range(n):
                    dz = step * Z[i, j]
                    gain += y[i] * dz - _softplus_change(z[i], dz)
                if gain >= 0.0:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                continue
            u[j] += step
            for i in range(n):
                z[i] += step * Z[i, j]
            for k in range(d):
                Qu[k] += step * Q[k, j]
        sweeps += 1
        trace[sweeps] = _objective(z, y, u, l2, Q)
        gnorm = _gradient_norm(Z, y, z, Qu, l2)
    return u, sweeps, gnorm, trace[: sweeps + 1]


def penalized_log_likelihood(weights, X, y, l2_strength) -> float:
    z = X @ weights
    ll = float(np.sum(y * z - np.logaddexp(0.0, z)))
    return ll - l2_strength * float(np.sum(weights[:-1] ** 2))


def penalized_gradient(weights, X, y, l2_strength) -> np.ndarray:
    g = X.T @ (y - expit(X @ weights))
    g[:-1] -= 2.0 * l2_strength * weights[:-1]
    return g


def _hessian(X, w, l2_strength, penalized):
    p = expit(X @ w)
    H = (X * (p * (1.0 - p))[:, None]).T @ X
    H[np.diag_indices_from(H)] += 2.0 * l2_strength * penalized
    return H


def _original_gradient_norm(w_centered, offsets, X, y, l2_strength) -> float:
    w = w_centered.copy()
    w[-1] -= w[:-1] @ offsets
    return float(np.linalg.norm(penalized_gradient(w, X, y, l2_strength)))


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    l2_strength: float = 1e-4,
    tol: float = 1e-6,
    max_sweeps: int = 10000,
    init=None,
    block: int = BASIS_REFRESH_SWEEPS,
):
    """Maximize sum log p(y|x,w) - l2*||w[:-1]||^2; the last column is the bias.

    Descent runs on mean-centered inputs. Since the bias is not penalized this
    is an exact reparametrization, and it removes the strong coupling between
    the bias and inputs with large offsets.

    Near-separable data leave the objective badly conditioned, and cyclic
    descent on the raw weights then crawls. After every ``block`` sweeps the
    coordinates are rotated onto the eigenvectors of the current Hessian.
    The rotation is orthogonal, so objective values and gradient norms are
    unchanged, and descent continues in nearly decoupled coordinates.
    """
    X = np.asarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    d = X.shape[1]
    offsets = X[:, :-1].mean(axis=0)
    Xc = X.copy()
    Xc[:, :-1] -= offsets
    Xc = np.ascontiguousarray(Xc)
    w = np.zeros(d) if init is None else np.array(init, dtype=float)
    w[-1] += w[:-1] @ offsets
    penalized = np.ones(d)
    penalized[-1] = 0.0
    # |grad| in original coordinates <= (1 + |offsets|_1) * |grad| in centered ones
    inner_tol = float(tol / (1.0 + np.abs(offsets).sum()))
    l2 = float(l2_strength)

    basis = np.eye(d)
    traces = []
    sweeps = 0
    while True:
        Z = np.ascontiguousarray(Xc @ basis)
        Q = np.ascontiguousarray(basis.T @ (penalized[:, None] * basis))
        u = basis.T @ w
        u, done, gnorm, trace = _coordinate_descent(
            Z, y, u, l2, Q, inner_tol, int(min(block, max_sweeps - sweeps))
        )
        w = basis @ u
        traces.append(trace if not traces else trace[1:])
        sweeps += int(done)
        if gnorm <= inner_tol or sweeps >= max_sweeps:
            break
        if _original_gradient_norm(w, offsets, X, y, l2_strength) <= tol:
            break
        _, basis = np.linalg.eigh(_hessian(Xc, w, l2, penalized))

    gnorm = _original_gradient_norm(w, offsets, X, y, l2_strength)
    w[-1] -= w[:-1] @ offsets
    return w, FitInfo(
        sweeps=sweeps,
        gradient_norm=gnorm,
        converged=bool(gnorm <= tol),
        objective_trace=np.concatenate(traces),
    )


def fit_classifier(
    dataset: GraspDataset,
    type_name: str,
    l2_strength: float = 1e-4,
    tol: float = 1e-6,
    max_sweeps: int = 10000,
    init=None,
) -> TypeClassifier:
    subset = dataset.of_type(type_name).canonical()
    labels = {s.label for s in subset.samples}
    if labels != {0, 1}:
        raise SingleClassData(
            f"type {type_name!r} needs both success and failure samples, got labels {sorted(labels)}"
        )
    theta, feats, y = subset.arrays()
    w, info = fit_logistic(stack_inputs(theta, feats), y, l2_strength, tol, max_sweeps, init)
    return TypeClassifier(weights=w, type=type_name, info=info)
