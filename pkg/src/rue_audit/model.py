"""Single-hidden-layer softplus regression network with exact derivatives.

The per-sample loss is ``0.5 * (y - f(x, theta))**2`` and the regularizer is
``0.5 * alpha * ||mask * theta||**2`` where ``mask`` optionally excludes the
biases.  Parameters live in one flat vector laid out as

    [W1 (hidden x input, row-major), b1 (hidden), w2 (hidden), b2]

A ``linear`` architecture (``f = w.x + b``, layout ``[w, b]``) is available for
tests where the objective must be exactly quadratic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import InputError

LAYOUT_TAG = "W1-rowmajor,b1,w2,b2"
LINEAR_LAYOUT_TAG = "w,b"

# upper bound on elements of the (rows, k, hidden) temporaries
_CHUNK_ELEMENTS = 4_000_000


def softplus(z):
    return np.logaddexp(0.0, z)


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden_width: int = 50
    linear: bool = False

    def __post_init__(self):
        if self.input_dim < 1:
            raise InputError("input_dim must be >= 1")
        if not self.linear and self.hidden_width < 1:
            raise InputError("hidden_width must be >= 1")

    @property
    def n_params(self) -> int:
        p, h = self.input_dim, self.hidden_width
        if self.linear:
            return p + 1
        return p * h + h + h + 1

    @property
    def layout(self) -> str:
        return LINEAR_LAYOUT_TAG if self.linear else LAYOUT_TAG

    def unpack(self, theta: np.ndarray):
        """Split a flat vector (or a ``(..., d)`` stack) into parameter blocks."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_params:
            raise InputError(
                f"parameter vector has length {theta.shape[-1]}, expected {self.n_params}"
            )
        lead = theta.shape[:-1]
        p, h = self.input_dim, self.hidden_width
        if self.linear:
            return theta[..., :p], theta[..., p]
        i = p * h
        w1 = theta[..., :i].reshape(*lead, h, p)
        b1 = theta[..., i : i + h]
        w2 = theta[..., i + h : i + 2 * h]
        b2 = theta[..., i + 2 * h]
        return w1, b1, w2, b2

    def pack(self, *blocks) -> np.ndarray:
        return np.concatenate([np.ravel(np.asarray(b, dtype=float)) for b in blocks])

    def penalty_mask(self, regularize_bias: bool = True) -> np.ndarray:
        mask = np.ones(self.n_params)
        if regularize_bias:
            return mask
        p, h = self.input_dim, self.hidden_width
        if self.linear:
            mask[p] = 0.0
        else:
            mask[p * h : p * h + h] = 0.0
            mask[-1] = 0.0
        return mask


def _as_inputs(arch: MlpArchitecture, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise InputError(f"inputs have shape {X.shape}, expected (n, {arch.input_dim})")
    return X


def _check_data(arch, X, y):
    X = _as_inputs(arch, X)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise InputError(f"{X.shape[0]} input rows but {y.shape[0]} targets")
    return X, y


def predict(arch: MlpArchitecture, theta: np.ndarray, X) -> np.ndarray:
    """Model outputs for every row of ``X``."""
    X = _as_inputs(arch, X)
    if arch.linear:
        w, b = arch.unpack(theta)
        return X @ w + b
    w1, b1, w2, b2 = arch.unpack(theta)
    return softplus(X @ w1.T + b1) @ w2 + b2


def forward(arch: MlpArchitecture, theta: np.ndarray, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (arch.input_dim,):
        raise InputError(f"input has shape {x.shape}, expected ({arch.input_dim},)")
    return float(predict(arch, theta, x[None, :])[0])


def predict_ensemble(arch: MlpArchitecture, thetas: np.ndarray, X) -> np.ndarray:
    """Predictions of a stack of parameter vectors: ``(b, d)`` -> ``(b, m)``."""
    X = _as_inputs(arch, X)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if arch.linear:
        w, b = arch.unpack(thetas)
        return w @ X.T + b[:, None]
    m, h = X.shape[0], arch.hidden_width
    step = max(1, _CHUNK_ELEMENTS // max(1, m * h))
    out = np.empty((thetas.shape[0], m))
    for start in range(0, thetas.shape[0], step):
        w1, b1, w2, b2 = arch.unpack(thetas[start : start + step])
        z = np.einsum("bhp,mp->bmh", w1, X) + b1[:, None, :]
        out[start : start + step] = np.einsum("bmh,bh->bm", softplus(z), w2) + b2[:, None]
    return out


def prediction_gradients(arch: MlpArchitecture, theta: np.ndarray, X) -> np.ndarray:
    """Rows are ``grad_theta f(x_i, theta)``; shape ``(n, d)``."""
    X = _as_inputs(arch, X)
    n = X.shape[0]
    if arch.linear:
        return np.hstack([X, np.ones((n, 1))])
    w1, b1, w2, _ = arch.unpack(theta)
    z = X @ w1.T + b1
    db1 = expit(z) * w2
    dw1 = (db1[:, :, None] * X[:, None, :]).reshape(n, -1)
    return np.hstack([dw1, db1, softplus(z), np.ones((n, 1))])


def prediction_gradient(arch: MlpArchitecture, theta: np.ndarray, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (arch.input_dim,):
        raise InputError(f"input has shape {x.shape}, expected ({arch.input_dim},)")
    return prediction_gradients(arch, theta, x[None, :])[0]


def residuals(arch: MlpArchitecture, theta: np.ndarray, X, y) -> np.ndarray:
    """Signed residuals ``f(x_i) - y_i`` (the derivative of the loss in ``f``)."""
    X, y = _check_data(arch, X, y)
    return predict(arch, theta, X) - y


def loss_gradient_matrix(arch: MlpArchitecture, theta: np.ndarray, X, y) -> np.ndarray:
    """Per-sample loss gradients as columns, shape ``(d, n)``; no regularizer."""
    X, y = _check_data(arch, X, y)
    r = predict(arch, theta, X) - y
    return (prediction_gradients(arch, theta, X) * r[:, None]).T


def objective(arch, theta, X, y, alpha: float, regularize_bias: bool = True) -> float:
    X, y = _check_data(arch, X, y)
    theta = np.asarray(theta, dtype=float)
    if X.shape[0] == 0:
        raise InputError("objective needs at least one sample")
    r = predict(arch, theta, X) - y
    mt = arch.penalty_mask(regularize_bias) * theta
    return float(0.5 * r @ r + 0.5 * alpha * mt @ mt)


def objective_gradient(
    arch, theta, X, y, alpha: float, regularize_bias: bool = True, penalty_scale: float = 1.0
) -> np.ndarray:
    """Gradient of the summed objective.

    ``penalty_scale`` multiplies the regularizer term; minibatch training uses
    it to spread the full-data penalty across batches.
    """
    X, y = _check_data(arch, X, y)
    theta = np.asarray(theta, dtype=float)
    grad = arch.penalty_mask(regularize_bias) * theta * (alpha * penalty_scale)
    if X.shape[0]:
        grad = grad + loss_gradient_matrix(arch, theta, X, y).sum(axis=1)
    return grad


def _curvature_apply(arch, theta, X, r, V) -> np.ndarray:
    """``sum_i r_i * Hess_theta f(x_i) @ V`` for a ``(d, k)`` block ``V``."""
    if arch.linear or X.shape[0] == 0:
        return np.zeros_like(V)
    w1, b1, w2, _ = arch.unpack(theta)
    v1, c1, u2, _ = arch.unpack(V.T)
    z = X @ w1.T + b1
    sg = expit(z)
    sgp = sg * (1.0 - sg)
    dz = np.einsum("khp,np->nkh", v1, X) + c1[None, :, :]
    t = u2[None, :, :] * sg[:, None, :] + (w2 * sgp)[:, None, :] * dz
    out_w1 = np.einsum("n,nkh,np->khp", r, t, X)
    out_b1 = np.einsum("n,nkh->kh", r, t)
    out_w2 = np.einsum("n,nh,nkh->kh", r, sg, dz)
    k = V.shape[1]
    return np.hstack([out_w1.reshape(k, -1), out_b1, out_w2, np.zeros((k, 1))]).T


def hessian_vector_product(
    arch, theta, X, y, alpha: float, v, regularize_bias: bool = True
) -> np.ndarray:
    """Exact ``Hess J(theta) @ v``; ``v`` may be a vector or a ``(d, k)`` block."""
    X, y = _check_data(arch, X, y)
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    V = v[:, None] if single else v
    d = arch.n_params
    if V.shape[0] != d:
        raise InputError(f"vector has length {V.shape[0]}, expected {d}")
    out = alpha * arch.penalty_mask(regularize_bias)[:, None] * V
    if X.shape[0]:
        G = prediction_gradients(arch, theta, X)
        r = predict(arch, theta, X) - y
        out = out + G.T @ (G @ V)
        step = max(1, _CHUNK_ELEMENTS // max(1, X.shape[0] * arch.hidden_width))
        for start in range(0, V.shape[1], step):
            block = V[:, start : start + step]
            out[:, start : start + step] += _curvature_apply(arch, theta, X, r, block)
    return out[:, 0] if single else out


def objective_hessian(
    arch,
    theta,
    X,
    y,
    alpha: float,
    regularize_bias: bool = True,
    max_dim: int = 5000,
    symmetrize: bool = True,
) -> np.ndarray:
    """Dense Hessian assembled from products with the standard basis."""
    d = arch.n_params
    if d > max_dim:
        raise InputError(f"refusing to build a dense {d}x{d} Hessian (limit {max_dim})")
    H = hessian_vector_product(arch, theta, X, y, alpha, np.eye(d), regularize_bias)
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H
