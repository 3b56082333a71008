"""Resampling uncertainty estimation and the after-training baseline scores.

All quantities are computed in the model's (standardized) units.  The audit
context freezes everything that depends only on the trained model and its
training data: per-sample loss gradients ``L``, the damped Hessian and its
Cholesky factor, and ``A = H_damped^{-1} L``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import InputError, NumericalError
from .linalg import (
    CholeskyFactor,
    EigenDecomposition,
    as_generator,
    cholesky,
    multinomial_sample,
    sym_eigendecomp,
)
from .model import (
    MlpArchitecture,
    loss_gradient_matrix,
    objective_hessian,
    predict,
    predict_ensemble,
    prediction_gradients,
)
from .train import TrainedModel

DEFAULT_ENSEMBLE_SIZE = 100
BOOTSTRAP_SGD_STEP = 1e-3
ENSEMBLE_METHODS = ("rue", "laplace", "bootstrap-sgd")
CLOSED_FORM_METHODS = ("rue-approx", "sandwich", "laplace-closed")
METHODS = ENSEMBLE_METHODS + CLOSED_FORM_METHODS + ("kde", "null")


@dataclass(frozen=True, eq=False)
class AuditContext:
    arch: MlpArchitecture
    theta_hat: np.ndarray
    X_train: np.ndarray
    y_train: np.ndarray
    L: np.ndarray
    hessian_eig: EigenDecomposition
    damping: float
    factor: CholeskyFactor
    A: np.ndarray

    @property
    def n(self) -> int:
        return self.L.shape[1]

    @property
    def d(self) -> int:
        return self.L.shape[0]

    @property
    def damped_hessian(self) -> np.ndarray:
        c = self.factor.lower
        return c @ c.T

    def base_predictions(self, X) -> np.ndarray:
        return predict(self.arch, self.theta_hat, X)

    def train_residuals(self) -> np.ndarray:
        return self.base_predictions(self.X_train) - self.y_train


@dataclass(frozen=True, eq=False)
class EnsemblePredictions:
    values: np.ndarray
    method: str = "rue"

    @property
    def b(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]


def damping_for(eigenvalues: np.ndarray, floor: float = 1.0) -> float:
    """Smallest shift that lifts the spectrum to at least ``floor``."""
    return max(0.0, floor - float(np.min(eigenvalues)))


def build_audit_context(
    model: TrainedModel | tuple[MlpArchitecture, np.ndarray, float, bool],
    X_train,
    y_train,
    eigen_floor: float = 1.0,
    max_dim: int = 5000,
) -> AuditContext:
    """Hessian, damping, factorization and ``A`` for a trained model.

    ``model`` may also be a tuple ``(arch, theta_hat, alpha, regularize_bias)``
    for callers that did not go through :func:`train`.
    """
    if isinstance(model, TrainedModel):
        arch, theta = model.arch, model.theta_hat
        alpha, reg_bias = model.config.weight_decay, model.config.regularize_bias
    else:
        arch, theta, alpha, reg_bias = model
    theta = np.asarray(theta, dtype=float)
    X = np.asarray(X_train, dtype=float)
    y = np.asarray(y_train, dtype=float).reshape(-1)
    H = objective_hessian(arch, theta, X, y, alpha, reg_bias, max_dim=max_dim)
    eig = sym_eigendecomp(H)
    lam = damping_for(eig.eigenvalues, eigen_floor)
    h_damped = H + lam * np.eye(arch.n_params)
    try:
        factor = cholesky(h_damped)
    except NumericalError as exc:
        raise NumericalError(
            f"damped Hessian (lambda={lam:g}) failed to factorize; eigensolver and "
            "factorization disagree"
        ) from exc
    L = loss_gradient_matrix(arch, theta, X, y)
    A = factor.solve(L)
    return AuditContext(arch, theta, X, y, L, eig, lam, factor, A)


def _check_b(b: int) -> None:
    if b < 2:
        raise InputError("ensemble size must be at least 2")


def rue_parameters(ctx: AuditContext, weights: np.ndarray) -> np.ndarray:
    """Newton-resampled parameters ``theta - A (w - 1)`` for each row of ``weights``."""
    W = np.atleast_2d(np.asarray(weights, dtype=float))
    return ctx.theta_hat[None, :] - (W - 1.0) @ ctx.A.T


def rue_ensemble(
    ctx: AuditContext, X_test, b: int = DEFAULT_ENSEMBLE_SIZE, rng=None
) -> EnsemblePredictions:
    _check_b(b)
    W = multinomial_sample(ctx.n, as_generator(rng), size=b)
    thetas = rue_parameters(ctx, W)
    return EnsemblePredictions(predict_ensemble(ctx.arch, thetas, X_test), "rue")


def rue_score(Y: EnsemblePredictions | np.ndarray) -> np.ndarray:
    """Unbiased column-wise variance of an ensemble."""
    values = Y.values if isinstance(Y, EnsemblePredictions) else np.asarray(Y, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2:
        raise InputError("need at least two ensemble members")
    return values.var(axis=0, ddof=1)


def rue_std(Y: EnsemblePredictions | np.ndarray) -> np.ndarray:
    return np.sqrt(rue_score(Y))


def _grads(ctx: AuditContext, X) -> np.ndarray:
    return prediction_gradients(ctx.arch, ctx.theta_hat, X)


def rue_kernel_matrix(ctx: AuditContext, X1, X2=None) -> np.ndarray:
    """``[g(x1)^T H_damped^{-1} g(x2)]^2`` for all pairs of rows.

    With ``X2`` omitted (or the same object as ``X1``) the Gram matrix of
    ``X1`` is returned, symmetrized so that it is exactly symmetric.
    """
    G1 = _grads(ctx, X1)
    if X2 is None or X2 is X1:
        M = G1 @ ctx.factor.solve(G1.T)
        return (0.5 * (M + M.T)) ** 2
    return (G1 @ ctx.factor.solve(_grads(ctx, X2).T)) ** 2


def rue_kernel(ctx: AuditContext, x1, x2) -> float:
    x1 = np.asarray(x1, dtype=float).reshape(1, -1)
    x2 = np.asarray(x2, dtype=float).reshape(1, -1)
    return float(rue_kernel_matrix(ctx, x1, x2)[0, 0])


def rue_score_approx(ctx: AuditContext, X) -> np.ndarray:
    """Kernel-smoothed squared training residuals, ``sum_i r_i^2 k(x, x_i)``."""
    r = ctx.train_residuals()
    return rue_kernel_matrix(ctx, X, ctx.X_train) @ (r * r)


def sandwich_variance(ctx: AuditContext, X) -> np.ndarray:
    """``g^T H^{-1} L L^T H^{-1} g``, evaluated as ``||A^T g||^2``."""
    GA = _grads(ctx, X) @ ctx.A
    return np.einsum("mn,mn->m", GA, GA)


def resampled_covariance_variance(ctx: AuditContext, X, weight_cov: np.ndarray) -> np.ndarray:
    """Linearized prediction variance ``g^T A Cov(w) A^T g`` for a given weight covariance."""
    GA = _grads(ctx, X) @ ctx.A
    return np.einsum("mn,nk,mk->m", GA, weight_cov, GA)


def laplace_parameters(ctx: AuditContext, b: int, rng=None) -> np.ndarray:
    """Draws from ``Normal(theta_hat, H_damped^{-1})``, shape ``(b, d)``."""
    z = as_generator(rng).standard_normal((ctx.d, b))
    return ctx.theta_hat[None, :] + ctx.factor.inverse_sqrt_apply(z).T


def laplace_ensemble(
    ctx: AuditContext, X_test, b: int = DEFAULT_ENSEMBLE_SIZE, rng=None
) -> EnsemblePredictions:
    _check_b(b)
    thetas = laplace_parameters(ctx, b, rng)
    return EnsemblePredictions(predict_ensemble(ctx.arch, thetas, X_test), "laplace")


def laplace_score_closed(ctx: AuditContext, X) -> np.ndarray:
    """Linearized Laplace predictive variance ``g^T H_damped^{-1} g``."""
    G = _grads(ctx, X)
    return np.einsum("md,dm->m", G, ctx.factor.solve(G.T))


def bootstrap_sgd_parameters(
    theta_hat: np.ndarray, L: np.ndarray, weights: np.ndarray, eta: float, centered: bool = False
) -> np.ndarray:
    W = np.atleast_2d(np.asarray(weights, dtype=float))
    if centered:
        W = W - 1.0
    return np.asarray(theta_hat)[None, :] - eta * W @ L.T


def bootstrap_sgd_ensemble(
    arch: MlpArchitecture,
    theta_hat: np.ndarray,
    L: np.ndarray,
    X_test,
    b: int = DEFAULT_ENSEMBLE_SIZE,
    eta: float = BOOTSTRAP_SGD_STEP,
    rng=None,
    centered: bool = False,
) -> EnsemblePredictions:
    """One gradient step ``theta - eta L w`` per bootstrap weight draw.

    ``centered=True`` uses ``w - 1`` instead of ``w``.
    """
    _check_b(b)
    W = multinomial_sample(L.shape[1], as_generator(rng), size=b)
    thetas = bootstrap_sgd_parameters(theta_hat, L, W, eta, centered)
    return EnsemblePredictions(predict_ensemble(arch, thetas, X_test), "bootstrap-sgd")


def default_bandwidth_grid() -> np.ndarray:
    return np.logspace(-2, 1, 20)


def kde_log_density(X_train, X, bandwidth: float) -> np.ndarray:
    """Log density of an isotropic Gaussian KDE at each row of ``X``."""
    if not bandwidth > 0:
        raise InputError("bandwidth must be positive")
    Xt = np.atleast_2d(np.asarray(X_train, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, p = Xt.shape
    sq = (
        np.sum(X * X, axis=1)[:, None]
        - 2.0 * X @ Xt.T
        + np.sum(Xt * Xt, axis=1)[None, :]
    )
    sq = np.maximum(sq, 0.0)
    log_norm = -0.5 * p * np.log(2 * np.pi * bandwidth**2) - np.log(n)
    return logsumexp(-sq / (2 * bandwidth**2), axis=1) + log_norm


def kde_score(X_train, X, bandwidth: float) -> np.ndarray:
    """Negative KDE density; higher means fewer nearby training inputs."""
    return -np.exp(kde_log_density(X_train, X, bandwidth))


def kde_bandwidth_cv(
    X_train,
    folds: int = 5,
    grid: Sequence[float] | None = None,
    seed: int | np.random.Generator | None = 0,
) -> float:
    """Grid bandwidth with the highest mean held-out log density.

    Folds come from a seeded permutation; ties go to the smallest bandwidth.
    """
    X = np.atleast_2d(np.asarray(X_train, dtype=float))
    n = X.shape[0]
    grid = np.asarray(default_bandwidth_grid() if grid is None else grid, dtype=float)
    if grid.size == 0:
        raise InputError("bandwidth grid is empty")
    if n < folds or folds < 2:
        raise InputError(f"need at least {max(folds, 2)} training rows for {folds}-fold CV")
    perm = as_generator(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % folds
    scores = np.empty(grid.size)
    for k, h in enumerate(grid):
        total = 0.0
        for f in range(folds):
            held = assignment == f
            total += kde_log_density(X[~held], X[held], h).sum()
        scores[k] = total / n
    if not np.any(np.isfinite(scores)):
        raise NumericalError("every bandwidth gives -inf held-out log density")
    best = np.nanmax(np.where(np.isfinite(scores), scores, -np.inf))
    candidates = grid[scores == best]
    return float(candidates.min())


def null_scores(m: int, rng=None) -> np.ndarray:
    """Scores independent of everything; a calibration baseline for AUC."""
    return as_generator(rng).uniform(size=m)


def score_method(
    ctx: AuditContext,
    X_test,
    method: str,
    b: int = DEFAULT_ENSEMBLE_SIZE,
    rng=None,
    bandwidth: float | None = None,
    kde_seed: int | None = 0,
) -> np.ndarray:
    """Uncertainty score for every test row under the named method.

    Variance-type methods return a variance of ``f(x)`` in model units; the
    KDE score is a negative density.
    """
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    if method == "rue":
        return rue_score(rue_ensemble(ctx, X_test, b, rng))
    if method == "laplace":
        return rue_score(laplace_ensemble(ctx, X_test, b, rng))
    if method == "bootstrap-sgd":
        return rue_score(bootstrap_sgd_ensemble(ctx.arch, ctx.theta_hat, ctx.L, X_test, b, rng=rng))
    if method == "rue-approx":
        return rue_score_approx(ctx, X_test)
    if method == "sandwich":
        return sandwich_variance(ctx, X_test)
    if method == "laplace-closed":
        return laplace_score_closed(ctx, X_test)
    if method == "kde":
        h = bandwidth if bandwidth is not None else kde_bandwidth_cv(ctx.X_train, seed=kde_seed)
        return kde_score(ctx.X_train, X_test, h)
    if method == "null":
        return null_scores(X_test.shape[0], rng)
    raise InputError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


SCORE_COLUMNS = ("test_index", "method", "score", "base_prediction")


def write_scores_csv(path, method: str, scores, base_predictions, append: bool = False) -> None:
    path = Path(path)
    write_header = not append or not path.exists() or path.stat().st_size == 0
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if write_header:
            w.writerow(SCORE_COLUMNS)
        for i, (s, f) in enumerate(zip(scores, base_predictions)):
            w.writerow([i, method, repr(float(s)), repr(float(f))])


def read_scores_csv(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Map method -> (scores, base_predictions), ordered by test_index."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"scores file not found: {path}")
    rows: dict[str, list[tuple[int, float, float]]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SCORE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: missing column(s) {sorted(missing)}")
        for row in reader:
            rows.setdefault(row["method"], []).append(
                (int(row["test_index"]), float(row["score"]), float(row["base_prediction"]))
            )
    out = {}
    for method, items in rows.items():
        items.sort()
        out[method] = (np.array([s for _, s, _ in items]), np.array([f for _, _, f in items]))
    return out


def save_context(ctx: AuditContext, path) -> None:
    """Binary dump of the frozen audit state (``.npz``)."""
    np.savez(
        path,
        theta_hat=ctx.theta_hat,
        L=ctx.L,
        A=ctx.A,
        cholesky_lower=ctx.factor.lower,
        damping=np.array(ctx.damping),
        eigenvalues=ctx.hessian_eig.eigenvalues,
        eigenvectors=ctx.hessian_eig.eigenvectors,
    )
