"""Seeded minibatch Adam training and model (de)serialization."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import Standardization
from .errors import InputError, TrainingDivergedError
from .model import MlpArchitecture, objective, objective_gradient, predict

MODEL_FORMAT = "rue-audit-model"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weight_decay: float = 1.0
    regularize_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")
        if not (self.learning_rate > 0 and self.adam_epsilon > 0):
            raise InputError("learning rate and epsilon must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise InputError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InputError("weight_decay must be non-negative")


@dataclass(frozen=True)
class TrainedModel:
    arch: MlpArchitecture
    theta_hat: np.ndarray
    config: TrainConfig
    residual_variance: float
    stats: Standardization | None = None
    loss_trace: tuple[float, ...] = field(default=(), compare=False)

    def predict(self, X) -> np.ndarray:
        return predict(self.arch, self.theta_hat, X)


class Adam:
    """Bias-corrected Adam on a flat parameter vector."""

    def __init__(self, dim: int, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def init_params(arch: MlpArchitecture, rng: np.random.Generator) -> np.ndarray:
    """Zero biases; weights uniform on +-1/sqrt(fan_in)."""
    p, h = arch.input_dim, arch.hidden_width
    if arch.linear:
        return arch.pack(rng.uniform(-1, 1, p) / math.sqrt(p), 0.0)
    w1 = rng.uniform(-1, 1, (h, p)) / math.sqrt(p)
    w2 = rng.uniform(-1, 1, h) / math.sqrt(h)
    return arch.pack(w1, np.zeros(h), w2, 0.0)


def residual_variance(arch: MlpArchitecture, theta: np.ndarray, X, y) -> float:
    """Mean squared training residual, the observation-noise estimate."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size == 0:
        raise InputError("residual_variance needs at least one sample")
    r = y - predict(arch, theta, X)
    return float(r @ r / y.size)


def train(
    arch: MlpArchitecture,
    X,
    y,
    config: TrainConfig = TrainConfig(),
    stats: Standardization | None = None,
) -> TrainedModel:
    """Minimize the summed objective with minibatch Adam.

    Each minibatch carries ``batch/n`` of the penalty so one epoch sees the
    full regularizer once.  The final partial batch is kept.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.size
    if n == 0:
        raise InputError("cannot train on an empty dataset")
    init_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(2)
    theta = init_params(arch, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    opt = Adam(arch.n_params, config.learning_rate, config.adam_beta1, config.adam_beta2,
               config.adam_epsilon)
    alpha, reg_bias = config.weight_decay, config.regularize_bias

    trace = []
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            grad = objective_gradient(arch, theta, X[idx], y[idx], alpha, reg_bias,
                                      penalty_scale=idx.size / n)
            theta = opt.step(theta, grad)
        loss = objective(arch, theta, X, y, alpha, reg_bias)
        if not math.isfinite(loss) or not np.all(np.isfinite(theta)):
            raise TrainingDivergedError(f"non-finite objective at epoch {epoch + 1}")
        trace.append(loss)

    return TrainedModel(
        arch=arch,
        theta_hat=theta,
        config=config,
        residual_variance=residual_variance(arch, theta, X, y),
        stats=stats,
        loss_trace=tuple(trace),
    )


def model_to_dict(model: TrainedModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "tool_version": __version__,
        "layout": model.arch.layout,
        "arch": asdict(model.arch),
        "config": asdict(model.config),
        "residual_variance": model.residual_variance,
        "stats": model.stats.to_dict() if model.stats is not None else None,
        "theta_hat": model.theta_hat.tolist(),
    }


def model_from_dict(d: dict) -> TrainedModel:
    if d.get("format") != MODEL_FORMAT:
        raise InputError("not a model artifact")
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise InputError(f"unsupported model format version {d.get('format_version')}")
    arch = MlpArchitecture(**d["arch"])
    if d.get("layout") != arch.layout:
        raise InputError(f"parameter layout {d.get('layout')!r} does not match {arch.layout!r}")
    theta = np.asarray(d["theta_hat"], dtype=float)
    if theta.shape != (arch.n_params,) or not np.all(np.isfinite(theta)):
        raise InputError("model parameters are malformed")
    stats = Standardization.from_dict(d["stats"]) if d.get("stats") else None
    return TrainedModel(arch, theta, TrainConfig(**d["config"]), float(d["residual_variance"]), stats)


def save_model(model: TrainedModel, path: str | Path) -> None:
    # json writes floats with repr(), so parameters round-trip exactly
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path: str | Path) -> TrainedModel:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"model file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON") from exc
    return model_from_dict(d)
