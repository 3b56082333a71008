"""Error-detection AUC sweeps, Gaussian predictive NLL and the split benchmark."""
from __future__ import annotations

import csv
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from . import __version__
from .audit import (
    CLOSED_FORM_METHODS,
    ENSEMBLE_METHODS,
    build_audit_context,
    kde_bandwidth_cv,
    score_method,
)
from .data import DatasetMatrix, split, standardize
from .errors import InputError, RueAuditError
from .model import MlpArchitecture
from .train import TrainConfig, TrainedModel, train

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = 50
DEFAULT_METHODS = ("rue", "laplace", "kde", "bootstrap-sgd")
VARIANCE_METHODS = ENSEMBLE_METHODS + CLOSED_FORM_METHODS


def auc(scores, labels) -> float:
    """Rank (Mann-Whitney) AUC with midranks; positives are ``labels == 1``.

    Equals P(score_pos > score_neg) + 0.5 P(score_pos == score_neg).
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise InputError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC needs both positive and negative labels")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pairwise(scores, labels) -> float:
    """O(n^2) reference AUC over all positive/negative pairs."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        raise InputError("AUC needs both positive and negative labels")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size))


@dataclass
class DetectionResult:
    """AUC per method at each error tolerance; NaN marks single-class tolerances."""

    thresholds: np.ndarray
    auc_by_method: dict[str, np.ndarray]
    split_id: int = 0

    def mean_auc(self, method: str) -> float:
        vals = self.auc_by_method[method]
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else math.nan


def threshold_grid(abs_errors, K: int = DEFAULT_THRESHOLDS) -> np.ndarray:
    if K < 2:
        raise InputError("need at least two thresholds")
    lo, hi = np.percentile(np.asarray(abs_errors, dtype=float), [5, 95])
    return np.linspace(lo, hi, K)


def detection_sweep(
    abs_errors,
    scores_by_method: Mapping[str, np.ndarray],
    K: int = DEFAULT_THRESHOLDS,
    split_id: int = 0,
    thresholds: Sequence[float] | None = None,
) -> DetectionResult:
    """AUC of each score at detecting ``|error| > tau`` across tolerances.

    By default ``tau`` takes ``K`` evenly spaced values between the 5th and
    95th percentile of the absolute errors.
    """
    errs = np.asarray(abs_errors, dtype=float).reshape(-1)
    if errs.size == 0:
        raise InputError("no errors to sweep")
    taus = threshold_grid(errs, K) if thresholds is None else np.asarray(thresholds, dtype=float)
    out = {}
    for method, scores in scores_by_method.items():
        scores = np.asarray(scores, dtype=float).reshape(-1)
        if scores.size != errs.size:
            raise InputError(f"{method}: {scores.size} scores for {errs.size} errors")
        vals = np.full(taus.size, np.nan)
        for k, tau in enumerate(taus):
            labels = errs > tau
            if 0 < labels.sum() < labels.size:
                vals[k] = auc(scores, labels)
        out[method] = vals
    return DetectionResult(taus, out, split_id)


@dataclass(frozen=True)
class PredictiveGaussian:
    mean: np.ndarray
    variance: np.ndarray


def make_predictive(
    model: TrainedModel, X, score_variance, stats=None
) -> PredictiveGaussian:
    """``N(f(x), sigma^2(x) + nu^2)`` mapped back to original target units.

    ``X`` and ``score_variance`` are in model (standardized) units.
    """
    s2 = np.asarray(score_variance, dtype=float)
    if np.any(s2 < 0):
        raise InputError("variance scores must be non-negative")
    stats = stats if stats is not None else model.stats
    mean = model.predict(X)
    var = s2 + model.residual_variance
    if stats is not None:
        mean = stats.inverse_targets(mean)
        var = var * stats.y_std**2
    return PredictiveGaussian(np.asarray(mean), np.asarray(var))


def predictive_nll(pred: PredictiveGaussian, y) -> np.ndarray:
    """Pointwise Gaussian negative log likelihood."""
    v = np.asarray(pred.variance, dtype=float)
    if np.any(~(v > 0)):
        raise InputError("predictive variance must be positive")
    r = np.asarray(y, dtype=float) - pred.mean
    return 0.5 * np.log(2 * np.pi * v) + r * r / (2 * v)


def gaussian_interval(pred: PredictiveGaussian, level: float = 0.9):
    half = norm.ppf(0.5 + level / 2) * np.sqrt(pred.variance)
    return pred.mean - half, pred.mean + half


@dataclass
class SplitResult:
    split_id: int
    n_train: int
    n_test: int
    thresholds: list[float] = field(default_factory=list)
    auc_by_method: dict[str, list[float]] = field(default_factory=dict)
    auc_at_median: dict[str, float] = field(default_factory=dict)
    mean_nll: dict[str, float] = field(default_factory=dict)
    rmse: float = math.nan
    residual_variance: float = math.nan
    damping: float = math.nan
    kde_bandwidth: float = math.nan
    error: str | None = None

    def detection(self) -> DetectionResult:
        return DetectionResult(
            np.asarray(self.thresholds),
            {k: np.asarray(v, dtype=float) for k, v in self.auc_by_method.items()},
            self.split_id,
        )


def _mean_se(values) -> tuple[float, float]:
    vals = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    if vals.size == 0:
        return math.nan, math.nan
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else math.nan
    return float(vals.mean()), se


@dataclass
class BenchmarkReport:
    dataset: str
    methods: list[str]
    splits: list[SplitResult]
    config: dict
    seed: int
    settings: dict = field(default_factory=dict)

    def summary(self) -> dict:
        ok = sorted((s for s in self.splits if s.error is None), key=lambda s: s.split_id)
        out = {}
        for m in self.methods:
            mean_auc = [s.detection().mean_auc(m) for s in ok]
            entry = {
                "mean_auc": _mean_se(mean_auc),
                "auc_at_median": _mean_se([s.auc_at_median.get(m) for s in ok]),
            }
            if m in VARIANCE_METHODS:
                entry["mean_nll"] = _mean_se([s.mean_nll.get(m) for s in ok])
            out[m] = {k: {"mean": v[0], "se": v[1]} for k, v in entry.items()}
        return out

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "methods": list(self.methods),
            "seed": self.seed,
            "config": self.config,
            "settings": self.settings,
            "tool_version": __version__,
            "n_splits": len(self.splits),
            "n_failed": sum(s.error is not None for s in self.splits),
            "summary": self.summary(),
            "splits": [asdict(s) for s in self.splits],
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=1, allow_nan=False) + "\n"

    def write(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": out_dir / "report.json",
            "curves": out_dir / "curves.csv",
            "nll": out_dir / "nll.csv",
        }
        paths["report"].write_text(self.to_json())
        with paths["curves"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "split", "method", "tau", "auc"])
            for s in self.splits:
                for m, vals in s.auc_by_method.items():
                    for tau, a in zip(s.thresholds, vals):
                        w.writerow([self.dataset, s.split_id, m, repr(tau), _csv_num(a)])
        with paths["nll"].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset", "split", "method", "mean_nll"])
            for s in self.splits:
                for m, v in s.mean_nll.items():
                    w.writerow([self.dataset, s.split_id, m, _csv_num(v)])
        return paths


def _csv_num(v) -> str:
    return "" if v is None or not np.isfinite(v) else repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


SplitSource = Callable[[int], tuple[DatasetMatrix, DatasetMatrix]]


def _split_seeds(master: int, n_splits: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(master).spawn(n_splits)


def run_split(
    train_raw: DatasetMatrix,
    test_raw: DatasetMatrix,
    split_id: int,
    seq: np.random.SeedSequence,
    methods: Sequence[str],
    config: TrainConfig,
    hidden_width: int,
    ensemble_size: int,
    K: int,
) -> SplitResult:
    train_seq, *method_seqs = seq.spawn(1 + len(methods))
    tr, te, stats = standardize(train_raw, test_raw)
    cfg = TrainConfig(**{**asdict(config), "seed": int(train_seq.generate_state(1)[0])})
    arch = MlpArchitecture(tr.p, hidden_width)
    model = train(arch, tr.inputs, tr.targets, cfg, stats)
    ctx = build_audit_context(model, tr.inputs, tr.targets)

    pred_orig = stats.inverse_targets(model.predict(te.inputs))
    abs_err = np.abs(test_raw.targets - pred_orig)
    res = SplitResult(split_id, tr.n, te.n, damping=ctx.damping,
                      residual_variance=model.residual_variance)
    res.rmse = float(np.sqrt(np.mean(abs_err**2)))

    scores = {}
    for method, mseq in zip(methods, method_seqs):
        rng = np.random.default_rng(mseq)
        kw = {}
        if method == "kde":
            res.kde_bandwidth = kde_bandwidth_cv(tr.inputs, seed=rng)
            kw["bandwidth"] = res.kde_bandwidth
        scores[method] = score_method(ctx, te.inputs, method, ensemble_size, rng, **kw)
        if method in VARIANCE_METHODS:
            pred = make_predictive(model, te.inputs, scores[method], stats)
            res.mean_nll[method] = float(predictive_nll(pred, test_raw.targets).mean())

    det = detection_sweep(abs_err, scores, K, split_id)
    res.thresholds = det.thresholds.tolist()
    res.auc_by_method = {m: v.tolist() for m, v in det.auc_by_method.items()}
    med = detection_sweep(abs_err, scores, split_id=split_id, thresholds=[np.median(abs_err)])
    res.auc_at_median = {m: float(v[0]) for m, v in med.auc_by_method.items()}
    return res


def benchmark_run(
    source: DatasetMatrix | SplitSource,
    n_splits: int = 20,
    train_spec: float | int = 0.9,
    config: TrainConfig = TrainConfig(),
    methods: Sequence[str] = DEFAULT_METHODS,
    hidden_width: int = 50,
    ensemble_size: int = 100,
    seed: int = 0,
    K: int = DEFAULT_THRESHOLDS,
    name: str | None = None,
) -> BenchmarkReport:
    """Split, standardize, train, audit and evaluate ``n_splits`` times.

    ``source`` is either a dataset (split uniformly by ``train_spec``) or a
    callable mapping a split seed to raw ``(train, test)`` sets.  Failures
    inside a split are recorded on that split and do not stop the run.
    """
    if n_splits < 1:
        raise InputError("n_splits must be >= 1")
    methods = list(methods)
    splits = []
    for i, seq in enumerate(_split_seeds(seed, n_splits)):
        split_seq, run_seq = seq.spawn(2)
        try:
            if isinstance(source, DatasetMatrix):
                train_raw, test_raw = split(source, train_spec, np.random.default_rng(split_seq))
            else:
                train_raw, test_raw = source(int(split_seq.generate_state(1)[0]))
            splits.append(run_split(train_raw, test_raw, i, run_seq, methods, config,
                                    hidden_width, ensemble_size, K))
        except (RueAuditError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.error("split %d failed: %s", i, exc)
            splits.append(SplitResult(i, 0, 0, error="".join(
                traceback.format_exception_only(type(exc), exc)).strip()))
    if isinstance(source, DatasetMatrix):
        name = name or source.source or "dataset"
    return BenchmarkReport(
        dataset=name or "synthetic",
        methods=methods,
        splits=splits,
        config=asdict(config),
        seed=seed,
        settings={
            "n_splits": n_splits,
            "train_spec": train_spec,
            "hidden_width": hidden_width,
            "ensemble_size": ensemble_size,
            "thresholds": K,
        },
    )
