"""Dataset loading, splitting, standardization and synthetic generators."""
from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Standardization:
    """Per-column shift/scale fit on a training portion.

    ``keep`` lists the input columns that survived (constant columns are
    dropped because they cannot be scaled).
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float
    keep: np.ndarray

    def transform_inputs(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float)[:, self.keep] - self.x_mean) / self.x_std

    def transform_targets(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def inverse_targets(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.y_std + self.y_mean

    def inverse_inputs(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) * self.x_std + self.x_mean

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "keep": self.keep.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(
            x_mean=np.asarray(d["x_mean"], dtype=float),
            x_std=np.asarray(d["x_std"], dtype=float),
            y_mean=float(d["y_mean"]),
            y_std=float(d["y_std"]),
            keep=np.asarray(d["keep"], dtype=np.int64),
        )

    @classmethod
    def identity(cls, p: int) -> "Standardization":
        return cls(np.zeros(p), np.ones(p), 0.0, 1.0, np.arange(p))


@dataclass(frozen=True)
class DatasetMatrix:
    inputs: np.ndarray
    targets: np.ndarray
    columns: tuple[str, ...] = ()
    target_name: str = "y"
    stats: Standardization | None = None
    n_dropped: int = 0
    source: str = ""

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.shape[0]:
            raise InputError(f"{X.shape[0]} input rows but {y.shape[0]} targets")
        if X.shape[0] < 1:
            raise InputError("dataset is empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InputError("dataset contains non-finite values")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)
        if not self.columns:
            object.__setattr__(self, "columns", tuple(f"x{j}" for j in range(X.shape[1])))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def p(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "DatasetMatrix":
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])


def _split_line(line: str, delimiter: str | None) -> list[str]:
    if delimiter is None:
        delimiter = "," if "," in line else None
    if delimiter is None:
        return line.split()
    return [tok.strip() for tok in line.split(delimiter)]


def _parse_float(tok: str) -> float:
    v = float(tok)
    if not np.isfinite(v):
        raise ValueError(tok)
    return v


def load_csv(
    path: str | Path,
    target: str | int = -1,
    header: bool | None = None,
    delimiter: str | None = None,
) -> DatasetMatrix:
    """Read a delimited numeric table.

    ``delimiter=None`` accepts commas or runs of whitespace. ``header=None``
    auto-detects a header row (a first line that does not parse as numbers).
    Rows with unparseable or non-finite fields are dropped and counted.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"dataset file not found: {path}")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise InputError(f"{path}: no data rows")
    first = _split_line(lines[0], delimiter)
    if header is None:
        try:
            [_parse_float(t) for t in first]
            header = False
        except ValueError:
            header = True
    names = [t.strip().strip('"') for t in first] if header else [f"c{j}" for j in range(len(first))]
    body = lines[1:] if header else lines
    width = len(names)

    rows, dropped = [], 0
    for ln in body:
        toks = _split_line(ln, delimiter)
        try:
            if len(toks) != width:
                raise ValueError("width")
            rows.append([_parse_float(t) for t in toks])
        except ValueError:
            dropped += 1
    if dropped:
        log.warning("%s: dropped %d unparseable row(s)", path, dropped)
    if not rows:
        raise InputError(f"{path}: no numeric rows after filtering")
    if width < 2:
        raise InputError(f"{path}: need at least one input column and a target")
    table = np.asarray(rows, dtype=float)

    if isinstance(target, str) and not re.fullmatch(r"-?\d+", target):
        if target not in names:
            raise InputError(f"{path}: no column named {target!r}")
        t = names.index(target)
    else:
        t = int(target)
        if not -width <= t < width:
            raise InputError(f"{path}: target index {t} out of range")
        t %= width
    cols = [j for j in range(width) if j != t]
    return DatasetMatrix(
        inputs=table[:, cols],
        targets=table[:, t],
        columns=tuple(names[j] for j in cols),
        target_name=names[t],
        n_dropped=dropped,
        source=str(path),
    )


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def split(
    data: DatasetMatrix, spec: float | int, seed: int | np.random.Generator | None
) -> tuple[DatasetMatrix, DatasetMatrix]:
    """Seeded uniform train/test partition.

    A float in (0, 1) is a training fraction (rounded down); an int is an
    exact training count.
    """
    n = data.n
    if isinstance(spec, (int, np.integer)) and not isinstance(spec, bool):
        n_train = int(spec)
    elif isinstance(spec, float) and 0.0 < spec < 1.0:
        n_train = int(np.floor(spec * n + 1e-9))
    else:
        raise InputError(f"invalid split spec {spec!r}")
    if n_train < 2 or n_train >= n:
        raise InputError(f"split spec {spec!r} gives {n_train} training rows out of {n}")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    perm = rng.permutation(n)
    return data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))


def fit_standardization(train: DatasetMatrix) -> Standardization:
    X, y = train.inputs, train.targets
    x_mean, x_std = X.mean(axis=0), X.std(axis=0)
    keep = np.flatnonzero(x_std > 1e-12 * np.maximum(1.0, np.abs(x_mean)))
    if keep.size < X.shape[1]:
        gone = [train.columns[j] for j in range(X.shape[1]) if j not in set(keep.tolist())]
        log.warning("dropping constant input column(s): %s", ", ".join(gone))
    if keep.size == 0:
        raise InputError("all input columns are constant on the training portion")
    y_std = float(y.std())
    if not y_std > 0:
        raise InputError("training targets have zero variance")
    return Standardization(x_mean[keep], x_std[keep], float(y.mean()), y_std, keep)


def apply_standardization(data: DatasetMatrix, stats: Standardization) -> DatasetMatrix:
    return replace(
        data,
        inputs=stats.transform_inputs(data.inputs),
        targets=stats.transform_targets(data.targets),
        columns=tuple(data.columns[j] for j in stats.keep),
        stats=stats,
    )


def standardize(
    train: DatasetMatrix, test: DatasetMatrix | None = None
) -> tuple[DatasetMatrix, DatasetMatrix | None, Standardization]:
    """Zero-mean, unit-variance (population std) scaling from training rows only."""
    stats = fit_standardization(train)
    test_s = apply_standardization(test, stats) if test is not None else None
    return apply_standardization(train, stats), test_s, stats


def saturating_exp_mean(x, beta1: float, beta2: float):
    return beta1 * (1.0 - np.exp(-beta2 * np.asarray(x, dtype=float)))


def simulate_saturating_exp(
    beta1: float = 1.0,
    beta2: float = 1.0,
    noise_std: float = 0.1,
    n: int = 100,
    x_range: tuple[float, float] = (0.0, 5.0),
    seed: int | np.random.Generator | None = 0,
) -> DatasetMatrix:
    """1-D data ``y = beta1 * (1 - exp(-beta2 x)) + N(0, noise_std^2)``, ``x`` uniform."""
    lo, hi = x_range
    if n < 1 or noise_std < 0 or not hi >= lo:
        raise InputError("invalid simulation parameters")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    x = rng.uniform(lo, hi, size=n)
    y = saturating_exp_mean(x, beta1, beta2) + noise_std * rng.standard_normal(n)
    return DatasetMatrix(x[:, None], y, columns=("x",), source="simulated")


@dataclass(frozen=True)
class ExtrapolationTask:
    train: DatasetMatrix
    test: DatasetMatrix
    beta1: float
    beta2: float
    noise_std: float
    support: tuple[float, float] = field(default=(0.0, 5.0))

    def true_mean(self, x) -> np.ndarray:
        return saturating_exp_mean(x, self.beta1, self.beta2)


def simulate_extrapolation_task(
    seed: int | None = 0,
    n_train: int = 200,
    n_test: int = 400,
    beta1: float = 2.0,
    beta2: float = 0.5,
    noise_std: float = 0.1,
) -> ExtrapolationTask:
    """Training inputs on [0, 5]; test inputs on [0, 10], half outside the support."""
    ss = np.random.SeedSequence(seed)
    r_train, r_test = (np.random.default_rng(s) for s in ss.spawn(2))
    train = simulate_saturating_exp(beta1, beta2, noise_std, n_train, (0.0, 5.0), r_train)
    test = simulate_saturating_exp(beta1, beta2, noise_std, n_test, (0.0, 10.0), r_test)
    return ExtrapolationTask(train, test, beta1, beta2, noise_std)


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    path: str
    target: str
    n: int | None = None
    p: int | None = None
    train: str = ""


def read_manifest(path: str | Path) -> dict[str, ManifestEntry]:
    """Parse ``name path target [n p [train]]`` lines; ``#`` starts a comment.

    Relative paths resolve against the manifest's directory.  ``train`` is a
    split spec such as ``0.9`` or ``600``.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    out: dict[str, ManifestEntry] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) < 3:
            raise InputError(f"{path}:{lineno}: expected 'name path target [n p [train]]'")
        data_path = Path(toks[1])
        if not data_path.is_absolute():
            data_path = path.parent / data_path
        n = int(toks[3]) if len(toks) > 3 else None
        p = int(toks[4]) if len(toks) > 4 else None
        train = toks[5] if len(toks) > 5 else ""
        out[toks[0]] = ManifestEntry(toks[0], str(data_path), toks[2], n, p, train)
    return out


def parse_split_spec(text: str) -> float | int:
    return float(text) if "." in text else int(text)


def load_manifest_entry(entry: ManifestEntry) -> DatasetMatrix:
    data = load_csv(entry.path, target=entry.target)
    if entry.n is not None and data.n != entry.n:
        log.warning("%s: expected %d rows, found %d", entry.name, entry.n, data.n)
    if entry.p is not None and data.p != entry.p:
        log.warning("%s: expected %d inputs, found %d", entry.name, entry.p, data.p)
    return replace(data, source=entry.name)
