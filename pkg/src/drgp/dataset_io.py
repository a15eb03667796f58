"""Loading, normalisation, splitting and synthetic generation of input/output series."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

# name: (N, n_train, n_test, Q_x)
BENCHMARKS = {
    "drive": (500, 250, 250, 1),
    "dryer": (1000, 500, 500, 1),
    "ballbeam": (1000, 500, 500, 1),
    "actuator": (1024, 512, 512, 2),
    "damper": (3499, 2000, 1499, 1),
    "power_load": (9518, 7139, 2379, 11),
    "emission": (12500, 10000, 2500, 6),
}

TOY_KINDS = ("linear_narx", "sine_drive", "identity")


@dataclass
class Normalization:
    """Per-column affine maps ``(v - mean) / scale`` for the inputs and the output.

    ``mode="sd"`` divides by the standard deviation, ``"var"`` by the
    variance; statistics come from the training split only.
    """

    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    mode: str = "sd"

    def apply_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale

    def apply_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_scale

    def invert_x(self, X):
        return np.asarray(X, dtype=float) * self.x_scale + self.x_mean

    def invert_y(self, y):
        return np.asarray(y, dtype=float) * self.y_scale + self.y_mean

    def invert_y_moments(self, mean, var):
        return self.invert_y(mean), np.asarray(var, dtype=float) * self.y_scale**2

    def to_dict(self) -> dict:
        return {
            "x_mean": np.asarray(self.x_mean).tolist(),
            "x_scale": np.asarray(self.x_scale).tolist(),
            "y_mean": float(self.y_mean),
            "y_scale": float(self.y_scale),
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["x_mean"]), np.asarray(d["x_scale"]), d["y_mean"], d["y_scale"], d["mode"])

    @classmethod
    def identity(cls, Q_x: int) -> "Normalization":
        return cls(np.zeros(Q_x), np.ones(Q_x), 0.0, 1.0, "none")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    split: tuple[int, int] | None = None
    normalization: Normalization | None = None
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}")
        if self.split is None:
            self.split = (self.N, 0)
        self.split = (int(self.split[0]), int(self.split[1]))
        if min(self.split) < 0 or sum(self.split) > self.N:
            raise ValueError(f"split {self.split} does not fit {self.N} rows")

    @property
    def N(self) -> int:
        return int(self.y.shape[0])

    @property
    def Q_x(self) -> int:
        return int(self.X.shape[1])

    @property
    def train(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.split[0]
        return self.X[:n], self.y[:n]

    @property
    def test(self) -> tuple[np.ndarray, np.ndarray]:
        n, m = self.split
        return self.X[n : n + m], self.y[n : n + m]


def load_csv(path, inputs, output, name: str | None = None, split=None) -> Dataset:
    """Read a headed CSV; ``inputs`` and ``output`` are column names or 0-based indices.

    Row order is preserved. For a known benchmark ``name`` the row count
    and input width are checked and the canonical split is applied.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    inputs = [inputs] if isinstance(inputs, (str, int)) else list(inputs)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]

    def col(key):
        if isinstance(key, int):
            if not 0 <= key < len(header):
                raise ValueError(f"{path}: column index {key} out of range")
            return key
        if key not in header:
            raise ValueError(f"{path}: column {key!r} not found in header {header}")
        return header.index(key)

    in_idx = [col(k) for k in inputs]
    out_idx = col(output)
    data = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell {cell!r} at row {r}, column {header[c]!r}") from None
            if not math.isfinite(v):
                raise ValueError(f"{path}: non-finite value at row {r}, column {header[c]!r}")
            data[r - 2, c] = v
    ds = Dataset(
        data[:, in_idx],
        data[:, out_idx],
        name or os.path.splitext(os.path.basename(path))[0],
        split,
        columns={"inputs": [header[i] for i in in_idx], "output": header[out_idx]},
    )
    key = (name or "").lower()
    if key in BENCHMARKS:
        N, n_tr, n_te, Q_x = BENCHMARKS[key]
        if ds.N != N or ds.Q_x != Q_x:
            raise ValueError(f"{name}: expected {N} rows and {Q_x} inputs, got {ds.N} rows and {ds.Q_x} inputs")
        if split is None:
            ds.split = (n_tr, n_te)
    return ds


def normalize(ds: Dataset, mode: str = "sd") -> tuple[Dataset, Normalization]:
    """Standardise every column with training-split statistics.

    ``mode="sd"`` gives ``(v - mean) / sd``; ``mode="var"`` gives
    ``(v - mean) / sd**2``; ``mode="none"`` records an identity map.
    """
    if ds.normalization is not None:
        raise ValueError("dataset is already normalised")
    if mode == "none":
        norm = Normalization.identity(ds.Q_x)
        return replace(ds, normalization=norm), norm
    if mode not in ("sd", "var"):
        raise ValueError("mode must be 'sd', 'var' or 'none'")
    Xtr, ytr = ds.train
    if Xtr.shape[0] < 2:
        raise ValueError("training split needs at least 2 rows")
    sx, sy = Xtr.std(axis=0), ytr.std()
    names = ds.columns.get("inputs", [f"x{i}" for i in range(ds.Q_x)])
    for i, s in enumerate(sx):
        if not s > 0:
            raise ValueError(f"input column {names[i]!r} has zero variance on the training split")
    if not sy > 0:
        raise ValueError("output column has zero variance on the training split")
    px = 1 if mode == "sd" else 2
    norm = Normalization(Xtr.mean(axis=0), sx**px, float(ytr.mean()), float(sy**px), mode)
    return replace(ds, X=norm.apply_x(ds.X), y=norm.apply_y(ds.y), normalization=norm), norm


def denormalize(ds: Dataset) -> Dataset:
    if ds.normalization is None:
        raise ValueError("dataset is not normalised")
    n = ds.normalization
    return replace(ds, X=n.invert_x(ds.X), y=n.invert_y(ds.y), normalization=None)


def downsample(ds: Dataset, stride: int) -> Dataset:
    """Keep rows ``0, stride, 2*stride, ...``; the split is dropped unless stride is 1."""
    if int(stride) != stride or stride < 1:
        raise ValueError("stride must be a positive integer")
    if stride == 1:
        return replace(ds)
    idx = np.arange(0, ds.N, stride)
    return replace(ds, X=ds.X[idx], y=ds.y[idx], split=None)


def make_toy(kind: str, N: int = 200, seed: int = 0, noise: float | None = None) -> Dataset:
    """Synthetic series with a first-half/second-half train/test split.

    ``linear_narx``: ``x ~ U[-1, 1]``, ``y_i = 0.8 y_{i-1} + x_{i-1} + e_i``.
    ``sine_drive``: ``x_i = sin(2 pi i / 25) + 0.5 sin(2 pi i / 7)``,
    ``y_i = 0.7 y_{i-1} + tanh(x_{i-1}) + e_i``.
    ``identity``: ``y_i = y_{i-1}`` with ``y_0 = 1`` and ``x = 0``.
    Noise ``e_i ~ N(0, noise^2)``, default 0.05 (0 for ``identity``);
    ``y_0 = 0`` for the first two kinds.
    """
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy kind {kind!r}; choose from {TOY_KINDS}")
    if N < 20:
        raise ValueError("toy series need N >= 20")
    rng = np.random.default_rng(seed)
    sd = (0.0 if kind == "identity" else 0.05) if noise is None else float(noise)
    i = np.arange(N)
    y = np.zeros(N)
    if kind == "linear_narx":
        x = rng.uniform(-1.0, 1.0, N)
        e = sd * rng.standard_normal(N)
        for k in range(1, N):
            y[k] = 0.8 * y[k - 1] + x[k - 1] + e[k]
    elif kind == "sine_drive":
        x = np.sin(2 * np.pi * i / 25) + 0.5 * np.sin(2 * np.pi * i / 7)
        e = sd * rng.standard_normal(N)
        for k in range(1, N):
            y[k] = 0.7 * y[k - 1] + np.tanh(x[k - 1]) + e[k]
    else:
        x = np.zeros(N)
        e = sd * rng.standard_normal(N)
        y[0] = 1.0
        for k in range(1, N):
            y[k] = y[k - 1] + e[k]
    return Dataset(x[:, None], y, kind, (N // 2, N - N // 2), columns={"inputs": ["x"], "output": "y"})


def write_csv(ds: Dataset, path):
    names = ds.columns.get("inputs", [f"x{i}" for i in range(ds.Q_x)])
    out = ds.columns.get("output", "y")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + [out])
        for xrow, yv in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in xrow] + [repr(float(yv))])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def manifest_entry(ds: Dataset, path=None) -> dict:
    entry = {"name": ds.name, "N": ds.N, "Q_x": ds.Q_x, "n_train": ds.split[0], "n_test": ds.split[1]}
    if path is not None:
        entry["file"] = os.path.basename(path)
        entry["sha256"] = sha256_file(path)
    return entry


def write_manifest(path, entries: list[dict]):
    with open(path, "w") as fh:
        json.dump({"datasets": entries}, fh, indent=1)
