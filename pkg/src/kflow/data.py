"""Toy generators, CSV ingestion, standardisation and low-data subsampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Dataset:
    """Standardised splits plus the train-split statistics used to standardise them."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    name: str = "data"
    source: str = "synthetic"

    @property
    def dim(self) -> int:
        return self.train.shape[1]

    @property
    def nll_offset(self) -> float:
        """Add to a standardised-space NLL to express it in raw data units."""
        return float(np.sum(np.log(self.std)))

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean


def from_raw_splits(train, val, test, name="data", source="synthetic") -> Dataset:
    """Standardise three raw splits using statistics of ``train`` only."""
    train, val, test = (np.asarray(a, dtype=np.float64) for a in (train, val, test))
    dims = {a.shape[1] for a in (train, val, test) if a.ndim == 2}
    if any(a.ndim != 2 for a in (train, val, test)) or len(dims) != 1:
        raise DataError("splits must be 2-D with the same number of columns")
    if train.shape[0] < 2:
        raise DataError("train split needs at least two rows")
    mean = train.mean(0)
    std = train.std(0)
    constant = np.flatnonzero(std == 0.0)
    if constant.size:
        raise DataError(f"column {int(constant[0]) + 1} is constant in the train split")
    return Dataset((train - mean) / std, (val - mean) / std, (test - mean) / std,
                   mean, std, name, source)


# -- toy generators ---------------------------------------------------------

def gen_moons(n: int, noise: float = 0.1, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """Two interleaved unit half-circles with isotropic Gaussian noise.

    Upper moon: ``(cos a, sin a)``; lower moon: ``(1 - cos a, 0.5 - sin a)``,
    ``a ~ U[0, pi]``. Points are shuffled; ``scale`` multiplies the result.
    """
    rng = np.random.default_rng(seed)
    n_up = n - n // 2
    a = rng.uniform(0.0, math.pi, size=n)
    pts = np.empty((n, 2))
    pts[:n_up, 0] = np.cos(a[:n_up])
    pts[:n_up, 1] = np.sin(a[:n_up])
    pts[n_up:, 0] = 1.0 - np.cos(a[n_up:])
    pts[n_up:, 1] = 0.5 - np.sin(a[n_up:])
    if noise:
        pts += noise * rng.standard_normal((n, 2))
    return scale * pts[rng.permutation(n)]


def gen_pinwheel(n: int, arms: int = 5, seed: int = 0, radial_std: float = 0.3,
                 tangential_std: float = 0.1, rate: float = 0.25,
                 scale: float = 1.0) -> np.ndarray:
    """Gaussian blobs at radius 1, rotated by ``rate * exp(radius)``.

    Arms are equally populated (up to one point) and equally spaced, so the
    distribution is invariant under rotation by ``2 pi / arms`` and its
    mean is the origin.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % arms
    feats = rng.standard_normal((n, 2)) * np.array([radial_std, tangential_std])
    feats[:, 0] += 1.0
    angles = 2.0 * math.pi * labels / arms + rate * np.exp(feats[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    pts = np.stack([feats[:, 0] * c - feats[:, 1] * s, feats[:, 0] * s + feats[:, 1] * c], axis=1)
    return scale * pts[rng.permutation(n)]


def gen_line(n: int, noise: float = 0.05, seed: int = 0) -> np.ndarray:
    """Points on ``y = x`` for ``x ~ U[-2, 2]``, both coordinates jittered."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=n)
    pts = np.stack([x, x], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


# Toy datasets placed at the scale customary for 2-D flow benchmarks.
TOY_GENERATORS = {
    "moons": lambda n, seed, **kw: gen_moons(n, seed=seed, **{"noise": 0.1, "scale": 2.0, **kw}),
    "pinwheel": lambda n, seed, **kw: gen_pinwheel(n, seed=seed, **{"scale": 2.0, **kw}),
    "line": lambda n, seed, **kw: gen_line(n, seed=seed, **kw),
}


def toy_dataset(name: str, n_train: int = 20000, n_val: int = 2000, n_test: int = 10000,
                seed: int = 0, **gen_kwargs) -> Dataset:
    """Independent draws for each split, seeded from ``seed``."""
    if name not in TOY_GENERATORS:
        raise DataError(f"unknown toy dataset {name!r}; choose from {sorted(TOY_GENERATORS)}")
    gen = TOY_GENERATORS[name]
    seeds = np.random.SeedSequence(seed).generate_state(3)
    splits = [gen(k, int(s), **gen_kwargs) for k, s in zip((n_train, n_val, n_test), seeds)]
    return from_raw_splits(*splits, name=name, source="synthetic")


# -- CSV ingestion ----------------------------------------------------------

def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def read_csv_matrix(path) -> np.ndarray:
    """Numeric CSV to a float matrix; a single non-numeric first row is a header."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    rows, linenos = [], []
    first = True
    with path.open(newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            row = next(csv.reader([line]))
            if first:
                first = False
                if not all(_is_number(c) for c in row):
                    continue
            vals = []
            for j, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: unparsable cell {cell!r} at row {lineno}, column {j + 1}") from None
            if rows and len(vals) != len(rows[0]):
                raise DataError(f"{path}: row {lineno} has {len(vals)} columns, expected {len(rows[0])}")
            rows.append(vals)
            linenos.append(lineno)
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(data).all():
        r, c = np.argwhere(~np.isfinite(data))[0]
        raise DataError(f"{path}: non-finite value at row {linenos[r]}, column {c + 1}")
    return data


def split_counts(n: int, fracs) -> tuple[int, int, int]:
    fracs = tuple(float(f) for f in fracs)
    if len(fracs) != 3 or any(f < 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fracs}")
    n_val = int(round(n * fracs[1]))
    n_test = int(round(n * fracs[2]))
    return n - n_val - n_test, n_val, n_test


def load_csv(path, split_fracs=(0.8, 0.1, 0.1), seed: int = 0, name: str | None = None) -> Dataset:
    data = read_csv_matrix(path)
    n_train, n_val, _ = split_counts(data.shape[0], split_fracs)
    order = np.random.default_rng(seed).permutation(data.shape[0])
    data = data[order]
    train, val, test = data[:n_train], data[n_train:n_train + n_val], data[n_train + n_val:]
    std = train.std(0)
    constant = np.flatnonzero(std == 0.0)
    if constant.size:
        raise DataError(f"{path}: column {int(constant[0]) + 1} is constant in the train split")
    return from_raw_splits(train, val, test, name=name or Path(path).stem, source="csv")


def subsample_train(dataset: Dataset, count: int, seed: int = 0) -> Dataset:
    """Keep ``count`` train rows and re-standardise every split on them."""
    n = dataset.train.shape[0]
    if not 2 <= count <= n:
        raise ValueError(f"count must be in [2, {n}], got {count}")
    idx = np.random.default_rng(seed).choice(n, size=count, replace=False)
    raw = [dataset.destandardize(dataset.train[idx]), dataset.destandardize(dataset.val),
           dataset.destandardize(dataset.test)]
    out = from_raw_splits(*raw, name=dataset.name, source=dataset.source)
    return replace(out, name=f"{dataset.name}-sub{count}")
