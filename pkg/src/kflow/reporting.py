"""Delimited-text outputs: learning curves, samples, 2-D histograms.

Every file starts with a ``# kflow-<kind> v1`` line, optionally followed by
``# key: value`` provenance lines, then a CSV body.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CURVE_HEADER = "iteration,split,nll,lr,elapsed_s"


def _preamble(kind: str, meta: dict | None) -> list[str]:
    lines = [f"# kflow-{kind} v1"]
    for k, v in (meta or {}).items():
        lines.append(f"# {k}: {json.dumps(v, sort_keys=True)}")
    return lines


def read_meta(path) -> dict:
    """The ``# key: value`` provenance lines of any kflow text output."""
    meta = {}
    for line in Path(path).read_text().splitlines():
        if not line.startswith("#"):
            break
        key, sep, value = line[2:].partition(": ")
        if sep:
            meta[key] = json.loads(value)
    return meta


def _write(path, lines) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_curve(path, records, meta=None) -> Path:
    lines = _preamble("curve", meta) + [CURVE_HEADER]
    lines += [f"{r.iteration},{r.split},{r.nll!r},{r.lr!r},{r.elapsed:.3f}" for r in records]
    return _write(path, lines)


def read_curve(path) -> list[tuple]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line == CURVE_HEADER or not line:
            continue
        it, split, nll, lr, el = line.split(",")
        out.append((int(it), split, float(nll), float(lr), float(el)))
    return out


def write_samples(path, x, meta=None) -> Path:
    x = np.asarray(x, dtype=np.float64)
    dim = x.shape[1] if x.ndim == 2 else 0
    lines = _preamble("samples", meta) + [",".join(f"x{j}" for j in range(dim))]
    lines += [",".join(repr(float(v)) for v in row) for row in x]
    return _write(path, lines)


def hist2d_counts(x, bins: int, lo: float, hi: float) -> np.ndarray:
    """``bins x bins`` counts over ``[lo, hi]^2``; row = x-bin, column = y-bin.

    Bins are half-open except the last, which includes ``hi``; points
    outside the square are dropped.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"hist2d needs 2-D points, got shape {x.shape}")
    counts, _, _ = np.histogram2d(x[:, 0], x[:, 1], bins=bins, range=[[lo, hi], [lo, hi]])
    return counts.astype(np.int64)


def write_hist2d(path, counts, lo, hi, meta=None) -> Path:
    bins = counts.shape[0]
    meta = {"bins": bins, "range": [lo, hi], "layout": "row=x bin, column=y bin", **(meta or {})}
    lines = _preamble("hist2d", meta)
    lines += [",".join(str(int(c)) for c in row) for row in counts]
    return _write(path, lines)


def read_hist2d(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    return np.asarray([[int(c) for c in r.split(",")] for r in rows], dtype=np.int64)
