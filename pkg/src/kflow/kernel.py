"""Squared exponential kernel, k(x, y) = exp(-gamma * ||x - y||^2).

Distances are always accumulated as sum((x_i - y_i)^2); the
||x||^2 + ||y||^2 - 2<x, y> expansion cancels badly for near-duplicate
points and is deliberately not used.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericError


@dataclass(frozen=True)
class KernelParams:
    gamma: float

    def __post_init__(self):
        g = float(self.gamma)
        if not math.isfinite(g) or g <= 0.0:
            raise ValueError(f"gamma must be positive and finite, got {self.gamma!r}")
        object.__setattr__(self, "gamma", g)


def _as_params(params) -> KernelParams:
    return params if isinstance(params, KernelParams) else KernelParams(params)


def rbf_eval(x, y, params) -> float:
    """Kernel value between two vectors."""
    gamma = _as_params(params).gamma
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise NumericError("rbf_eval received non-finite input")
    diff = x - y
    return math.exp(-gamma * float(np.sum(diff * diff)))


def sq_dist_matrix(U, W):
    """Pairwise squared distances, shape (n, N). Works on numpy or torch."""
    diff = U[:, None, :] - W[None, :, :]
    return (diff * diff).sum(-1)


def kernel_cross_matrix(U, W, params):
    """Kernel matrix with entry (i, m) = k(U_i, W_m).

    Accepts numpy arrays or torch tensors and returns the same kind; the
    torch path is differentiable in both arguments.
    """
    gamma = _as_params(params).gamma
    if U.ndim != 2 or W.ndim != 2:
        raise ValueError("U and W must be 2-D")
    if U.shape[1] != W.shape[1]:
        raise ValueError(f"column mismatch: U has {U.shape[1]}, W has {W.shape[1]}")
    if isinstance(U, torch.Tensor):
        return torch.exp(-gamma * sq_dist_matrix(U, W))
    U = np.asarray(U, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    return np.exp(-gamma * sq_dist_matrix(U, W))
