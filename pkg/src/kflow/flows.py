"""Invertible layers and the flow model.

Every layer maps a batch ``(B, D)`` to ``(y, logdet)`` in ``forward`` and
back in ``inverse``; rows are instances, columns are dimensions. The model
stacks, per block::

    ActNorm -> random permutation -> coupling -> reversal -> coupling

and uses a standard normal base distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import NumericError, StateError
from .kernel import KernelParams, sq_dist_matrix

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)
ACTNORM_STD_FLOOR = 1e-6


def split_size(dim: int) -> int:
    return dim // 2


def soft_clamp(s: torch.Tensor, c: float | None) -> torch.Tensor:
    if c is None:
        return s
    return c * torch.tanh(s / c)


def _check_finite(y: torch.Tensor, what: str) -> None:
    ok = torch.isfinite(y).all(dim=1)
    if not bool(ok.all()):
        rows = torch.nonzero(~ok).flatten().tolist()
        raise NumericError(f"{what}: non-finite output in batch rows {rows[:10]}", rows=rows)


class ActNorm(nn.Module):
    """Per-dimension affine map ``y = scale * x + bias``.

    The scale is stored as its logarithm so it can never reach zero.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.log_scale = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.register_buffer("initialized", torch.tensor(False))

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    def set_scale(self, scale, bias=None) -> None:
        scale = torch.as_tensor(scale, dtype=DTYPE)
        if not bool(torch.isfinite(scale).all()) or bool((scale <= 0).any()):
            raise ValueError("ActNorm scale must be positive and finite")
        with torch.no_grad():
            self.log_scale.copy_(torch.log(scale))
            if bias is not None:
                self.bias.copy_(torch.as_tensor(bias, dtype=DTYPE))
            self.initialized.fill_(True)

    @torch.no_grad()
    def initialize(self, x: torch.Tensor) -> None:
        """Whiten ``x``: afterwards ``forward(x)`` has zero mean, unit std."""
        mean = x.mean(0)
        std = x.std(0, unbiased=False).clamp_min(ACTNORM_STD_FLOOR)
        self.log_scale.copy_(-torch.log(std))
        self.bias.copy_(-mean / std)
        self.initialized.fill_(True)

    def _require_init(self):
        if not bool(self.initialized):
            raise StateError("ActNorm used before initialisation")

    def forward(self, x):
        self._require_init()
        y = x * torch.exp(self.log_scale) + self.bias
        logdet = self.log_scale.sum().expand(x.shape[0])
        return y, logdet

    def inverse(self, y):
        self._require_init()
        return (y - self.bias) * torch.exp(-self.log_scale)


class Permutation(nn.Module):
    """Fixed dimension permutation, ``y[:, j] = x[:, perm[j]]``."""

    def __init__(self, perm: Sequence[int], kind: str = "random"):
        super().__init__()
        perm = torch.as_tensor(np.asarray(perm), dtype=torch.long)
        n = perm.numel()
        if sorted(perm.tolist()) != list(range(n)):
            raise ValueError(f"not a permutation of 0..{n - 1}: {perm.tolist()}")
        if kind not in ("random", "reversal"):
            raise ValueError(f"unknown permutation kind {kind!r}")
        if kind == "reversal" and perm.tolist() != list(range(n - 1, -1, -1)):
            raise ValueError("reversal permutation must reverse the dimensions")
        self.kind = kind
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))

    @classmethod
    def reversal(cls, dim: int) -> "Permutation":
        return cls(list(range(dim - 1, -1, -1)), kind="reversal")

    def forward(self, x):
        if x.shape[1] != self.perm.numel():
            raise ValueError(f"expected {self.perm.numel()} columns, got {x.shape[1]}")
        return x[:, self.perm], x.new_zeros(x.shape[0])

    def inverse(self, y):
        if y.shape[1] != self.perm.numel():
            raise ValueError(f"expected {self.perm.numel()} columns, got {y.shape[1]}")
        return y[:, self.inv_perm]


class AuxiliaryPoints(nn.Module):
    """Learnable kernel centres living in the conditioning half-space."""

    def __init__(self, count: int, width: int, shared: bool = False, learnable: bool = True):
        super().__init__()
        if count < 1:
            raise ValueError("need at least one auxiliary point")
        self.shared = shared
        self.W = nn.Parameter(torch.zeros(count, width, dtype=DTYPE), requires_grad=learnable)

    @property
    def count(self) -> int:
        return self.W.shape[0]


class AffineCoupling(nn.Module):
    """Affine coupling on the split ``[x[:, :d], x[:, d:]]``.

    Subclasses provide ``raw_scale_shift(x1) -> (s_raw, t)``; the scale
    logits are soft-clamped to ``(-s_clamp, s_clamp)`` when a clamp is set.
    """

    def __init__(self, dim: int, s_clamp: float | None = 5.0):
        super().__init__()
        self.dim = dim
        self.d = split_size(dim)
        self.s_clamp = s_clamp

    def raw_scale_shift(self, x1):
        raise NotImplementedError

    def scale_shift(self, x1):
        s, t = self.raw_scale_shift(x1)
        return soft_clamp(s, self.s_clamp), t

    def forward(self, x):
        if x.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {x.shape[1]}")
        x1, x2 = x[:, : self.d], x[:, self.d :]
        s, t = self.scale_shift(x1)
        y = torch.cat([x1, x2 * torch.exp(s) + t], dim=1)
        _check_finite(y, type(self).__name__)
        return y, s.sum(1)

    def inverse(self, y):
        if y.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} columns, got {y.shape[1]}")
        y1, y2 = y[:, : self.d], y[:, self.d :]
        s, t = self.scale_shift(y1)
        x = torch.cat([y1, (y2 - t) * torch.exp(-s)], dim=1)
        _check_finite(x, type(self).__name__ + ".inverse")
        return x


class KernelCoupling(AffineCoupling):
    """Coupling whose scale and shift are ``K(x1, W) @ A.T``.

    ``W`` holds the auxiliary points (possibly shared with other layers);
    ``A_s`` and ``A_t`` have shape ``(D - d, N)`` and start at zero, so a
    fresh layer is the identity.
    """

    def __init__(self, dim: int, aux: AuxiliaryPoints, gamma: float,
                 s_clamp: float | None = 5.0):
        super().__init__(dim, s_clamp)
        if aux.W.shape[1] != self.d:
            raise ValueError(f"auxiliary points must have {self.d} columns")
        self.aux = aux
        self.kernel = KernelParams(gamma)
        n = aux.count
        self.A_s = nn.Parameter(torch.zeros(dim - self.d, n, dtype=DTYPE))
        self.A_t = nn.Parameter(torch.zeros(dim - self.d, n, dtype=DTYPE))

    @property
    def gamma(self) -> float:
        return self.kernel.gamma

    def raw_scale_shift(self, x1):
        K = torch.exp(-self.kernel.gamma * sq_dist_matrix(x1, self.aux.W))
        return K @ self.A_s.T, K @ self.A_t.T


class FlowModel(nn.Module):
    """Ordered stack of invertible layers over a standard normal base."""

    def __init__(self, dim: int, layers: Iterable[nn.Module], blocks: int = 0):
        super().__init__()
        self.dim = dim
        self.blocks = blocks
        self.layers = nn.ModuleList(layers)

    def forward(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected a (B, {self.dim}) batch, got {tuple(x.shape)}")
        logdet = x.new_zeros(x.shape[0])
        for layer in self.layers:
            x, ld = layer(x)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, z):
        z = torch.as_tensor(z, dtype=DTYPE)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected a (B, {self.dim}) batch, got {tuple(z.shape)}")
        for layer in reversed(self.layers):
            z = layer.inverse(z)
        return z

    def log_prob(self, x):
        z, logdet = self.forward(x)
        return -0.5 * self.dim * LOG_2PI - 0.5 * (z * z).sum(1) + logdet

    @torch.no_grad()
    def sample(self, seed: int, count: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(int(seed))
        z = torch.randn(count, self.dim, generator=gen, dtype=DTYPE)
        if count == 0:
            return z
        return self.inverse(z)

    def actnorms(self):
        return [m for m in self.layers if isinstance(m, ActNorm)]

    def couplings(self):
        return [m for m in self.layers if isinstance(m, AffineCoupling)]

    def permutations(self):
        return [m for m in self.layers if isinstance(m, Permutation)]

    @property
    def coupling_kind(self) -> str:
        cs = self.couplings()
        if not cs:
            return "none"
        return "kernel" if isinstance(cs[0], KernelCoupling) else "mlp"


def block_covers_all(perm: Sequence[int], dim: int) -> bool:
    """True when the two couplings of a block jointly transform every dimension.

    The first coupling transforms block-input dims ``perm[d:]``; after the
    reversal, the second transforms ``perm[:D - d]``.
    """
    if dim < 2:
        return True
    d = split_size(dim)
    perm = list(perm)
    return set(perm[d:]) | set(perm[: dim - d]) == set(range(dim))


def draw_block_permutations(dim: int, blocks: int, seed: int, max_tries: int = 100):
    rng = np.random.default_rng(seed)
    perms = []
    for _ in range(blocks):
        for _ in range(max_tries):
            p = rng.permutation(dim)
            if block_covers_all(p, dim):
                perms.append(p.tolist())
                break
        else:
            raise RuntimeError(f"no covering permutation found in {max_tries} draws")
    return perms


def assemble_blocks(dim: int, perms, make_coupling) -> list[nn.Module]:
    layers: list[nn.Module] = []
    for b, perm in enumerate(perms):
        if not block_covers_all(perm, dim):
            raise ValueError(f"permutation of block {b} leaves a dimension untouched")
        layers += [
            ActNorm(dim),
            Permutation(perm, "random"),
            make_coupling(2 * b),
            Permutation.reversal(dim),
            make_coupling(2 * b + 1),
        ]
    return layers


def build_kernel_flow(dim: int, blocks: int, aux_points: int, gamma: float | Sequence[float],
                      shared_aux: bool = False, s_clamp: float | None = 5.0, seed: int = 0,
                      freeze_aux: bool = False, permutations=None) -> FlowModel:
    """Kernel flow with ``blocks`` blocks (two couplings each).

    ``gamma`` may be a single value or one value per coupling layer.
    """
    if dim < 1 or blocks < 0:
        raise ValueError("dim must be >= 1 and blocks >= 0")
    n_layers = 2 * blocks
    gammas = [float(gamma)] * n_layers if np.isscalar(gamma) else [float(g) for g in gamma]
    if len(gammas) != n_layers:
        raise ValueError(f"need {n_layers} per-layer gammas, got {len(gammas)}")
    perms = permutations if permutations is not None else draw_block_permutations(dim, blocks, seed)
    d = split_size(dim)
    shared = AuxiliaryPoints(aux_points, d, shared=True, learnable=not freeze_aux) if shared_aux else None

    def make(i):
        aux = shared if shared is not None else AuxiliaryPoints(aux_points, d, learnable=not freeze_aux)
        return KernelCoupling(dim, aux, gammas[i], s_clamp)

    return FlowModel(dim, assemble_blocks(dim, perms, make), blocks)


@dataclass(frozen=True)
class ParamCount:
    coupling_weights: int
    aux_points: int
    actnorm: int

    @property
    def total(self) -> int:
        return self.coupling_weights + self.aux_points + self.actnorm

    def as_dict(self) -> dict:
        return {"coupling_weights": self.coupling_weights, "aux_points": self.aux_points,
                "actnorm": self.actnorm, "total": self.total}


def param_count(model: FlowModel) -> ParamCount:
    """Learnable scalars by group, computed from layer shapes.

    Per kernel coupling: ``2 N (D - d)`` weights; auxiliary points ``d N``
    per layer, or once when shared; ``2 D`` per ActNorm. MLP couplings
    count their full network under ``coupling_weights``.
    """
    dim = model.dim
    d = split_size(dim)
    weights = aux = 0
    seen_aux = set()
    for c in model.couplings():
        if isinstance(c, KernelCoupling):
            n = c.aux.count
            weights += 2 * n * (dim - d)
            if c.aux.W.requires_grad and id(c.aux) not in seen_aux:
                seen_aux.add(id(c.aux))
                aux += d * n
        else:
            weights += c.weight_count()
    return ParamCount(weights, aux, 2 * dim * len(model.actnorms()))
