"""RealNVP-style baseline: the kernel flow's scaffolding with MLP couplings.

Each coupling runs ``x1 -> tanh -> tanh -> (s, t)`` through two hidden
layers of width ``hidden``. The output layer starts at zero so a fresh
coupling is the identity, exactly like a fresh kernel coupling.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError
from .flows import (DTYPE, AffineCoupling, FlowModel, ParamCount, assemble_blocks,
                    draw_block_permutations, param_count)


class MlpCoupling(AffineCoupling):
    def __init__(self, dim: int, hidden: int = 64, s_clamp: float | None = 5.0):
        super().__init__(dim, s_clamp)
        if hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {hidden}")
        self.hidden = hidden
        out = dim - self.d
        self.net = nn.Sequential(
            nn.Linear(self.d, hidden, dtype=DTYPE), nn.Tanh(),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.Tanh(),
            nn.Linear(hidden, 2 * out, dtype=DTYPE),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def raw_scale_shift(self, x1):
        h = self.net(x1)
        out = self.dim - self.d
        return h[:, :out], h[:, out:]

    def weight_count(self) -> int:
        d, h, o = self.d, self.hidden, 2 * (self.dim - self.d)
        return (d * h + h) + (h * h + h) + (h * o + o)


def build_mlp_flow(dim: int, blocks: int, hidden: int = 64, s_clamp: float | None = 5.0,
                   seed: int = 0, permutations=None) -> FlowModel:
    """Baseline flow. With the same ``seed`` it shares the kernel flow's permutations."""
    if hidden < 1:
        raise ConfigError(f"hidden width must be >= 1, got {hidden}")
    perms = permutations if permutations is not None else draw_block_permutations(dim, blocks, seed)
    # hidden-layer init must not disturb the global torch RNG
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        layers = assemble_blocks(dim, perms, lambda i: MlpCoupling(dim, hidden, s_clamp))
    return FlowModel(dim, layers, blocks)


def baseline_param_count(model: FlowModel) -> ParamCount:
    if model.coupling_kind not in ("mlp", "none"):
        raise ValueError("baseline_param_count expects an MLP-coupling model")
    return param_count(model)
