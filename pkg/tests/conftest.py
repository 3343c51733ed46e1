import numpy as np
import pytest
import torch

from kflow.baseline import MlpCoupling
from kflow.flows import ActNorm, KernelCoupling


@torch.no_grad()
def randomize(model, seed, weight_scale=0.3, actnorm_scale=0.3):
    """Put every parameter of ``model`` at a random, well-conditioned value."""
    g = torch.Generator().manual_seed(seed)

    def randn(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    for m in model.modules():
        if isinstance(m, ActNorm):
            m.set_scale(torch.exp(actnorm_scale * randn(m.dim)), actnorm_scale * randn(m.dim))
        elif isinstance(m, KernelCoupling):
            m.aux.W.copy_(randn(*m.aux.W.shape))
            m.A_s.copy_(weight_scale * randn(*m.A_s.shape))
            m.A_t.copy_(weight_scale * randn(*m.A_t.shape))
        elif isinstance(m, MlpCoupling):
            for p in m.net.parameters():
                p.copy_(weight_scale * randn(*p.shape))
    return model


def fd_jacobian(fn, x, h=1e-5):
    """Central-difference Jacobian of ``fn: R^D -> R^D`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def layer_fn(layer):
    def f(v):
        with torch.no_grad():
            y, _ = layer(torch.as_tensor(v[None, :]))
        return y[0].numpy()
    return f


def fd_log_abs_det(layer, x, h=1e-5):
    _, logabsdet = np.linalg.slogdet(fd_jacobian(layer_fn(layer), x, h))
    return logabsdet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
