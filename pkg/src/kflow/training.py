"""Maximum-likelihood training: objective, gradients, Adam, schedules, init, search."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np
import torch

from .baseline import build_mlp_flow
from .data import Dataset
from .errors import ConfigError, DivergenceError, NumericError, SearchError
from .flows import DTYPE, ActNorm, FlowModel, KernelCoupling, build_kernel_flow

log = logging.getLogger(__name__)

TIE_TOL = 1e-9


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule.

    ``steplr`` multiplies by ``factor`` every ``step`` iterations; ``cosine``
    anneals to zero over ``T`` iterations (``T=None`` means the run length).
    """

    kind: str = "cosine"
    step: int = 1000
    factor: float = 0.5
    T: int | None = None

    def validate(self):
        if self.kind not in ("constant", "steplr", "cosine"):
            raise ConfigError(f"unknown schedule {self.kind!r}")
        if self.kind == "steplr" and (self.step < 1 or not 0 < self.factor <= 1):
            raise ConfigError("steplr needs step >= 1 and 0 < factor <= 1")
        if self.kind == "cosine" and self.T is not None and self.T < 1:
            raise ConfigError("cosine T must be >= 1")


def lr_at(schedule: Schedule, step: int, base_lr: float, horizon: int | None = None) -> float:
    if schedule.kind == "constant":
        return base_lr
    if schedule.kind == "steplr":
        return base_lr * schedule.factor ** (step // schedule.step)
    T = schedule.T if schedule.T is not None else horizon
    if T is None:
        raise ConfigError("cosine schedule needs T or a run horizon")
    if step >= T:
        return 0.0
    return base_lr * (1.0 + math.cos(math.pi * step / T)) / 2.0


@dataclass(frozen=True)
class TrainConfig:
    coupling: str = "kernel"
    blocks: int = 5
    aux_points: int = 50
    shared_aux: bool = False
    freeze_aux: bool = False
    gamma: float = 0.5
    gamma_per_layer: tuple | None = None
    hidden: int = 64
    s_clamp: float | None = 5.0
    batch_size: int = 200
    iterations: int = 10000
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    deterministic: bool = True
    val_every: int = 200
    keep_best: bool = True
    divergence_margin: float = 1e3

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", _schedule_from_dict(self.schedule))
        if self.gamma_per_layer is not None:
            object.__setattr__(self, "gamma_per_layer", tuple(float(g) for g in self.gamma_per_layer))
        self.validate()

    def validate(self):
        if self.coupling not in ("kernel", "mlp"):
            raise ConfigError(f"coupling must be 'kernel' or 'mlp', got {self.coupling!r}")
        if self.blocks < 0:
            raise ConfigError("blocks must be >= 0")
        if self.aux_points < 1:
            raise ConfigError("aux_points must be >= 1")
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ConfigError("gamma must be positive and finite")
        if self.gamma_per_layer is not None:
            if len(self.gamma_per_layer) != 2 * self.blocks:
                raise ConfigError(f"gamma_per_layer needs {2 * self.blocks} values")
            if any(not (math.isfinite(g) and g > 0) for g in self.gamma_per_layer):
                raise ConfigError("gamma_per_layer values must be positive and finite")
        if self.s_clamp is not None and not self.s_clamp > 0:
            raise ConfigError("s_clamp must be positive or null")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.val_every < 0:
            raise ConfigError("val_every must be >= 0")
        if not self.divergence_margin > 0:
            raise ConfigError("divergence_margin must be positive")
        self.schedule.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["gamma_per_layer"] is not None:
            out["gamma_per_layer"] = list(out["gamma_per_layer"])
        return out


def _schedule_from_dict(d: dict) -> Schedule:
    unknown = sorted(set(d) - {f.name for f in fields(Schedule)})
    if unknown:
        raise ConfigError(f"unknown schedule keys: {', '.join(unknown)}")
    return Schedule(**d)


def build_model(dim: int, config: TrainConfig, permutations=None) -> FlowModel:
    """Fresh (uninitialised) model described by ``config``."""
    if config.coupling == "mlp":
        return build_mlp_flow(dim, config.blocks, config.hidden, config.s_clamp,
                              config.seed, permutations=permutations)
    gamma = config.gamma_per_layer if config.gamma_per_layer is not None else config.gamma
    return build_kernel_flow(dim, config.blocks, config.aux_points, gamma,
                             shared_aux=config.shared_aux, s_clamp=config.s_clamp,
                             seed=config.seed, freeze_aux=config.freeze_aux,
                             permutations=permutations)


# -- objective and gradients ------------------------------------------------

def objective(model: FlowModel, batch, iteration: int | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of ``batch`` in nats."""
    batch = torch.as_tensor(batch, dtype=DTYPE)
    try:
        loss = -model.log_prob(batch).mean()
    except NumericError as exc:
        raise DivergenceError(f"forward pass failed: {exc}", iteration, rows=exc.rows) from exc
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at iteration {iteration}", iteration)
    return loss


def learnable(model: FlowModel) -> dict[str, torch.nn.Parameter]:
    # named_parameters de-duplicates a shared auxiliary-point tensor
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def gradient(model: FlowModel, batch) -> dict[str, torch.Tensor]:
    """Exact gradient of ``objective`` for every learnable tensor."""
    params = learnable(model)
    loss = objective(model, batch)
    grads = torch.autograd.grad(loss, list(params.values()))
    out = {}
    for (name, _), g in zip(params.items(), grads):
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {name}", path=name)
        out[name] = g
    return out


def evaluate_nll(model: FlowModel, x, chunk: int = 4096) -> float:
    """Mean NLL (nats) of ``x`` in the model's own coordinates."""
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[0] == 0:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for i in range(0, x.shape[0], chunk):
            total += float(-model.log_prob(x[i:i + chunk]).sum())
    return total / x.shape[0]


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied in place. Parameters without a
    gradient entry (frozen groups) are left untouched."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# -- data-dependent initialisation ------------------------------------------

@torch.no_grad()
def data_dependent_init(model: FlowModel, batch, seed: int = 0) -> FlowModel:
    """Sequential pass over ``batch`` setting every ActNorm and auxiliary set.

    ActNorms whiten their input; each kernel coupling takes ``N`` rows of its
    conditioning half (without replacement when the batch allows) as
    auxiliary points and zeroes its weights. A shared auxiliary set is
    filled once, from the first coupling.
    """
    h = torch.as_tensor(batch, dtype=DTYPE)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("data_dependent_init needs a non-empty 2-D batch")
    if h.shape[0] < 2:
        raise ValueError("data_dependent_init needs at least two rows")
    rng = np.random.default_rng(seed)
    filled = set()
    for layer in model.layers:
        if isinstance(layer, ActNorm):
            layer.initialize(h)
        elif isinstance(layer, KernelCoupling):
            if id(layer.aux) not in filled:
                n, N = h.shape[0], layer.aux.count
                idx = rng.choice(n, size=N, replace=n < N)
                layer.aux.W.copy_(h[idx, : layer.d])
                filled.add(id(layer.aux))
            layer.A_s.zero_()
            layer.A_t.zero_()
        h, _ = layer(h)
    return model


# -- training loop ----------------------------------------------------------

@dataclass(frozen=True)
class CurveRecord:
    iteration: int
    split: str
    nll: float
    lr: float
    elapsed: float


@dataclass
class TrainResult:
    model: FlowModel
    curve: list
    init_loss: float
    best_iteration: int | None = None
    best_val_nll: float | None = None


@contextlib.contextmanager
def _deterministic(on: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(on or prev)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _snapshot(params: dict) -> dict:
    return {n: p.detach().clone() for n, p in params.items()}


@torch.no_grad()
def _restore(params: dict, snap: dict) -> None:
    for n, p in params.items():
        p.copy_(snap[n])


def train(model: FlowModel, dataset: Dataset, config: TrainConfig,
          on_record: Callable[[CurveRecord], None] | None = None) -> TrainResult:
    """Data-dependent init, then minibatch Adam on the standardised train split.

    Curve NLLs are reported in raw data units (the standardisation Jacobian
    is added back). With ``keep_best`` and a validation cadence, the model
    returned holds the parameters with the lowest validation NLL. In
    deterministic mode the ``elapsed`` column is recorded as 0.
    """
    X = torch.as_tensor(dataset.train, dtype=DTYPE)
    V = torch.as_tensor(dataset.val, dtype=DTYPE)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two training rows")
    offset = dataset.nll_offset
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, n)
    track_val = config.val_every > 0 and V.shape[0] > 0
    curve: list[CurveRecord] = []
    t0 = time.perf_counter()

    def emit(rec):
        curve.append(rec)
        if on_record is not None:
            on_record(rec)

    def elapsed():
        return 0.0 if config.deterministic else time.perf_counter() - t0

    with _deterministic(config.deterministic):
        order = rng.permutation(n)
        init_rows = order[: min(n, max(bs, config.aux_points))]
        data_dependent_init(model, X[init_rows], seed=config.seed)
        params = learnable(model)
        state = AdamState()
        pos = 0
        init_loss = None
        last_good = _snapshot(params)
        best_val, best_it, best_snap = math.inf, None, None

        def validate(it):
            nonlocal best_val, best_it, best_snap
            v = evaluate_nll(model, V)
            if not math.isfinite(v):
                return
            emit(CurveRecord(it, "val", v + offset, lr_at(config.schedule, it, config.lr, config.iterations), elapsed()))
            if v < best_val:
                best_val, best_it, best_snap = v, it, _snapshot(params)

        if track_val:
            validate(0)
        for it in range(config.iterations):
            if pos + bs > n:
                order = rng.permutation(n)
                pos = 0
            batch = X[order[pos:pos + bs]]
            pos += bs
            lr = lr_at(config.schedule, it, config.lr, config.iterations)
            try:
                loss = objective(model, batch, iteration=it)
                if init_loss is None:
                    init_loss = loss.item()
                if loss.item() > init_loss + config.divergence_margin:
                    raise DivergenceError(f"loss {loss.item():.4g} exceeds initial loss by more than "
                                          f"{config.divergence_margin:g} at iteration {it}", it)
                grads = torch.autograd.grad(loss, list(params.values()))
                for name, g in zip(params, grads):
                    if not bool(torch.isfinite(g).all()):
                        raise DivergenceError(f"non-finite gradient for {name} at iteration {it}", it, path=name)
            except DivergenceError as exc:
                exc.iteration = it
                _restore(params, last_good)
                raise
            last_good = _snapshot(params)
            emit(CurveRecord(it, "train", loss.item() + offset, lr, elapsed()))
            adam_step(params, dict(zip(params, grads)), state, lr,
                      config.beta1, config.beta2, config.eps)
            done = it + 1
            if track_val and (done % config.val_every == 0 or done == config.iterations):
                validate(done)

        if track_val and config.keep_best and best_snap is not None:
            _restore(params, best_snap)

    return TrainResult(model, curve, init_loss,
                       best_it, None if best_snap is None else best_val + offset)


def dataset_nll(model: FlowModel, dataset: Dataset, split: str = "test") -> float:
    """Mean NLL of a split in raw data units."""
    return evaluate_nll(model, dataset.split(split)) + dataset.nll_offset


# -- gamma search -----------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    index: int
    stage: str
    gamma: float
    val_nll: float
    status: str


@dataclass
class GammaSearchResult:
    best_gamma: float
    best_val_nll: float
    trials: list
    interval: tuple


def _run_trial(index, stage, gamma, dataset, config) -> Trial:
    cfg = replace(config, gamma=float(gamma), gamma_per_layer=None)
    model = build_model(dataset.dim, cfg)
    try:
        res = train(model, dataset, cfg)
    except (DivergenceError, NumericError) as exc:
        log.info("gamma=%g diverged: %s", gamma, exc)
        return Trial(index, stage, float(gamma), math.inf, "diverged")
    v = dataset_nll(res.model, dataset, "val")
    if not math.isfinite(v):
        return Trial(index, stage, float(gamma), math.inf, "diverged")
    return Trial(index, stage, float(gamma), v, "ok")


def _run_all(jobs, dataset, config, workers):
    if workers <= 1:
        return [_run_trial(*job, dataset, config) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_trial, *job, dataset, config) for job in jobs]
        return [f.result() for f in futures]


def pick_best(trials) -> Trial:
    """Lowest validation NLL; trials within ``TIE_TOL`` of it go to the smaller gamma."""
    ok = [t for t in trials if t.status == "ok"]
    if not ok:
        raise SearchError("every gamma trial diverged", trials)
    best = min(t.val_nll for t in ok)
    return min((t for t in ok if t.val_nll - best <= TIE_TOL), key=lambda t: t.gamma)


def gamma_search(dataset: Dataset, config: TrainConfig, coarse_grid, refine_count: int = 0,
                 iterations: int | None = None, workers: int = 1) -> GammaSearchResult:
    """Coarse grid, then log-uniform random refinement around the best point.

    The refinement interval runs between the grid neighbours of the best
    coarse value (one-sided at the grid edges, empty for a single value).
    Trials are logged by index regardless of completion order.
    """
    grid = sorted(float(g) for g in coarse_grid)
    if not grid or any(not (g > 0 and math.isfinite(g)) for g in grid):
        raise ConfigError("coarse grid must hold positive finite gammas")
    if dataset.val.shape[0] == 0:
        raise ConfigError("gamma search needs a validation split")
    if iterations is not None:
        config = replace(config, iterations=int(iterations))
    trials = _run_all([(i, "coarse", g) for i, g in enumerate(grid)], dataset, config, workers)
    best = pick_best(trials)
    i = grid.index(best.gamma)
    lo = grid[i - 1] if i > 0 else grid[i]
    hi = grid[i + 1] if i + 1 < len(grid) else grid[i]
    if refine_count > 0 and hi > lo:
        rng = np.random.default_rng(config.seed)
        cands = np.exp(rng.uniform(math.log(lo), math.log(hi), size=refine_count))
        jobs = [(len(grid) + k, "refine", float(g)) for k, g in enumerate(cands)]
        trials += _run_all(jobs, dataset, config, workers)
    best = pick_best(trials)
    return GammaSearchResult(best.gamma, best.val_nll, trials, (lo, hi))


# -- finite-difference diagnostics -----------------------------------------

@dataclass(frozen=True)
class GradcheckReport:
    n_params: int
    max_abs_err: float
    max_rel_err: float
    worst: str
    passed: bool


def gradcheck(model: FlowModel, batch, h: float = 1e-6, rtol: float = 1e-4,
              atol: float = 1e-8) -> GradcheckReport:
    """Compare ``gradient`` with central differences of ``objective``.

    An entry passes when ``|g - fd| <= max(rtol * |fd|, atol)``, i.e. when
    its error relative to ``max(|fd|, atol / rtol)`` is at most ``rtol``.
    """
    model = copy.deepcopy(model)
    batch = torch.as_tensor(batch, dtype=DTYPE)
    analytic = gradient(model, batch)
    params = learnable(model)
    floor = atol / rtol
    worst_abs = worst_rel = 0.0
    worst = ""
    n = 0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            g = analytic[name].reshape(-1)
            for k in range(flat.numel()):
                orig = float(flat[k])
                flat[k] = orig + h
                fp = float(objective(model, batch))
                flat[k] = orig - h
                fm = float(objective(model, batch))
                flat[k] = orig
                fd = (fp - fm) / (2 * h)
                err = abs(float(g[k]) - fd)
                rel = err / max(abs(fd), floor)
                n += 1
                worst_abs = max(worst_abs, err)
                if rel > worst_rel:
                    worst_rel, worst = rel, f"{name}[{k}]"
    ok = worst_rel <= rtol
    return GradcheckReport(n, worst_abs, worst_rel, worst, ok)
