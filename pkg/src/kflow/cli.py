"""Command-line entry point: ``kflow <verb> ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numeric divergence (or failed gradient check), 5 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .baseline import build_mlp_flow
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, dump_run_config, load_run_config, run_config_from_dict, apply_overrides
from .data import read_csv_matrix
from .errors import ConfigError, DataError, DivergenceError, NumericError, SearchError
from .flows import build_kernel_flow, param_count
from .reporting import hist2d_counts, write_curve, write_hist2d, write_samples
from .training import (TrainConfig, build_model, data_dependent_init, dataset_nll,
                       evaluate_nll, gamma_search, gradcheck, train)

log = logging.getLogger("kflow")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_INTERNAL = 0, 2, 3, 4, 5


class UsageError(ConfigError):
    pass


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "iterations", None) is not None:
        overrides.append(f"train.iterations={args.iterations}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"out_dir={args.out}")
    if args.config is None:
        return run_config_from_dict(apply_overrides({}, overrides))
    return load_run_config(args.config, overrides)


def _metrics_doc(**kw) -> str:
    return json.dumps({"format": "kflow-metrics", "format_version": 1, **kw}, indent=1) + "\n"


# -- verbs ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(dump_run_config(cfg))
    ds = cfg.dataset.load()
    tc = cfg.train
    model = build_model(ds.dim, tc)
    resolved = cfg.to_dict()
    ck_path = out / "checkpoint.json"
    every = cfg.checkpoint_every

    def on_record(rec):
        if every and rec.split == "train" and rec.iteration > 0 and rec.iteration % every == 0:
            save_checkpoint(out / f"checkpoint-{rec.iteration:07d}.json", model, tc, ds)

    t0 = time.perf_counter()
    try:
        res = train(model, ds, tc, on_record=on_record)
    except DivergenceError as exc:
        save_checkpoint(ck_path, model, tc, ds, extra={"diverged_at": exc.iteration, "run_config": resolved})
        print(f"diverged at iteration {exc.iteration}: {exc}; last good checkpoint kept at {ck_path}",
              file=sys.stderr)
        return EXIT_DIVERGED
    wall = time.perf_counter() - t0
    meta = {"config": resolved}
    write_curve(out / "curve.csv", res.curve, meta)
    nll = {s: dataset_nll(res.model, ds, s) for s in ("train", "val", "test") if ds.split(s).shape[0]}
    save_checkpoint(ck_path, res.model, tc, ds, extra={"dataset": ds.name, "nll": nll, "run_config": resolved})
    counts = param_count(res.model).as_dict()
    (out / "metrics.json").write_text(_metrics_doc(
        dataset=ds.name, dim=ds.dim, nll=nll, init_loss=res.init_loss,
        best_iteration=res.best_iteration, params=counts,
        wall_seconds=None if tc.deterministic else wall, config=resolved))
    if cfg.report.hist_samples and ds.dim == 2:
        lo, hi = cfg.report.hist_range
        x = ds.destandardize(res.model.sample(tc.seed, cfg.report.hist_samples).numpy())
        write_hist2d(out / "hist_model.csv", hist2d_counts(x, cfg.report.hist_bins, lo, hi), lo, hi, meta)
        write_hist2d(out / "hist_data.csv",
                     hist2d_counts(ds.destandardize(ds.test), cfg.report.hist_bins, lo, hi), lo, hi, meta)
    print(f"test_nll={nll.get('test', float('nan')):.10f} params={counts['total']} out={out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if args.data is not None:
        raw = read_csv_matrix(args.data)
        if raw.shape[1] != ck.model.dim:
            raise DataError(f"{args.data} has {raw.shape[1]} columns, model expects {ck.model.dim}")
        x = ck.standardize(raw)
        source = str(args.data)
        nll = evaluate_nll(ck.model, x) + ck.nll_offset
    else:
        cfg = load_run_config(args.config, args.set)
        ds = cfg.dataset.load()
        x = ds.split(args.split)
        source = f"{ds.name}:{args.split}"
        if ds.dim != ck.model.dim:
            raise DataError(f"dataset has {ds.dim} columns, model expects {ck.model.dim}")
        nll = evaluate_nll(ck.model, ck.standardize(ds.destandardize(x))) + ck.nll_offset
    print(f"kflow-eval v1 nll_nats={nll:.10f} rows={x.shape[0]} source={source}")
    return EXIT_OK


def _checkpoint_config(ck) -> dict:
    return ck.meta.get("run_config") or {"train": ck.config.to_dict()}


def cmd_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    z = ck.model.sample(args.seed, args.n).numpy()
    x = ck.destandardize(z) if args.n else z
    write_samples(args.out, x, {"checkpoint": str(args.checkpoint), "seed": args.seed, "n": args.n,
                                "config": _checkpoint_config(ck)})
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_hist2d(args) -> int:
    if (args.checkpoint is None) == (args.data is None):
        raise UsageError("hist2d needs exactly one of --checkpoint or --data")
    lo, hi = args.range
    if not lo < hi:
        raise UsageError("--range needs lo < hi")
    if args.checkpoint is not None:
        ck = load_checkpoint(args.checkpoint)
        if ck.model.dim != 2:
            raise UsageError(f"hist2d needs a 2-D model, checkpoint has D={ck.model.dim}")
        x = ck.destandardize(ck.model.sample(args.seed, args.n).numpy())
        meta = {"checkpoint": str(args.checkpoint), "seed": args.seed, "n": args.n,
                "config": _checkpoint_config(ck)}
    else:
        x = read_csv_matrix(args.data)
        if x.shape[1] != 2:
            raise UsageError(f"hist2d needs 2-D data, {args.data} has {x.shape[1]} columns")
        meta = {"data": str(args.data)}
    counts = hist2d_counts(x, args.bins, lo, hi)
    write_hist2d(args.out, counts, lo, hi, meta)
    print(f"binned {int(counts.sum())} of {x.shape[0]} points into {args.out}")
    return EXIT_OK


def _small_train_config(args) -> tuple[TrainConfig, int, int]:
    if args.config is not None or args.set:
        cfg = _resolve(args).train
    else:
        cfg = TrainConfig(blocks=2, aux_points=8, gamma=0.5)
    return cfg, args.dim, args.batch


def cmd_gradcheck(args) -> int:
    tc, dim, batch = _small_train_config(args)
    gen = np.random.default_rng(tc.seed)
    x = torch.as_tensor(gen.standard_normal((batch, dim)) * 1.5 + 0.3)
    worst = 0.0
    ok = True
    variants = [("as configured", tc)]
    if args.all_variants and tc.coupling == "kernel":
        variants = [(f"shared={s} clamp={c}", replace(tc, shared_aux=s, s_clamp=c))
                    for s in (False, True) for c in (tc.s_clamp or 5.0, None)]
    for label, cfg in variants:
        model = build_model(dim, cfg)
        data_dependent_init(model, x, seed=cfg.seed)
        _perturb(model, cfg.seed)
        rep = gradcheck(model, x, h=args.h)
        worst = max(worst, rep.max_rel_err)
        ok &= rep.passed
        print(f"gradcheck [{label}] params={rep.n_params} max_abs_err={rep.max_abs_err:.3e} "
              f"max_rel_err={rep.max_rel_err:.3e} worst={rep.worst or '-'} "
              f"{'PASS' if rep.passed else 'FAIL'}")
    print(f"gradcheck max_rel_err={worst:.3e} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_DIVERGED


@torch.no_grad()
def _perturb(model, seed):
    # move off the all-zero initial weights so every gradient path is exercised
    g = torch.Generator().manual_seed(seed + 1)
    for p in model.parameters():
        if p.requires_grad:
            p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))


def cmd_paramcount(args) -> int:
    tc = _resolve(args).train if (args.config is not None or args.set) else TrainConfig()
    dim = args.dim
    kernel = build_kernel_flow(dim, tc.blocks, tc.aux_points, tc.gamma, shared_aux=tc.shared_aux,
                               freeze_aux=tc.freeze_aux, seed=tc.seed)
    mlp = build_mlp_flow(dim, tc.blocks, tc.hidden, seed=tc.seed)
    kc, mc = param_count(kernel).as_dict(), param_count(mlp).as_dict()
    print("model,coupling_weights,aux_points,actnorm,total")
    print(f"kernel,{kc['coupling_weights']},{kc['aux_points']},{kc['actnorm']},{kc['total']}")
    print(f"baseline,{mc['coupling_weights']},{mc['aux_points']},{mc['actnorm']},{mc['total']}")
    print(f"# D={dim} blocks={tc.blocks} N={tc.aux_points} shared_aux={tc.shared_aux} H={tc.hidden} "
          f"reduction={1 - kc['total'] / mc['total']:.1%}")
    return EXIT_OK


def cmd_hpsearch(args) -> int:
    cfg = _resolve(args)
    ds = cfg.dataset.load()
    res = gamma_search(ds, cfg.train, args.grid, args.refine, iterations=args.iterations,
                       workers=args.workers)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# kflow-gamma-search v1", f"# config: {json.dumps(cfg.to_dict(), sort_keys=True)}",
             "index,stage,gamma,val_nll,status"]
    lines += [f"{t.index},{t.stage},{t.gamma!r},{t.val_nll!r},{t.status}" for t in res.trials]
    (out / "gamma_search.csv").write_text("\n".join(lines) + "\n")
    print(f"best_gamma={res.best_gamma!r} val_nll={res.best_val_nll:.10f} "
          f"interval=[{res.interval[0]:g}, {res.interval[1]:g}] trials={len(res.trials)}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kflow", description="Kernelised normalising flows")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def with_config(sp, required):
        if required:
            sp.add_argument("config", type=Path, help="YAML run config")
        else:
            sp.add_argument("config", type=Path, nargs="?", default=None, help="YAML run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. train.gamma=0.3 (repeatable)")

    sp = sub.add_parser("train", help="train a model")
    with_config(sp, True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="mean NLL (nats) of a checkpoint on data")
    sp.add_argument("checkpoint", type=Path)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="CSV of raw-unit rows")
    src.add_argument("--config", type=Path, help="run config whose dataset to evaluate on")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sample", help="draw samples from a checkpoint")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("hist2d", help="2-D histogram grid of model samples or a CSV")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--n", type=int, default=100000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--bins", type=int, default=64)
    sp.add_argument("--range", type=float, nargs=2, default=(-4.0, 4.0), metavar=("LO", "HI"))
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_hist2d)

    sp = sub.add_parser("gradcheck", help="finite-difference check of training gradients")
    with_config(sp, False)
    sp.add_argument("--dim", type=int, default=4)
    sp.add_argument("--batch", type=int, default=16)
    sp.add_argument("--h", type=float, default=1e-6)
    sp.add_argument("--all-variants", action="store_true",
                    help="also check shared/per-layer aux with clamp on and off")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("paramcount", help="learnable-parameter breakdown, kernel vs baseline")
    with_config(sp, False)
    sp.add_argument("--dim", type=int, required=True)
    sp.set_defaults(func=cmd_paramcount)

    sp = sub.add_parser("hpsearch", help="coarse-to-fine search over the kernel gamma")
    with_config(sp, True)
    sp.add_argument("--grid", type=float, nargs="+", required=True)
    sp.add_argument("--refine", type=int, default=5)
    sp.add_argument("--iterations", type=int, help="per-trial iteration budget")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_hpsearch)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, SearchError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
