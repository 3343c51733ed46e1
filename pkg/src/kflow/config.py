"""Run configuration: a YAML document with ``dataset``, ``train`` and output keys.

Example::

    dataset:
      kind: moons          # moons | pinwheel | line | csv
      n_train: 20000
      seed: 0
    train:
      blocks: 5
      aux_points: 50
      gamma: 0.5
    out_dir: runs/moons

Unknown keys are rejected at every level.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import TOY_GENERATORS, Dataset, load_csv, subsample_train, toy_dataset
from .errors import ConfigError
from .training import TrainConfig


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "moons"
    path: str | None = None
    split: tuple = (0.8, 0.1, 0.1)
    n_train: int = 20000
    n_val: int = 2000
    n_test: int = 10000
    seed: int = 0
    subsample: int | None = None
    subsample_seed: int = 0
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))
        if self.kind != "csv" and self.kind not in TOY_GENERATORS:
            raise ConfigError(f"dataset.kind must be 'csv' or one of {sorted(TOY_GENERATORS)}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("dataset.path is required for kind 'csv'")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("dataset sizes must be non-negative")
        if self.subsample is not None and self.subsample < 2:
            raise ConfigError("dataset.subsample must be >= 2")

    def load(self) -> Dataset:
        if self.kind == "csv":
            ds = load_csv(self.path, self.split, seed=self.seed)
        else:
            ds = toy_dataset(self.kind, self.n_train, self.n_val, self.n_test,
                             seed=self.seed, **self.options)
        if self.subsample is not None:
            if self.subsample > ds.train.shape[0]:
                raise ConfigError(f"subsample {self.subsample} exceeds {ds.train.shape[0]} train rows")
            ds = subsample_train(ds, self.subsample, seed=self.subsample_seed)
        return ds


@dataclass(frozen=True)
class ReportSpec:
    """Optional extras written after training (2-D data only)."""

    hist_samples: int = 0
    hist_bins: int = 64
    hist_range: tuple = (-4.0, 4.0)

    def __post_init__(self):
        object.__setattr__(self, "hist_range", tuple(float(v) for v in self.hist_range))
        if self.hist_samples < 0 or self.hist_bins < 1:
            raise ConfigError("report.hist_samples must be >= 0 and hist_bins >= 1")
        if len(self.hist_range) != 2 or not self.hist_range[0] < self.hist_range[1]:
            raise ConfigError("report.hist_range must be [lo, hi] with lo < hi")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"
    checkpoint_every: int = 0
    report: ReportSpec = field(default_factory=ReportSpec)

    def to_dict(self) -> dict:
        return {
            "dataset": {**asdict(self.dataset), "split": list(self.dataset.split)},
            "train": self.train.to_dict(),
            "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every,
            "report": {**asdict(self.report), "hist_range": list(self.report.hist_range)},
        }


def _strict(cls, d, where):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = sorted(set(d) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def run_config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(d) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    train = d.get("train") or {}
    if not isinstance(train, dict):
        raise ConfigError("train must be a mapping")
    ce = d.get("checkpoint_every", 0)
    if not isinstance(ce, int) or ce < 0:
        raise ConfigError("checkpoint_every must be a non-negative integer")
    return RunConfig(
        dataset=_strict(DatasetSpec, d.get("dataset"), "dataset"),
        train=TrainConfig.from_dict(train),
        out_dir=str(d.get("out_dir", "runs/default")),
        checkpoint_every=ce,
        report=_strict(ReportSpec, d.get("report"), "report"),
    )


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return d


def load_run_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return run_config_from_dict(apply_overrides(d, overrides))


def dump_run_config(cfg: RunConfig) -> str:
    return "# kflow-config v1\n" + yaml.safe_dump(cfg.to_dict(), sort_keys=False)
