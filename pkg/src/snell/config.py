"""Run configuration: JSON documents layered over documented defaults.

Precedence, lowest to highest: built-in defaults, the ``--config`` file, then
command-line flags. Unknown keys are rejected with their dotted path.
``out_dir`` and ``parallel_seeds`` only say where and how fast to run, so they
are left out of the config echo stored with every report.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .adapter import MODES, RULES
from .kernels import VARIANTS, canonical_variant

EXPERIMENTS = ("fit-matrix", "rank-study", "sweep-sparsity", "train", "export")
OUT_DIR_ENV = "SNELL_OUT_DIR"
ALL_KERNELS = list(VARIANTS)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


@dataclass
class FitSection:
    m: int = 32
    n: int = 32
    rank: int = 4
    steps: int = 20000
    lr: float = 1e-3
    seeds: int = 10
    kernels: list = field(default_factory=lambda: list(ALL_KERNELS))
    segments: int = 2
    record_every: int = 100


@dataclass
class RankSection:
    m: int = 64
    n: int = 64
    ranks: list = field(default_factory=lambda: [4])
    seeds: int = 10
    kernels: list = field(default_factory=lambda: list(ALL_KERNELS))
    segments: int = 2
    scales: list = field(default_factory=lambda: ["random", "zero"])
    rel_tol: float = 1e-10


@dataclass
class DataSection:
    source: str = "blobs"
    path: str | None = None
    n: int = 500
    dim: int = 16
    classes: int = 2
    separation: float = 4.0


@dataclass
class ModelSection:
    hidden: list = field(default_factory=lambda: [32, 32])
    rank: int = 8
    kernel: str = "piecewise_linear"
    segments: int = 2
    sparsity: float = 0.9
    soft_threshold: str = "product"
    init_scale: float = 1e-3


@dataclass
class TrainSection:
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 200
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8


@dataclass
class SweepSection:
    grid: list = field(default_factory=lambda: [0.0, 0.2, 0.5, 0.8, 0.9, 0.99])


@dataclass
class ExportSection:
    # None: "<out_dir>/checkpoint", i.e. the output of a prior `train` run.
    checkpoint: str | None = None
    probes: int = 8


@dataclass
class RunConfig:
    experiment: str = "fit-matrix"
    seed: int = 0
    mode: str = "recompute"
    emit_plot_data: bool = False
    fit: FitSection = field(default_factory=FitSection)
    rank_study: RankSection = field(default_factory=RankSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    export: ExportSection = field(default_factory=ExportSection)
    # execution-only, not echoed
    out_dir: str = ""
    parallel_seeds: int = 1

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        d.pop("parallel_seeds")
        return d

    def seed_list(self, count: int) -> list[int]:
        return [(self.seed + i) % (1 << 64) for i in range(count)]


def _merge(obj, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected a key-value object")
    known = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(path, "unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, path)
        else:
            setattr(obj, key, _coerce(path, current, value, known[key]))


def _coerce(path, current, value, f):
    if value is None:
        if f.default is None:
            return None
        raise ConfigError(path, "must not be null")
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    if isinstance(current, str) or current is None:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def validate(cfg: RunConfig) -> RunConfig:
    def need(cond, path, msg):
        if not cond:
            raise ConfigError(path, msg)

    need(cfg.experiment in EXPERIMENTS, "experiment", f"must be one of {EXPERIMENTS}")
    need(0 <= cfg.seed < (1 << 64), "seed", "must be an unsigned 64-bit integer")
    need(cfg.mode in MODES, "mode", f"must be one of {MODES}")
    need(cfg.parallel_seeds >= 1, "parallel_seeds", "must be >= 1")

    def kernels(path, names):
        need(len(names) > 0, path, "must list at least one kernel")
        out = []
        for i, k in enumerate(names):
            try:
                out.append(canonical_variant(k))
            except ValueError as exc:
                raise ConfigError(f"{path}[{i}]", str(exc)) from None
        return out

    f = cfg.fit
    for name in ("m", "n", "rank", "steps", "seeds", "segments", "record_every"):
        need(getattr(f, name) >= 1, f"fit.{name}", "must be >= 1")
    need(f.lr > 0, "fit.lr", "must be positive")
    f.kernels = kernels("fit.kernels", f.kernels)
    if "piecewise_linear" in f.kernels:
        need(f.segments <= f.rank, "fit.segments", "must not exceed fit.rank")

    r = cfg.rank_study
    for name in ("m", "n", "seeds", "segments"):
        need(getattr(r, name) >= 1, f"rank_study.{name}", "must be >= 1")
    need(len(r.ranks) > 0, "rank_study.ranks", "must list at least one rank")
    r.kernels = kernels("rank_study.kernels", r.kernels)
    for i, v in enumerate(r.ranks):
        need(isinstance(v, int) and v >= 1, f"rank_study.ranks[{i}]", "must be an integer >= 1")
        if "piecewise_linear" in r.kernels:
            need(r.segments <= v, f"rank_study.ranks[{i}]", "must be >= rank_study.segments")
    for i, v in enumerate(r.scales):
        need(v in ("random", "zero"), f"rank_study.scales[{i}]", "must be 'random' or 'zero'")
    need(r.rel_tol > 0, "rank_study.rel_tol", "must be positive")

    d = cfg.data
    need(d.source in ("blobs", "csv"), "data.source", "must be 'blobs' or 'csv'")
    if d.source == "csv":
        need(bool(d.path), "data.path", "required when data.source is 'csv'")
    else:
        need(d.n >= 1 and d.dim >= 1, "data.n", "n and dim must be >= 1")
        need(d.classes >= 2, "data.classes", "must be >= 2")
        need(d.separation >= 0, "data.separation", "must be >= 0")

    m = cfg.model
    need(len(m.hidden) > 0, "model.hidden", "must list at least one layer width")
    for i, v in enumerate(m.hidden):
        need(isinstance(v, int) and v >= 1, f"model.hidden[{i}]", "must be an integer >= 1")
    need(m.rank >= 1, "model.rank", "must be >= 1")
    m.kernel = kernels("model.kernel", [m.kernel])[0]
    need(0.0 <= m.sparsity <= 1.0, "model.sparsity", "must lie in [0, 1]")
    need(m.soft_threshold in RULES, "model.soft_threshold", f"must be one of {RULES}")
    need(m.init_scale >= 0, "model.init_scale", "must be >= 0")
    if m.kernel == "piecewise_linear":
        need(m.segments <= m.rank, "model.segments", "must not exceed model.rank")

    t = cfg.train
    need(t.base_lr > 0, "train.base_lr", "must be positive")
    need(t.weight_decay >= 0, "train.weight_decay", "must be >= 0")
    need(t.batch_size >= 1, "train.batch_size", "must be >= 1")
    need(t.epochs >= 0, "train.epochs", "must be >= 0")
    need(
        len(t.betas) == 2 and all(isinstance(b, (int, float)) and 0 <= b < 1 for b in t.betas),
        "train.betas",
        "must be two numbers in [0, 1)",
    )
    need(t.eps > 0, "train.eps", "must be positive")

    need(len(cfg.sweep.grid) > 0, "sweep.grid", "must not be empty")
    for i, s in enumerate(cfg.sweep.grid):
        need(
            isinstance(s, (int, float)) and not isinstance(s, bool) and 0 <= s <= 1,
            f"sweep.grid[{i}]",
            "must be a number in [0, 1]",
        )
    cfg.sweep.grid = [float(s) for s in cfg.sweep.grid]
    need(cfg.export.probes >= 1, "export.probes", "must be >= 1")
    return cfg


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    # A report.json can be fed back in: its "config" holds the full echo.
    if isinstance(data, dict) and "config" in data and "experiment" in data and "metrics" in data:
        data = data["config"]
    return data


def build_config(experiment: str, file_data: dict | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig(experiment=experiment)
    cfg.out_dir = os.environ.get(OUT_DIR_ENV, "runs")
    if file_data:
        file_exp = file_data.get("experiment", experiment)
        if file_exp != experiment:
            raise ConfigError("experiment", f"config file is for {file_exp!r}, not {experiment!r}")
        _merge(cfg, file_data, "")
    if overrides:
        _merge(cfg, {k: v for k, v in overrides.items() if v is not None}, "")
    return validate(cfg)
