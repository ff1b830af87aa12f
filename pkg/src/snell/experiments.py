"""The five CLI experiments. Each is a pure function of its :class:`RunConfig`."""

from __future__ import annotations

import copy
import csv
import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .adapter import RECOMPUTE, STORE, MemoryMeter, export_merged
from .config import RunConfig
from .io import load_checkpoint, save_checkpoint, write_json, write_matrix
from .kernels import LINEAR, PIECEWISE_LINEAR, KernelSpec, merge_values
from .numkit import RngStream, matmul, numeric_rank, randn, singular_values
from .trainer import (
    Dataset,
    TinyModel,
    TrainConfig,
    fit_matrix,
    load_csv_dataset,
    make_blobs,
    train_classifier,
)

__all__ = [
    "ProbeMismatchError",
    "RunReport",
    "RUNNERS",
    "run_export",
    "run_fit_matrix",
    "run_rank_study",
    "run_sweep_sparsity",
    "run_train",
]


class ProbeMismatchError(ArithmeticError):
    """Exported weights do not reproduce the checkpoint's outputs bit for bit."""


@dataclass
class RunReport:
    experiment: str
    seed: int
    config: dict
    metrics: dict = field(default_factory=dict)
    peak_floats: dict | None = None
    artifacts: list = field(default_factory=list)
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        # Wall-clock time lives in timing.json so report.json stays byte-stable.
        return {
            "experiment": self.experiment,
            "seed": self.seed,
            "backend": _accel.BACKEND,
            "config": self.config,
            "metrics": self.metrics,
            "peak_floats": self.peak_floats,
            "artifacts": sorted(self.artifacts),
            "timing_file": "timing.json",
        }


class _Out:
    def __init__(self, root: Path, report: RunReport):
        self.root = root
        self.report = report
        root.mkdir(parents=True, exist_ok=True)

    def csv(self, name: str, header: list[str], rows) -> None:
        with open(self.root / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
        self.report.artifacts.append(name)

    def matrix(self, name: str, m, **meta) -> None:
        sidecar = write_matrix(self.root / name, m, **meta)
        self.report.artifacts.extend([name, str(sidecar.relative_to(self.root))])

    def finish(self, started: float) -> RunReport:
        self.report.wall_clock_seconds = time.perf_counter() - started
        self.report.artifacts.append("report.json")
        write_json(self.root / "report.json", self.report.to_dict())
        write_json(self.root / "timing.json", {"wall_clock_seconds": self.report.wall_clock_seconds})
        return self.report


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _start(cfg: RunConfig, subdir: str = ""):
    report = RunReport(cfg.experiment, cfg.seed, cfg.echo())
    return _Out(Path(cfg.out_dir) / subdir, report), time.perf_counter()


def _map_seeds(fn, jobs, workers: int):
    """Run ``fn`` over ``jobs``; results come back in job order regardless of workers."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# fit-matrix


def _fit_job(job):
    seed, f = job
    target = randn(RngStream(seed).child(0), f["m"], f["n"])
    sv = singular_values(target)
    best = float(np.sum(sv[f["rank"] :] ** 2) / target.size)
    init_seed = RngStream(seed).child(1).seed
    out = []
    for kernel in f["kernels"]:
        spec = KernelSpec.zero_init(kernel, f["segments"])
        res = fit_matrix(target, f["rank"], spec, f["steps"], f["lr"], init_seed, f["record_every"])
        out.append((kernel, seed, res.trace, res.final_mse, best))
    return out


def run_fit_matrix(cfg: RunConfig) -> RunReport:
    """Fit random Gaussian targets with every configured kernel over a seed range."""
    out, started = _start(cfg)
    f = cfg.echo()["fit"]
    seeds = cfg.seed_list(cfg.fit.seeds)
    per_seed = _map_seeds(_fit_job, [(s, f) for s in seeds], cfg.parallel_seeds)
    results = {k: [] for k in cfg.fit.kernels}
    for rows in per_seed:
        for kernel, seed, trace, final, best in rows:
            results[kernel].append((seed, trace, final, best))

    out.csv(
        "fit_trace.csv",
        ["kernel", "seed", "step", "mse"],
        (
            (k, seed, step, mse)
            for k in cfg.fit.kernels
            for seed, trace, _, _ in results[k]
            for step, mse in trace
        ),
    )
    out.csv(
        "fit_final.csv",
        ["kernel", "seed", "final_mse", "eckart_young_mse"],
        ((k, seed, final, best) for k in cfg.fit.kernels for seed, _, final, best in results[k]),
    )
    summary = {}
    for k in cfg.fit.kernels:
        finals = np.array([r[2] for r in results[k]])
        summary[k] = {
            "seeds": len(finals),
            "mean_final_mse": float(np.mean(finals)),
            "min_final_mse": float(np.min(finals)),
            "max_final_mse": float(np.max(finals)),
        }
    out.csv(
        "fit_summary.csv",
        ["kernel", "seeds", "mean_final_mse", "min_final_mse", "max_final_mse"],
        ((k, *summary[k].values()) for k in cfg.fit.kernels),
    )
    first = cfg.fit.kernels[0]
    ey = float(np.mean([r[3] for r in results[first]]))
    metrics = {"summary": summary, "mean_eckart_young_mse": ey}
    if LINEAR in summary and PIECEWISE_LINEAR in summary:
        metrics["piecewise_linear_below_linear"] = bool(
            summary[PIECEWISE_LINEAR]["mean_final_mse"] < summary[LINEAR]["mean_final_mse"]
        )
    out.report.metrics = metrics

    if cfg.emit_plot_data:
        steps = [s for s, _ in results[first][0][1]]
        out.csv(
            "plot_fit_mse.csv",
            ["step", *cfg.fit.kernels],
            (
                (step, *(float(np.mean([r[1][i][1] for r in results[k]])) for k in cfg.fit.kernels))
                for i, step in enumerate(steps)
            ),
        )
    return out.finish(started)


# ---------------------------------------------------------------------------
# rank-study


def _random_spec(kernel: str, segments: int, rng: RngStream, scale: str) -> KernelSpec:
    spec = KernelSpec.zero_init(kernel, segments)
    if scale == "zero" or kernel == LINEAR:
        return spec
    draws = rng.normal(spec.params.size)
    if kernel == PIECEWISE_LINEAR:
        spec.params[:] = draws
    else:
        spec.params[0] = draws[0]
        spec.params[2] = draws[2]
    return spec


def _rank_job(job):
    seed, r_cfg = job
    rows = []
    for r in r_cfg["ranks"]:
        base = RngStream(seed).child(r)
        std = 1.0 / math.sqrt(r)
        a = randn(base, r_cfg["n"], r, std)
        b = randn(base, r_cfg["m"], r, std)
        for kernel in r_cfg["kernels"]:
            for scale in r_cfg["scales"]:
                spec = _random_spec(kernel, r_cfg["segments"], base.child(1000 + r), scale)
                b_used = np.zeros_like(b) if (kernel == LINEAR and scale == "zero") else b
                dw = merge_values(spec, b_used, a)
                rank = numeric_rank(dw, r_cfg["rel_tol"])
                rows.append((kernel, scale, r, r_cfg["m"], r_cfg["n"], seed, rank))
    return rows


def run_rank_study(cfg: RunConfig) -> RunReport:
    """Numeric rank of merged matrices per kernel, rank and seed."""
    out, started = _start(cfg)
    r_cfg = cfg.echo()["rank_study"]
    seeds = cfg.seed_list(cfg.rank_study.seeds)
    per_seed = _map_seeds(_rank_job, [(s, r_cfg) for s in seeds], cfg.parallel_seeds)
    rows = [row for chunk in per_seed for row in chunk]
    rows.sort(key=lambda t: (r_cfg["kernels"].index(t[0]), r_cfg["scales"].index(t[1]), t[2], seeds.index(t[5])))
    out.csv("rank_table.csv", ["kernel", "scale", "r", "m", "n", "seed", "numeric_rank"], rows)

    groups = {}
    for kernel, scale, r, _, _, _, rank in rows:
        groups.setdefault((kernel, scale, r), []).append(rank)
    summary = [
        {
            "kernel": k,
            "scale": s,
            "r": r,
            "min_rank": min(v),
            "max_rank": max(v),
            "mean_rank": float(np.mean(v)),
            "exceeds_r_on_all_seeds": bool(min(v) > r),
        }
        for (k, s, r), v in groups.items()
    ]
    out.report.metrics = {"summary": summary}
    if cfg.emit_plot_data:
        out.csv(
            "plot_rank.csv",
            ["kernel", "scale", "r", "min_rank", "mean_rank", "max_rank"],
            ((g["kernel"], g["scale"], g["r"], g["min_rank"], g["mean_rank"], g["max_rank"]) for g in summary),
        )
    return out.finish(started)


# ---------------------------------------------------------------------------
# training experiments


def _dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.source == "csv":
        return load_csv_dataset(d.path)
    return make_blobs(cfg.seed, d.n, d.dim, d.classes, d.separation)


def _model(cfg: RunConfig, data: Dataset, sparsity: float) -> TinyModel:
    m = cfg.model
    return TinyModel.build(
        data.dim,
        list(m.hidden),
        data.class_count,
        m.rank,
        m.kernel,
        sparsity,
        seed=RngStream(cfg.seed).child(1).seed,
        mode=cfg.mode,
        segments=m.segments,
        rule=m.soft_threshold,
        init_scale=m.init_scale,
    )


def _train_cfg(cfg: RunConfig, epochs: int | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        base_lr=t.base_lr,
        weight_decay=t.weight_decay,
        batch_size=t.batch_size,
        epochs=t.epochs if epochs is None else epochs,
        betas=tuple(t.betas),
        eps=t.eps,
        seed=RngStream(cfg.seed).child(2).seed,
    )


def _w0_digest(model: TinyModel) -> str:
    h = hashlib.sha256()
    for layer in model.layers:
        h.update(layer.w0.tobytes())
    return h.hexdigest()


_TRACE_HEADER = ["epoch", "step", "lr", "loss", "accuracy"]


def _trace_rows(trace):
    return ((r["epoch"], r["step"], r["lr"], r["loss"], r["accuracy"]) for r in trace)


def run_sweep_sparsity(cfg: RunConfig) -> RunReport:
    """Train one model per sparsity ratio on the same data, backbone and init."""
    out, started = _start(cfg)
    data = _dataset(cfg)
    tcfg = _train_cfg(cfg)
    results = []
    for s in cfg.sweep.grid:
        model = _model(cfg, data, s)
        trace = train_classifier(model, data, tcfg)
        last = trace[-1] if trace else {"loss": math.nan, "accuracy": math.nan}
        results.append((s, trace, last["loss"], last["accuracy"]))
    out.csv(
        "sweep.csv",
        ["sparsity", "final_loss", "final_accuracy"],
        ((s, loss, acc) for s, _, loss, acc in results),
    )
    out.csv(
        "sweep_trace.csv",
        ["sparsity", *_TRACE_HEADER],
        ((s, *row) for s, trace, _, _ in results for row in _trace_rows(trace)),
    )
    accs = [acc for _, _, _, acc in results]
    best = None
    if not any(math.isnan(a) for a in accs):
        best = results[int(np.argmax(accs))][0]
    out.report.metrics = {
        "rows": [{"sparsity": s, "final_loss": _num(loss), "final_accuracy": _num(acc)} for s, _, loss, acc in results],
        "best_sparsity": best,
    }
    if cfg.emit_plot_data:
        out.csv("plot_sweep.csv", ["sparsity", "final_accuracy"], ((s, acc) for s, _, _, acc in results))
    return out.finish(started)


def _num(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def profile_memory(model: TinyModel, data: Dataset, tcfg: TrainConfig) -> dict:
    """Peak tracked floats over one forward+backward epoch in each mode (no updates)."""
    peaks = {}
    for mode in (STORE, RECOMPUTE):
        probe = copy.deepcopy(model)
        probe.set_mode(mode)
        meter = MemoryMeter()
        one = TrainConfig(**{**tcfg.__dict__, "epochs": 1, "total_steps": None})
        train_classifier(probe, data, one, meter=meter, update=False)
        peaks[mode] = meter.peak_floats
    return peaks


def run_train(cfg: RunConfig) -> RunReport:
    """Train the tiny classifier, profile both memory modes, save a checkpoint."""
    out, started = _start(cfg)
    data = _dataset(cfg)
    model = _model(cfg, data, cfg.model.sparsity)
    tcfg = _train_cfg(cfg)
    peaks = profile_memory(model, data, tcfg)
    before = _w0_digest(model)
    trace = train_classifier(model, data, tcfg)
    after = _w0_digest(model)
    out.csv("metrics.csv", _TRACE_HEADER, _trace_rows(trace))
    save_checkpoint(
        out.root / "checkpoint",
        model,
        {
            "seed": cfg.seed,
            "input_dim": data.dim,
            "classes": data.class_count,
            "hidden": list(cfg.model.hidden),
        },
    )
    out.report.artifacts.extend(
        str(p.relative_to(out.root)) for p in sorted((out.root / "checkpoint").iterdir())
    )
    out.report.peak_floats = peaks
    out.report.metrics = {
        "epochs": len(trace),
        "final_loss": trace[-1]["loss"] if trace else None,
        "final_accuracy": trace[-1]["accuracy"] if trace else None,
        "w0_sha256": after,
        "w0_unchanged": before == after,
        "nonzero_updates": [int(np.count_nonzero(export_merged(l) - l.w0)) for l in model.layers],
    }
    if cfg.emit_plot_data:
        out.csv("plot_train.csv", ["step", "loss", "accuracy"], ((r["step"], r["loss"], r["accuracy"]) for r in trace))
    return out.finish(started)


def _relu_forward(weights, head_w, head_b, x):
    h = x
    for w in weights:
        h = np.maximum(matmul(h, w.T), 0.0)
    return matmul(h, head_w.T) + head_b


def run_export(cfg: RunConfig) -> RunReport:
    """Fold each adapter into a dense weight file and check it on probe inputs.

    Everything lands in ``<out_dir>/exported`` so a ``train`` report in the same
    output directory is left alone.
    """
    ckpt = Path(cfg.export.checkpoint) if cfg.export.checkpoint else Path(cfg.out_dir) / "checkpoint"
    model, meta = load_checkpoint(ckpt, cfg.mode)
    out, started = _start(cfg, "exported")
    weights = []
    for i, layer in enumerate(model.layers):
        w = export_merged(layer)
        weights.append(w)
        out.matrix(
            f"layer{i}.f64",
            w,
            layer=i,
            kernel=layer.kernel.to_dict(),
            sparsity=layer.sparsity,
            soft_threshold=layer.rule,
            seed=meta.get("seed"),
        )
    probes = randn(RngStream(cfg.seed).child(0xE0), cfg.export.probes, model.input_dim)
    via_model = model.forward(probes, train=False)
    via_export = _relu_forward(weights, model.head_w, model.head_b, probes)
    match = via_model.tobytes() == via_export.tobytes()
    out.report.metrics = {
        "layers": len(weights),
        "probe_count": cfg.export.probes,
        "probe_bitwise_match": match,
        "probe_max_abs_diff": float(np.max(np.abs(via_model - via_export))),
        "update_nonzeros": [int(np.count_nonzero(w - l.w0)) for w, l in zip(weights, model.layers)],
    }
    report = out.finish(started)
    if not match:
        raise ProbeMismatchError("exported weights do not reproduce checkpoint outputs bitwise")
    return report


RUNNERS = {
    "fit-matrix": run_fit_matrix,
    "rank-study": run_rank_study,
    "sweep-sparsity": run_sweep_sparsity,
    "train": run_train,
    "export": run_export,
}
