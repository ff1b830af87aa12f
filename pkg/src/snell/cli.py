"""``snell`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
Failures print one JSON object per line on stderr, e.g.
``{"error": "config", "field": "fit.steps", "message": "must be >= 1"}``.
Warnings use the same shape with a ``"warning"`` key instead of ``"error"``.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from .config import EXPERIMENTS, ConfigError, build_config, load_config_file
from .experiments import RUNNERS
from .trainer import CsvFormatError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config (a report.json also works)")
    common.add_argument("--seed", type=int, metavar="U64", help="base seed, overrides the file")
    common.add_argument("--out", metavar="DIR", help="output directory (default $SNELL_OUT_DIR or ./runs)")
    common.add_argument("--mode", choices=("store", "recompute"), help="adapter memory mode")
    common.add_argument(
        "--emit-plot-data", action="store_true", default=None, help="also write plot-ready CSV files"
    )
    common.add_argument("--parallel-seeds", type=int, metavar="N", help="worker processes for seed fan-out")

    p = argparse.ArgumentParser(prog="snell", description="Kernelized sparse low-rank adaptation experiments.")
    sub = p.add_subparsers(dest="experiment", required=True, metavar="{" + ",".join(EXPERIMENTS) + "}")
    helps = {
        "fit-matrix": "fit random matrices with each kernel (MSE traces)",
        "rank-study": "numeric rank of kernel-merged matrices",
        "sweep-sparsity": "train the tiny classifier across sparsity ratios",
        "train": "train the tiny classifier, profile memory, save a checkpoint",
        "export": "fold a trained checkpoint into dense weight files",
    }
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def _fail(code: int, kind: str, message: str, field: str | None = None) -> int:
    payload = {"error": kind, "message": message}
    if field is not None:
        payload["field"] = field
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def _json_warning(message, category, filename, lineno, file=None, line=None):
    print(json.dumps({"warning": category.__name__, "message": str(message)}, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "mode": args.mode,
        "emit_plot_data": args.emit_plot_data,
        "parallel_seeds": args.parallel_seeds,
    }
    previous = warnings.showwarning
    warnings.showwarning = _json_warning
    try:
        # Divergence is detected explicitly and surfaces as exit code 3.
        with np.errstate(all="ignore"):
            file_data = load_config_file(args.config) if args.config else None
            cfg = build_config(args.experiment, file_data, overrides)
            report = RUNNERS[cfg.experiment](cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc.message, exc.field)
    except (FileNotFoundError, CsvFormatError) as exc:
        return _fail(EXIT_CONFIG, "input", str(exc))
    except ArithmeticError as exc:
        return _fail(EXIT_NUMERIC, "numerical", str(exc))
    finally:
        warnings.showwarning = previous
    print(json.dumps({"experiment": report.experiment, "out": cfg.out_dir, "metrics": report.metrics}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
