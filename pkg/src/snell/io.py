"""On-disk formats: raw float64 matrices with JSON sidecars, and checkpoints.

Matrix file (``*.f64``): the entries as IEEE-754 binary64, little-endian,
row-major, no header; byte size is ``8 * rows * cols``. The sidecar
``<stem>.json`` carries ``{"format": "snell-matrix/1", "dtype": "<f8",
"order": "C", "shape": [rows, cols], ...}`` plus caller metadata.

JSON is written canonically (sorted keys, two-space indent, trailing newline,
shortest round-trip float repr) so identical content gives identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adapter import KernelizedAdapter
from .kernels import KernelSpec
from .trainer import TinyModel

MATRIX_FORMAT = "snell-matrix/1"
CHECKPOINT_FORMAT = "snell-checkpoint/1"


class CheckpointError(FileNotFoundError):
    pass


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj))


def write_matrix(path, m, **meta) -> Path:
    """Write ``m`` to ``path`` (``.f64``) and its sidecar; returns the sidecar path."""
    path = Path(path)
    arr = np.ascontiguousarray(m, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    path.write_bytes(arr.tobytes(order="C"))
    sidecar = path.with_suffix(".json")
    info = {"format": MATRIX_FORMAT, "dtype": "<f8", "order": "C", "shape": list(arr.shape)}
    info.update(meta)
    write_json(sidecar, info)
    return sidecar


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    info = json.loads(sidecar.read_text())
    if info.get("format") != MATRIX_FORMAT or info.get("dtype") != "<f8":
        raise ValueError(f"{sidecar}: unsupported matrix format {info.get('format')!r}")
    rows, cols = info["shape"]
    raw = path.read_bytes()
    if len(raw) != 8 * rows * cols:
        raise ValueError(f"{path}: expected {8 * rows * cols} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)


def save_checkpoint(directory, model: TinyModel, meta: dict) -> Path:
    """Store every layer (frozen ``w0`` too) and the head under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(model.layers):
        files = {}
        for name, arr in (("w0", layer.w0), ("a", layer.a), ("b", layer.b)):
            fname = f"layer{i}.{name}.f64"
            write_matrix(d / fname, arr, role=name, layer=i)
            files[name] = fname
        layers.append(
            {
                "files": files,
                "kernel": layer.kernel.to_dict(),
                "sparsity": layer.sparsity,
                "rule": layer.rule,
            }
        )
    write_matrix(d / "head_w.f64", model.head_w, role="head_w")
    write_matrix(d / "head_b.f64", model.head_b[None, :], role="head_b")
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "layers": layers,
        "head": {"w": "head_w.f64", "b": "head_b.f64"},
        "meta": meta,
    }
    path = d / "checkpoint.json"
    write_json(path, manifest)
    return path


def load_checkpoint(directory, mode: str = "recompute"):
    """Rebuild the model saved by :func:`save_checkpoint`; returns ``(model, meta)``."""
    d = Path(directory)
    path = d / "checkpoint.json"
    if not path.is_file():
        raise CheckpointError(f"no checkpoint found at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    layers = []
    for entry in manifest["layers"]:
        f = entry["files"]
        layers.append(
            KernelizedAdapter(
                read_matrix(d / f["w0"]),
                read_matrix(d / f["b"]),
                read_matrix(d / f["a"]),
                KernelSpec.from_dict(entry["kernel"]),
                entry["sparsity"],
                mode,
                entry["rule"],
            )
        )
    head_w = read_matrix(d / manifest["head"]["w"])
    head_b = read_matrix(d / manifest["head"]["b"])[0].copy()
    return TinyModel(layers, head_w, head_b), manifest.get("meta", {})
