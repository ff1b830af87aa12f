"""Optimization, matrix fitting, a tiny frozen-backbone classifier and its data."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, pick
from .adapter import (
    PRODUCT_RULE,
    RECOMPUTE,
    KernelizedAdapter,
    MemoryMeter,
    backward,
    forward,
)
from .kernels import LINEAR, KernelSpec, merge_backward, merge_values
from .numkit import NonFiniteError, RngStream, as_matrix, matmul, randn

__all__ = [
    "AdamWState",
    "CsvFormatError",
    "CsvRaggedRowError",
    "Dataset",
    "FitResult",
    "TinyModel",
    "TrainConfig",
    "adamw_step",
    "cosine_lr",
    "fit_matrix",
    "load_csv_dataset",
    "make_blobs",
    "save_csv_dataset",
    "softmax_cross_entropy",
    "train_classifier",
]


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 200
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    # None: derived as epochs * ceil(N / batch_size)
    total_steps: int | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("weight_decay must be >= 0 and eps > 0")


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param) -> "AdamWState":
        p = np.asarray(param)
        return cls(np.zeros(p.shape), np.zeros(p.shape), 0)


@njit
def _adamw_jit(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
    fp = p.reshape(-1)
    fg = g.reshape(-1)
    fm = m.reshape(-1)
    fv = v.reshape(-1)
    for i in range(fp.shape[0]):
        gi = fg[i]
        fm[i] = b1 * fm[i] + (1.0 - b1) * gi
        fv[i] = b2 * fv[i] + (1.0 - b2) * gi * gi
        mhat = fm[i] / bc1
        vhat = fv[i] / bc2
        fp[i] = fp[i] - lr * (mhat / (np.sqrt(vhat) + eps) + wd * fp[i])


def _adamw_np(p, g, m, v, lr, b1, b2, eps, wd, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p)


_adamw = pick(_adamw_jit, _adamw_np)


def adamw_step(
    param: np.ndarray,
    grad,
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
    decay: bool = True,
):
    """One in-place AdamW update with bias correction and decoupled decay.

    ``param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + wd * param)``.
    ``decay=False`` drops the decay term for this tensor.
    """
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != param.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {g.shape}, state {state.m.shape}"
        )
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if param.size == 0:
        state.t += 1
        return param, state
    b1, b2 = cfg.betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    wd = cfg.weight_decay if decay else 0.0
    _adamw(param, np.ascontiguousarray(g), state.m, state.v, lr, b1, b2, cfg.eps, wd, bc1, bc2)
    return param, state


def cosine_lr(step: int, total: int, base_lr: float) -> float:
    """Half-cosine decay from ``base_lr`` at step 0 to 0 at ``total``; clamps past the end."""
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    step = min(max(step, 0), total)
    if step == total:
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# Matrix fitting


@dataclass
class FitResult:
    a: np.ndarray
    b: np.ndarray
    kernel: KernelSpec
    trace: list[tuple[int, float]]

    @property
    def final_mse(self) -> float:
        return self.trace[-1][1]


def fit_matrix(
    target,
    r: int,
    kernel: KernelSpec | str,
    steps: int,
    lr: float,
    seed: int,
    record_every: int = 100,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> FitResult:
    """Fit ``target`` by ``kernel(b[i], a[j])`` with plain Adam on the mean squared error.

    Factors start at N(0, 1/r) from ``seed``; kernel parameters start from the
    given spec (a variant name means the zero-output init, and the linear
    kernel then starts with ``b = 0``). The trace holds ``(step, mse)`` after
    every ``record_every`` updates, starting at step 0 and ending at ``steps``.
    """
    w = as_matrix(target, "target")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if record_every < 1:
        raise ValueError(f"record_every must be >= 1, got {record_every}")
    spec = kernel.copy() if isinstance(kernel, KernelSpec) else KernelSpec.zero_init(kernel)
    spec.check_dim(r)
    m, n = w.shape
    rng = RngStream(seed)
    std = 1.0 / math.sqrt(r)
    a = randn(rng, n, r, std)
    b = randn(rng, m, r, std)
    if spec.variant == LINEAR:
        b[:] = 0.0

    cfg = TrainConfig(base_lr=lr, weight_decay=0.0, betas=betas, eps=eps)
    params = (a, b, spec.params)
    states = [AdamWState.zeros_like(p) for p in params]
    scale = 2.0 / (m * n)
    trace: list[tuple[int, float]] = []
    for t in range(steps):
        resid = merge_values(spec, b, a) - w
        if t % record_every == 0:
            trace.append((t, _checked_mse(resid, t)))
        d_b, d_a, d_k = merge_backward(spec, b, a, resid * scale)
        for p, g, st in zip(params, (d_a, d_b, d_k), states):
            adamw_step(p, g, st, lr, cfg, decay=False)
    resid = merge_values(spec, b, a) - w
    trace.append((steps, _checked_mse(resid, steps)))
    return FitResult(a, b, spec, trace)


def _checked_mse(resid, step: int) -> float:
    mse = float(np.mean(resid * resid))
    if not math.isfinite(mse):
        raise NonFiniteError(f"matrix fit diverged: mse is {mse} at step {step}")
    return mse


# ---------------------------------------------------------------------------
# Loss


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient ``(softmax - onehot) / batch``."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ValueError(f"logits {z.shape} and labels {y.shape} do not line up")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    c = z.shape[1]
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(lse - shifted[rows, y]))
    probs = np.exp(shifted - lse[:, None])
    probs[rows, y] -= 1.0
    return loss, probs / z.shape[0]


# ---------------------------------------------------------------------------
# Data


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("features and labels differ in length")
        if self.class_count < 1 or self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def make_blobs(seed: int, n: int, d: int, classes: int, separation: float) -> Dataset:
    """Unit-variance Gaussian clusters whose centers are ``separation`` apart.

    With ``classes <= d`` the centers are ``separation / sqrt(2)`` times the
    first standard basis vectors, so every pair is exactly ``separation``
    apart. Labels cycle ``0, 1, .., classes-1``.
    """
    if classes < 2:
        raise ValueError(f"classes must be >= 2, got {classes}")
    rng = RngStream(seed)
    if classes <= d:
        centers = np.zeros((classes, d))
        centers[np.arange(classes), np.arange(classes)] = separation / math.sqrt(2.0)
    else:
        # Random directions, rescaled so the closest pair sits at `separation`.
        centers = randn(rng.child(1), classes, d)
        gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        gaps[np.diag_indices(classes)] = np.inf
        centers *= separation / gaps.min()
    labels = np.arange(n) % classes
    features = centers[labels] + randn(rng, n, d)
    return Dataset(features, labels, classes)


class CsvFormatError(ValueError):
    """A cell could not be parsed; carries the 1-based data row and column name."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class CsvRaggedRowError(CsvFormatError):
    """A data row has a different number of cells than the header."""


def load_csv_dataset(path) -> Dataset:
    """Read a CSV with a header row; the last column is the integer label."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if len(header) < 2:
            raise CsvFormatError(f"{path}: need at least one feature column and a label column")
        feats, labels = [], []
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvRaggedRowError(
                    f"{path}: row {row_no} has {len(row)} cells, header has {len(header)}",
                    row=row_no,
                )
            values = []
            for col, cell in zip(header[:-1], row[:-1]):
                try:
                    v = float(cell)
                except ValueError:
                    v = math.nan
                if not math.isfinite(v):
                    raise CsvFormatError(
                        f"{path}: row {row_no}, column {col!r}: cannot parse {cell!r} as a number",
                        row=row_no,
                        column=col,
                    )
                values.append(v)
            try:
                label = int(row[-1])
            except ValueError:
                raise CsvFormatError(
                    f"{path}: row {row_no}, column {header[-1]!r}: label {row[-1]!r} is not an integer",
                    row=row_no,
                    column=header[-1],
                ) from None
            if label < 0:
                raise CsvFormatError(
                    f"{path}: row {row_no}: negative label {label}", row=row_no, column=header[-1]
                )
            feats.append(values)
            labels.append(label)
    if not feats:
        raise CsvFormatError(f"{path}: no data rows")
    labels = np.array(labels, dtype=np.int64)
    return Dataset(np.array(feats), labels, int(labels.max()) + 1)


def save_csv_dataset(data: Dataset, path) -> None:
    """Write ``data`` so :func:`load_csv_dataset` restores it bit for bit."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(data.dim)] + ["label"])
        for row, label in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# Tiny classifier


@dataclass(eq=False)
class TinyModel:
    """Frozen adapted linear layers with ReLU after each, then a dense head."""

    layers: list[KernelizedAdapter]
    head_w: np.ndarray
    head_b: np.ndarray
    _cache: list = field(default_factory=list, repr=False)

    @classmethod
    def build(
        cls,
        input_dim: int,
        hidden: list[int],
        classes: int,
        rank: int,
        kernel: str = "piecewise_linear",
        sparsity: float = 0.9,
        seed: int = 0,
        mode: str = RECOMPUTE,
        segments: int = 2,
        rule: str = PRODUCT_RULE,
        init_scale: float = 1e-3,
    ) -> "TinyModel":
        """Random frozen backbone (He-scaled Gaussian) with fresh adapters.

        ``init_scale=0`` gives exactly zero adapter updates, which cannot train
        when ``sparsity > 0``; see :meth:`KernelizedAdapter.init`.
        """
        rng = RngStream(seed)
        layers = []
        fan_in = input_dim
        for i, width in enumerate(hidden):
            w0 = randn(rng.child(2 * i), width, fan_in, math.sqrt(2.0 / fan_in))
            layers.append(
                KernelizedAdapter.init(
                    w0, rank, kernel, sparsity, rng.child(2 * i + 1), mode, segments, rule,
                    init_scale,
                )
            )
            fan_in = width
        return cls(layers, np.zeros((classes, fan_in)), np.zeros(classes))

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1] if self.layers else self.head_w.shape[1]

    def set_mode(self, mode: str) -> None:
        for layer in self.layers:
            layer.mode = mode

    def forward(self, x, meter: MemoryMeter | None = None, train: bool = True) -> np.ndarray:
        h = np.ascontiguousarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValueError(f"input width {h.shape[-1]} != model input {self.input_dim}")
        self._cache = []
        for layer in self.layers:
            pre = forward(layer, h, meter)
            if not train:
                layer.reset_context()
            self._cache.append((h, pre))
            h = np.maximum(pre, 0.0)
        self._feat = h
        return matmul(h, self.head_w.T) + self.head_b

    def backward(self, d_logits):
        """Gradients for every trainable tensor, keyed like :meth:`parameters`."""
        grads = {
            "head_w": matmul(d_logits.T, self._feat),
            "head_b": d_logits.sum(axis=0),
        }
        d_h = matmul(d_logits, self.head_w)
        for i in range(len(self.layers) - 1, -1, -1):
            h_in, pre = self._cache[i]
            d_pre = d_h * (pre > 0.0)
            g = backward(self.layers[i], h_in, d_pre)
            grads[f"layer{i}.a"] = g.d_a
            grads[f"layer{i}.b"] = g.d_b
            grads[f"layer{i}.kernel"] = g.d_kernel
            d_h = g.d_x
        self._cache = []
        return grads

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                params[f"layer{i}.{k}"] = v
        params["head_w"] = self.head_w
        params["head_b"] = self.head_b
        return params

    @staticmethod
    def decays(name: str) -> bool:
        # Kernel parameters and the head bias are exempt from weight decay.
        return not (name.endswith(".kernel") or name == "head_b")

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x, train=False), axis=1)


def train_classifier(
    model: TinyModel,
    data: Dataset,
    cfg: TrainConfig,
    meter: MemoryMeter | None = None,
    update: bool = True,
) -> list[dict]:
    """Minibatch AdamW under a cosine schedule; only adapters and head move.

    Returns one record per epoch: ``epoch, step, lr, loss`` (mean batch loss)
    and ``accuracy`` (full training-set pass after the epoch); ``lr`` is the
    rate used by the epoch's last update. ``update=False``
    runs the passes without touching parameters (memory profiling).
    """
    if data.dim != model.input_dim:
        raise ValueError(f"dataset has {data.dim} features, model expects {model.input_dim}")
    if data.class_count > model.head_w.shape[0]:
        raise ValueError("dataset has more classes than the model head")
    n = data.n
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.total_steps if cfg.total_steps is not None else cfg.epochs * per_epoch
    total = max(total, 1)
    params = model.parameters()
    states = {k: AdamWState.zeros_like(v) for k, v in params.items()}
    rng = RngStream(cfg.seed).child(0x5EED)
    trace: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits = model.forward(data.features[idx], meter)
            loss, d_logits = softmax_cross_entropy(logits, data.labels[idx])
            if not math.isfinite(loss):
                raise NonFiniteError(f"training diverged: loss is {loss} at step {step}")
            grads = model.backward(d_logits)
            lr = cosine_lr(step, total, cfg.base_lr)
            if update:
                for name, p in params.items():
                    adamw_step(p, grads[name], states[name], lr, cfg, decay=model.decays(name))
            losses.append(loss)
            last_lr = lr
            step += 1
        acc = float(np.mean(model.predict(data.features) == data.labels))
        trace.append(
            {
                "epoch": epoch + 1,
                "step": step,
                "lr": last_lr,
                "loss": float(np.mean(losses)),
                "accuracy": acc,
            }
        )
    return trace
