"""Kernelized low-rank adapter with competition-based sparsification.

A frozen weight ``w0`` (m x n) is adapted by ``w0 + dW_s`` where

    dW[i, j]   = kernel(b[i], a[j])                    b: m x r, a: n x r
    dW_s[i, j] = dW[i, j] * max(|dW[i, j]| - t, 0)

and ``t`` is the ceil(s*m*n)-th smallest ``|dW|``. Only ``a``, ``b`` and the
kernel parameters are trained; no index mask is ever stored.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .kernels import LINEAR, PIECEWISE_LINEAR, KernelSpec, merge_backward, merge_values
from .numkit import RngStream, as_matrix, kth_smallest_abs, matmul, randn

__all__ = [
    "STORE",
    "RECOMPUTE",
    "AdapterGrads",
    "KernelizedAdapter",
    "MemoryMeter",
    "SparsifyResult",
    "backward",
    "export_merged",
    "forward",
    "kill_count",
    "merge",
    "shrink",
    "sparsify",
]

STORE = "store"
RECOMPUTE = "recompute"
MODES = (STORE, RECOMPUTE)

# Soft-threshold rules: the product form dW * max(|dW| - t, 0) or plain shrinkage.
PRODUCT_RULE = "product"
STANDARD_RULE = "standard"
RULES = (PRODUCT_RULE, STANDARD_RULE)


class MemoryMeter:
    """Counts live tracked float64 values and their high-water mark.

    Buffers are registered under a key so a double free or a leak shows up as
    an error instead of a silently wrong count.
    """

    def __init__(self):
        self.current_floats = 0
        self.peak_floats = 0
        self._live: dict[object, int] = {}

    def alloc(self, key, count: int) -> None:
        if key in self._live:
            raise RuntimeError(f"buffer {key!r} already allocated")
        if count < 0:
            raise ValueError("cannot allocate a negative size")
        self._live[key] = int(count)
        self.current_floats += int(count)
        self.peak_floats = max(self.peak_floats, self.current_floats)

    def free(self, key) -> None:
        try:
            count = self._live.pop(key)
        except KeyError:
            raise RuntimeError(f"buffer {key!r} is not allocated") from None
        self.current_floats -= count

    def live(self) -> dict:
        return dict(self._live)


class _NullMeter(MemoryMeter):
    def alloc(self, key, count):
        pass

    def free(self, key):
        pass


@dataclass
class SparsifyResult:
    delta_w_s: np.ndarray
    threshold: float
    nonzero_count: int


@dataclass
class AdapterGrads:
    d_a: np.ndarray
    d_b: np.ndarray
    d_kernel: np.ndarray
    d_x: np.ndarray


@dataclass(eq=False)
class KernelizedAdapter:
    w0: np.ndarray
    b: np.ndarray
    a: np.ndarray
    kernel: KernelSpec
    sparsity: float = 0.0
    mode: str = RECOMPUTE
    rule: str = PRODUCT_RULE
    _ctx: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        w0 = as_matrix(self.w0, "w0").copy()
        w0.flags.writeable = False
        self.w0 = w0
        self.b = as_matrix(self.b, "b").copy()
        self.a = as_matrix(self.a, "a").copy()
        m, n = w0.shape
        if self.b.shape[0] != m or self.a.shape[0] != n or self.a.shape[1] != self.b.shape[1]:
            raise ValueError(
                f"factor shapes b{self.b.shape}, a{self.a.shape} do not fit w0{w0.shape}"
            )
        r = self.rank
        self.kernel.check_dim(r)
        if r > min(m, n):
            warnings.warn(f"rank {r} exceeds min(m, n) = {min(m, n)}", stacklevel=3)
        _check_sparsity(self.sparsity)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")

    @classmethod
    def init(
        cls,
        w0,
        rank: int,
        kernel: str | KernelSpec,
        sparsity: float,
        rng: RngStream,
        mode: str = RECOMPUTE,
        segments: int = 2,
        rule: str = PRODUCT_RULE,
        init_scale: float = 0.0,
    ) -> "KernelizedAdapter":
        """Fresh adapter; with ``init_scale == 0`` its sparse update is exactly zero.

        ``a`` and ``b`` are N(0, 1/r); kernel output scales (alpha) start at
        ``init_scale * N(0, 1)``, gamma at 0 and beta at 1. The linear kernel has
        no scale, so ``b`` takes that role: ``init_scale * N(0, 1/r)``.

        An all-zero update is a stationary point once ``sparsity > 0``: every
        entry ties the zero threshold and is cut, and the product-form rule is
        quadratic around 0. Training from scratch therefore needs a small
        nonzero ``init_scale``.
        """
        w0 = as_matrix(w0, "w0")
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        m, n = w0.shape
        spec = kernel if isinstance(kernel, KernelSpec) else KernelSpec.zero_init(kernel, segments)
        if init_scale < 0:
            raise ValueError(f"init_scale must be >= 0, got {init_scale}")
        std = 1.0 / math.sqrt(rank)
        a = randn(rng, n, rank, std)
        b = randn(rng, m, rank, std)
        if spec.variant == LINEAR:
            b *= init_scale
        elif not isinstance(kernel, KernelSpec) and init_scale > 0:
            draws = randn(rng, 1, spec.params.size, init_scale)[0]
            if spec.variant == PIECEWISE_LINEAR:
                spec.params[:] = draws
            else:
                spec.params[0] = draws[0]
        return cls(w0, b, a, spec, sparsity, mode, rule)

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays, updated in place by optimizers."""
        return {"a": self.a, "b": self.b, "kernel": self.kernel.params}

    def reset_context(self) -> None:
        """Drop any forward state, returning its buffers to the meter."""
        if self._ctx is not None:
            _release(self)


def _check_sparsity(s: float) -> None:
    if not (0.0 <= s <= 1.0):
        raise ValueError(f"sparsity must lie in [0, 1], got {s}")


def kill_count(s: float, total: int) -> int:
    """ceil(s * total), robust to products like 0.7 * 100 = 70.00000000000001."""
    _check_sparsity(s)
    v = s * total
    return min(total, max(0, math.ceil(v - 1e-9 * max(1.0, v))))


def merge(adapter: KernelizedAdapter) -> np.ndarray:
    """Dense ``m x n`` adaptation matrix, entry (i, j) = kernel(b[i], a[j])."""
    return merge_values(adapter.kernel, adapter.b, adapter.a)


def sparsify(delta_w, s: float, rule: str = PRODUCT_RULE) -> SparsifyResult:
    """Zero the ceil(s*m*n) smallest-magnitude entries and shrink the survivors.

    ``s == 0`` is the identity (no threshold at all). Entries whose magnitude
    equals the threshold are zeroed.
    """
    _check_sparsity(s)
    if rule not in RULES:
        raise ValueError(f"rule must be one of {RULES}, got {rule!r}")
    dw = np.asarray(delta_w, dtype=np.float64)
    if s == 0.0:
        return SparsifyResult(dw.copy(), 0.0, int(np.count_nonzero(dw)))
    k = kill_count(s, dw.size)
    if k == 0:
        return SparsifyResult(dw.copy(), 0.0, int(np.count_nonzero(dw)))
    t = kth_smallest_abs(dw, k)
    out = shrink(dw, t, rule)
    return SparsifyResult(out, t, int(np.count_nonzero(out)))


def shrink(delta_w, threshold: float, rule: str = PRODUCT_RULE) -> np.ndarray:
    """Apply a fixed ``threshold``; this is the map the backward pass differentiates."""
    dw = np.asarray(delta_w, dtype=np.float64)
    excess = np.maximum(np.abs(dw) - threshold, 0.0)
    out = dw * excess if rule == PRODUCT_RULE else np.sign(dw) * excess
    # dead entries are +0.0, never -0.0, so stored matrices stay canonical
    out[excess == 0.0] = 0.0
    return out


def _sparsify_slope(dw: np.ndarray, s: float, threshold: float, rule: str) -> np.ndarray:
    # d dW_s / d dW with the threshold held constant.
    if s == 0.0 or kill_count(s, dw.size) == 0:
        return np.ones_like(dw)
    mag = np.abs(dw)
    live = mag > threshold
    if rule == PRODUCT_RULE:
        return np.where(live, 2.0 * mag - threshold, 0.0)
    return live.astype(np.float64)


def _effective_weight(adapter: KernelizedAdapter, dws: np.ndarray) -> np.ndarray:
    return adapter.w0 + dws


def forward(adapter: KernelizedAdapter, x, meter: MemoryMeter | None = None) -> np.ndarray:
    """``y = x @ (w0 + dW_s).T``; keeps what :func:`backward` needs per the mode."""
    meter = meter if meter is not None else _NullMeter()
    x = np.ascontiguousarray(x, dtype=np.float64)
    m, n = adapter.shape
    if x.ndim != 2 or x.shape[1] != n:
        raise ValueError(f"input of shape {x.shape} does not match adapter input width {n}")
    mn = m * n
    tag = id(adapter)
    if adapter._ctx is not None:
        _release(adapter)

    meter.alloc((tag, "dw"), mn)
    dw = merge(adapter)
    meter.alloc((tag, "dws"), mn)
    sp = sparsify(dw, adapter.sparsity, adapter.rule)
    meter.alloc((tag, "w_eff"), mn)
    y = matmul(x, _effective_weight(adapter, sp.delta_w_s).T)
    meter.free((tag, "w_eff"))

    meter.alloc((tag, "x"), x.size)
    ctx = {"x": x, "meter": meter}
    if adapter.mode == STORE:
        ctx.update(dw=dw, dws=sp.delta_w_s, threshold=sp.threshold)
    else:
        del dw, sp
        meter.free((tag, "dw"))
        meter.free((tag, "dws"))
    adapter._ctx = ctx
    return y


def _release(adapter: KernelizedAdapter) -> None:
    ctx = adapter._ctx
    meter = ctx["meter"]
    tag = id(adapter)
    if "dw" in ctx:
        meter.free((tag, "dw"))
        meter.free((tag, "dws"))
    meter.free((tag, "x"))
    adapter._ctx = None


def backward(
    adapter: KernelizedAdapter, x, d_y, meter: MemoryMeter | None = None
) -> AdapterGrads:
    """Gradients w.r.t. ``a``, ``b``, kernel parameters and the input.

    Must follow a :func:`forward` on the same input. In recompute mode the
    merged and sparse matrices are rebuilt here exactly once.
    """
    ctx = adapter._ctx
    if ctx is None:
        raise RuntimeError("backward called without a matching forward pass")
    if meter is None:
        meter = ctx["meter"]
    elif meter is not ctx["meter"]:
        raise ValueError("backward must use the meter that tracked the forward pass")
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != ctx["x"].shape or not (x is ctx["x"] or np.array_equal(x, ctx["x"])):
        raise RuntimeError("backward input does not match the stored forward input")
    d_y = np.ascontiguousarray(d_y, dtype=np.float64)
    m, n = adapter.shape
    if d_y.shape != (x.shape[0], m):
        raise ValueError(f"upstream gradient shape {d_y.shape} != {(x.shape[0], m)}")
    mn = m * n
    tag = id(adapter)

    if "dw" in ctx:
        dw, dws, threshold = ctx["dw"], ctx["dws"], ctx["threshold"]
    else:
        meter.alloc((tag, "dw"), mn)
        dw = merge(adapter)
        meter.alloc((tag, "dws"), mn)
        sp = sparsify(dw, adapter.sparsity, adapter.rule)
        dws, threshold = sp.delta_w_s, sp.threshold
        ctx.update(dw=dw, dws=dws, threshold=threshold)

    meter.alloc((tag, "w_eff"), mn)
    d_x = matmul(d_y, _effective_weight(adapter, dws))
    meter.free((tag, "w_eff"))

    meter.alloc((tag, "grad"), mn)
    g = matmul(d_y.T, x) * _sparsify_slope(dw, adapter.sparsity, threshold, adapter.rule)
    d_b, d_a, d_k = merge_backward(adapter.kernel, adapter.b, adapter.a, g)
    meter.free((tag, "grad"))

    _release(adapter)
    return AdapterGrads(d_a=d_a, d_b=d_b, d_kernel=d_k, d_x=d_x)


def export_merged(adapter: KernelizedAdapter) -> np.ndarray:
    """Single dense ``w0 + dW_s`` for deployment without the adapter."""
    sp = sparsify(merge(adapter), adapter.sparsity, adapter.rule)
    return _effective_weight(adapter, sp.delta_w_s)
