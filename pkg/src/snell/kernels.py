"""Kernel functions for merging low-rank factors, with analytic gradients.

Four variants:

* ``linear``            k(x, x') = x . x'
* ``piecewise_linear``  k(x, x') = sum_p alpha_p * ||x[seg_p] - x'[seg_p]||_2
* ``sigmoid``           k(x, x') = alpha * logistic(beta * x . x') + gamma
* ``rbf``               k(x, x') = alpha * exp(-beta * ||x - x'||_2**2) + gamma

``seg_p = [floor(r p / P), floor(r (p + 1) / P))`` for ``p = 0 .. P-1`` splits the
``r`` coordinates into ``P`` contiguous, near-equal chunks.

Parameter vector layout: empty for ``linear``; ``[alpha_0 .. alpha_{P-1}]`` for
``piecewise_linear``; ``[alpha, beta, gamma]`` for ``sigmoid`` and ``rbf``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, pick
from .numkit import matmul

__all__ = [
    "VARIANTS",
    "KernelGrad",
    "KernelSpec",
    "kernel_grad",
    "kernel_value",
    "merge_backward",
    "merge_values",
    "segment_bounds",
]

LINEAR = "linear"
PIECEWISE_LINEAR = "piecewise_linear"
SIGMOID = "sigmoid"
RBF = "rbf"
VARIANTS = (LINEAR, PIECEWISE_LINEAR, SIGMOID, RBF)

_ALIASES = {
    "linear": LINEAR,
    "lin": LINEAR,
    "piecewise_linear": PIECEWISE_LINEAR,
    "piecewiselinear": PIECEWISE_LINEAR,
    "piecewise-linear": PIECEWISE_LINEAR,
    "pwl": PIECEWISE_LINEAR,
    "sigmoid": SIGMOID,
    "rbf": RBF,
}


def canonical_variant(name: str) -> str:
    try:
        return _ALIASES[str(name).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown kernel variant {name!r}; expected one of {VARIANTS}") from None


def segment_bounds(r: int, segments: int) -> list[tuple[int, int]]:
    if segments < 1:
        raise ValueError(f"segments must be positive, got {segments}")
    if segments > r:
        raise ValueError(f"segments={segments} exceeds vector dimension r={r}")
    return [(r * p // segments, r * (p + 1) // segments) for p in range(segments)]


@dataclass
class KernelSpec:
    """Kernel variant plus its learnable parameters (a flat float64 vector)."""

    variant: str
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    segments: int = 2

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        self.params = np.array(self.params, dtype=np.float64).reshape(-1)
        expected = self.param_count()
        if self.params.size != expected:
            raise ValueError(
                f"{self.variant} kernel takes {expected} parameters, got {self.params.size}"
            )

    def param_count(self) -> int:
        if self.variant == LINEAR:
            return 0
        if self.variant == PIECEWISE_LINEAR:
            if self.segments < 1:
                raise ValueError(f"segments must be positive, got {self.segments}")
            return self.segments
        return 3

    @classmethod
    def zero_init(cls, variant: str, segments: int = 2) -> "KernelSpec":
        """Output scales (alpha, gamma) at 0 and beta at 1, so the kernel is identically 0.

        ``linear`` has no parameters and is not zero; callers zero a factor instead.
        """
        variant = canonical_variant(variant)
        if variant == PIECEWISE_LINEAR:
            return cls(variant, np.zeros(segments), segments)
        if variant in (SIGMOID, RBF):
            return cls(variant, np.array([0.0, 1.0, 0.0]), segments)
        return cls(variant, np.zeros(0), segments)

    @property
    def alpha(self):
        if self.variant == PIECEWISE_LINEAR:
            return self.params
        if self.variant in (SIGMOID, RBF):
            return self.params[0]
        raise AttributeError("linear kernel has no alpha")

    @property
    def beta(self) -> float:
        if self.variant not in (SIGMOID, RBF):
            raise AttributeError(f"{self.variant} kernel has no beta")
        return self.params[1]

    @property
    def gamma(self) -> float:
        if self.variant not in (SIGMOID, RBF):
            raise AttributeError(f"{self.variant} kernel has no gamma")
        return self.params[2]

    def copy(self) -> "KernelSpec":
        return KernelSpec(self.variant, self.params.copy(), self.segments)

    def with_params(self, params) -> "KernelSpec":
        return KernelSpec(self.variant, params, self.segments)

    def check_dim(self, r: int) -> None:
        if self.variant == PIECEWISE_LINEAR:
            segment_bounds(r, self.segments)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "segments": int(self.segments),
            "params": [float(v) for v in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        variant = canonical_variant(d["variant"])
        segments = int(d.get("segments", 2))
        if "params" in d and d["params"] is not None:
            return cls(variant, d["params"], segments)
        return cls.zero_init(variant, segments)


@dataclass
class KernelGrad:
    d_x: np.ndarray
    d_xprime: np.ndarray
    d_params: np.ndarray


def _logistic(z):
    # Stable for either sign of z.
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def _vectors(spec: KernelSpec, x, xp):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    xp = np.asarray(xp, dtype=np.float64).reshape(-1)
    if x.shape != xp.shape:
        raise ValueError(f"kernel inputs differ in length: {x.size} vs {xp.size}")
    spec.check_dim(x.size)
    return x, xp


def kernel_value(spec: KernelSpec, x, xp) -> float:
    """Evaluate the kernel on a single pair of vectors."""
    x, xp = _vectors(spec, x, xp)
    v = spec.variant
    if v == LINEAR:
        return float(x @ xp)
    if v == PIECEWISE_LINEAR:
        total = 0.0
        for a, (lo, hi) in zip(spec.params, segment_bounds(x.size, spec.segments)):
            total += a * np.sqrt(np.sum((x[lo:hi] - xp[lo:hi]) ** 2))
        return float(total)
    alpha, beta, gamma = spec.params
    if v == SIGMOID:
        return float(alpha * _logistic(beta * (x @ xp)) + gamma)
    return float(alpha * np.exp(-beta * np.sum((x - xp) ** 2)) + gamma)


def kernel_grad(spec: KernelSpec, x, xp) -> KernelGrad:
    """Partial derivatives of :func:`kernel_value` w.r.t. both inputs and the parameters.

    Where a distance is exactly zero the norm's subgradient is taken as 0.
    """
    x, xp = _vectors(spec, x, xp)
    v = spec.variant
    d_params = np.zeros(spec.params.size)
    if v == LINEAR:
        return KernelGrad(xp.copy(), x.copy(), d_params)
    if v == PIECEWISE_LINEAR:
        d_x = np.zeros_like(x)
        for p, (lo, hi) in enumerate(segment_bounds(x.size, spec.segments)):
            diff = x[lo:hi] - xp[lo:hi]
            norm = np.sqrt(np.sum(diff**2))
            d_params[p] = norm
            if norm > 0:
                d_x[lo:hi] = spec.params[p] * diff / norm
        return KernelGrad(d_x, -d_x, d_params)
    alpha, beta, gamma = spec.params
    if v == SIGMOID:
        dot = float(x @ xp)
        s = _logistic(beta * dot)
        ds = alpha * s * (1.0 - s)
        d_params[:] = (s, ds * dot, 1.0)
        return KernelGrad(ds * beta * xp, ds * beta * x, d_params)
    diff = x - xp
    dist2 = float(np.sum(diff**2))
    e = np.exp(-beta * dist2)
    d_params[:] = (e, -alpha * e * dist2, 1.0)
    d_x = -2.0 * alpha * beta * e * diff
    return KernelGrad(d_x, -d_x, d_params)


# ---------------------------------------------------------------------------
# Matrix-level merge: out[i, j] = k(B[i], A[j]) and its reverse pass.

_CODES = {LINEAR: 0, PIECEWISE_LINEAR: 1, SIGMOID: 2, RBF: 3}


@njit
def _logistic_jit(z):
    if z >= 0.0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


@njit
def _merge_jit(code, params, bounds, b, a):
    m, r = b.shape
    n = a.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            if code == 0:
                acc = 0.0
                for t in range(r):
                    acc += b[i, t] * a[j, t]
                out[i, j] = acc
            elif code == 1:
                acc = 0.0
                for p in range(bounds.shape[0]):
                    d2 = 0.0
                    for t in range(bounds[p, 0], bounds[p, 1]):
                        diff = b[i, t] - a[j, t]
                        d2 += diff * diff
                    acc += params[p] * np.sqrt(d2)
                out[i, j] = acc
            elif code == 2:
                dot = 0.0
                for t in range(r):
                    dot += b[i, t] * a[j, t]
                out[i, j] = params[0] * _logistic_jit(params[1] * dot) + params[2]
            else:
                d2 = 0.0
                for t in range(r):
                    diff = b[i, t] - a[j, t]
                    d2 += diff * diff
                out[i, j] = params[0] * np.exp(-params[1] * d2) + params[2]
    return out


@njit
def _merge_backward_jit(code, params, bounds, b, a, g):
    m, r = b.shape
    n = a.shape[0]
    d_b = np.zeros((m, r))
    d_a = np.zeros((n, r))
    d_p = np.zeros(params.shape[0])
    for i in range(m):
        for j in range(n):
            gij = g[i, j]
            if gij == 0.0:
                continue
            if code == 0:
                for t in range(r):
                    d_b[i, t] += gij * a[j, t]
                    d_a[j, t] += gij * b[i, t]
            elif code == 1:
                for p in range(bounds.shape[0]):
                    d2 = 0.0
                    for t in range(bounds[p, 0], bounds[p, 1]):
                        diff = b[i, t] - a[j, t]
                        d2 += diff * diff
                    norm = np.sqrt(d2)
                    d_p[p] += gij * norm
                    if norm > 0.0:
                        h = gij * params[p] / norm
                        for t in range(bounds[p, 0], bounds[p, 1]):
                            diff = b[i, t] - a[j, t]
                            d_b[i, t] += h * diff
                            d_a[j, t] -= h * diff
            elif code == 2:
                dot = 0.0
                for t in range(r):
                    dot += b[i, t] * a[j, t]
                s = _logistic_jit(params[1] * dot)
                ds = gij * params[0] * s * (1.0 - s)
                d_p[0] += gij * s
                d_p[1] += ds * dot
                d_p[2] += gij
                h = ds * params[1]
                for t in range(r):
                    d_b[i, t] += h * a[j, t]
                    d_a[j, t] += h * b[i, t]
            else:
                d2 = 0.0
                for t in range(r):
                    diff = b[i, t] - a[j, t]
                    d2 += diff * diff
                e = np.exp(-params[1] * d2)
                d_p[0] += gij * e
                d_p[1] -= gij * params[0] * e * d2
                d_p[2] += gij
                h = -2.0 * gij * params[0] * params[1] * e
                for t in range(r):
                    diff = b[i, t] - a[j, t]
                    d_b[i, t] += h * diff
                    d_a[j, t] -= h * diff
    return d_b, d_a, d_p


def _logistic_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sq_dist_np(b, a):
    diff = b[:, None, :] - a[None, :, :]
    return np.einsum("ijt,ijt->ij", diff, diff)


def _merge_np(code, params, bounds, b, a):
    if code == 0:
        return matmul(b, a.T)
    if code == 1:
        out = np.zeros((b.shape[0], a.shape[0]))
        for p, (lo, hi) in enumerate(bounds):
            out += params[p] * np.sqrt(_sq_dist_np(b[:, lo:hi], a[:, lo:hi]))
        return out
    if code == 2:
        return params[0] * _logistic_np(params[1] * matmul(b, a.T)) + params[2]
    return params[0] * np.exp(-params[1] * _sq_dist_np(b, a)) + params[2]


def _pair_grad_np(h, b, a):
    # sum_j h_ij (b_i - a_j) and -sum_i h_ij (b_i - a_j), without the m*n*r tensor.
    d_b = b * h.sum(axis=1)[:, None] - matmul(h, a)
    d_a = a * h.sum(axis=0)[:, None] - matmul(h.T, b)
    return d_b, d_a


def _merge_backward_np(code, params, bounds, b, a, g):
    d_p = np.zeros(params.shape[0])
    if code == 0:
        return matmul(g, a), matmul(g.T, b), d_p
    if code == 1:
        d_b = np.zeros_like(b)
        d_a = np.zeros_like(a)
        for p, (lo, hi) in enumerate(bounds):
            norm = np.sqrt(_sq_dist_np(b[:, lo:hi], a[:, lo:hi]))
            d_p[p] = np.sum(g * norm)
            safe = np.where(norm > 0.0, norm, 1.0)
            h = np.where(norm > 0.0, g * params[p] / safe, 0.0)
            db, da = _pair_grad_np(h, b[:, lo:hi], a[:, lo:hi])
            d_b[:, lo:hi] = db
            d_a[:, lo:hi] = da
        return d_b, d_a, d_p
    if code == 2:
        dot = matmul(b, a.T)
        s = _logistic_np(params[1] * dot)
        ds = g * params[0] * s * (1.0 - s)
        d_p[:] = (np.sum(g * s), np.sum(ds * dot), np.sum(g))
        h = ds * params[1]
        return matmul(h, a), matmul(h.T, b), d_p
    d2 = _sq_dist_np(b, a)
    e = np.exp(-params[1] * d2)
    d_p[:] = (np.sum(g * e), -np.sum(g * params[0] * e * d2), np.sum(g))
    h = -2.0 * g * params[0] * params[1] * e
    d_b, d_a = _pair_grad_np(h, b, a)
    return d_b, d_a, d_p


_merge = pick(_merge_jit, _merge_np)
_merge_backward = pick(_merge_backward_jit, _merge_backward_np)


def _bounds_array(spec: KernelSpec, r: int) -> np.ndarray:
    if spec.variant == PIECEWISE_LINEAR:
        return np.array(segment_bounds(r, spec.segments), dtype=np.int64).reshape(-1, 2)
    return np.zeros((0, 2), dtype=np.int64)


def _factors(spec: KernelSpec, b, a):
    b = np.ascontiguousarray(b, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    if b.ndim != 2 or a.ndim != 2 or b.shape[1] != a.shape[1]:
        raise ValueError(f"factor shapes {b.shape} and {a.shape} do not share a rank")
    spec.check_dim(b.shape[1])
    return b, a


def merge_values(spec: KernelSpec, b, a) -> np.ndarray:
    """``m x n`` matrix with entry ``(i, j) = k(b[i], a[j])``."""
    b, a = _factors(spec, b, a)
    return _merge(_CODES[spec.variant], spec.params, _bounds_array(spec, b.shape[1]), b, a)


def merge_backward(spec: KernelSpec, b, a, grad_out):
    """Pull ``dL/d(merge)`` back to ``(dL/db, dL/da, dL/dparams)``."""
    b, a = _factors(spec, b, a)
    g = np.ascontiguousarray(grad_out, dtype=np.float64)
    if g.shape != (b.shape[0], a.shape[0]):
        raise ValueError(f"upstream gradient shape {g.shape} != {(b.shape[0], a.shape[0])}")
    return _merge_backward(
        _CODES[spec.variant], spec.params, _bounds_array(spec, b.shape[1]), b, a, g
    )
