"""Dense float64 matrix helpers, seeded randomness, selection and numeric rank.

Matrices are plain 2-D ``numpy.float64`` arrays in C (row-major) order.
"""

from __future__ import annotations

import numpy as np

from ._accel import njit, pick

__all__ = [
    "NonFiniteError",
    "RngStream",
    "as_matrix",
    "kth_smallest_abs",
    "matmul",
    "numeric_rank",
    "randn",
    "singular_values",
]

DEFAULT_RANK_TOL = 1e-10


class NonFiniteError(FloatingPointError):
    """Raised when a matrix that must be finite holds NaN or Inf."""


def as_matrix(x, name: str = "matrix", check_finite: bool = True) -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {m.shape}")
    if check_finite and not np.isfinite(m).all():
        raise NonFiniteError(f"{name} has non-finite entries")
    return m


# ---------------------------------------------------------------------------
# matmul


@njit
def _matmul_jit(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


def _matmul_np(a, b):
    return np.matmul(a, b)


_matmul = pick(_matmul_jit, _matmul_np)


def matmul(lhs, rhs) -> np.ndarray:
    """Matrix product ``lhs @ rhs``.

    The summation order for each output element is fixed, so repeated calls on
    the same operands return identical bits.
    """
    a = np.ascontiguousarray(lhs, dtype=np.float64)
    b = np.ascontiguousarray(rhs, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _matmul(a, b)


# ---------------------------------------------------------------------------
# order statistics


@njit
def _select_jit(buf, k):
    # Iterative quickselect, median-of-three pivot, three-way partition so runs
    # of equal values cannot degrade it. Falls back to sorting the live window
    # after too many rounds (introselect guard).
    lo = 0
    hi = buf.shape[0] - 1
    budget = 4 * (int(np.log2(buf.shape[0] + 1)) + 1)
    while lo < hi:
        if budget == 0:
            window = np.sort(buf[lo : hi + 1])
            return window[k - lo]
        budget -= 1
        mid = lo + (hi - lo) // 2
        a = buf[lo]
        b = buf[mid]
        c = buf[hi]
        if a < b:
            if b < c:
                pivot = b
            elif a < c:
                pivot = c
            else:
                pivot = a
        else:
            if a < c:
                pivot = a
            elif b < c:
                pivot = c
            else:
                pivot = b
        lt = lo
        gt = hi
        i = lo
        while i <= gt:
            v = buf[i]
            if v < pivot:
                buf[i] = buf[lt]
                buf[lt] = v
                lt += 1
                i += 1
            elif v > pivot:
                buf[i] = buf[gt]
                buf[gt] = v
                gt -= 1
            else:
                i += 1
        if k < lt:
            hi = lt - 1
        elif k > gt:
            lo = gt + 1
        else:
            return pivot
    return buf[k]


def _select_np(buf, k):
    return np.partition(buf, k)[k]


_select = pick(_select_jit, _select_np)


def kth_smallest_abs(values, k: int) -> float:
    """Return the ``k``-th smallest absolute value (1-based) of ``values``.

    Linear expected time. The result is a value, so it does not depend on how
    equal entries are ordered.
    """
    flat = np.abs(np.asarray(values, dtype=np.float64).ravel())
    n = flat.shape[0]
    if isinstance(k, bool) or int(k) != k:
        raise TypeError(f"k must be an integer, got {k!r}")
    k = int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} values")
    return float(_select(flat, k - 1))


# ---------------------------------------------------------------------------
# singular values (one-sided Jacobi)

_JACOBI_TOL = 1e-15
_JACOBI_MAX_SWEEPS = 60


@njit
def _jacobi_sv_jit(u, tol, max_sweeps):
    rows, cols = u.shape
    for _ in range(max_sweeps):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(rows):
                    up = u[i, p]
                    uq = u[i, q]
                    alpha += up * up
                    beta += uq * uq
                    gamma += up * uq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(rows):
                    up = u[i, p]
                    uq = u[i, q]
                    u[i, p] = c * up - s * uq
                    u[i, q] = s * up + c * uq
        if not rotated:
            break
    out = np.empty(cols)
    for j in range(cols):
        acc = 0.0
        for i in range(rows):
            acc += u[i, j] * u[i, j]
        out[j] = np.sqrt(acc)
    return out


def _round_robin(n):
    """Pair schedule covering every column pair once per sweep, n-1 rounds of
    disjoint pairs (circle method). Odd n gets a bye slot."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_sv_np(u, tol, max_sweeps):
    schedule = _round_robin(u.shape[1])
    for _ in range(max_sweeps):
        rotated = False
        for ps, qs in schedule:
            if ps.size == 0:
                continue
            up = u[:, ps]
            uq = u[:, qs]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            live = (gamma != 0.0) & (np.abs(gamma) > tol * np.sqrt(alpha * beta))
            if not live.any():
                continue
            rotated = True
            g = np.where(live, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta == 0.0, 1.0, np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)))
            c = np.where(live, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(live, c * t, 0.0)
            u[:, ps] = c * up - s * uq
            u[:, qs] = s * up + c * uq
        if not rotated:
            break
    return np.sqrt(np.einsum("ij,ij->j", u, u))


_jacobi_sv = pick(_jacobi_sv_jit, _jacobi_sv_np)


def singular_values(m) -> np.ndarray:
    """Singular values in descending order, by one-sided Jacobi rotations."""
    a = as_matrix(m)
    work = a.copy() if a.shape[0] >= a.shape[1] else np.ascontiguousarray(a.T)
    sv = _jacobi_sv(work, _JACOBI_TOL, _JACOBI_MAX_SWEEPS)
    return np.sort(sv)[::-1].copy()


def numeric_rank(m, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``rel_tol * sigma_max``; 0 for a zero matrix."""
    if not rel_tol > 0:
        raise ValueError(f"rel_tol must be positive, got {rel_tol}")
    sv = singular_values(m)
    top = sv[0]
    if top == 0.0:
        return 0
    return int(np.count_nonzero(sv > rel_tol * top))


# ---------------------------------------------------------------------------
# randomness

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Counter-based SplitMix64 stream.

    Word ``i`` (0-based, counting every word ever drawn from this stream) is
    ``mix64(seed + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix64`` is
    the SplitMix64 finalizer (xor-shift 30, multiply 0xBF58476D1CE4E5B9,
    xor-shift 27, multiply 0x94D049BB133111EB, xor-shift 31). Uniforms take the
    top 53 bits: ``((w >> 11) + 0.5) * 2**-53``, strictly inside (0, 1).
    Normals use Box-Muller on consecutive uniform pairs ``(u1, u2)``:
    ``sqrt(-2 ln u1) * cos(2 pi u2)`` then ``sqrt(-2 ln u1) * sin(2 pi u2)``;
    an odd request discards the trailing sine.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed <= _MASK64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self.counter = 0

    def child(self, key: int) -> "RngStream":
        """Independent stream for a sub-task, a pure function of (seed, key)."""
        with np.errstate(over="ignore"):
            k = _mix64(np.array([int(key) & _MASK64], dtype=np.uint64))
            s = _mix64(np.array([self.seed], dtype=np.uint64) ^ k)
        return RngStream(int(s[0]))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * _GOLDEN
            return _mix64(z)

    def uniform(self, n: int) -> np.ndarray:
        w = self.next_u64(n)
        return ((w >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0**-53)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.ravel()[:n]

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by uniforms; a plain loop, only used for shuffling
        # a few hundred sample indices per epoch.
        u = self.uniform(max(n - 1, 0))
        perm = np.arange(n)
        for t, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[t] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def randn(rng: RngStream, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
    """``rows x cols`` matrix of i.i.d. N(0, std**2) draws, row-major fill order."""
    if not std >= 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return (rng.normal(rows * cols) * std).reshape(rows, cols)
