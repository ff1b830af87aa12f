import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snell import kernels
from snell.adapter import (
    RECOMPUTE,
    STORE,
    KernelizedAdapter,
    MemoryMeter,
    backward,
    export_merged,
    forward,
    kill_count,
    merge,
    shrink,
    sparsify,
)
from snell.kernels import KernelSpec, kernel_value
from snell.numkit import RngStream, matmul, randn

H = 1e-6


def brute_sparsify(dw, s):
    """Full-sort oracle: zero the ceil(s*mn) smallest magnitudes, shrink the rest."""
    flat = np.abs(dw).ravel()
    k = math.ceil(s * flat.size - 1e-9)
    if s == 0 or k == 0:
        return dw.copy(), 0.0
    t = np.sort(flat)[k - 1]
    out = np.zeros_like(dw)
    for idx in np.ndindex(dw.shape):
        if abs(dw[idx]) > t:
            out[idx] = dw[idx] * (abs(dw[idx]) - t)
    return out, t


def pairwise_merge(spec, b, a):
    return np.array([[kernel_value(spec, b[i], a[j]) for j in range(a.shape[0])] for i in range(b.shape[0])])


def random_adapter(seed, m, n, r, variant, s, mode=RECOMPUTE, rule="product"):
    rng = RngStream(seed)
    if variant == "linear":
        params = []
    elif variant == "piecewise_linear":
        params = rng.child(3).normal(2)
    else:
        alpha, beta, gamma = rng.child(3).normal(3)
        params = [alpha, 0.05 + 0.2 * abs(beta), gamma]
    return KernelizedAdapter(
        randn(rng.child(0), m, n),
        randn(rng.child(1), m, r),
        randn(rng.child(2), n, r),
        KernelSpec(variant, params),
        s,
        mode,
        rule,
    )


class TestMerge:
    def test_outer_product(self):
        ad = KernelizedAdapter(np.zeros((2, 2)), [[1.0], [2.0]], [[3.0], [4.0]], KernelSpec("linear"))
        assert merge(ad).tolist() == [[3.0, 4.0], [6.0, 8.0]]

    def test_pwl_zero_alpha(self, gauss):
        ad = KernelizedAdapter(gauss(1, 4, 3), gauss(2, 4, 2), gauss(3, 3, 2), KernelSpec("pwl", [0.0, 0.0]))
        assert not merge(ad).any()

    def test_linear_matches_matmul(self, gauss):
        ad = KernelizedAdapter(np.zeros((8, 5)), gauss(1, 8, 3), gauss(2, 5, 3), KernelSpec("linear"))
        assert np.max(np.abs(merge(ad) - ad.b @ ad.a.T)) < 1e-12

    @pytest.mark.parametrize("variant", kernels.VARIANTS)
    def test_matches_pairwise(self, variant):
        ad = random_adapter(4, 6, 5, 3, variant, 0.0)
        assert np.max(np.abs(merge(ad) - pairwise_merge(ad.kernel, ad.b, ad.a))) < 1e-12


class TestSparsify:
    def test_worked_example(self):
        res = sparsify(np.array([[3.0, 1.0], [-2.0, 0.5]]), 0.5)
        assert res.threshold == 1.0
        assert res.delta_w_s.tolist() == [[6.0, 0.0], [-2.0, 0.0]]
        assert res.nonzero_count == 2

    def test_standard_rule(self):
        res = sparsify(np.array([[3.0, 1.0], [-2.0, 0.5]]), 0.5, rule="standard")
        assert res.delta_w_s.tolist() == [[2.0, 0.0], [-1.0, 0.0]]

    def test_full_sparsity(self, gauss):
        assert not sparsify(gauss(1, 4, 6), 1.0).delta_w_s.any()

    def test_zero_sparsity_identity(self, gauss):
        dw = gauss(2, 4, 6)
        res = sparsify(dw, 0.0)
        assert np.array_equal(res.delta_w_s, dw) and res.threshold == 0.0

    @pytest.mark.parametrize("s", [-0.1, 1.5, float("nan")])
    def test_bad_ratio(self, s):
        with pytest.raises(ValueError):
            sparsify(np.ones((2, 2)), s)

    def test_ties_at_threshold_are_zeroed(self):
        res = sparsify(np.array([[1.0, -1.0, 1.0, 2.0]]), 0.25)
        assert res.threshold == 1.0
        assert res.delta_w_s.tolist() == [[0.0, 0.0, 0.0, 2.0]]
        assert res.nonzero_count <= 4 - 1

    def test_kill_count_guards_float_noise(self):
        # 0.7 * 10 is 7.000000000000001 in binary floating point
        assert kill_count(0.7, 10) == 7
        assert kill_count(0.71, 10) == 8
        assert kill_count(0.0, 10) == 0

    def test_brute_force_oracle(self):
        rng = RngStream(77)
        for t in range(200):
            m, n = 1 + t % 7, 1 + (t * 3) % 11
            dw = randn(rng.child(t), m, n)
            for s in [0.1 * i for i in range(1, 10)]:
                res = sparsify(dw, s)
                expect, thr = brute_sparsify(dw, s)
                assert res.delta_w_s.tobytes() == expect.tobytes()
                assert res.threshold == thr
                assert res.nonzero_count == m * n - math.ceil(s * m * n - 1e-9)

    @given(st.integers(0, 2**40), st.integers(1, 12), st.integers(1, 12), st.floats(0.0, 1.0))
    def test_competition(self, seed, m, n, s):
        dw = randn(RngStream(seed), m, n)
        res = sparsify(dw, s)
        alive = res.delta_w_s != 0
        if alive.any() and (~alive).any():
            assert np.abs(dw)[alive].min() > np.abs(dw)[~alive].max()
        assert np.all(np.abs(dw)[alive] > res.threshold)
        assert res.nonzero_count <= m * n - kill_count(s, m * n)

    def test_shrink_matches_sparsify(self, gauss):
        dw = gauss(5, 6, 6)
        res = sparsify(dw, 0.4)
        assert np.array_equal(shrink(dw, res.threshold), res.delta_w_s)


class TestForward:
    def test_dead_adapter(self, gauss):
        ad = random_adapter(1, 5, 4, 2, "rbf", 1.0)
        x = gauss(9, 3, 4)
        assert forward(ad, x).tobytes() == matmul(x, ad.w0.T).tobytes()

    def test_linear_dense(self, gauss):
        ad = random_adapter(2, 5, 4, 2, "linear", 0.0)
        x = gauss(9, 3, 4)
        assert np.max(np.abs(forward(ad, x) - x @ (ad.w0 + ad.b @ ad.a.T).T)) < 1e-12

    def test_width_mismatch(self, gauss):
        with pytest.raises(ValueError):
            forward(random_adapter(2, 5, 4, 2, "linear", 0.0), gauss(1, 3, 5))

    @pytest.mark.parametrize("variant", kernels.VARIANTS)
    @pytest.mark.parametrize("s", [0.0, 0.6])
    def test_modes_bitwise(self, variant, s, gauss):
        x, d_y = gauss(1, 7, 6), gauss(2, 7, 5)
        out = {}
        for mode in (STORE, RECOMPUTE):
            ad = random_adapter(3, 5, 6, 3, variant, s, mode)
            y = forward(ad, x)
            g = backward(ad, x, d_y)
            out[mode] = [y, g.d_a, g.d_b, g.d_kernel, g.d_x]
        for u, v in zip(out[STORE], out[RECOMPUTE]):
            assert u.tobytes() == v.tobytes()


def frozen_loss(ad, x, target, mask, threshold):
    """Loss with the sparsity threshold and live set held fixed, built from scalar kernel calls."""
    dw = pairwise_merge(ad.kernel, ad.b, ad.a)
    dws = dw if mask is None else np.where(mask, shrink(dw, threshold, ad.rule), 0.0)
    resid = x @ (ad.w0 + dws).T - target
    return 0.5 * float(np.sum(resid * resid))


def fd_grad(arr, loss):
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + H
        up = loss()
        arr[idx] = old - H
        down = loss()
        arr[idx] = old
        out[idx] = (up - down) / (2 * H)
    return out


def rel_err(u, v):
    if u.size == 0:
        return 0.0
    return float(np.max(np.abs(u - v)) / max(np.max(np.abs(u)), np.max(np.abs(v)), 1e-12))


def check_gradients(ad, x, target):
    """Return the worst relative error over A, B, kernel params and x, or None if too close to the threshold."""
    dw = merge(ad)
    res = sparsify(dw, ad.sparsity, ad.rule)
    mask = None
    if ad.sparsity > 0:
        gaps = np.sort(np.abs(np.abs(dw) - res.threshold).ravel())
        # gaps[0] is the entry defining the threshold itself
        if gaps[1] <= 1e-3:
            return None
        mask = np.abs(dw) > res.threshold
    y = forward(ad, x)
    g = backward(ad, x, y - target)
    loss = lambda: frozen_loss(ad, x, target, mask, res.threshold)  # noqa: E731
    errs = [
        rel_err(g.d_a, fd_grad(ad.a, loss)),
        rel_err(g.d_b, fd_grad(ad.b, loss)),
        rel_err(g.d_kernel, fd_grad(ad.kernel.params, loss)),
    ]
    xv = x.copy()
    errs.append(rel_err(g.d_x, fd_grad(xv, lambda: frozen_loss(ad, xv, target, mask, res.threshold))))
    return max(errs)


class TestBackward:
    def test_dead_branch(self, gauss):
        ad = random_adapter(5, 5, 4, 2, "sigmoid", 1.0)
        x, d_y = gauss(1, 3, 4), gauss(2, 3, 5)
        forward(ad, x)
        g = backward(ad, x, d_y)
        assert not g.d_a.any() and not g.d_b.any() and not g.d_kernel.any()
        assert g.d_x.tobytes() == matmul(d_y, ad.w0).tobytes()

    def test_requires_forward(self, gauss):
        ad = random_adapter(5, 5, 4, 2, "rbf", 0.5)
        with pytest.raises(RuntimeError):
            backward(ad, gauss(1, 3, 4), gauss(2, 3, 5))

    def test_rejects_other_input(self, gauss):
        ad = random_adapter(5, 5, 4, 2, "rbf", 0.5)
        forward(ad, gauss(1, 3, 4))
        with pytest.raises(RuntimeError):
            backward(ad, gauss(3, 3, 4), gauss(2, 3, 5))

    def test_context_consumed(self, gauss):
        ad = random_adapter(5, 5, 4, 2, "rbf", 0.5)
        x = gauss(1, 3, 4)
        forward(ad, x)
        backward(ad, x, gauss(2, 3, 5))
        with pytest.raises(RuntimeError):
            backward(ad, x, gauss(2, 3, 5))

    @pytest.mark.parametrize("rule", ["product", "standard"])
    @pytest.mark.parametrize("variant", kernels.VARIANTS)
    def test_finite_differences(self, variant, rule):
        checked = 0
        for seed in range(200):
            s = (0.0, 0.3, 0.7)[seed % 3]
            ad = random_adapter(1000 + seed, 5, 4, 4, variant, s, STORE, rule)
            rng = RngStream(seed)
            err = check_gradients(ad, randn(rng.child(0), 3, 4), randn(rng.child(1), 3, 5))
            if err is None:
                continue
            assert err < 1e-5
            checked += 1
            if checked == 9:
                break
        assert checked == 9

    def test_moving_threshold_is_not_differentiated(self):
        # With the threshold re-selected on every evaluation, finite differences
        # pick up d(threshold)/d(params); the backward pass deliberately omits it.
        ad = random_adapter(3, 5, 4, 4, "piecewise_linear", 0.5, STORE)
        rng = RngStream(0)
        x, target = randn(rng.child(0), 3, 4), randn(rng.child(1), 3, 5)
        g = backward(ad, x, forward(ad, x) - target)

        def moving():
            resid = x @ (ad.w0 + sparsify(pairwise_merge(ad.kernel, ad.b, ad.a), 0.5).delta_w_s).T - target
            return 0.5 * float(np.sum(resid * resid))

        assert rel_err(g.d_b, fd_grad(ad.b, moving)) > 1e-3


class TestExport:
    @pytest.mark.parametrize("variant", kernels.VARIANTS)
    def test_fresh_adapter_exports_w0(self, variant, gauss):
        w0 = gauss(1, 6, 5)
        ad = KernelizedAdapter.init(w0, 3, variant, 0.5, RngStream(2))
        assert export_merged(ad).tobytes() == w0.tobytes()
        assert not merge(ad).any()

    def test_full_sparsity_exports_w0(self):
        ad = random_adapter(6, 6, 5, 3, "rbf", 1.0)
        assert export_merged(ad).tobytes() == ad.w0.tobytes()

    @pytest.mark.parametrize("variant", kernels.VARIANTS)
    def test_self_consistent(self, variant, gauss):
        ad = random_adapter(7, 6, 5, 3, variant, 0.4)
        x = gauss(3, 8, 5)
        assert matmul(x, export_merged(ad).T).tobytes() == forward(ad, x).tobytes()


class TestAdapterState:
    def test_w0_read_only(self, gauss):
        ad = random_adapter(8, 4, 4, 2, "linear", 0.0)
        with pytest.raises(ValueError):
            ad.w0[0, 0] = 1.0

    def test_w0_copied(self, gauss):
        w0 = gauss(1, 4, 4)
        ad = KernelizedAdapter(w0, gauss(2, 4, 2), gauss(3, 4, 2), KernelSpec("linear"))
        w0[0, 0] = 99.0
        assert ad.w0[0, 0] != 99.0

    def test_rank_warning(self, gauss):
        with pytest.warns(UserWarning, match="rank"):
            KernelizedAdapter(gauss(1, 2, 3), gauss(2, 2, 4), gauss(3, 3, 4), KernelSpec("linear"))

    def test_shape_mismatch(self, gauss):
        with pytest.raises(ValueError):
            KernelizedAdapter(gauss(1, 4, 3), gauss(2, 5, 2), gauss(3, 3, 2), KernelSpec("linear"))

    def test_bad_mode(self, gauss):
        with pytest.raises(ValueError):
            KernelizedAdapter(gauss(1, 4, 3), gauss(2, 4, 2), gauss(3, 3, 2), KernelSpec("linear"), mode="lazy")

    def test_init_statistics(self):
        ad = KernelizedAdapter.init(np.zeros((200, 100)), 4, "rbf", 0.0, RngStream(1))
        assert abs(ad.a.std() - 0.5) < 0.03 and abs(ad.b.std() - 0.5) < 0.03
        assert ad.kernel.params.tolist() == [0.0, 1.0, 0.0]

    def test_init_scale(self):
        ad = KernelizedAdapter.init(np.zeros((6, 6)), 2, "pwl", 0.9, RngStream(1), init_scale=1e-3)
        assert np.all(ad.kernel.params != 0) and np.all(np.abs(ad.kernel.params) < 1e-2)


class TestMemoryMeter:
    def test_counts(self):
        m = MemoryMeter()
        m.alloc("a", 10)
        m.alloc("b", 5)
        m.free("a")
        assert (m.current_floats, m.peak_floats) == (5, 15)
        m.free("b")
        assert m.current_floats == 0 and m.live() == {}

    def test_double_free(self):
        m = MemoryMeter()
        m.alloc("a", 1)
        m.free("a")
        with pytest.raises(RuntimeError):
            m.free("a")

    def test_double_alloc(self):
        m = MemoryMeter()
        m.alloc("a", 1)
        with pytest.raises(RuntimeError):
            m.alloc("a", 1)

    def test_other_meter_rejected(self, gauss):
        ad = random_adapter(1, 4, 4, 2, "rbf", 0.5)
        x = gauss(1, 2, 4)
        forward(ad, x, MemoryMeter())
        with pytest.raises(ValueError):
            backward(ad, x, gauss(2, 2, 4), MemoryMeter())

    def test_reset_context_returns_buffers(self, gauss):
        meter = MemoryMeter()
        ad = random_adapter(1, 4, 4, 2, "rbf", 0.5, STORE)
        forward(ad, gauss(1, 2, 4), meter)
        assert meter.current_floats > 0
        ad.reset_context()
        assert meter.current_floats == 0


def run_stack(adapters, x, meter):
    hs = [x]
    for ad in adapters:
        hs.append(forward(ad, hs[-1], meter))
    grad = np.ones_like(hs[-1])
    grads = []
    for ad, h in zip(reversed(adapters), reversed(hs[:-1])):
        g = backward(ad, h, grad)
        grads.append(g)
        grad = g.d_x
    return hs[-1], grads


@pytest.mark.parametrize("layers", [1, 2, 3, 5])
@pytest.mark.parametrize("variant", ["linear", "piecewise_linear"])
def test_recompute_saves_a_buffer_per_extra_layer(layers, variant):
    m = n = 12
    peaks, outs = {}, {}
    for mode in (STORE, RECOMPUTE):
        stack = [random_adapter(50 + i, m, n, 3, variant, 0.5, mode) for i in range(layers)]
        meter = MemoryMeter()
        y, grads = run_stack(stack, randn(RngStream(1), 4, n), meter)
        assert meter.current_floats == 0
        assert meter.peak_floats >= meter.current_floats
        peaks[mode] = meter.peak_floats
        outs[mode] = [y] + [a for g in grads for a in (g.d_a, g.d_b, g.d_kernel, g.d_x)]
    assert peaks[STORE] - peaks[RECOMPUTE] >= (layers - 1) * m * n
    if layers >= 2:
        assert peaks[RECOMPUTE] < peaks[STORE]
    assert all(u.tobytes() == v.tobytes() for u, v in zip(outs[STORE], outs[RECOMPUTE]))
