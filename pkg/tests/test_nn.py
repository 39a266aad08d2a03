import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctxcrf import nn


def _dense(w, b):
    return nn.LayerParams("dense", np.array(w, float), np.array(b, float))


def _conv(w, b):
    return nn.LayerParams("conv3x3", np.array(w, float), np.array(b, float))


def conv_loop(x, w, b):
    h, wd, cin = x.shape
    out = np.zeros((h, wd, w.shape[3]))
    for i in range(h):
        for j in range(wd):
            for o in range(w.shape[3]):
                acc = b[o]
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < wd:
                            for c in range(cin):
                                acc += x[ii, jj, c] * w[di, dj, c, o]
                out[i, j, o] = acc
    return out


def pool_scan(x, window, stride):
    h, w, c = x.shape
    if stride == 1:
        half = window // 2
        out = np.empty_like(x)
        for i in range(h):
            for j in range(w):
                out[i, j] = x[max(0, i - half):i + half + 1, max(0, j - half):j + half + 1].max(axis=(0, 1))
        return out
    ho, wo = -(-h // window), -(-w // window)
    out = np.empty((ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            out[i, j] = x[i * window:(i + 1) * window, j * window:(j + 1) * window].max(axis=(0, 1))
    return out


class TestDense:
    def test_zero_weights_give_bias(self):
        p = _dense(np.zeros((3, 4)), [1.0, -2.0, 0.5])
        np.testing.assert_array_equal(nn.dense_forward(np.arange(4.0), p), [1.0, -2.0, 0.5])

    def test_identity(self):
        x = np.array([0.3, -1.2, 4.0])
        np.testing.assert_array_equal(nn.dense_forward(x, _dense(np.eye(3), np.zeros(3))), x)

    def test_matches_elementwise_sum(self):
        rng = np.random.default_rng(1)
        w, b, x = rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=2)
        expected = [math.fsum([w[j, 0] * x[0], w[j, 1] * x[1], b[j]]) for j in range(3)]
        np.testing.assert_allclose(nn.dense_forward(x, _dense(w, b)), expected, rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(nn.ShapeError):
            nn.dense_forward(np.ones(5), _dense(np.ones((2, 3)), np.zeros(2)))
        with pytest.raises(nn.ShapeError):
            nn.LayerParams("dense", np.ones((2, 3)), np.zeros(3))

    def test_backward_zero_upstream(self):
        p = _dense(np.ones((2, 3)), np.zeros(2))
        gx, gw, gb = nn.dense_backward(np.ones(3), p, np.zeros(2))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_backward_scalar_chain_rule(self):
        gx, gw, gb = nn.dense_backward(np.array([3.0]), _dense([[2.0]], [0.0]), np.array([0.5]))
        assert gw[0, 0] == 1.5 and gb[0] == 0.5 and gx[0] == 1.0

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(2)
        p = _dense(rng.normal(size=(4, 3)), rng.normal(size=4))
        x, u = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))

        def loss():
            return float((nn.dense_forward(x, p) * u).sum()), dict(
                zip(("x", "w", "b"), nn.dense_backward(x, p, u)))

        rep = nn.grad_check(loss, {"x": x, "w": p.weights, "b": p.bias}, tolerance=1e-6)
        assert rep.passed, rep.per_block


class TestConv:
    def test_identity_kernel(self):
        w = np.zeros((3, 3, 1, 1))
        w[1, 1] = 1.0
        x = np.random.default_rng(0).normal(size=(4, 5, 1))
        np.testing.assert_array_equal(nn.conv3x3_forward(x, _conv(w, [0.0])), x)

    def test_constant_field(self):
        out = nn.conv3x3_forward(np.full((5, 6, 1), 2.0), _conv(np.ones((3, 3, 1, 1)), [0.0]))
        assert np.all(out[1:-1, 1:-1] == 18.0)
        assert out[0, 0, 0] == 8.0 and out[0, 2, 0] == 12.0

    def test_matches_nested_loops(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(5, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
        np.testing.assert_allclose(nn.conv3x3_forward(x, _conv(w, b)), conv_loop(x, w, b), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(nn.ShapeError):
            nn.conv3x3_forward(np.ones((4, 4, 3)), _conv(np.ones((3, 3, 2, 1)), [0.0]))

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(4)
        p = _conv(rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3))
        x, u = rng.normal(size=(4, 5, 2)), rng.normal(size=(4, 5, 3))

        def loss():
            return float((nn.conv3x3_forward(x, p) * u).sum()), dict(
                zip(("x", "w", "b"), nn.conv3x3_backward(x, p, u)))

        rep = nn.grad_check(loss, {"x": x, "w": p.weights, "b": p.bias}, tolerance=1e-6)
        assert rep.passed, rep.per_block


class TestMaxPool:
    @pytest.mark.parametrize("window,stride", [(2, 2), (3, 3), (3, 1), (5, 1), (9, 1)])
    def test_constant(self, window, stride):
        out = nn.maxpool(np.full((9, 10, 2), -1.5), window, stride)
        assert np.all(out == -1.5)

    def test_sliding_keeps_size(self):
        assert nn.maxpool(np.zeros((7, 11, 3)), 5, 1).shape == (7, 11, 3)

    @pytest.mark.parametrize("window,stride", [(2, 2), (3, 3), (3, 1), (5, 1)])
    def test_exhaustive_scan(self, window, stride):
        x = np.random.default_rng(5).normal(size=(7, 9, 2))
        np.testing.assert_array_equal(nn.maxpool(x, window, stride), pool_scan(x, window, stride))

    def test_tiling_ceil(self):
        assert nn.maxpool(np.zeros((5, 7, 1)), 2, 2).shape == (3, 4, 1)

    def test_ties_go_to_lowest_index(self):
        x = np.zeros((2, 2, 1))
        _, cache = nn.maxpool_forward(x, 2, 2)
        g = nn.maxpool_backward(cache, np.ones((1, 1, 1)))
        assert g[0, 0, 0] == 1.0 and g.sum() == 1.0

    def test_backward_conserves_mass(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 8, 3))
        for window, stride in [(2, 2), (5, 1), (9, 1)]:
            out, cache = nn.maxpool_forward(x, window, stride)
            u = rng.normal(size=out.shape)
            assert math.isclose(nn.maxpool_backward(cache, u).sum(), u.sum(), rel_tol=1e-12, abs_tol=1e-12)

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 6, 2))
        out, cache = nn.maxpool_forward(x, 3, 1)
        u = rng.normal(size=out.shape)

        def loss():
            o, c = nn.maxpool_forward(x, 3, 1)
            return float((o * u).sum()), {"x": nn.maxpool_backward(c, u)}

        assert nn.grad_check(loss, {"x": x}).passed

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            nn.maxpool(np.zeros((2, 2, 1)), 3, 3)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nn.softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, rtol=1e-15)

    def test_shift_invariance(self):
        s = np.array([0.2, -1.0, 3.0])
        np.testing.assert_allclose(nn.softmax(s + 123.4), nn.softmax(s), rtol=1e-12)

    def test_high_precision_oracle(self):
        import mpmath
        mpmath.mp.dps = 50
        e = [mpmath.e ** k for k in (1, 2, 3)]
        expected = [float(v / sum(e)) for v in e]
        np.testing.assert_allclose(nn.softmax([1.0, 2.0, 3.0]), expected, rtol=1e-15)

    def test_no_overflow(self):
        out = nn.softmax([1000.0, 1000.0])
        assert np.all(np.isfinite(out)) and out[0] == 0.5

    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
    @settings(max_examples=60, deadline=None)
    def test_probability_vector(self, s, c):
        p = nn.softmax(s)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
        np.testing.assert_allclose(nn.softmax(s + c), p, atol=1e-12)

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(8)
        s, u = rng.normal(size=5), rng.normal(size=5)

        def loss():
            out = nn.softmax(s)
            return float(out @ u), {"s": nn.softmax_backward(out, u)}

        assert nn.grad_check(loss, {"s": s}).passed


class TestBilinear:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 3, 2))
        np.testing.assert_array_equal(nn.bilinear_resize(x, 4, 3), x)

    @pytest.mark.parametrize("size", [(1, 1), (3, 7), (10, 2)])
    def test_constant(self, size):
        np.testing.assert_allclose(nn.bilinear_resize(np.full((4, 5, 2), 0.7), *size), 0.7, rtol=1e-14)

    def test_2x2_to_4x4_closed_form(self):
        a, b, c, d = 1.0, 2.0, 5.0, -3.0
        x = np.array([[a, b], [c, d]])[..., None]
        out = nn.bilinear_resize(x, 4, 4)[..., 0]
        for i in range(4):
            for j in range(4):
                fy, fx = Fraction(i, 3), Fraction(j, 3)
                v = (1 - fy) * (1 - fx) * Fraction(a) + (1 - fy) * fx * Fraction(b) \
                    + fy * (1 - fx) * Fraction(c) + fy * fx * Fraction(d)
                assert out[i, j] == pytest.approx(float(v), abs=1e-14)

    def test_zero_extent(self):
        with pytest.raises(ValueError):
            nn.bilinear_resize(np.ones((2, 2, 1)), 0, 3)

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 4, 2))
        u = rng.normal(size=(7, 5, 2))

        def loss():
            return float((nn.bilinear_resize(x, 7, 5) * u).sum()), {"x": nn.bilinear_resize_backward(u, 3, 4)}

        assert nn.grad_check(loss, {"x": x}).passed


class TestLinearity:
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_bias_free_layers_are_linear(self, a, b, seed):
        rng = np.random.default_rng(seed)
        conv = _conv(rng.normal(size=(3, 3, 2, 3)), np.zeros(3))
        dense = _dense(rng.normal(size=(4, 6)), np.zeros(4))
        x, y = rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))
        np.testing.assert_allclose(nn.conv3x3_forward(a * x + b * y, conv),
                                   a * nn.conv3x3_forward(x, conv) + b * nn.conv3x3_forward(y, conv), atol=1e-10)
        u, v = rng.normal(size=6), rng.normal(size=6)
        np.testing.assert_allclose(nn.dense_forward(a * u + b * v, dense),
                                   a * nn.dense_forward(u, dense) + b * nn.dense_forward(v, dense), atol=1e-10)


class TestSgd:
    def test_null_step(self):
        p = {"a": _dense([[1.0, 2.0]], [3.0])}
        g = nn.GradBuffer()
        g.add("a", np.zeros((1, 2)), np.zeros(1))
        nn.sgd_step(p, g, {nn.GROUP_NEW: 0.1}, 0.0)
        np.testing.assert_array_equal(p["a"].weights, [[1.0, 2.0]])

    def test_scalar_step(self):
        p = {"a": _dense([[1.0]], [0.0])}
        g = nn.GradBuffer()
        g.add("a", np.array([[0.5]]), np.zeros(1))
        nn.sgd_step(p, g, {nn.GROUP_NEW: 0.1}, 0.0)
        assert p["a"].weights[0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_group_rates(self):
        old = nn.LayerParams("dense", [[1.0]], [0.0], {"group": nn.GROUP_PRETRAINED})
        new = nn.LayerParams("dense", [[1.0]], [0.0], {"group": nn.GROUP_NEW})
        g = nn.GradBuffer()
        g.add("old", np.ones((1, 1)), np.zeros(1))
        g.add("new", np.ones((1, 1)), np.zeros(1))
        nn.sgd_step({"old": old, "new": new}, g, {nn.GROUP_PRETRAINED: 0.0001, nn.GROUP_NEW: 0.001})
        assert old.weights[0, 0] == pytest.approx(1 - 0.0001)
        assert new.weights[0, 0] == pytest.approx(1 - 0.001)

    def test_missing_group(self):
        g = nn.GradBuffer()
        g.add("a", np.zeros((1, 1)), np.zeros(1))
        with pytest.raises(KeyError):
            nn.sgd_step({"a": _dense([[1.0]], [0.0])}, g, {nn.GROUP_PRETRAINED: 0.1})

    def test_weight_decay_shrinks(self):
        p = {"a": _dense(np.random.default_rng(0).normal(size=(3, 3)), np.zeros(3))}
        before = np.linalg.norm(p["a"].weights)
        g = nn.GradBuffer()
        g.add("a", np.zeros((3, 3)), np.zeros(3))
        nn.sgd_step(p, g, {nn.GROUP_NEW: 0.1}, 0.01)
        assert np.linalg.norm(p["a"].weights) < before


class TestGradCheck:
    def test_quadratic(self):
        w = np.random.default_rng(0).normal(size=7)
        rep = nn.grad_check(lambda: (0.5 * float(w @ w), {"w": w.copy()}), {"w": w}, tolerance=1e-9)
        assert rep.passed and rep.max_rel_error < 1e-9

    def test_dense_relu_softmax_ce_stack(self):
        rng = np.random.default_rng(1)
        l1, l2 = nn.init_dense(4, 6, rng), nn.init_dense(6, 3, rng)
        x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, size=5)

        def loss():
            h = nn.dense_forward(x, l1)
            a = nn.relu_forward(h)
            z = nn.dense_forward(a, l2)
            ce, gz = nn.softmax_cross_entropy(z, y)
            ga, gw2, gb2 = nn.dense_backward(a, l2, gz)
            _, gw1, gb1 = nn.dense_backward(x, l1, nn.relu_backward(h, ga))
            return float(ce.sum()), {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}

        rep = nn.grad_check(loss, {"w1": l1.weights, "b1": l1.bias, "w2": l2.weights, "b2": l2.bias})
        assert rep.passed and rep.max_rel_error < 1e-5

    def test_corrupted_backward_is_flagged(self):
        w = np.random.default_rng(0).normal(size=4)
        rep = nn.grad_check(lambda: (0.5 * float(w @ w), {"w": 1.1 * w}), {"w": w})
        assert not rep.passed

    def test_nondeterministic_loss(self):
        rng = np.random.default_rng(0)
        w = np.ones(2)
        with pytest.raises(nn.NonDeterministicLossError):
            nn.grad_check(lambda: (float(rng.normal()), {"w": w}), {"w": w})
