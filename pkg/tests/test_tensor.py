import numpy as np
import pytest

from odssd import tensor as T
from odssd.tensor import Graph, Tensor


def brute_conv2d(x, w, b, stride=1, padding=0, groups=1):
    """Direct-summation oracle."""
    n, c, h, wd = x.shape
    o, cpg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    opg = o // groups
    for ni in range(n):
        for oi in range(o):
            g = oi // opg
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0
                    for ci in range(cpg):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[ni, g * cpg + ci, yi * stride + i,
                                          xi * stride + j] * w[oi, ci, i, j]
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


def brute_maxpool_ceil(x, k=3, stride=2):
    """Window max with truncation at the edges."""
    n, c, h, w = x.shape
    ho = max(1, int(np.ceil((h - k) / stride)) + 1)
    wo = max(1, int(np.ceil((w - k) / stride)) + 1)
    out = np.empty((n, c, ho, wo), x.dtype)
    for yi in range(ho):
        for xi in range(wo):
            ys, xs = yi * stride, xi * stride
            out[:, :, yi, xi] = x[:, :, ys:min(ys + k, h), xs:min(xs + k, w)].max(axis=(2, 3))
    return out


class TestConv2d:
    def test_pointwise_scaling(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, w, b)
        assert np.allclose(out.data, [[[[2, 4], [6, 8]]]])

    def test_all_ones_3x3_padded(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, w, b, stride=1, padding=1)
        assert np.allclose(out.data, [[[[10, 10], [10, 10]]]])

    def test_shape_chain_entry(self):
        x = Tensor(np.zeros((1, 3, 640, 640), np.float32))
        w = Tensor(np.zeros((64, 3, 3, 3), np.float32))
        out = T.conv2d(x, w, Tensor(np.zeros(64, np.float32)), stride=2, padding=1)
        assert out.shape == (1, 64, 320, 320)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(0)
        for stride, padding, groups in [(1, 0, 1), (2, 1, 1), (1, 1, 2), (2, 1, 4)]:
            x = rng.standard_normal((2, 4, 6, 5))
            w = rng.standard_normal((8, 4 // groups, 3, 3))
            b = rng.standard_normal(8)
            got = T.conv2d(Tensor(x), Tensor(w), Tensor(b),
                           stride=stride, padding=padding, groups=groups)
            want = brute_conv2d(x, w, b, stride, padding, groups)
            assert np.allclose(got.data, want, atol=1e-5)

    def test_shape_mismatch_message(self):
        x = Tensor(np.zeros((1, 4, 5, 5)))
        w = Tensor(np.zeros((2, 3, 3, 3)))
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv2d(x, w, None)


class TestSeparableConv2d:
    def _sep(self, x, dw, dwb, pw, pwb, stride=1, padding=1):
        return T.separable_conv2d(Tensor(x), Tensor(dw), Tensor(dwb),
                                  Tensor(pw), Tensor(pwb),
                                  stride=stride, padding=padding)

    def test_identity_kernels_pass_nonnegative_input(self):
        c = 3
        x = np.abs(np.random.default_rng(1).standard_normal((1, c, 4, 4)))
        dw = np.zeros((c, 1, 3, 3))
        dw[:, 0, 1, 1] = 1.0
        pw = np.eye(c).reshape(c, c, 1, 1)
        out = self._sep(x, dw, np.zeros(c), pw, np.zeros(c))
        assert np.allclose(out.data, x, atol=1e-6)

    def test_stride_2_shape(self):
        x = np.zeros((1, 8, 20, 40), np.float32)
        dw = np.zeros((8, 1, 3, 3), np.float32)
        pw = np.zeros((16, 8, 1, 1), np.float32)
        out = self._sep(x, dw, np.zeros(8, np.float32), pw, np.zeros(16, np.float32),
                        stride=2, padding=1)
        assert out.shape == (1, 16, 10, 20)

    def test_equals_composition(self):
        rng = np.random.default_rng(2)
        c, o = 4, 6
        x = rng.standard_normal((2, c, 5, 5))
        dw = rng.standard_normal((c, 1, 3, 3))
        dwb = rng.standard_normal(c)
        pw = rng.standard_normal((o, c, 1, 1))
        pwb = rng.standard_normal(o)
        got = self._sep(x, dw, dwb, pw, pwb)
        mid = T.relu(T.conv2d(Tensor(x), Tensor(dw), Tensor(dwb),
                              stride=1, padding=1, groups=c))
        want = T.conv2d(mid, Tensor(pw), Tensor(pwb))
        assert np.allclose(got.data, want.data)


class TestMaxPool:
    def test_known_4x4(self):
        x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
        out = T.maxpool2d_ceil(Tensor(x))
        assert np.array_equal(out.data, [[[[11, 12], [15, 16]]]])

    def test_320_to_160(self):
        out = T.maxpool2d_ceil(Tensor(np.zeros((1, 1, 320, 320), np.float32)))
        assert out.shape == (1, 1, 160, 160)

    def test_resolution_chain(self):
        h = 320
        for want in (160, 80, 40):
            h = T.maxpool2d_ceil(Tensor(np.zeros((1, 1, h, 8), np.float32))).shape[2]
            assert h == want

    def test_constant_input(self):
        out = T.maxpool2d_ceil(Tensor(np.full((1, 2, 7, 7), 3.5)))
        assert (out.data == 3.5).all()

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for shape in [(1, 1, 4, 4), (2, 3, 7, 5), (1, 2, 9, 9), (1, 1, 3, 8)]:
            x = rng.standard_normal(shape)
            got = T.maxpool2d_ceil(Tensor(x))
            assert np.array_equal(got.data, brute_maxpool_ceil(x))


class TestElementwiseAndLayout:
    def test_relu(self):
        out = T.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        assert np.array_equal(out.data, [0, 0, 2])
        assert (T.relu(Tensor(np.array([-5.0, -1.0]))).data == 0).all()
        x = Tensor(np.random.default_rng(0).standard_normal(10))
        assert np.array_equal(T.relu(T.relu(x)).data, T.relu(x).data)

    def test_channel_concat_sizes(self):
        a = Tensor(np.zeros((2, 64, 4, 4)))
        b = Tensor(np.zeros((2, 64, 4, 4)))
        assert T.channel_concat(a, b).shape == (2, 128, 4, 4)

    def test_channel_concat_empty_identity(self):
        a = Tensor(np.random.default_rng(1).standard_normal((1, 3, 2, 2)))
        e = Tensor(np.zeros((1, 0, 2, 2)))
        assert np.array_equal(T.channel_concat(a, e).data, a.data)

    def test_channel_concat_element_lookup(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((2, 3, 4, 5))
        b = rng.standard_normal((2, 2, 4, 5))
        out = T.channel_concat(Tensor(a), Tensor(b)).data
        for _ in range(100):
            n, c, h, w = (rng.integers(0, d) for d in out.shape)
            want = a[n, c, h, w] if c < 3 else b[n, c - 3, h, w]
            assert out[n, c, h, w] == want

    def test_fold_shapes(self):
        out = T.fold_stacked(Tensor(np.zeros((3, 256, 40, 40), np.float32)))
        assert out.shape == (3, 512, 20, 40)

    def test_fold_tiny(self):
        x = Tensor(np.array([[[[1.0], [2.0]]]]))  # (1,1,2,1) values (a;b)
        out = T.fold_stacked(x)
        assert out.shape == (1, 2, 1, 1)
        assert out.data[0, 0, 0, 0] == 1.0 and out.data[0, 1, 0, 0] == 2.0

    def test_unfold_inverts_fold(self):
        x = np.random.default_rng(5).standard_normal((2, 4, 6, 3))
        back = T.unfold_stacked(T.fold_stacked(Tensor(x)))
        assert np.array_equal(back.data, x)

    def test_fold_conserves_sum(self):
        x = np.random.default_rng(6).standard_normal((1, 3, 8, 5))
        assert T.fold_stacked(Tensor(x)).data.sum() == pytest.approx(x.sum())

    def test_fold_odd_height_rejected(self):
        with pytest.raises(T.ShapeError, match="even height"):
            T.fold_stacked(Tensor(np.zeros((1, 1, 3, 2))))

    def test_forward_determinism(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)
        w = rng.standard_normal((6, 4, 3, 3)).astype(np.float32)
        b = rng.standard_normal(6).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        bb = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        assert np.array_equal(a, bb)


class TestBackward:
    def test_relu_subgradient(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        with Graph() as g:
            loss = T.tensor_sum(T.relu(x))
        T.backward(g, loss)
        assert np.array_equal(x.grad, [0, 1])

    def test_detached_parameter_reported(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        unused = Tensor(np.array([1.0]), requires_grad=True)
        with Graph() as g:
            loss = T.tensor_sum(T.relu(x))
        detached = T.backward(g, loss, parameters=[x, unused])
        assert detached == [unused]
        assert np.array_equal(unused.grad, [0.0])

    def test_fold_gradient_is_inverse_scatter(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((1, 2, 4, 3)), requires_grad=True)
        with Graph() as g:
            out = T.fold_stacked(x)
            loss = T.tensor_sum(out)
        T.backward(g, loss)
        # permutation op: gradient of a sum is all ones mapped back
        assert np.array_equal(x.grad, np.ones_like(x.data))
        # weighted sum exposes the permutation itself
        w = rng.standard_normal((1, 4, 2, 3))
        x2 = Tensor(x.data, requires_grad=True, dtype=np.float64)
        with Graph() as g2:
            out = T.fold_stacked(x2)
            loss = T.tensor_sum(T.record("mul", Tensor(out.data * w), [out],
                                         lambda grad: [grad * w]))
        T.backward(g2, loss)
        want = np.concatenate([w[:, :2], w[:, 2:]], axis=2)
        assert np.allclose(x2.grad, want)


def _f64(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


class TestGradCheck:
    def test_conv2d(self):
        rng = np.random.default_rng(10)
        x, w, b = _f64(rng, (1, 2, 5, 5)), _f64(rng, (3, 2, 3, 3)), _f64(rng, 3)
        rep = T.grad_check(
            lambda x, w, b: T.tensor_sum(T.conv2d(x, w, b, stride=2, padding=1)),
            [x, w, b])
        assert rep["passed"], rep

    def test_grouped_conv2d(self):
        rng = np.random.default_rng(11)
        x, w, b = _f64(rng, (1, 4, 4, 4)), _f64(rng, (4, 1, 3, 3)), _f64(rng, 4)
        rep = T.grad_check(
            lambda x, w, b: T.tensor_sum(
                T.relu(T.conv2d(x, w, b, padding=1, groups=4))), [x, w, b])
        assert rep["passed"], rep

    def test_maxpool(self):
        rng = np.random.default_rng(12)
        x = _f64(rng, (1, 2, 5, 5))
        rep = T.grad_check(lambda x: T.tensor_sum(T.maxpool2d_ceil(x)), [x])
        assert rep["passed"], rep

    def test_separable(self):
        rng = np.random.default_rng(13)
        args = [_f64(rng, (1, 3, 5, 5)), _f64(rng, (3, 1, 3, 3)), _f64(rng, 3),
                _f64(rng, (4, 3, 1, 1)), _f64(rng, 4)]
        rep = T.grad_check(
            lambda *a: T.tensor_sum(T.separable_conv2d(*a, stride=2, padding=1)),
            args)
        assert rep["passed"], rep

    def test_permutation_ops_exact(self):
        rng = np.random.default_rng(14)
        x = _f64(rng, (1, 2, 4, 3))
        rep = T.grad_check(lambda x: T.tensor_sum(T.fold_stacked(x)), [x])
        assert rep["max_rel_error"] < 1e-9
        y = _f64(rng, (1, 12, 2, 2))
        rep2 = T.grad_check(lambda y: T.tensor_sum(T.to_prior_form(y, 6)), [y])
        assert rep2["max_rel_error"] < 1e-9

    def test_corrupted_gradient_fails(self):
        rng = np.random.default_rng(15)

        def bad_op(x):
            out = Tensor(x.data * 2.0)
            return T.record("bad_double", out, [x], lambda g: [g * 3.0])  # wrong

        x = _f64(rng, (3,))
        rep = T.grad_check(lambda x: T.tensor_sum(bad_op(x)), [x])
        assert not rep["passed"]

    def test_requires_float64(self):
        with pytest.raises(ValueError, match="float64"):
            T.grad_check(lambda x: T.tensor_sum(x),
                         [Tensor(np.zeros(2, np.float32))])
