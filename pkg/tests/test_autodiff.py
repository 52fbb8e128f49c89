import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuselab import autodiff as ad
from fuselab.autodiff.resample import bilinear_matrix, cubic_kernel, cubic_matrix
from fuselab.errors import NonFiniteError, ShapeError


def naive_conv(x, w, b, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for q in range(wo):
                    out[i, oc, r, q] = np.sum(xp[i, :, r:r + k, q:q + k] * w[oc]) + (b[oc] if b is not None else 0)
    return out


class TestOpSuite:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_every_op_below_tolerance(self, seed):
        errors = ad.run_op_suite(seed)
        assert len(errors) >= 20
        bad = {k: v for k, v in errors.items() if not v < 1e-4}
        assert not bad

    def test_suite_covers_required_ops(self):
        names = set(ad.run_op_suite(0))
        for required in ("conv2d_input", "conv2d_weight", "conv2d_bias", "leaky_relu", "sigmoid", "add", "mul",
                         "mul_by_channel", "concat", "bilinear_up", "bicubic_downsample", "global_avg_pool",
                         "channel_max_pool", "channel_avg_pool", "mean", "abs", "sub", "scalar_ops"):
            assert required in names


class TestClosedForms:
    def test_identity_conv(self, rng):
        x = rng.normal(size=(1, 3, 5, 4))
        w = np.eye(3).reshape(3, 3, 1, 1)
        np.testing.assert_array_equal(ad.conv2d(x, w).data, x)

    def test_sigmoid_at_zero(self):
        x = ad.parameter(np.zeros(1))
        y = ad.ops.sum(ad.sigmoid(x))
        assert y.item() == 0.5
        (g,) = ad.grad(y, [x])
        assert g[0] == 0.25

    def test_mean_square(self):
        x = ad.parameter([1.0, 2.0, 3.0])
        (g,) = ad.grad(ad.mean(x * x), [x])
        np.testing.assert_allclose(g, [2 / 3, 4 / 3, 2])

    def test_disconnected_is_zero(self):
        x, z = ad.parameter([1.0, 2.0]), ad.parameter([5.0])
        gx, gz = ad.grad(ad.ops.sum(x * x), [x, z])
        np.testing.assert_array_equal(gz, [0.0])
        np.testing.assert_array_equal(gx, [2.0, 4.0])

    def test_backward_accumulates(self):
        x = ad.parameter([3.0])
        ad.backward(ad.ops.sum(x * x))
        ad.backward(ad.ops.sum(x * x))
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_shared_subexpression(self):
        x = ad.parameter([2.0])
        y = x * x
        (g,) = ad.grad(ad.ops.sum(y * y + y), [x])
        np.testing.assert_allclose(g, [4 * 8 + 4])

    def test_ndarray_left_operand(self):
        x = ad.parameter(np.ones((2, 2)))
        y = np.full((2, 2), 3.0) * x
        assert isinstance(y, ad.Tensor)
        (g,) = ad.grad(ad.ops.sum(y), [x])
        np.testing.assert_array_equal(g, 3.0)


class TestConv:
    @pytest.mark.parametrize("k, pad", [(3, 1), (3, 0), (5, 2), (1, 0), (1, 1), (3, 3)])
    def test_forward_matches_naive(self, rng, k, pad):
        x = rng.normal(size=(2, 3, 6, 7))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        np.testing.assert_allclose(ad.conv2d(x, w, b, padding=pad).data, naive_conv(x, w, b, pad), atol=1e-12)

    @pytest.mark.parametrize("k, pad", [(3, 0), (5, 2), (1, 1), (3, 3)])
    def test_gradients(self, rng, k, pad):
        x = ad.parameter(rng.normal(size=(1, 2, 5, 6)))
        w = ad.parameter(rng.normal(size=(3, 2, k, k)))
        probe = rng.normal(size=ad.conv2d(x, w, padding=pad).shape)

        def f():
            return ad.ops.sum(ad.conv2d(x, w, padding=pad) * probe)

        assert ad.grad_check(f, x) < 1e-4
        assert ad.grad_check(f, w) < 1e-4

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeError):
            ad.conv2d(rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(2, 2, 3, 3)))
        with pytest.raises(ShapeError):
            ad.conv2d(rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 3, 3, 3)))
        with pytest.raises(ShapeError):
            ad.conv2d(rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(2, 3, 3, 3)), np.zeros(3))


class TestResample:
    def test_cubic_kernel_values(self):
        np.testing.assert_allclose(cubic_kernel(np.array([0.0, 1.0, 2.0, 0.5])), [1, 0, 0, 0.5625])

    @pytest.mark.parametrize("n_in, n_out", [(16, 8), (9, 5), (4, 2), (3, 6)])
    def test_rows_sum_to_one(self, n_in, n_out):
        np.testing.assert_allclose(cubic_matrix(n_in, n_out).sum(axis=1), 1.0)
        np.testing.assert_allclose(bilinear_matrix(n_in, n_out).sum(axis=1), 1.0)

    def test_constant_preserved(self):
        x = np.full((1, 4, 16, 12), 0.3)
        np.testing.assert_allclose(ad.bicubic_downsample(x).data, 0.3)
        np.testing.assert_allclose(ad.bilinear_resample(x, (32, 24)).data, 0.3)

    def test_downsample_sizes(self, rng):
        assert ad.bicubic_downsample(rng.normal(size=(1, 1, 9, 16))).shape == (1, 1, 5, 8)

    def test_bilinear_up_interior(self):
        x = np.arange(4.0).reshape(1, 1, 1, 4)
        y = ad.bilinear_resample(x, (1, 8)).data.ravel()
        np.testing.assert_allclose(y, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3])

    def test_backward_is_transpose(self, rng):
        x = ad.parameter(rng.normal(size=(1, 1, 8, 6)))
        g = rng.normal(size=(1, 1, 4, 3))
        (gx,) = ad.grad(ad.ops.sum(ad.bicubic_downsample(x) * g), [x])
        rows, cols = cubic_matrix(8, 4), cubic_matrix(6, 3)
        np.testing.assert_allclose(gx[0, 0], rows.T @ g[0, 0] @ cols, atol=1e-14)


class TestEngine:
    def test_non_scalar_backward(self):
        with pytest.raises(ShapeError):
            ad.backward(ad.parameter(np.ones(3)) * 2.0)

    def test_non_finite_trips(self):
        x = ad.parameter([1.0, 0.0])
        with pytest.raises(NonFiniteError):
            ad.div(1.0, x)

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(np.ones((2, 3)), np.ones((4,)))

    def test_linearity(self, rng):
        x = ad.parameter(rng.normal(size=(1, 2, 4, 4)))
        w = rng.normal(size=(2, 2, 3, 3))

        def f():
            return ad.ops.sum(ad.sigmoid(ad.conv2d(x, w)))

        def g():
            return ad.mean(ad.leaky_relu(x) * x)

        (gf,) = ad.grad(f(), [x])
        (gg,) = ad.grad(g(), [x])
        (gc,) = ad.grad(2.5 * f() + (-0.7) * g(), [x])
        np.testing.assert_allclose(gc, 2.5 * gf - 0.7 * gg, atol=1e-10)

    def test_deterministic(self, rng):
        data = rng.normal(size=(1, 3, 6, 6))
        w = rng.normal(size=(3, 3, 3, 3))

        def run():
            x = ad.parameter(data)
            y = ad.channel_max_pool(ad.leaky_relu(ad.conv2d(x, w)))
            return ad.grad(ad.mean(ad.bicubic_downsample(y)), [x])[0]

        assert np.array_equal(run(), run())

    def test_deep_chain_no_recursion_limit(self):
        x = ad.parameter([1.0])
        y = x
        for _ in range(5000):
            y = y * 1.0001
        (g,) = ad.grad(ad.ops.sum(y), [x])
        assert g[0] == pytest.approx(1.0001 ** 5000)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_random_composite_graph(self, seed):
        rng = np.random.default_rng(seed)
        x = ad.parameter(rng.normal(size=(1, 2, 6, 6)))
        w = rng.normal(size=(3, 2, 3, 3)) * 0.5
        gate = rng.uniform(0.5, 1.5, (1, 3, 1, 1))

        def f():
            h = ad.conv2d(x, w)
            a = ad.sigmoid(ad.global_avg_pool(h)) * h * gate
            b = ad.concat([ad.channel_avg_pool(a), ad.bilinear_resample(ad.bicubic_downsample(a), (6, 6))], axis=1)
            return ad.mean(ad.sigmoid(b) * 3.0 - 1.0)

        assert ad.grad_check(f, x) < 1e-4
