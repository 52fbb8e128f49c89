"""Central finite-difference checks for the reverse-mode engine."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, grad, parameter


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(f, x: Tensor, eps: float = 1e-3, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to entries of ``x``.

    ``x.data`` is perturbed in place and restored.  ``coords`` restricts the
    check to some flat indices; other entries are left as NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f().item()
        flat[i] = orig - eps
        f_minus = f().item()
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2.0 * eps)
    return out.reshape(x.shape)


def grad_check(f, x: Tensor, eps: float = 1e-3, coords=None, floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences."""
    (analytic,) = grad(f(), [x])
    numeric = numeric_grad(f, x, eps, coords)
    mask = ~np.isnan(numeric)
    return float(relative_error(analytic[mask], numeric[mask], floor).max())


def _away_from_zero(rng, shape, gap=0.05):
    v = rng.standard_normal(shape)
    return np.where(v >= 0, v + gap, v - gap)


def _scalarize(rng, shape):
    # random projection so every output entry influences the checked scalar
    return rng.standard_normal(shape)


def op_suite(seed: int = 0):
    """Small problems covering every op; yields ``(name, f, x)`` triples."""
    rng = np.random.default_rng(seed)

    def case(name, fn, x_data, *consts):
        x = parameter(x_data)
        probe = _scalarize(rng, fn(x, *consts).shape)
        return name, (lambda: ops.sum(ops.mul(fn(x, *consts), probe))), x

    w3 = rng.standard_normal((4, 3, 3, 3))
    w1 = rng.standard_normal((2, 3, 1, 1))
    other = rng.standard_normal((1, 3, 5, 6))
    chan = rng.uniform(0.5, 1.5, (1, 3, 1, 1))
    img = rng.standard_normal((1, 3, 5, 6))
    idx = rng.integers(0, 90, size=(7, 4))

    def channel_spread(shape):
        # distinct channel values so the max is never tied within eps
        base = rng.permutation(shape[1])[None, :, None, None] * 0.5
        return base + rng.uniform(-0.1, 0.1, shape)

    yield case("conv2d_input", lambda x: ops.conv2d(x, w3, np.arange(4.0)), img)
    yield case("conv2d_1x1", lambda x: ops.conv2d(x, w1), img)
    x_fixed = rng.standard_normal((1, 3, 5, 6))
    yield case("conv2d_weight", lambda w: ops.conv2d(x_fixed, w, padding=1), w3)
    yield case("conv2d_bias", lambda b: ops.conv2d(x_fixed, w3, b), rng.standard_normal(4))
    yield case("leaky_relu", lambda x: ops.leaky_relu(x, 0.2), _away_from_zero(rng, (1, 3, 5, 6)))
    yield case("sigmoid", ops.sigmoid, img)
    yield case("add", lambda x: ops.add(x, chan), img)
    yield case("add_broadcast_operand", lambda c: ops.add(other, c), chan)
    yield case("sub", lambda x: ops.sub(other, x), img)
    yield case("mul", lambda x: ops.mul(x, other), img)
    yield case("mul_by_channel", lambda c: ops.mul(other, c), chan)
    yield case("div", lambda x: ops.div(other, x), rng.uniform(0.5, 2.0, (1, 3, 5, 6)))
    yield case("power", lambda x: ops.power(x, 2.0), img)
    yield case("concat", lambda x: ops.concat([x, other, x], axis=1), img)
    yield case("bilinear_up", lambda x: ops.bilinear_resample(x, (10, 12)), img)
    yield case("bilinear_down", lambda x: ops.bilinear_resample(x, (3, 3)), img)
    yield case("bicubic_downsample", lambda x: ops.bicubic_downsample(x, 2), img)
    yield case("global_avg_pool", ops.global_avg_pool, img)
    yield case("channel_avg_pool", ops.channel_avg_pool, img)
    yield case("channel_max_pool", ops.channel_max_pool, channel_spread((1, 3, 5, 6)))
    yield case("mean", lambda x: ops.mean(x, axis=(2, 3)), img)
    yield case("sum", lambda x: ops.sum(x, axis=1, keepdims=True), img)
    yield case("abs", ops.absolute, _away_from_zero(rng, (1, 3, 5, 6)))
    yield case("scalar_ops", lambda x: (2.0 - x) * 3.0 / 4.0 + 1.0, img)
    yield case("reshape", lambda x: ops.reshape(x, (3, 30)), img)
    yield case("take", lambda x: ops.take(x, idx), img)


def run_op_suite(seed: int = 0, eps: float = 1e-3) -> dict:
    """Max relative error of every op in :func:`op_suite`."""
    return {name: grad_check(f, x, eps) for name, f, x in op_suite(seed)}
