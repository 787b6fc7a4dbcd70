from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wildsplat import diffcore as dc
from wildsplat.diffcore import Tape, TapeError, Tensor, grad_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def _param(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def test_square_sum_gradient():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[x.id], [2.0, 4.0, 6.0])


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.zeros(1), requires_grad=True)
    with Tape() as tape:
        loss = dc.sigmoid(x).sum()
    assert tape.backward(loss)[x.id][0] == pytest.approx(0.25, abs=1e-15)


def test_l1_of_affine_map_matches_finite_differences(rng):
    a = _param(rng, 4, 3)
    x = _param(rng, 3)
    y = Tensor(rng.uniform(-1, 1, 4))
    res = grad_check(lambda: dc.absolute(a @ x - y).mean(), [a, x])
    assert res.passed(1e-6), res


def test_grad_check_sum_of_squares_is_tight(rng):
    x = _param(rng, 5)
    assert grad_check(lambda: (x * x).sum(), [x]).max_error < 1e-9


def test_grad_check_flags_a_corrupted_backward_rule(rng):
    x = _param(rng, 4)

    def broken():
        y = dc.custom_op("bad_square", [x], x.data ** 2, lambda g: (g * x.data,))  # should be 2x
        return y.sum()

    res = grad_check(broken, [x])
    assert res.max_error > 1e-2
    assert not res.passed(1e-4)


def test_grad_check_reports_non_finite_probe():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with np.errstate(invalid="ignore"):
        res = grad_check(lambda: dc.log(x + 1e-6).sum(), [x], h=1e-5)
    assert not res.ok
    assert res.nonfinite == (0, 0)


def test_non_scalar_loss_rejected(rng):
    x = _param(rng, 3)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(TapeError):
        tape.backward(y)


def test_non_ancestor_gets_zero_gradient(rng):
    x, z = _param(rng, 3), _param(rng, 2)
    with Tape() as tape:
        loss = (x * x).sum()
    g = tape.backward(loss, [x, z])
    np.testing.assert_array_equal(g[z.id], np.zeros(2))


def test_recording_only_inside_a_tape(rng):
    x = _param(rng, 3)
    y = x * 3.0
    assert not y.requires_grad
    with Tape() as tape:
        with dc.no_record():
            z = x * 3.0
        w = x * 3.0
    assert not z.requires_grad and w.requires_grad
    assert len(tape.ops) == 1


UNARY = {
    "exp": dc.exp,
    "log": lambda t: dc.log(t * t + 0.5),
    "sqrt": lambda t: dc.sqrt(t * t + 0.5),
    "sigmoid": dc.sigmoid,
    "relu": lambda t: dc.relu(t + 0.05),
    "abs": lambda t: dc.absolute(t + 0.05),
    "sin": dc.sin,
    "cos": dc.cos,
    "power": lambda t: dc.power(t * t + 0.5, 1.7),
    "neg": dc.neg,
    "clip": lambda t: dc.clip(t, -0.6, 0.55),
    "mean": lambda t: dc.mean(t, axis=0),
    "sum_keepdims": lambda t: dc.tsum(t, axis=1, keepdims=True),
    "reshape": lambda t: dc.reshape(t, (3, 4)),
    "transpose": lambda t: dc.transpose(t),
    "getitem": lambda t: t[1:, ::2],
    "broadcast": lambda t: dc.broadcast_to(t[:1], (5, 3)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    x = _param(rng, 4, 3)
    # keep kinks of relu/abs/clip away from the probe points
    x.data[np.abs(x.data + 0.05) < 0.02] += 0.1
    x.data[np.abs(x.data - 0.55) < 0.02] += 0.1
    x.data[np.abs(x.data + 0.6) < 0.02] += 0.1
    w = Tensor(rng.uniform(-1, 1, UNARY[name](Tensor(x.data)).shape))
    assert grad_check(lambda: (UNARY[name](x) * w).sum(), [x]).passed(1e-6)


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 0.5),
    "matmul": lambda a, b: a @ dc.transpose(b),
    "broadcast_add": lambda a, b: a + b[0],
    "concat": lambda a, b: dc.concat([a, b], axis=1),
    "stack": lambda a, b: dc.stack([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name, rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    w = Tensor(rng.uniform(-1, 1, BINARY[name](Tensor(a.data), Tensor(b.data)).shape))
    assert grad_check(lambda: (BINARY[name](a, b) * w).sum(), [a, b]).passed(1e-6)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_finite_differences(stride, rng):
    x = _param(rng, 1, 2, 6, 6)
    k = _param(rng, 3, 2, 3, 3)
    b = _param(rng, 3)
    out_shape = dc.conv2d(Tensor(x.data), Tensor(k.data), Tensor(b.data), stride=stride, padding=1).shape
    w = Tensor(rng.uniform(-1, 1, out_shape))
    res = grad_check(lambda: (dc.conv2d(x, k, b, stride=stride, padding=1) * w).sum(), [x, k, b])
    assert res.passed(1e-6), res


def test_conv2d_matches_direct_correlation(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(1, 2, 3, 3))
    out = dc.conv2d(Tensor(x), Tensor(k), padding=0).data
    ref = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            ref[i, j] = np.sum(x[0, :, i:i + 3, j:j + 3] * k[0])
    np.testing.assert_allclose(out[0, 0], ref, atol=1e-12)


def test_upsample_and_pad_match_finite_differences(rng):
    x = _param(rng, 1, 2, 3, 3)
    w = Tensor(rng.uniform(-1, 1, (1, 2, 8, 7)))
    res = grad_check(lambda: (dc.pad2d(dc.upsample_nearest2x(x), 2, 1) * w).sum(), [x])
    assert res.passed(1e-6)


def test_stop_gradient_is_identity_forward_zero_backward(rng):
    x = _param(rng, 5)
    with Tape() as tape:
        y = dc.stop_gradient(x)
        loss = (y * y).sum() + x.sum()
    assert np.array_equal(y.data, x.data)
    np.testing.assert_array_equal(tape.backward(loss)[x.id], np.ones(5))


def test_backward_is_deterministic(rng):
    a, x = _param(rng, 6, 5), _param(rng, 5)

    def run():
        with Tape() as tape:
            loss = dc.sigmoid(a @ x).sum() + (a * a).mean()
        g = tape.backward(loss)
        return g[a.id].copy(), g[x.id].copy()

    g1, g2 = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(g1, g2))


def test_gradient_accumulates_over_multiple_consumers(rng):
    x = _param(rng, 3)
    with Tape() as tape:
        loss = (x * 2.0).sum() + (x * 3.0).sum() + x.sum()
    np.testing.assert_array_equal(tape.backward(loss)[x.id], np.full(3, 6.0))


@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_tensor_grad_shape_matches_data(values):
    x = Tensor(values.copy(), requires_grad=True)
    with Tape() as tape:
        loss = (dc.sin(x) * x).sum()
    tape.backward(loss)
    assert x.grad.shape == x.data.shape
    assert x.data.size == int(np.prod(x.shape))


@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_sigmoid_stays_in_open_interval(values):
    s = dc.sigmoid(Tensor(values * 10)).data
    assert np.all((s > 0) & (s < 1))
