import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage, signal

from gsfm import tensor as T
from gsfm.tensor import Tensor


def scalar_proj(seed):
    def f(t):
        w = np.random.default_rng(seed).normal(size=t.shape)
        return T.tsum(t * w)
    return f


def test_add_broadcast_grad_shapes():
    a = Tensor(np.ones((3, 1, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    T.tsum(a + b).backward()
    assert a.grad.shape == (3, 1, 4)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_fan_out_accumulates():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = x * x + x * 3.0
    T.tsum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0)


def test_leaf_grad_accumulates_across_backward_calls():
    x = Tensor(np.array([1.0]), requires_grad=True)
    T.tsum(x * 2.0).backward()
    T.tsum(x * 2.0).backward()
    assert x.grad[0] == 4.0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert T.grad_enabled()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    T.tsum(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_tape_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.exp(x)
    z = y * y + T.log(y)
    tape = T.build_tape(T.tsum(z))
    pos = {id(t): i for i, t in enumerate(tape)}
    for node in tape:
        for p in node._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(node)]


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        T.softmax(Tensor(np.array([0.0, np.inf])))


def test_softmax_stable_for_large_inputs():
    out = T.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


@pytest.mark.parametrize("padding,mode", [("zero", "constant"), ("replicate", "nearest")])
def test_conv3x3_matches_scipy_correlate(rng, padding, mode):
    x = rng.normal(size=(2, 3, 6, 5))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), padding).data
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for c in range(3):
                ref[n, o] += ndimage.correlate(x[n, c], k[o, c], mode=mode, cval=0.0)
            ref[n, o] += b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_zero_pad_matches_signal_same(rng):
    x = rng.normal(size=(1, 7, 7))
    k = rng.normal(size=(1, 1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k)).data[0]
    np.testing.assert_allclose(out, signal.correlate2d(x[0], k[0, 0], mode="same"), atol=1e-12)


def test_conv1x1_is_channel_matmul(rng):
    x = rng.normal(size=(3, 4, 4))
    k = rng.normal(size=(5, 3, 1, 1))
    out = T.conv2d(Tensor(x), Tensor(k)).data
    np.testing.assert_allclose(out, np.einsum("oc,chw->ohw", k[:, :, 0, 0], x), atol=1e-12)


def test_conv_rejects_bad_kernel():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_upsample_bilinear_half_pixel():
    # align_corners=False: [1, 3] -> [1, 1.5, 2.5, 3]
    x = Tensor(np.array([[[1.0, 3.0]]]))
    row = T.upsample2x(x).data[0]
    np.testing.assert_allclose(row, [[1.0, 1.5, 2.5, 3.0]] * 2)


def test_avg_pool(rng):
    x = rng.normal(size=(2, 4, 6))
    ref = x.reshape(2, 2, 2, 3, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(T.avg_pool2x(Tensor(x)).data, ref)


def test_masked_softmax_zeroes_dropped():
    keep = np.array([[True, False, True]])
    out = T.masked_softmax(Tensor(np.array([[0.0, 5.0, 0.0]])), keep).data
    np.testing.assert_allclose(out, [[0.5, 0.0, 0.5]])


GRAD_CASES = {
    "mul_div": (lambda x: T.tsum(x * x / (T.exp(x) + 1.0)), (3, 4)),
    "sigmoid": (lambda x: scalar_proj(1)(T.sigmoid(x)), (5,)),
    "log_softmax": (lambda x: scalar_proj(2)(T.log_softmax(x, axis=-1)), (3, 5)),
    "masked_softmax": (lambda x: scalar_proj(3)(T.masked_softmax(x, np.array([[1, 0, 1, 1]] * 2, bool))), (2, 4)),
    "matmul_batched": (lambda x: scalar_proj(4)(T.matmul(x, T.swapaxes(x, -1, -2))), (2, 3, 4)),
    "getitem_fancy": (lambda x: scalar_proj(5)(T.getitem(x, np.array([0, 2, 2]))), (4, 3)),
    "concat_stack": (lambda x: scalar_proj(6)(T.concat([x, T.stack([x[0], x[1]], axis=0) * 2.0], axis=1)), (2, 3)),
    "broadcast_to": (lambda x: scalar_proj(7)(T.broadcast_to(x, (4, 2, 3))), (1, 2, 3)),
    "mean_axis": (lambda x: scalar_proj(8)(T.mean(x, axis=(0, 2), keepdims=True)), (2, 3, 4)),
    "upsample": (lambda x: scalar_proj(9)(T.upsample2x(x)), (2, 3, 5)),
    "avg_pool": (lambda x: scalar_proj(10)(T.avg_pool2x(x)), (1, 4, 4)),
    "conv_replicate": (lambda x: scalar_proj(11)(T.conv2d(x, Tensor(np.random.default_rng(0).normal(size=(2, 1, 3, 3))),
                                                         padding="replicate")), (1, 4, 5)),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_grad_check(name, rng):
    f, shape = GRAD_CASES[name]
    assert T.grad_check(f, rng.normal(size=shape), h=1e-5) < 1e-6


def test_save_load_roundtrip(tmp_path, rng):
    x = rng.normal(size=(2, 3, 4)).astype(np.float32)
    T.save_tensor(tmp_path / "a.weight", x)
    T.save_tensor(tmp_path / "a.bias", x[0])
    assert (tmp_path / "a.weight.bin").stat().st_size == x.size * 4
    np.testing.assert_array_equal(T.load_tensor(tmp_path / "a.weight").data, x)
    np.testing.assert_array_equal(T.load_tensor(tmp_path / "a.bias").data, x[0])


def test_binary_format_is_little_endian_float32(tmp_path):
    T.save_tensor(tmp_path / "t", np.array([1.0, -2.0]))
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw == np.array([1.0, -2.0], dtype="<f4").tobytes()


small = arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)),
               elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(small, small)
def test_broadcast_add_grad_sums_match(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        return
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    out = ta + tb
    T.tsum(out).backward()
    n = out.size
    assert ta.grad.shape == a.shape and tb.grad.shape == b.shape
    assert np.isclose(ta.grad.sum(), n) and np.isclose(tb.grad.sum(), n)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert (out >= 0).all()
