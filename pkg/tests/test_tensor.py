import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from satfuse import kernels
from satfuse.errors import DimensionError, EvaluationError, FormatError
from satfuse.tensor import (
    Tensor,
    concat,
    conv2d,
    finite_diff_grad,
    matmul,
    relative_error,
    softmax_lastdim,
    sum_,
    tsr,
)
from satfuse.tensor import ops


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(Tensor(np.eye(2)), b)
    np.testing.assert_array_equal(out.data, b.data)


def test_matmul_scalar_product():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    a, b = t64(rng.normal(size=(4, 3))), t64(rng.normal(size=(3, 5)))
    sum_(matmul(a, b)).backward()
    na = finite_diff_grad(lambda x: sum_(matmul(x, b)), a, eps=1e-6)
    nb = finite_diff_grad(lambda x: sum_(matmul(a, x)), b, eps=1e-6)
    assert relative_error(a.grad, na.data) < 1e-6
    assert relative_error(b.grad, nb.data) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_matmul_associative_f32(seed):
    rng = np.random.default_rng(seed)
    n, k, m, p = rng.integers(1, 7, size=4)
    a, b, c = (Tensor(rng.uniform(-1, 1, size=s).astype(np.float32)) for s in [(n, k), (k, m), (m, p)])
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-4)


# ----------------------------------------------------------------- softmax


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_masked_position_is_zero():
    out = softmax_lastdim(Tensor([-np.inf, 0.0])).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_softmax_all_masked_slice_gives_zeros():
    out = softmax_lastdim(Tensor([[-np.inf, -np.inf], [0.0, 1.0]])).data
    assert np.all(out[0] == 0.0)
    assert not np.isnan(out).any()


def test_softmax_matches_direct_exp_normalize():
    x = np.array([1.0, 2.0, 3.0])
    ref = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(softmax_lastdim(t64(x)).data, ref, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_are_distributions(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5, size=(4, 7)).astype(np.float32)
    x[rng.random(x.shape) < 0.3] = -np.inf
    y = softmax_lastdim(Tensor(x)).data
    assert (y >= 0).all()
    sums = y.sum(-1)
    for row, s in zip(x, sums):
        if np.isneginf(row).all():
            assert s == 0.0
        else:
            assert abs(s - 1) < 1e-6
    assert (y[np.isneginf(x)] == 0).all()


# ---------------------------------------------------------------------- conv


def test_conv_1x1_identity():
    x = Tensor(np.random.default_rng(1).normal(size=(1, 4, 5)))
    out = conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def _direct_conv(x, w, stride, pad):
    C, H, W = x.shape
    Co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((Co, Ho, Wo))
    for o in range(Co):
        for i in range(Ho):
            for j in range(Wo):
                out[o, i, j] = (xp[:, i * stride : i * stride + k, j * stride : j * stride + k] * w[o]).sum()
    return out


def test_conv_box_on_one_hot_clipped_at_border():
    for r, c in [(2, 2), (0, 0), (4, 3)]:
        x = np.zeros((1, 5, 5))
        x[0, r, c] = 1
        out = conv2d(t64(x, False), t64(np.ones((1, 1, 3, 3)), False), pad=1).data
        expect = np.zeros((1, 5, 5))
        expect[0, max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2] = 1
        np.testing.assert_array_equal(out, expect)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 0, 1), (2, 0, 1)])
def test_conv_matches_direct_summation(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad)
    x, w = rng.normal(size=(3, 7, 6)), rng.normal(size=(4, 3, k, k))
    out = conv2d(t64(x, False), t64(w, False), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, _direct_conv(x, w, stride, pad), atol=1e-12)


def test_conv_gradient_vs_finite_differences():
    rng = np.random.default_rng(2)
    x, w, b = t64(rng.normal(size=(2, 5, 5))), t64(rng.normal(size=(3, 2, 3, 3))), t64(rng.normal(size=3))
    r = rng.normal(size=(3, 5, 5))

    def loss(x_=x, w_=w, b_=b):
        return sum_(ops.mul(conv2d(x_, w_, b_, pad=1), r))

    loss().backward()
    for p in (x, w, b):
        num = finite_diff_grad(lambda _p: loss(), p, eps=1e-6)
        assert relative_error(p.grad, num.data) < 1e-5


def test_conv_rejects_nonpositive_output():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_rejects_5x5():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 9, 9))), Tensor(np.zeros((1, 1, 5, 5))))


# -------------------------------------------------------- finite differences


def test_fd_of_sum_is_ones():
    x = t64(np.random.default_rng(3).normal(size=(3, 4)), False)
    np.testing.assert_allclose(finite_diff_grad(sum_, x).data, 1.0, atol=1e-9)


def test_fd_sum_of_squares():
    x = t64([1.0, 2.0], False)
    g = finite_diff_grad(lambda v: sum_(ops.mul(v, v)), x, eps=1e-4)
    np.testing.assert_allclose(g.data, [2.0, 4.0], atol=1e-6)


def test_fd_cross_checks_softmax_backward():
    rng = np.random.default_rng(4)
    x = t64(rng.normal(size=(3, 5)))
    w = rng.normal(size=(3, 5))
    f = lambda v: sum_(ops.mul(softmax_lastdim(v), w))  # noqa: E731
    f(x).backward()
    assert relative_error(x.grad, finite_diff_grad(f, x, eps=1e-6).data) < 1e-5


def test_fd_non_finite_raises():
    with pytest.raises(EvaluationError):
        finite_diff_grad(lambda v: Tensor(np.inf), t64([1.0], False))


def test_fd_does_not_change_input():
    x = t64([1.5, -2.0, 3.0], False)
    before = x.data.copy()
    finite_diff_grad(lambda v: sum_(ops.mul(v, v)), x)
    np.testing.assert_array_equal(x.data, before)


# ------------------------------------------------------------ engine basics


def test_gradients_accumulate_until_zeroed():
    x = t64([1.0, 2.0])
    sum_(x).backward()
    sum_(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_gradient():
    x = t64([3.0])
    y = ops.mul(x, x)
    z = ops.add(y, y)  # 2 x^2
    sum_(z).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(5)
    a = t64(rng.normal(size=(3, 3)))
    b = t64(rng.normal(size=(3, 3)))
    snap = a.data.copy(), b.data.copy()
    out = sum_(softmax_lastdim(ops.add(matmul(a, b), a)))
    out.backward()
    np.testing.assert_array_equal(a.data, snap[0])
    np.testing.assert_array_equal(b.data, snap[1])


def test_concat_backward_splits():
    a, b = t64(np.ones((2, 3))), t64(np.ones((2, 2)))
    sum_(ops.mul(concat([a, b], axis=1), np.arange(5.0))).backward()
    np.testing.assert_array_equal(a.grad, [[0, 1, 2]] * 2)
    np.testing.assert_array_equal(b.grad, [[3, 4]] * 2)


def test_grad_shape_invariant():
    x = t64(np.ones((2, 3, 4)))
    sum_(ops.reshape(ops.transpose(x, (2, 0, 1)), (4, 6))).backward()
    assert x.grad.shape == x.shape


def test_forward_is_deterministic():
    rng = np.random.default_rng(6)
    x, w = Tensor(rng.normal(size=(3, 8, 8)).astype(np.float32)), Tensor(rng.normal(size=(2, 3, 3, 3)).astype(np.float32))
    a = conv2d(x, w, pad=1).data
    b = conv2d(x, w, pad=1).data
    assert a.tobytes() == b.tobytes()


# --------------------------------------------------------------------- TSR1


@pytest.mark.parametrize("dtype,tag", [(np.float32, b'"f32"'), (np.float64, b'"f64"')])
def test_tsr_roundtrip(tmp_path, dtype, tag):
    a = np.random.default_rng(7).normal(size=(2, 3, 4)).astype(dtype)
    p = tmp_path / "a.tsr"
    tsr.save(p, a)
    raw = p.read_bytes()
    assert raw[:8] == b"TSR1\0\0\0\0"
    assert tag in raw.split(b"\n", 1)[0]
    b = tsr.load(p)
    assert b.dtype == dtype and b.shape == a.shape
    np.testing.assert_array_equal(a, b)


def test_tsr_rejects_truncated_payload():
    buf = tsr.dumps(np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(FormatError):
        tsr.loads(buf[:-3])
    with pytest.raises(FormatError):
        tsr.loads(b"XXXX" + buf[4:])


def test_tsr_header_is_little_endian_json():
    buf = tsr.dumps(np.arange(3, dtype=np.float32))
    header = buf[8 : buf.index(b"\n")]
    import json

    assert json.loads(header) == {"shape": [3], "dtype": "f32", "byte_order": "LE"}
    assert buf[buf.index(b"\n") + 1 :] == np.arange(3, dtype="<f4").tobytes()


# ------------------------------------------------------------- kernel parity


@pytest.mark.skipif("cython" not in kernels.backends(), reason="compiled kernels not built")
def test_compiled_and_python_kernels_agree():
    be = kernels.backends()
    cy, py = be["cython"], be["python"]
    rng = np.random.default_rng(8)
    for dt in (np.float32, np.float64):
        x = rng.normal(size=(3, 7, 9)).astype(dt)
        for k, s, p in [(3, 1, 1), (3, 2, 1), (1, 1, 0)]:
            cols = cy.im2col(x, k, s, p)
            np.testing.assert_array_equal(cols, py.im2col(x, k, s, p))
            np.testing.assert_allclose(cy.col2im(cols, 3, 7, 9, k, s, p), py.col2im(cols, 3, 7, 9, k, s, p), rtol=1e-5)
        f = rng.normal(size=(6, 8, 4)).astype(dt)
        d = rng.uniform(-2, 2, size=(6, 8, 2)).astype(dt)
        g = rng.normal(size=f.shape).astype(dt)
        np.testing.assert_allclose(cy.warp_forward(f, d), py.warp_forward(f, d), atol=1e-5)
        for a, b in zip(cy.warp_backward(f, d, g), py.warp_backward(f, d, g)):
            np.testing.assert_allclose(a, b, atol=1e-4)
