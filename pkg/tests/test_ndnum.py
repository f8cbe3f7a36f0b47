import numpy as np
import pytest

from fragbench import ndnum as nd
from fragbench.ndnum import Tensor, backward, grad_check


RNG = np.random.default_rng(42)


def _t(shape, lo=-1.0, hi=1.0, nudge=0.0):
    """Random tensor kept away from relu/maxpool kinks by |x| >= nudge."""
    data = RNG.uniform(lo, hi, size=shape)
    if nudge:
        data = np.where(np.abs(data) < nudge, nudge * np.sign(data) + (data == 0) * nudge, data)
    return Tensor(data, requires_grad=True)


def _c(shape, lo=-1.0, hi=1.0):
    """Constant (non-grad) random tensor, drawn once."""
    return Tensor(RNG.uniform(lo, hi, size=shape))


# ----------------------------------------------------------------- forwards

def test_softmax_uniform_on_zeros():
    for n in (1, 3, 8):
        s = nd.softmax(Tensor(np.zeros((1, n))), axis=1)
        assert np.allclose(s.data, 1.0 / n)


def test_softmax_rows_sum_to_one():
    s = nd.softmax(_t((4, 7)), axis=1)
    assert np.allclose(s.data.sum(axis=1), 1.0, atol=1e-12)


def test_pool_hand_case():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert nd.maxpool2d(x, 2).data.reshape(()) == 4.0
    assert nd.avgpool2d(x, 2).data.reshape(()) == 2.5


def test_zero_sized_pooling_is_identity():
    x = _t((1, 1, 4, 4))
    assert nd.maxpool2d(x, 0) is x
    assert nd.avgpool2d(x, 0) is x


def test_conv2d_delta_kernel_is_identity():
    x = _t((2, 1, 6, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    y = nd.conv2d(x, Tensor(w), stride=1, padding=1)
    assert np.allclose(y.data, x.data)


def test_conv_transpose_doubles_resolution():
    x = _t((1, 3, 8, 8))
    w = _t((3, 5, 2, 2))
    y = nd.conv_transpose2d(x, w, stride=2)
    assert y.shape == (1, 5, 16, 16)


def test_pool_rejects_non_divisible():
    with pytest.raises(ValueError):
        nd.maxpool2d(_t((1, 1, 5, 5)), 2)


def test_matmul_shape_error_mentions_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\)"):
        nd.matmul(_t((2, 3)), _t((4, 2)))


def test_kernel_dispatch():
    x = _t((2, 2))
    assert np.allclose(nd.kernel("relu", x).data, nd.relu(x).data)
    with pytest.raises(KeyError):
        nd.kernel("not-a-kernel", x)


def test_non_finite_is_numeric_fault():
    with pytest.raises(nd.NumericFaultError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(nd.NumericFaultError):
        nd.log(Tensor(np.array([0.0])))


# ----------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = _t((3, 4))
    backward(nd.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_sum_of_squares():
    x = _t((5,))
    backward(nd.tsum(nd.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = _t((2, 2))
    with pytest.raises(nd.GraphError):
        backward(nd.mul(x, x))


def test_backward_through_unrecorded_tensor():
    x = Tensor(np.ones((2, 2)))  # requires_grad=False -> no graph
    y = nd.tsum(x)
    with pytest.raises(nd.GraphError):
        backward(y)


def test_grad_accumulates_over_reuse():
    x = _t((3,))
    y = nd.add(nd.tsum(x), nd.tsum(x))
    backward(y)
    assert np.allclose(x.grad, 2.0)


def test_no_grad_blocks_recording():
    x = _t((2, 2))
    with nd.no_grad():
        y = nd.tsum(nd.mul(x, x))
    assert not y.requires_grad


# --------------------------------------------- finite-difference kernel sweep
# every f below is deterministic: all random constants are drawn once outside

def _fd(f, x, tol=1e-4, eps=1e-5):
    err = grad_check(f, x, eps=eps)
    assert err < tol, f"finite-difference mismatch: {err:.3e}"


def test_fd_add():
    other = _c((3, 4))
    _fd(lambda x: nd.tsum(nd.mul(nd.add(x, other), nd.add(x, other))), _t((3, 4)))


def test_fd_add_broadcast():
    base = _c((3, 4))
    post = _c((3, 4))
    _fd(lambda b: nd.tsum(nd.mul(nd.add(base, b), post)), _t((4,)))


def test_fd_sub():
    _fd(lambda x: nd.tsum(nd.mul(nd.sub(x, 0.3), nd.sub(x, 0.3))), _t((2, 5)))


def test_fd_mul():
    other = _c((4, 4), 0.5, 1.5)
    _fd(lambda x: nd.tsum(nd.mul(x, nd.mul(x, other))), _t((4, 4)))


def test_fd_div():
    denom = _c((3, 3), 1.0, 2.0)
    _fd(lambda x: nd.tsum(nd.div(nd.mul(x, x), denom)), _t((3, 3)))
    num = _c((3, 3), 1.0, 2.0)
    _fd(lambda x: nd.tsum(nd.div(num, x)), _t((3, 3), lo=1.0, hi=2.0))


def test_fd_scale_neg():
    _fd(lambda x: nd.tsum(nd.scale(nd.mul(x, x), 2.5)), _t((3,)))
    _fd(lambda x: nd.tsum(nd.neg(nd.mul(x, x))), _t((3,)))


def test_fd_relu():
    _fd(lambda x: nd.tsum(nd.mul(nd.relu(x), nd.relu(x))), _t((4, 4), nudge=0.05))


def test_fd_log():
    _fd(lambda x: nd.tsum(nd.log(x)), _t((3, 3), lo=0.5, hi=2.0))


def test_fd_softmax():
    w = _c((2, 6))
    _fd(lambda x: nd.tsum(nd.mul(nd.softmax(x, axis=1), w)), _t((2, 6)))


def test_fd_softmax_log_composition():
    t = np.zeros((1, 5))
    t[0, 2] = 1.0
    t = Tensor(t)
    err = grad_check(
        lambda x: nd.neg(nd.tsum(nd.mul(t, nd.log(nd.softmax(x, axis=1))))),
        _t((1, 5)),
    )
    assert err < 1e-6


def test_fd_matmul_transpose():
    b = _c((4, 3))
    _fd(lambda x: nd.tsum(nd.mul(nd.matmul(x, b), nd.matmul(x, b))), _t((2, 4)))
    _fd(lambda x: nd.tsum(nd.matmul(nd.transpose(x), x)), _t((3, 2)))


def test_fd_linear():
    x = _c((3, 4))
    onesb = Tensor(np.ones(2))
    _fd(lambda w: nd.tsum(nd.mul(nd.linear(x, w, onesb), nd.linear(x, w, onesb))), _t((4, 2)))
    w0 = _c((4, 2))
    post = _c((3, 2))
    _fd(lambda b: nd.tsum(nd.mul(nd.linear(x, w0, b), post)), _t((2,)))


def test_fd_conv2d():
    w = _c((3, 2, 3, 3))
    post = _c((2, 3, 6, 6))
    _fd(lambda x: nd.tsum(nd.mul(nd.conv2d(x, w, stride=1, padding=1), post)), _t((2, 2, 6, 6)))
    x = _c((2, 2, 6, 6))
    post_s2 = _c((2, 3, 3, 3))
    _fd(lambda w_: nd.tsum(nd.mul(nd.conv2d(x, w_, stride=2, padding=1), post_s2)), _t((3, 2, 3, 3)))
    post_b = _c((2, 3, 6, 6))
    _fd(lambda b: nd.tsum(nd.mul(nd.conv2d(x, w, b, stride=1, padding=1), post_b)), _t((3,)))


def test_fd_conv_transpose2d():
    w = _c((2, 3, 2, 2))
    post = _c((1, 3, 8, 8))
    _fd(lambda x: nd.tsum(nd.mul(nd.conv_transpose2d(x, w, stride=2), post)), _t((1, 2, 4, 4)))
    x = _c((1, 2, 4, 4))
    post_p1 = _c((1, 3, 6, 6))
    _fd(lambda w_: nd.tsum(nd.mul(nd.conv_transpose2d(x, w_, stride=2, padding=1), post_p1)),
        _t((2, 3, 2, 2)))
    post_b = _c((1, 3, 8, 8))
    _fd(lambda b: nd.tsum(nd.mul(nd.conv_transpose2d(x, w, b, stride=2), post_b)), _t((3,)))


def test_fd_maxpool():
    post = _c((1, 2, 2, 2), 0.5, 1.0)
    _fd(lambda x: nd.tsum(nd.mul(nd.maxpool2d(x, 2), post)), _t((1, 2, 4, 4)))


def test_fd_avgpool():
    post = _c((1, 2, 2, 2), 0.5, 1.0)
    _fd(lambda x: nd.tsum(nd.mul(nd.avgpool2d(x, 2), post)), _t((1, 2, 4, 4)))


def test_fd_concat_reshape_flatten():
    other = _c((2, 3))
    post4 = _c((4, 3))
    _fd(lambda x: nd.tsum(nd.mul(nd.concat([x, other], axis=0), post4)), _t((2, 3)))
    post6 = _c((6,))
    _fd(lambda x: nd.tsum(nd.mul(nd.reshape(x, (6,)), post6)), _t((2, 3)))
    post8 = _c((2, 8))
    _fd(lambda x: nd.tsum(nd.mul(nd.flatten(x), post8)), _t((2, 2, 2, 2)))


def test_fd_mean_sum_axis():
    post4 = _c((4,))
    _fd(lambda x: nd.tsum(nd.mul(nd.mean(x, axis=0), post4)), _t((3, 4)))
    post3 = _c((3,))
    _fd(lambda x: nd.tsum(nd.mul(nd.tsum(x, axis=1), post3)), _t((3, 4)))


def test_fd_gather_rows():
    idx = np.array([2, 0, 2])
    post = _c((3, 4))
    _fd(lambda x: nd.tsum(nd.mul(nd.gather_rows(x, idx), post)), _t((3, 4)))


def test_fd_dropout():
    # reseed inside f so both finite-difference evaluations see the same mask
    post = _c((4, 4))
    _fd(lambda x: nd.tsum(nd.mul(
        nd.dropout(x, 0.4, train=True, rng=np.random.default_rng(7)), post)), _t((4, 4)))
    x = _t((4, 4))
    y = nd.dropout(x, 0.4, train=False)
    assert np.array_equal(y.data, x.data)


def test_fd_batchnorm_train_and_eval():
    rm = np.zeros(3)
    rv = np.ones(3)
    gamma = Tensor(RNG.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = Tensor(RNG.uniform(-0.5, 0.5, 3), requires_grad=True)
    post = _c((4, 3))

    def f_x(x):
        return nd.tsum(nd.mul(nd.batchnorm(x, gamma, beta, rm.copy(), rv.copy(), train=True), post))

    _fd(f_x, _t((4, 3)))

    x0 = _c((4, 3))

    def f_gamma(g):
        return nd.tsum(nd.mul(nd.batchnorm(x0, g, beta, rm.copy(), rv.copy(), train=True), post))

    _fd(f_gamma, Tensor(RNG.uniform(0.5, 1.5, 3), requires_grad=True))

    def f_beta(b):
        return nd.tsum(nd.mul(nd.batchnorm(x0, gamma, b, rm.copy(), rv.copy(), train=True), post))

    _fd(f_beta, Tensor(RNG.uniform(-0.5, 0.5, 3), requires_grad=True))

    def f_eval(x):
        return nd.tsum(nd.mul(nd.batchnorm(x, gamma, beta, rm, rv, train=False), post))

    _fd(f_eval, _t((4, 3)))


def test_fd_batchnorm_4d():
    rm, rv = np.zeros(2), np.ones(2)
    gamma = Tensor(np.ones(2), requires_grad=True)
    beta = Tensor(np.zeros(2), requires_grad=True)
    post = _c((2, 2, 3, 3))

    def f(x):
        return nd.tsum(nd.mul(nd.batchnorm(x, gamma, beta, rm.copy(), rv.copy(), train=True), post))

    _fd(f, _t((2, 2, 3, 3)))


def test_batchnorm_eval_deterministic_affine():
    rm = RNG.uniform(-0.5, 0.5, 3)
    rv = RNG.uniform(0.5, 1.5, 3)
    gamma = Tensor(np.ones(3))
    beta = Tensor(np.zeros(3))
    x = _c((5, 3))
    y1 = nd.batchnorm(x, gamma, beta, rm, rv, train=False)
    y2 = nd.batchnorm(x, gamma, beta, rm, rv, train=False)
    assert np.array_equal(y1.data, y2.data)
    expected = (x.data - rm) / np.sqrt(rv + 1e-5)
    assert np.allclose(y1.data, expected)


def test_grad_check_exact_quadratic():
    err = grad_check(lambda x: nd.tsum(nd.mul(x, x)), _t((4,)))
    assert err < 1e-8


def test_determinism_same_graph_same_values():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)
        loss = nd.tsum(nd.mul(nd.relu(nd.matmul(x, w)), nd.relu(nd.matmul(x, w))))
        backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


# --------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    tensors = {
        "w1": RNG.uniform(-1, 1, (3, 4)),
        "b1": RNG.uniform(-1, 1, 4),
        "scalar": np.array(2.5),
    }
    p = tmp_path / "ck.bin"
    nd.save_checkpoint(str(p), tensors)
    back = nd.load_checkpoint(str(p))
    assert set(back) == set(tensors)
    for k in tensors:
        assert np.array_equal(back[k], np.asarray(tensors[k], dtype=np.float64))


def test_checkpoint_byte_stable(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "z": np.array([1.0])}
    p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
    nd.save_checkpoint(str(p1), tensors)
    nd.save_checkpoint(str(p2), {k: v.copy() for k, v in tensors.items()})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(nd.CheckpointError):
        nd.load_checkpoint(str(p))
