import math

import numpy as np
import pytest

from pfseg import kernels
from pfseg.gradcheck import CHECKS, grad_check, run_op_check
from pfseg.kernels import use_backend
from pfseg.optim import SGD, sgd_step
from pfseg.tensor import (
    IndexMap,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    max_pool2d,
    max_unpool2d,
    mul,
    relu,
    softmax_cross_entropy,
    sum_all,
    tanh,
)


def naive_conv(x, w, b, stride, pad):
    """Direct nested-loop convolution, the oracle for conv2d."""
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(k):
                            for bb in range(k):
                                acc += xp[i, ci, r * stride + a, s * stride + bb] * w[o, ci, a, bb]
                    out[i, o, r, s] = acc + (b[o] if b is not None else 0.0)
    return out


# ---------------------------------------------------------------------------
# Tensor basics


def test_flat_index_layout():
    data = np.arange(2 * 3 * 4 * 5, dtype=np.float64)
    t = Tensor(data.reshape(2, 3, 4, 5))
    n, c, h, w = 1, 2, 3, 4
    assert t.data[n, c, h, w] == data[((n * 3 + c) * 4 + h) * 5 + w]


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 0, 2, 2)))


def test_tensor_is_identity_hashed():
    a, b = Tensor([1.0]), Tensor([1.0])
    assert a != b and len({a, b}) == 2


# ---------------------------------------------------------------------------
# conv2d


def test_conv_spec_example():
    x = Tensor(np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3))
    w = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
    out = conv2d(x, w, Tensor([0.0]))
    np.testing.assert_array_equal(out.data[0, 0], [[6, 8], [12, 14]])


def test_zero_kernel_gives_bias(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 7)))
    out = conv2d(x, Tensor(np.zeros((1, 3, 1, 1))), Tensor([2.5]))
    assert np.all(out.data == 2.5)


def test_same_padding_shape(rng):
    out = conv2d(Tensor(rng.standard_normal((1, 3, 8, 8))), Tensor(rng.standard_normal((5, 3, 3, 3))), padding=1)
    assert out.shape == (1, 5, 8, 8)


@pytest.mark.parametrize("backend", kernels.BACKENDS)
@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5), (2, 0, 2)])
def test_conv_matches_naive_loops_exactly_on_integers(rng, backend, stride, pad, k):
    # small integers make every partial sum exact, so any summation order
    # gives the same bits; this is the bitwise half of the oracle
    x = rng.integers(-4, 5, (2, 3, 7, 6)).astype(np.float64)
    w = rng.integers(-3, 4, (4, 3, k, k)).astype(np.float64)
    b = rng.integers(-2, 3, 4).astype(np.float64)
    with use_backend(backend):
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    np.testing.assert_array_equal(out.data, naive_conv(x, w, b, stride, pad))


def test_conv_matches_naive_loops_on_floats(rng):
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), 2, 1)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, 2, 1), rtol=0, atol=1e-12)


def test_conv_shape_errors_name_the_dimension(rng):
    x = Tensor(rng.standard_normal((1, 3, 8, 8)))
    with pytest.raises(ShapeError, match="channel"):
        conv2d(x, Tensor(rng.standard_normal((2, 4, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(x, Tensor(rng.standard_normal((2, 3, 9, 9))))


# ---------------------------------------------------------------------------
# pooling


def test_pool_spec_example():
    vals, imap = max_pool2d(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)))
    assert vals.data.item() == 4
    assert imap.indices.item() == 1 * 2 + 1


def test_pool_ties_pick_first_window_position():
    vals, imap = max_pool2d(Tensor(np.full((1, 2, 4, 4), 7.0)))
    assert np.all(vals.data == 7.0)
    rows, cols = np.divmod(imap.indices, 4)
    assert np.all(rows % 2 == 0) and np.all(cols % 2 == 0)


def test_pool_then_unpool_spec_example():
    x = Tensor(np.array([[5.0, 1.0], [1.0, 1.0]]).reshape(1, 1, 2, 2))
    vals, imap = max_pool2d(x)
    np.testing.assert_array_equal(max_unpool2d(vals, imap).data[0, 0], [[5, 0], [0, 0]])


def test_unpool_scatters_to_recorded_index():
    imap = IndexMap(np.array([[[[3]]]], dtype=np.int64), (1, 1, 2, 2))
    out = max_unpool2d(Tensor(np.array([[[[4.0]]]])), imap)
    np.testing.assert_array_equal(out.data[0, 0], [[0, 0], [0, 4]])


def test_unpool_support_is_window_argmax(rng):
    x = rng.permutation(2 * 3 * 8 * 8).reshape(2, 3, 8, 8).astype(np.float64) + 1
    vals, imap = max_pool2d(Tensor(x))
    up = max_unpool2d(vals, imap).data
    windows = x.reshape(2, 3, 4, 2, 4, 2).max(axis=(3, 5))
    expect = np.where(x == np.repeat(np.repeat(windows, 2, 2), 2, 3), x, 0)
    np.testing.assert_array_equal(up, expect)


def test_pool_rejects_odd_extent(rng):
    with pytest.raises(ShapeError):
        max_pool2d(Tensor(rng.standard_normal((1, 1, 5, 4))))


def test_unpool_rejects_out_of_range_index():
    imap = IndexMap(np.array([[[[9]]]], dtype=np.int64), (1, 1, 2, 2))
    with pytest.raises(IndexError):
        max_unpool2d(Tensor(np.ones((1, 1, 1, 1))), imap)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree_bitwise(rng, dtype):
    x = rng.standard_normal((2, 3, 8, 10)).astype(dtype)
    x[0, 0, :2, :2] = 1.0  # a tie
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    outs = {}
    for b in kernels.BACKENDS:
        with use_backend(b):
            cols = kernels.im2col(xp, 3, 1, 8, 10)
            back = kernels.col2im(cols, 3, 10, 12, 3, 1, 8, 10)
            vals, idx = kernels.maxpool2x2(x)
            up = kernels.scatter_plane(vals, idx, 8, 10)
            gat = kernels.gather_plane(x, idx)
            outs[b] = (cols, back, vals, idx, up, gat)
    for a, b in zip(*outs.values()):
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# elementwise ops


def test_tanh_values():
    assert tanh(Tensor([0.0])).data[0] == 0.0
    out = tanh(Tensor([20.0, -20.0])).data
    assert abs(out[0] - 1) < 1e-9 and abs(out[1] + 1) < 1e-9


def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_concat_order(rng):
    a, b = rng.standard_normal((1, 3, 8, 8)), rng.standard_normal((1, 3, 8, 8))
    out = concat_channels(Tensor(a), Tensor(b))
    assert out.shape == (1, 6, 8, 8)
    np.testing.assert_array_equal(out.data[:, :3], a)
    np.testing.assert_array_equal(out.data[:, 3:], b)


def test_add_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))


# ---------------------------------------------------------------------------
# cross-entropy


def test_uniform_logits_give_log_c():
    logits = Tensor(np.zeros((1, 12, 4, 4)))
    loss = softmax_cross_entropy(logits, np.zeros((1, 4, 4), dtype=np.int64))
    assert math.isclose(loss.item(), math.log(12), rel_tol=1e-12)


def test_margin_drives_loss_to_zero():
    labels = np.array([[[0, 1], [2, 0]]])
    losses = []
    for margin in (1.0, 10.0, 100.0):
        logits = np.zeros((1, 3, 2, 2))
        np.put_along_axis(logits, labels[:, None], margin, axis=1)
        losses.append(softmax_cross_entropy(Tensor(logits), labels).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-30


def test_void_pixels_get_zero_gradient(rng):
    logits = Tensor(rng.standard_normal((1, 4, 3, 3)), requires_grad=True)
    labels = rng.integers(0, 4, (1, 3, 3))
    labels[0, 1, :] = 255
    with Tape() as tape:
        loss = softmax_cross_entropy(logits, labels)
    g = tape.backward(loss)[logits]
    assert np.all(g[0, :, 1, :] == 0) and np.any(g[0, :, 0, :] != 0)


def test_all_void_is_zero_loss(rng):
    logits = Tensor(rng.standard_normal((1, 4, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = softmax_cross_entropy(logits, np.full((1, 2, 2), 255))
    assert loss.item() == 0.0
    assert np.all(tape.backward(loss)[logits] == 0)


def test_out_of_range_label_rejected():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((1, 3, 1, 1))), np.array([[[5]]]))


def test_cross_entropy_gradient_spec_example(rng):
    labels = rng.integers(0, 3, (1, 4, 4))
    err = grad_check(lambda t: softmax_cross_entropy(t, labels), rng.standard_normal((1, 3, 4, 4)))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# tape


def test_shared_weight_accumulates(rng):
    x1, x2 = rng.standard_normal(5), rng.standard_normal(5)
    w = Tensor(rng.standard_normal(5), requires_grad=True)
    with Tape() as tape:
        loss = add(sum_all(mul(w, Tensor(x1))), sum_all(mul(w, Tensor(x2))))
    np.testing.assert_allclose(tape.backward(loss)[w], x1 + x2, rtol=0, atol=1e-15)


def test_sum_gradient_is_ones(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(x)
    np.testing.assert_array_equal(tape.backward(loss)[x], np.ones((2, 3)))


def test_every_reachable_param_gets_same_shape_grad(rng):
    w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    unused = Tensor(rng.standard_normal(2), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(tanh(conv2d(Tensor(rng.standard_normal((1, 3, 6, 6))), w, b, padding=1)))
        sum_all(unused)
    grads = tape.backward(loss)
    assert grads[w].shape == w.shape and grads[b].shape == b.shape
    assert unused not in grads


def test_tape_is_topologically_ordered(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        sum_all(tanh(mul(w, Tensor(np.ones(3)))))
    seen = {id(w)}
    for node in tape.nodes:
        assert all(id(t) in seen or not tape.tracks(t) for t in node.inputs)
        seen.add(id(node.output))


def test_backward_rejects_foreign_and_vector_losses(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        v = tanh(w)
    with pytest.raises(ShapeError):
        tape.backward(v)
    with pytest.raises(TapeError):
        tape.backward(Tensor([1.0]))


def test_nothing_recorded_without_tape(rng):
    w = Tensor(rng.standard_normal(3), requires_grad=True)
    tanh(w)
    with Tape() as tape:
        tanh(Tensor(np.ones(3)))
    assert tape.nodes == []


# ---------------------------------------------------------------------------
# gradient checker


def test_linear_function_has_zero_error(rng):
    assert grad_check(lambda t: sum_all(mul(t, Tensor(np.full(t.shape, 3.0)))), rng.standard_normal(6)) < 1e-9


def test_tanh_check_below_1e7():
    assert run_op_check("tanh", trials=20) < 1e-7


def test_grad_check_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        grad_check(lambda t: sum_all(t), np.ones(2), epsilon=0.5)


def test_grad_check_catches_a_wrong_gradient(rng):
    from pfseg.tensor import _record

    def bad_square(t):
        return sum_all(_record("bad", (t,), t.data**2, lambda g: (g * t.data,)))  # true grad is 2x

    assert grad_check(bad_square, rng.uniform(1, 2, 4)) > 0.4


def test_unknown_op_raises():
    with pytest.raises(KeyError):
        run_op_check("nosuch")


@pytest.mark.parametrize("op", sorted(CHECKS))
def test_each_op_passes_few_trials(op):
    assert run_op_check(op, trials=3, seed=5) < 1e-4


# ---------------------------------------------------------------------------
# SGD


def _one(value, name="p"):
    return {name: Tensor(np.array([value]))}


def test_sgd_plain_step():
    p = _one(1.0)
    sgd_step(p, {"p": np.array([0.5])}, {}, lr=0.1)
    assert p["p"].data[0] == pytest.approx(1.0 - 0.1 * 0.5, abs=0)


def test_sgd_coasts_on_velocity():
    p = _one(0.0)
    vel = {"p": np.array([2.0])}
    sgd_step(p, {"p": np.array([0.0])}, vel, lr=0.1, momentum=0.9)
    assert p["p"].data[0] == pytest.approx(-0.1 * 0.9 * 2.0, rel=1e-15)


def test_sgd_two_momentum_steps():
    p = _one(0.0)
    opt = SGD(p, lr=0.1, momentum=0.9)
    opt.step({"p": np.array([1.0])})
    opt.step({"p": np.array([1.0])})
    assert p["p"].data[0] == pytest.approx(-0.1 * 1.0 * (1 + 1.9), rel=1e-14)


def test_sgd_weight_decay_and_shape_check():
    p = _one(2.0)
    sgd_step(p, {"p": np.array([0.0])}, {}, lr=0.5, weight_decay=0.1)
    assert p["p"].data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)
    with pytest.raises(ShapeError):
        sgd_step(p, {"p": np.zeros(2)}, {}, lr=0.1)
