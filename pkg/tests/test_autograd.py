import numpy as np
import pytest

from neuvol.autograd import (
    NumericError,
    Parameter,
    Tape,
    add,
    backward,
    ce_loss_op,
    concat_ch,
    conv3d_op,
    dice_loss_op,
    dot_const,
    instance_norm_op,
    kaiming_conv_weights,
    leaky_relu_op,
    nsum,
    pixel_shuffle_op,
    pixel_unshuffle_op,
    poly_lr,
    scale,
    sgd_step,
    softmax_ch_op,
    tanh_op,
    transposed_conv3d_op,
)

RTOL = 1e-3
ATOL = 1e-6
FD_H = 1e-4


# ---------------------------------------------------------------- oracle

def fd_grad(f, x, h=FD_H):
    """Central finite differences of scalar f() w.r.t. array x, in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def check_grads(build, arrays, h=FD_H):
    """build(tape, *leaf_nodes) -> scalar node; arrays are float64.

    Graphs containing the leaky-ReLU kink need a smaller step: a central
    difference straddling the kink measures the wrong slope, and the odds of
    landing within h of it scale with h.
    """
    def loss_value():
        t = Tape()
        return float(build(t, *[t.leaf(a) for a in arrays]).value)

    tape = Tape()
    nodes = [tape.leaf(a) for a in arrays]
    backward(tape, build(tape, *nodes))
    for a, node in zip(arrays, nodes):
        analytic = node.grad if node.grad is not None else np.zeros_like(a)
        numeric = fd_grad(loss_value, a, h=h)
        np.testing.assert_allclose(analytic, numeric, rtol=RTOL, atol=ATOL)


def rng_arrays(seed, *shapes):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(s) for s in shapes]


def projector(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape)


# ------------------------------------------------------------- op checks

def test_grad_conv3d():
    x, w, b = rng_arrays(0, (5, 5, 5, 2), (3, 2, 3, 3, 3), (3,))
    r = projector(100, (3, 3, 3, 3))

    def build(t, xn, wn, bn):
        return dot_const(t, conv3d_op(t, xn, wn, bn, (2, 2, 2), (1, 1, 1)), r)

    check_grads(build, [x, w, b])


def test_grad_conv3d_anisotropic():
    x, w, b = rng_arrays(1, (4, 4, 4, 2), (2, 2, 1, 3, 3), (2,))
    r = projector(101, (4, 2, 2, 2))

    def build(t, xn, wn, bn):
        return dot_const(t, conv3d_op(t, xn, wn, bn, (1, 2, 2), (0, 1, 1)), r)

    check_grads(build, [x, w, b])


def test_grad_transposed_conv3d():
    x, w, b = rng_arrays(2, (3, 3, 3, 3), (3, 2, 2, 2, 2), (2,))
    r = projector(102, (6, 6, 6, 2))

    def build(t, xn, wn, bn):
        return dot_const(t, transposed_conv3d_op(t, xn, wn, bn, (2, 2, 2), (0, 0, 0)), r)

    check_grads(build, [x, w, b])


def test_grad_pixel_shuffle_and_unshuffle():
    (x,) = rng_arrays(3, (2, 2, 2, 8))
    r = projector(103, (4, 4, 4, 1))

    def build(t, xn):
        return dot_const(t, pixel_shuffle_op(t, xn, (2, 2, 2)), r)

    check_grads(build, [x])

    (y,) = rng_arrays(4, (4, 4, 2, 1))
    r2 = projector(104, (2, 2, 2, 4))

    def build2(t, yn):
        return dot_const(t, pixel_unshuffle_op(t, yn, (2, 2, 1)), r2)

    check_grads(build2, [y])


def test_grad_instance_norm():
    x, gamma, beta = rng_arrays(5, (4, 4, 4, 3), (3,), (3,))
    gamma += 1.5  # keep away from degenerate zero scale
    r = projector(105, (4, 4, 4, 3))

    def build(t, xn, gn, bn):
        return dot_const(t, instance_norm_op(t, xn, gn, bn), r)

    check_grads(build, [x, gamma, beta])


def test_grad_activations():
    (x,) = rng_arrays(6, (4, 4, 4, 2))
    r = projector(106, (4, 4, 4, 2))

    def build_leaky(t, xn):
        return dot_const(t, leaky_relu_op(t, xn), r)

    def build_tanh(t, xn):
        return dot_const(t, tanh_op(t, xn), r)

    check_grads(build_leaky, [x])
    check_grads(build_tanh, [x])


def test_grad_softmax():
    (x,) = rng_arrays(7, (3, 3, 3, 4))
    r = projector(107, (3, 3, 3, 4))

    def build(t, xn):
        return dot_const(t, softmax_ch_op(t, xn), r)

    check_grads(build, [x])


def onehot_labels(seed, shape, classes):
    rng = np.random.default_rng(seed)
    lbl = rng.integers(0, classes, shape)
    oh = np.zeros(shape + (classes,))
    for c in range(classes):
        oh[..., c] = lbl == c
    return oh


def test_grad_dice_on_probabilities():
    rng = np.random.default_rng(8)
    s = rng.uniform(0.05, 0.95, (4, 4, 4, 3))
    oh = onehot_labels(9, (4, 4, 4), 3)

    def build(t, sn):
        return dice_loss_op(t, sn, oh)

    check_grads(build, [s])


def test_grad_softmax_dice_and_ce_from_logits():
    (logits,) = rng_arrays(10, (4, 4, 4, 3))
    oh = onehot_labels(11, (4, 4, 4), 3)

    def build_dice(t, ln):
        return dice_loss_op(t, softmax_ch_op(t, ln), oh)

    def build_ce(t, ln):
        return ce_loss_op(t, softmax_ch_op(t, ln), oh)

    def build_total(t, ln):
        s = softmax_ch_op(t, ln)
        return add(t, dice_loss_op(t, s, oh), ce_loss_op(t, s, oh))

    check_grads(build_dice, [logits])
    check_grads(build_ce, [logits])
    check_grads(build_total, [logits])


def test_grad_concat_scale_sum():
    a, b = rng_arrays(12, (3, 3, 3, 2), (3, 3, 3, 1))
    r = projector(108, (3, 3, 3, 3))

    def build(t, an, bn):
        cat = concat_ch(t, [an, bn])
        return scale(t, add(t, dot_const(t, cat, r), nsum(t, an)), 0.7)

    check_grads(build, [a, b])


def test_grad_subpixel_dice_composite():
    # the full learned-upsampling chain into a dice loss
    rng = np.random.default_rng(13)
    x = rng.standard_normal((3, 3, 3, 2))
    w5 = rng.standard_normal((4, 2, 5, 5, 5)) * 0.1
    b5 = rng.standard_normal(4) * 0.1
    w3 = rng.standard_normal((16, 4, 3, 3, 3)) * 0.1
    b3 = rng.standard_normal(16) * 0.1
    oh = onehot_labels(14, (6, 6, 6), 2)

    def build(t, xn, w5n, b5n, w3n, b3n):
        h = conv3d_op(t, xn, w5n, b5n, (1, 1, 1), (2, 2, 2))
        h = tanh_op(t, h)
        h = conv3d_op(t, h, w3n, b3n, (1, 1, 1), (1, 1, 1))
        h = leaky_relu_op(t, h)
        up = pixel_shuffle_op(t, h, (2, 2, 2))
        return dice_loss_op(t, softmax_ch_op(t, up), oh)

    check_grads(build, [x, w5, b5, w3, b3], h=1e-6)


def test_subpixel_every_output_channel_reads_all_intermediates():
    # structural: each pre-shuffle channel (hence each output phase) depends
    # on every intermediate channel, so no phase-aligned partition exists
    rng = np.random.default_rng(15)
    x = rng.standard_normal((3, 3, 3, 2))
    w3 = rng.standard_normal((16, 4, 3, 3, 3)) * 0.1
    t = Tape()
    inter = t.leaf(rng.standard_normal((3, 3, 3, 4)))  # post-tanh features
    pre = conv3d_op(t, inter, t.leaf(w3), None, (1, 1, 1), (1, 1, 1))
    for ch in range(16):
        probe = np.zeros_like(pre.value)
        probe[1, 1, 1, ch] = 1.0
        t2 = Tape()
        inter2 = t2.leaf(inter.value)
        pre2 = conv3d_op(t2, inter2, t2.leaf(w3), None, (1, 1, 1), (1, 1, 1))
        backward(t2, dot_const(t2, pre2, probe))
        per_channel = np.abs(inter2.grad).sum(axis=(0, 1, 2))
        assert np.all(per_channel > 0), f"pre-shuffle channel {ch} ignores an intermediate channel"
    del x, pre


# ------------------------------------------------------- tape mechanics

def test_backward_requires_scalar_loss():
    t = Tape()
    x = t.leaf(np.zeros((2, 2, 2, 1)))
    y = leaky_relu_op(t, x)
    with pytest.raises(ValueError):
        backward(t, y)


def test_shared_subexpression_accumulates():
    (x,) = rng_arrays(16, (3, 3, 3, 2))
    t = Tape()
    xn = t.leaf(x)
    shared = tanh_op(t, xn)
    loss = add(t, nsum(t, shared), dot_const(t, shared, np.ones_like(x) * 0.5))
    backward(t, loss)
    got = xn.grad

    # split-graph equivalent: two independent copies, gradients summed
    t1 = Tape()
    x1 = t1.leaf(x)
    backward(t1, nsum(t1, tanh_op(t1, x1)))
    t2 = Tape()
    x2 = t2.leaf(x)
    backward(t2, dot_const(t2, tanh_op(t2, x2), np.ones_like(x) * 0.5))
    np.testing.assert_allclose(got, x1.grad + x2.grad, atol=1e-12)


def test_param_nodes_memoized_per_tape():
    p = Parameter("w", np.ones((1, 1, 1, 1)))
    t = Tape()
    assert t.param(p) is t.param(p)
    t2 = Tape()
    assert t2.param(p) is not t.param(p)
    assert t2.param(p).grad is None


# ----------------------------------------------------------- optimizer

def oracle_sgd(value, grads, lr, momentum, wd):
    v = np.zeros_like(value)
    x = value.copy()
    for g in grads:
        v = momentum * v + g + wd * x
        x = x - lr * v
    return x


def test_sgd_matches_scalar_recurrence():
    rng = np.random.default_rng(17)
    x0 = rng.standard_normal((3, 3)).astype(np.float64)
    grads = [rng.standard_normal((3, 3)) for _ in range(5)]
    p = Parameter("w", x0.copy())
    for g in grads:
        sgd_step([p], {"w": g}, lr=0.01, momentum=0.99, weight_decay=3e-5)
    np.testing.assert_allclose(p.value, oracle_sgd(x0, grads, 0.01, 0.99, 3e-5), atol=1e-12)


def test_sgd_nan_gradient_names_parameter():
    p = Parameter("enc.stage1.w", np.ones(3))
    bad = np.array([1.0, np.nan, 0.0])
    with pytest.raises(NumericError, match="enc.stage1.w"):
        sgd_step([p], {"enc.stage1.w": bad}, lr=0.01)


def test_sgd_skips_params_without_grads():
    p = Parameter("unused", np.ones(3))
    sgd_step([p], {}, lr=0.01)
    np.testing.assert_allclose(p.value, 1.0)


# ------------------------------------------------------------- schedule

def test_poly_lr_frozen_values():
    assert poly_lr(0.01, 0, 1000) == 0.01
    assert abs(poly_lr(0.01, 500, 1000) - 0.01 * 0.5 ** 0.99) < 1e-12
    assert poly_lr(0.01, 1000, 1000) == 0.0
    with pytest.raises(ValueError):
        poly_lr(0.01, 1001, 1000)
    with pytest.raises(ValueError):
        poly_lr(0.01, -1, 1000)


def test_kaiming_init_scale():
    rng = np.random.default_rng(18)
    w = kaiming_conv_weights(rng, 64, 32, (3, 3, 3), dtype=np.float64)
    fan_in = 32 * 27
    want = np.sqrt(2.0 / (1.0 + 0.01 ** 2)) / np.sqrt(fan_in)
    assert abs(w.std() - want) / want < 0.02
    assert abs(w.mean()) < want * 0.05
