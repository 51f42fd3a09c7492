"""Reverse-mode differentiation over the dense 3D operators.

A Tape records every op-produced Node in creation order; parents always
precede children, so backward is one reversed sweep that accumulates
gradients into Node.grad. Nodes wrap plain (H, W, D, C) ndarrays (0-d for
scalar losses); build graphs in float64 when checking gradients against
finite differences.

One tape per training step: parameter leaves are memoized per tape, so a
fresh tape starts with clean gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import (
    conv3d_input_grad,
    conv3d_raw,
    conv3d_weight_grad,
    instance_norm_raw,
    leaky_relu_raw,
    pixel_shuffle_raw,
    pixel_unshuffle_raw,
    transposed_conv3d_raw,
)

LEAKY_SLOPE = 0.01
CE_CLIP = 1e-12


class NumericError(RuntimeError):
    """A non-finite value reached the optimizer; aborts the step."""


class Node:
    __slots__ = ("value", "parents", "grad", "rule", "name")

    def __init__(self, value, parents=(), rule=None, name=""):
        self.value = value
        self.parents = parents
        self.rule = rule
        self.grad = None
        self.name = name

    def __repr__(self):
        return f"Node({self.name or 'anon'}, shape={np.shape(self.value)})"


class Tape:
    """Creation-ordered node list for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[int, Node] = {}

    def record(self, value, parents, rule, name="") -> Node:
        node = Node(value, parents, rule, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name="") -> Node:
        return Node(np.asarray(value), name=name)

    def param(self, p: "Parameter") -> Node:
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self.leaf(p.value, name=p.name)
            self._param_nodes[id(p)] = node
        return node

    def grad_of(self, p: "Parameter"):
        node = self._param_nodes.get(id(p))
        return None if node is None else node.grad


def backward(tape: Tape, loss: Node) -> None:
    """Accumulate d(loss)/d(node) into every node reachable from loss."""
    if np.size(loss.value) != 1:
        raise ValueError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node.rule is None:
            continue
        node.rule(node)


def _accum(node: Node, g):
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


# ----------------------------------------------------------------- ops

def add(tape, a: Node, b: Node) -> Node:
    if np.shape(a.value) != np.shape(b.value):
        raise ValueError("add needs matching shapes")

    def rule(n):
        _accum(a, n.grad)
        _accum(b, n.grad.copy())

    return tape.record(a.value + b.value, (a, b), rule, "add")


def scale(tape, a: Node, c: float) -> Node:
    c = float(c)

    def rule(n):
        _accum(a, n.grad * c)

    return tape.record(a.value * c, (a,), rule, "scale")


def nsum(tape, a: Node) -> Node:
    def rule(n):
        _accum(a, np.broadcast_to(n.grad, a.value.shape).copy())

    return tape.record(np.sum(a.value), (a,), rule, "sum")


def nmean(tape, a: Node) -> Node:
    return scale(tape, nsum(tape, a), 1.0 / a.value.size)


def dot_const(tape, a: Node, w) -> Node:
    """Scalar projection sum(a * w) against a constant array."""
    w = np.asarray(w)

    def rule(n):
        _accum(a, n.grad * w)

    return tape.record(np.sum(a.value * w), (a,), rule, "dot_const")


def concat_ch(tape, parts: list[Node]) -> Node:
    splits = np.cumsum([p.value.shape[3] for p in parts])[:-1]

    def rule(n):
        for p, g in zip(parts, np.split(n.grad, splits, axis=3)):
            _accum(p, g.copy())

    return tape.record(np.concatenate([p.value for p in parts], axis=3), tuple(parts), rule, "concat")


def conv3d_op(tape, x: Node, w: Node, b: Node | None, stride, pad) -> Node:
    stride = tuple(stride)
    pad = tuple(pad)
    val = conv3d_raw(x.value, w.value, None if b is None else b.value, stride, pad)

    def rule(n):
        g = n.grad
        _accum(x, conv3d_input_grad(g, w.value, stride, pad, x.value.shape[:3]))
        _accum(w, conv3d_weight_grad(x.value, g, stride, pad, w.value.shape[2:]))
        if b is not None:
            _accum(b, g.sum(axis=(0, 1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return tape.record(val, parents, rule, "conv3d")


def transposed_conv3d_op(tape, x: Node, w: Node, b: Node | None, stride, pad) -> Node:
    stride = tuple(stride)
    pad = tuple(pad)
    val = transposed_conv3d_raw(x.value, w.value, None if b is None else b.value, stride, pad)

    def rule(n):
        g = n.grad
        _accum(x, conv3d_raw(g, w.value, None, stride, pad))
        _accum(w, conv3d_weight_grad(g, x.value, stride, pad, w.value.shape[2:]))
        if b is not None:
            _accum(b, g.sum(axis=(0, 1, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return tape.record(val, parents, rule, "transposed_conv3d")


def pixel_shuffle_op(tape, x: Node, factors) -> Node:
    def rule(n):
        _accum(x, pixel_unshuffle_raw(n.grad, factors))

    return tape.record(pixel_shuffle_raw(x.value, factors), (x,), rule, "pixel_shuffle")


def pixel_unshuffle_op(tape, x: Node, factors) -> Node:
    def rule(n):
        _accum(x, pixel_shuffle_raw(n.grad, factors))

    return tape.record(pixel_unshuffle_raw(x.value, factors), (x,), rule, "pixel_unshuffle")


def leaky_relu_op(tape, x: Node, slope: float = LEAKY_SLOPE) -> Node:
    def rule(n):
        scale_ = np.where(x.value > 0, 1.0, slope).astype(n.grad.dtype)
        _accum(x, n.grad * scale_)

    return tape.record(leaky_relu_raw(x.value, slope), (x,), rule, "leaky_relu")


def tanh_op(tape, x: Node) -> Node:
    val = np.tanh(x.value)

    def rule(n):
        _accum(x, n.grad * (1.0 - val * val))

    return tape.record(val, (x,), rule, "tanh")


def instance_norm_op(tape, x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    val, xhat, inv = instance_norm_raw(x.value, gamma.value, beta.value, eps)

    def rule(n):
        g = n.grad
        _accum(gamma, np.sum(g * xhat, axis=(0, 1, 2)))
        _accum(beta, g.sum(axis=(0, 1, 2)))
        gx = g * gamma.value
        m1 = gx.mean(axis=(0, 1, 2), keepdims=True)
        m2 = (gx * xhat).mean(axis=(0, 1, 2), keepdims=True)
        _accum(x, inv * (gx - m1 - xhat * m2))

    return tape.record(val, (x, gamma, beta), rule, "instance_norm")


def softmax_ch_op(tape, x: Node) -> Node:
    shifted = x.value - x.value.max(axis=3, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=3, keepdims=True)

    def rule(n):
        g = n.grad
        inner = np.sum(g * val, axis=3, keepdims=True)
        _accum(x, val * (g - inner))

    return tape.record(val, (x,), rule, "softmax")


def dice_loss_op(tape, s: Node, onehot, smooth: float = 1e-5):
    """Joint soft Dice over all classes and voxels; onehot is constant."""
    onehot = np.asarray(onehot, dtype=s.value.dtype)
    num = 2.0 * float(np.sum(onehot * s.value)) + smooth
    den = float(np.sum(onehot)) + float(np.sum(s.value)) + smooth
    val = np.asarray(1.0 - num / den, dtype=s.value.dtype)

    def rule(n):
        g = float(n.grad)
        _accum(s, (-g) * (2.0 * onehot * den - num) / (den * den))

    return tape.record(val, (s,), rule, "dice_loss")


def ce_loss_op(tape, s: Node, onehot, clip: float = CE_CLIP):
    """Mean cross-entropy of probabilities vs one-hot targets."""
    onehot = np.asarray(onehot, dtype=s.value.dtype)
    n_vox = s.value.shape[0] * s.value.shape[1] * s.value.shape[2]
    clipped = np.clip(s.value, clip, 1.0)
    val = np.asarray(-np.sum(onehot * np.log(clipped)) / n_vox, dtype=s.value.dtype)

    def rule(n):
        g = float(n.grad)
        live = (s.value > clip) & (s.value < 1.0)
        _accum(s, (-g / n_vox) * onehot * live / clipped)

    return tape.record(val, (s,), rule, "ce_loss")


# ------------------------------------------------------------ parameters

@dataclass
class Parameter:
    name: str
    value: np.ndarray
    velocity: np.ndarray | None = field(default=None, repr=False)


def kaiming_conv_weights(rng, out_c, in_c, ksize, dtype=np.float32):
    """Fan-in He init with the leaky-ReLU(0.01) gain."""
    fan_in = in_c * int(np.prod(ksize))
    gain = np.sqrt(2.0 / (1.0 + LEAKY_SLOPE ** 2))
    std = gain / np.sqrt(fan_in)
    return (rng.standard_normal((out_c, in_c) + tuple(ksize)) * std).astype(dtype)


def sgd_step(params: list[Parameter], grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.99, weight_decay: float = 3e-5) -> None:
    """v <- m*v + grad + wd*param; param <- param - lr*v (in place)."""
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
        if p.velocity is None:
            p.velocity = np.zeros_like(p.value)
        p.velocity *= momentum
        np.add(p.velocity, g, out=p.velocity, casting="unsafe")
        p.velocity += weight_decay * p.value
        p.value -= lr * p.velocity


def poly_lr(initial_lr: float, epoch: int, max_epochs: int, power: float = 0.99) -> float:
    """Polynomial decay lr * (1 - epoch/max_epochs)^power."""
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    return initial_lr * (1.0 - epoch / max_epochs) ** power
