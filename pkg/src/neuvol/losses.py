"""Training losses, deep-supervision weighting, and evaluation metrics.

The training criterion sums soft Dice and cross-entropy per deep-supervision
head, weighted by w_i = (1/2^(i-1)) / sum_{m=0}^{5} (1/2^m) for head i
(1-based, head 1 = full resolution): exactly (32/63, 16/63, 8/63, 4/63, 2/63).
Both Dice terms sum over ALL classes (background included) and voxels
jointly. Labels are matched to coarser heads by nearest-neighbor
downsampling (plain strided picking).

Evaluation reports per-class hard Dice overlap and the 95th-percentile
symmetric surface distance (hd95) in mm; a missing structure (empty mask)
yields None rather than a number.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .autograd import Node, Tape, add, ce_loss_op, dice_loss_op, scale, softmax_ch_op
from .volume import LabelVolume, Volume4

DICE_SMOOTH = 1e-5


def deep_supervision_weights(num_heads: int = 5, halving_terms: int = 6) -> list[Fraction]:
    """Exact rational head weights; they deliberately sum short of 1."""
    denom = sum(Fraction(1, 2 ** m) for m in range(halving_terms))
    return [Fraction(1, 2 ** i) / denom for i in range(num_heads)]


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    oh = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(oh, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return oh


def downsample_label_nearest(labels: np.ndarray, target_spatial) -> np.ndarray:
    """Strided nearest pick so label shape matches a coarser head."""
    factors = []
    for n, m in zip(labels.shape, target_spatial):
        if m == 0 or n % m:
            raise ValueError(f"label axis {n} not an integer multiple of head axis {m}")
        factors.append(n // m)
    return labels[:: factors[0], :: factors[1], :: factors[2]]


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=3, keepdims=True))
    return e / e.sum(axis=3, keepdims=True)


def dice_loss(probs: np.ndarray, onehot: np.ndarray, smooth: float = DICE_SMOOTH) -> float:
    """1 - (2*sum(g*s) + smooth) / (sum(g) + sum(s) + smooth), summed jointly."""
    t = Tape()
    return float(dice_loss_op(t, t.leaf(np.asarray(probs)), onehot, smooth).value)


def ce_loss(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Voxel-mean cross-entropy of predicted probabilities."""
    t = Tape()
    return float(ce_loss_op(t, t.leaf(np.asarray(probs)), onehot).value)


def total_loss_nodes(tape: Tape, head_logits: list[Node], label: LabelVolume,
                     num_classes: int) -> Node:
    """Deep-supervised Dice + CE over logits nodes (training path)."""
    weights = [float(w) for w in deep_supervision_weights(len(head_logits))]
    total = None
    for w, head in zip(weights, head_logits):
        lab = downsample_label_nearest(label.data, head.value.shape[:3])
        oh = one_hot(lab, num_classes, dtype=head.value.dtype)
        probs = softmax_ch_op(tape, head)
        term = add(tape, dice_loss_op(tape, probs, oh), ce_loss_op(tape, probs, oh))
        term = scale(tape, term, w)
        total = term if total is None else add(tape, total, term)
    return total


def total_loss(head_logits: list[Volume4], label: LabelVolume, num_classes: int) -> float:
    tape = Tape()
    nodes = [tape.leaf(h.data) for h in head_logits]
    return float(total_loss_nodes(tape, nodes, label, num_classes).value)


# ---------------------------------------------------------------- metrics

def dice_metric(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Hard per-class overlap 2|A^B| / (|A| + |B|); two empty masks read 1."""
    a = pred == class_id
    b = truth == class_id
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with at least one 6-neighbor outside it (the array
    border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 3:
        raise ValueError(f"mask must be 3-D, got shape {m.shape}")
    p = np.pad(m, 1, constant_values=False)
    covered = (
        p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:]
    )
    return m & ~covered


def _directed_nn_sq(a_pts: np.ndarray, b_pts: np.ndarray, spacing) -> np.ndarray:
    sp = np.asarray(spacing, dtype=np.float64)
    a = a_pts.astype(np.float64)
    b = b_pts.astype(np.float64)
    out = np.empty(len(a), dtype=np.float64)
    step = max(1, 2 ** 22 // max(len(b), 1))
    for lo in range(0, len(a), step):
        # subtract integer coordinates first (exact), then scale to mm
        diff = (a[lo: lo + step, None, :] - b[None, :, :]) * sp
        out[lo: lo + len(diff)] = np.min(np.sum(diff * diff, axis=-1), axis=1)
    return out


def hd95(pred_mask: np.ndarray, truth_mask: np.ndarray, spacing) -> float | None:
    """95th-percentile symmetric surface distance in mm.

    Per direction, take the 95th percentile (linear interpolation) of
    nearest-surface distances, then the max of the two directions. Returns
    None when either structure is absent.
    """
    a = np.argwhere(surface_voxels(pred_mask))
    b = np.argwhere(surface_voxels(truth_mask))
    if len(a) == 0 or len(b) == 0:
        return None
    d_ab = np.sqrt(_directed_nn_sq(a, b, spacing))
    d_ba = np.sqrt(_directed_nn_sq(b, a, spacing))
    return float(max(np.percentile(d_ab, 95), np.percentile(d_ba, 95)))
