"""Dense 3D network operators on (H, W, D, C) arrays.

Conventions:
  * conv3d is a cross-correlation with zero padding; a kernel stores weights
    as (out_C, in_C, k1, k2, k3) and maps in_C -> out_C channels with output
    size floor((n + 2p - k) / s) + 1 per axis.
  * transposed_conv3d applies the adjoint of conv3d with the SAME kernel
    object, so it maps out_C -> in_C channels and satisfies
    <conv3d(x, k), y> == <x, transposed_conv3d(y, k)> for aligned shapes;
    output size is (n - 1)s + k - 2p.
  * pixel_shuffle rearranges channels into space:
    out[r1*i+a, r2*j+b, r3*k+c, ch] = in[i, j, k, ch*r + a*r2*r3 + b*r3 + c].

The raw ``*_raw`` functions work on plain ndarrays (any float dtype) and are
shared with the autograd layer; the public functions wrap Volume4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from .volume import Volume4

ShuffleFactors = tuple[int, int, int]


@dataclass
class ConvKernel:
    """Convolution weights (out_C, in_C, k1, k2, k3) with stride/padding."""

    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 5:
            raise ValueError(f"weights need 5 axes (out, in, k1, k2, k3), got {self.weights.shape}")
        self.stride = tuple(int(s) for s in self.stride)
        self.padding = tuple(int(p) for p in self.padding)
        if len(self.stride) != 3 or any(s < 1 for s in self.stride):
            raise ValueError(f"stride must be 3 positive ints, got {self.stride}")
        if len(self.padding) != 3 or any(p < 0 for p in self.padding):
            raise ValueError(f"padding must be 3 non-negative ints, got {self.padding}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.ndim != 1:
                raise ValueError("bias must be 1-D")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def ksize(self) -> tuple[int, int, int]:
        return self.weights.shape[2:]


def same_padding(ksize) -> tuple[int, int, int]:
    """(k-1)/2 per axis; demands odd taps so 'same' is well defined."""
    if any(k % 2 == 0 for k in ksize):
        raise ValueError(f"'same' padding needs odd kernel sizes, got {tuple(ksize)}")
    return tuple((k - 1) // 2 for k in ksize)


# ------------------------------------------------------------------ raw core

def conv_out_shape(spatial, ksize, stride, pad):
    out = []
    for n, k, s, p in zip(spatial, ksize, stride, pad):
        m = (n + 2 * p - k) // s + 1
        if n + 2 * p < k:
            raise ValueError(f"kernel {k} exceeds padded axis size {n + 2 * p}")
        out.append(m)
    return tuple(out)


def _tap_view(xp, tap, out_spatial, stride):
    """The input voxels a single kernel tap reads, one per output voxel.
    Slicing keeps the channel axis contiguous, which is what makes the
    per-tap copies inside the GEMM calls cheap."""
    sl = tuple(slice(a, a + (m - 1) * s + 1, s)
               for a, m, s in zip(tap, out_spatial, stride))
    return xp[sl]


def conv3d_raw(x, weights, bias, stride, pad):
    """Sum over kernel taps of (shifted input) x (tap weight matrix):
    one channel-contiguous copy plus one GEMM per tap."""
    if x.shape[3] != weights.shape[1]:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {weights.shape[1]}")
    ksize = weights.shape[2:]
    out_spatial = conv_out_shape(x.shape[:3], ksize, stride, pad)
    xp = np.pad(x, (*((p, p) for p in pad), (0, 0))) if any(pad) else x
    dtype = np.result_type(x, weights)
    n_out = math.prod(out_spatial)
    out_c, in_c = weights.shape[:2]
    wt = np.ascontiguousarray(weights.transpose(2, 3, 4, 1, 0)).astype(dtype, copy=False)
    out2 = np.zeros((n_out, out_c), dtype)
    tmp = np.empty((n_out, out_c), dtype)
    vbuf = np.empty((n_out, in_c), dtype)
    vbuf4 = vbuf.reshape(out_spatial + (in_c,))
    for tap in np.ndindex(*ksize):
        np.copyto(vbuf4, _tap_view(xp, tap, out_spatial, stride))
        np.matmul(vbuf, wt[tap], out=tmp)
        out2 += tmp
    out = out2.reshape(out_spatial + (out_c,))
    if bias is not None:
        out += bias.astype(dtype)
    return out


def conv3d_weight_grad(x, gout, stride, pad, ksize):
    xp = np.pad(x, (*((p, p) for p in pad), (0, 0))) if any(pad) else x
    out_spatial = gout.shape[:3]
    dtype = np.result_type(x, gout)
    out_c, in_c = gout.shape[3], x.shape[3]
    g2 = np.ascontiguousarray(gout, dtype).reshape(-1, out_c)
    dwt = np.empty(tuple(ksize) + (out_c, in_c), dtype)
    vbuf = np.empty((g2.shape[0], in_c), dtype)
    vbuf4 = vbuf.reshape(out_spatial + (in_c,))
    for tap in np.ndindex(*ksize):
        np.copyto(vbuf4, _tap_view(xp, tap, out_spatial, stride))
        np.matmul(g2.T, vbuf, out=dwt[tap])
    return np.ascontiguousarray(dwt.transpose(3, 4, 0, 1, 2))


def _dilate(x, stride):
    if all(s == 1 for s in stride):
        return x
    n = x.shape[:3]
    out = np.zeros(tuple((m - 1) * s + 1 for m, s in zip(n, stride)) + (x.shape[3],), dtype=x.dtype)
    out[:: stride[0], :: stride[1], :: stride[2]] = x
    return out


def _pad_or_crop(x, pairs):
    """Per-axis (lo, hi) grow (>=0) or shrink (<0) of the spatial box."""
    grow = [(max(lo, 0), max(hi, 0)) for lo, hi in pairs]
    if any(g != (0, 0) for g in grow):
        x = np.pad(x, (*grow, (0, 0)))
    sl = []
    for ax, (lo, hi) in enumerate(pairs):
        start = -lo if lo < 0 else 0
        stop = x.shape[ax] + hi if hi < 0 else x.shape[ax]
        sl.append(slice(start, stop))
    return x[tuple(sl)]


def transposed_conv3d_raw(x, weights, bias, stride, pad):
    A, B = weights.shape[:2]
    if x.shape[3] != A:
        raise ValueError(f"input has {x.shape[3]} channels, transposed kernel expects {A}")
    k = weights.shape[2:]
    xd = _dilate(x, stride)
    xd = _pad_or_crop(xd, [(kk - 1 - p, kk - 1 - p) for kk, p in zip(k, pad)])
    wf = weights[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    out = conv3d_raw(xd, np.ascontiguousarray(wf), None, (1, 1, 1), (0, 0, 0))
    if bias is not None:
        out = out + bias.astype(out.dtype)
    return out


def conv3d_input_grad(gout, weights, stride, pad, in_spatial):
    # scatter each tap's contribution back onto the padded input lattice:
    # dxp[tap + s*m] += g[m] W[tap], then crop the padding off
    ksize = weights.shape[2:]
    out_spatial = gout.shape[:3]
    padded = tuple(n + 2 * p for n, p in zip(in_spatial, pad))
    dtype = np.result_type(gout, weights)
    out_c, in_c = weights.shape[:2]
    wt = np.ascontiguousarray(weights.transpose(2, 3, 4, 0, 1)).astype(dtype, copy=False)
    g2 = np.ascontiguousarray(gout, dtype).reshape(-1, out_c)
    dxp = np.zeros(padded + (in_c,), dtype)
    tmp = np.empty((g2.shape[0], in_c), dtype)
    tmp4 = tmp.reshape(out_spatial + (in_c,))
    for tap in np.ndindex(*ksize):
        np.matmul(g2, wt[tap], out=tmp)
        target = _tap_view(dxp, tap, out_spatial, stride)
        np.add(target, tmp4, out=target)
    sl = tuple(slice(p, p + n) for p, n in zip(pad, in_spatial))
    return dxp[sl]


def pixel_shuffle_raw(x, factors):
    r1, r2, r3 = factors
    H, W, D, C = x.shape
    r = r1 * r2 * r3
    if C % r:
        raise ValueError(f"channels {C} not divisible by shuffle volume {r}")
    y = x.reshape(H, W, D, C // r, r1, r2, r3)
    y = y.transpose(0, 4, 1, 5, 2, 6, 3)
    return np.ascontiguousarray(y.reshape(H * r1, W * r2, D * r3, C // r))


def pixel_unshuffle_raw(y, factors):
    r1, r2, r3 = factors
    H, W, D, C = y.shape
    if H % r1 or W % r2 or D % r3:
        raise ValueError(f"spatial shape {(H, W, D)} not divisible by factors {factors}")
    x = y.reshape(H // r1, r1, W // r2, r2, D // r3, r3, C)
    x = x.transpose(0, 2, 4, 6, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(H // r1, W // r2, D // r3, C * r1 * r2 * r3))


def leaky_relu_raw(x, slope=0.01):
    return np.where(x > 0, x, x * np.asarray(slope, dtype=x.dtype))


def instance_norm_raw(x, gamma, beta, eps=1e-5):
    """Per-channel z-score over the spatial axes, then affine. Returns
    (y, xhat, inv_std) so backward can reuse the normalized values."""
    mu = x.mean(axis=(0, 1, 2), keepdims=True)
    var = x.var(axis=(0, 1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mu) * inv
    return gamma * xhat + beta, xhat, inv


def checkerboard_metric_raw(y, factors, eps=1e-12):
    r1, r2, r3 = factors
    H, W, D, C = y.shape
    if H % r1 or W % r2 or D % r3:
        raise ValueError(f"spatial shape {(H, W, D)} not divisible by factors {factors}")
    mag = np.abs(y.astype(np.float64))
    v = mag.reshape(H // r1, r1, W // r2, r2, D // r3, r3, C)
    phase_means = v.mean(axis=(0, 2, 4, 6))
    return float((phase_means.max() - phase_means.min()) / (mag.mean() + eps))


# ------------------------------------------------------------ public wrappers

def _scaled_spacing(spacing, stride, up=False):
    return tuple(s / f if up else s * f for s, f in zip(spacing, stride))


def conv3d(vol: Volume4, kernel: ConvKernel) -> Volume4:
    if kernel.bias is not None and kernel.bias.shape[0] != kernel.out_channels:
        raise ValueError("conv3d bias length must equal out_C")
    out = conv3d_raw(vol.data, kernel.weights, kernel.bias, kernel.stride, kernel.padding)
    return Volume4(out, _scaled_spacing(vol.spacing, kernel.stride))


def transposed_conv3d(vol: Volume4, kernel: ConvKernel) -> Volume4:
    if kernel.bias is not None and kernel.bias.shape[0] != kernel.in_channels:
        raise ValueError("transposed_conv3d bias length must equal in_C (its output side)")
    out = transposed_conv3d_raw(vol.data, kernel.weights, kernel.bias, kernel.stride, kernel.padding)
    return Volume4(out, _scaled_spacing(vol.spacing, kernel.stride, up=True))


def pixel_shuffle(vol: Volume4, factors: ShuffleFactors) -> Volume4:
    return Volume4(pixel_shuffle_raw(vol.data, factors), _scaled_spacing(vol.spacing, factors, up=True))


def pixel_unshuffle(vol: Volume4, factors: ShuffleFactors) -> Volume4:
    return Volume4(pixel_unshuffle_raw(vol.data, factors), _scaled_spacing(vol.spacing, factors))


def leaky_relu(vol: Volume4, slope: float = 0.01) -> Volume4:
    return Volume4(leaky_relu_raw(vol.data, slope), vol.spacing)


def tanh_act(vol: Volume4) -> Volume4:
    return Volume4(np.tanh(vol.data), vol.spacing)


def instance_norm(vol: Volume4, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> Volume4:
    y, _, _ = instance_norm_raw(vol.data, gamma.astype(vol.data.dtype), beta.astype(vol.data.dtype), eps)
    return Volume4(y, vol.spacing)


def checkerboard_metric(vol: Volume4, factors: ShuffleFactors) -> float:
    """Phase imbalance: (max - min phase mean |y|) / (mean |y| + eps).

    Phases are the r1*r2*r3 spatial sub-lattices modulo the factors, with
    channels pooled. Zero for any volume constant across phases.
    """
    return checkerboard_metric_raw(vol.data, factors)


@dataclass
class SubpixelParams:
    """Two-conv sub-pixel upsampler: 5x5x5 conv (C -> 2C) + tanh, then
    3x3x3 conv (2C -> r*out_C) + leaky ReLU, then pixel shuffle."""

    conv5: ConvKernel
    conv3: ConvKernel
    factors: ShuffleFactors

    def __post_init__(self):
        r = int(np.prod(self.factors))
        if self.conv5.ksize != (5, 5, 5):
            raise ValueError(f"first conv must be 5x5x5, got {self.conv5.ksize}")
        if self.conv3.ksize != (3, 3, 3):
            raise ValueError(f"second conv must be 3x3x3, got {self.conv3.ksize}")
        if self.conv5.out_channels != 2 * self.conv5.in_channels:
            raise ValueError("first conv must map C -> 2C channels")
        if self.conv3.in_channels != self.conv5.out_channels:
            raise ValueError("second conv input must match first conv output")
        if self.conv3.out_channels % r:
            raise ValueError(f"second conv out channels {self.conv3.out_channels} "
                             f"not divisible by shuffle volume {r}")

    @property
    def out_channels(self) -> int:
        return self.conv3.out_channels // int(np.prod(self.factors))


def subpixel_block_raw(x, params: SubpixelParams):
    h = conv3d_raw(x, params.conv5.weights, params.conv5.bias, (1, 1, 1), same_padding((5, 5, 5)))
    h = np.tanh(h)
    h = conv3d_raw(h, params.conv3.weights, params.conv3.bias, (1, 1, 1), same_padding((3, 3, 3)))
    h = leaky_relu_raw(h)
    return pixel_shuffle_raw(h, params.factors)


def subpixel_block(vol: Volume4, params: SubpixelParams) -> Volume4:
    """Learned upsampling by params.factors without transposed convolution."""
    out = subpixel_block_raw(vol.data, params)
    return Volume4(out, _scaled_spacing(vol.spacing, params.factors, up=True))


def decompose_transposed(kernel: ConvKernel) -> tuple[list[ConvKernel], ShuffleFactors]:
    """Split a strided transposed conv into per-phase stride-1 convolutions.

    Returns r = s1*s2*s3 sub-kernels in phase order (a, b, c) lexicographic.
    Running each on the input x, stacking results channel-major
    (ch*r + phase) and pixel-shuffling by the stride reproduces
    transposed_conv3d(x, kernel) with padding 0, croppped to the transposed
    output length per axis; a padded kernel's output is the same lattice
    shifted by `padding` voxels. Phase (a, b, c) keeps kernel taps
    W[a + s1*m1, b + s2*m2, c + s3*m3] (zero-filled past the kernel edge),
    which is why a stride-2 kernel-4 transposed conv is exactly four 2-tap
    convolutions per axis pair interleaved on the output lattice.
    """
    s = kernel.stride
    k = kernel.ksize
    if any(st > kk for st, kk in zip(s, k)):
        raise ValueError(f"stride {s} exceeds kernel size {k}; phases would be empty")
    taps = tuple(-(-kk // st) for kk, st in zip(k, s))  # ceil(k/s)
    A, B = kernel.weights.shape[:2]
    subs = []
    for a, b, c in product(range(s[0]), range(s[1]), range(s[2])):
        w = np.zeros((B, A) + taps, dtype=kernel.weights.dtype)
        for m1 in range(taps[0]):
            i1 = a + s[0] * m1
            if i1 >= k[0]:
                continue
            for m2 in range(taps[1]):
                i2 = b + s[1] * m2
                if i2 >= k[1]:
                    continue
                for m3 in range(taps[2]):
                    i3 = c + s[2] * m3
                    if i3 >= k[2]:
                        continue
                    # reversed taps: the phase map is a convolution, conv3d
                    # computes a correlation
                    w[:, :, taps[0] - 1 - m1, taps[1] - 1 - m2, taps[2] - 1 - m3] = \
                        kernel.weights[:, :, i1, i2, i3].T
        subs.append(ConvKernel(w, None if kernel.bias is None else kernel.bias.copy(),
                               (1, 1, 1), tuple(t - 1 for t in taps)))
    return subs, s


def shuffled_transposed_raw(x, kernel: ConvKernel):
    """Reference path: decompose, run phase convs, stack, shuffle, crop."""
    subs, factors = decompose_transposed(kernel)
    phase_maps = [conv3d_raw(x, sk.weights, sk.bias, sk.stride, sk.padding) for sk in subs]
    stacked = np.stack(phase_maps, axis=4)  # (..., B, r)
    stacked = stacked.reshape(stacked.shape[:3] + (-1,))
    shuffled = pixel_shuffle_raw(stacked, factors)
    out_len = [(n - 1) * s + kk - 2 * p
               for n, s, kk, p in zip(x.shape[:3], kernel.stride, kernel.ksize, kernel.padding)]
    p = kernel.padding
    return shuffled[p[0]: p[0] + out_len[0], p[1]: p[1] + out_len[1], p[2]: p[2] + out_len[2]]
