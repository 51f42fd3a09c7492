"""Separable 3D Haar wavelet analysis/synthesis and the multi-scale pyramid.

One Haar step along an axis maps pairs (x[2k], x[2k+1]) to an approximation
cA[k] = (x[2k] + x[2k+1]) / sqrt(2) and a detail cD[k] = (x[2k] - x[2k+1]) / sqrt(2);
the inverse is x[2k] = (cA[k] + cD[k]) / sqrt(2), x[2k+1] = (cA[k] - cD[k]) / sqrt(2).
The transform is orthonormal, so reconstruction is exact and energy is
preserved up to float rounding.

A 3D step applies the axis step to any subset of the three spatial axes
(channel axis is never transformed), producing 2^a sub-bands for a
transformed axes. Band indices pack the low/high choice per axis with the
first transformed axis in the most significant bit, so band 0 is the pure
approximation; with all three axes transformed, axis 0 -> bit 2,
axis 1 -> bit 1, axis 2 -> bit 0.

The pyramid recursively re-transforms the approximation band, choosing the
transformed axes per level from a downsampling stride schedule, so level t
bands match the feature-map shape after t downsampling steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume4, concat_channels

_SQRT2 = float(np.sqrt(2.0))


def dwt1d(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One Haar analysis step along a 1-D signal (even length)."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError(f"dwt1d expects a 1-D signal, got shape {x.shape}")
    if x.shape[0] % 2:
        raise ValueError(f"dwt1d needs even length, got {x.shape[0]}")
    even, odd = x[0::2], x[1::2]
    return (even + odd) / _SQRT2, (even - odd) / _SQRT2


def idwt1d(ca: np.ndarray, cd: np.ndarray) -> np.ndarray:
    """Inverse of dwt1d."""
    ca = np.asarray(ca)
    cd = np.asarray(cd)
    if ca.shape != cd.shape or ca.ndim != 1:
        raise ValueError(f"idwt1d needs matching 1-D bands, got {ca.shape} and {cd.shape}")
    out = np.empty(2 * ca.shape[0], dtype=(ca + cd).dtype)
    out[0::2] = (ca + cd) / _SQRT2
    out[1::2] = (ca - cd) / _SQRT2
    return out


def _split_axis(a: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    even = np.take(a, np.arange(0, a.shape[axis], 2), axis=axis)
    odd = np.take(a, np.arange(1, a.shape[axis], 2), axis=axis)
    return (even + odd) / _SQRT2, (even - odd) / _SQRT2


def _merge_axis(lo: np.ndarray, hi: np.ndarray, axis: int) -> np.ndarray:
    shape = list(lo.shape)
    shape[axis] *= 2
    out = np.empty(shape, dtype=(lo + hi).dtype)
    sl_even = [slice(None)] * lo.ndim
    sl_odd = [slice(None)] * lo.ndim
    sl_even[axis] = slice(0, None, 2)
    sl_odd[axis] = slice(1, None, 2)
    out[tuple(sl_even)] = (lo + hi) / _SQRT2
    out[tuple(sl_odd)] = (lo - hi) / _SQRT2
    return out


@dataclass
class SubbandSet:
    """Bands of one 3D Haar step: 2^a volumes, band 0 pure approximation."""

    bands: list[Volume4]
    axis_flags: tuple[bool, bool, bool]

    @property
    def approximation(self) -> Volume4:
        return self.bands[0]


def _band_spacing(spacing, axis_flags, factor):
    return tuple(s * factor if f else s for s, f in zip(spacing, axis_flags))


def dwt3d(vol: Volume4, axis_flags: tuple[bool, bool, bool]) -> SubbandSet:
    """One separable Haar step over the flagged spatial axes.

    Every flagged axis must have even size; each channel transforms
    independently. Band spacing doubles on transformed axes.
    """
    axis_flags = tuple(bool(f) for f in axis_flags)
    if len(axis_flags) != 3:
        raise ValueError("axis_flags must have 3 entries")
    for ax, f in enumerate(axis_flags):
        if f and vol.data.shape[ax] % 2:
            raise ValueError(f"axis {ax} has odd size {vol.data.shape[ax]}; pad before dwt3d")
    parts = [vol.data]
    for ax, f in enumerate(axis_flags):
        if not f:
            continue
        nxt = []
        for p in parts:
            lo, hi = _split_axis(p, ax)
            nxt += [lo, hi]  # doubling keeps earlier axes in higher bits
        parts = nxt
    spacing = _band_spacing(vol.spacing, axis_flags, 2.0)
    return SubbandSet([Volume4(p, spacing) for p in parts], axis_flags)


def idwt3d(sub: SubbandSet) -> Volume4:
    """Exact inverse of dwt3d."""
    a = sum(sub.axis_flags)
    if len(sub.bands) != 2 ** a:
        raise ValueError(f"{len(sub.bands)} bands inconsistent with axis_flags {sub.axis_flags}")
    parts = [b.data for b in sub.bands]
    for ax in reversed([i for i, f in enumerate(sub.axis_flags) if f]):
        parts = [_merge_axis(parts[i], parts[i + 1], ax) for i in range(0, len(parts), 2)]
    spacing = _band_spacing(sub.bands[0].spacing, sub.axis_flags, 0.5)
    return Volume4(parts[0], spacing)


@dataclass
class PyramidLevel:
    subbands: SubbandSet
    iw: Volume4  # all bands stacked along channels, band 0 first
    padded_to: tuple[int, int, int]  # spatial shape after odd-axis padding


@dataclass
class WaveletPyramid:
    levels: list[PyramidLevel]

    def iw(self, level: int) -> Volume4:
        """Stacked band input for 1-based pyramid level."""
        return self.levels[level - 1].iw


def _pad_odd(data: np.ndarray, axis_flags) -> np.ndarray:
    # odd flagged axes get one edge-replicated voxel appended so pairs exist;
    # matches the ceil(n/2) feature-map size of a stride-2 same-pad conv
    pad = []
    for ax in range(3):
        pad.append((0, 1) if axis_flags[ax] and data.shape[ax] % 2 else (0, 0))
    pad.append((0, 0))
    if any(p != (0, 0) for p in pad):
        data = np.pad(data, pad, mode="edge")
    return data


def build_pyramid(vol: Volume4, stride_schedule) -> WaveletPyramid:
    """Recursive Haar pyramid guided by a downsampling stride schedule.

    Level t (1-based) re-transforms level t-1's approximation band along the
    axes where stride_schedule[t-1] is 2 (entries must be 1 or 2). The
    stacked-band volume iw at level t therefore matches the encoder feature
    shape after t downsampling steps.
    """
    levels = []
    cur = vol
    for stride in stride_schedule:
        stride = tuple(int(s) for s in stride)
        if len(stride) != 3 or any(s not in (1, 2) for s in stride):
            raise ValueError(f"stride entries must be triples of 1/2, got {stride}")
        flags = tuple(s == 2 for s in stride)
        if not any(flags):
            raise ValueError("a pyramid level needs at least one transformed axis")
        padded = _pad_odd(cur.data, flags)
        cur = Volume4(padded, cur.spacing)
        sub = dwt3d(cur, flags)
        iw = concat_channels(sub.bands)
        levels.append(PyramidLevel(sub, iw, cur.spatial_shape))
        cur = sub.approximation
    return WaveletPyramid(levels)
