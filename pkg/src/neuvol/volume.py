"""4-axis volume container and the ``.vol`` file format.

Volumes are dense row-major arrays of shape (H, W, D, C) with the channel
axis fastest-varying, plus a physical voxel spacing (sH, sW, sD) in mm.
Images are float (float32 at runtime; float64 is accepted so numerical
tests can run in double precision), labels are integer class ids.

The ``.vol`` container is a fixed little-endian layout:

    8 bytes   magic ``NEUVOL01``
    u32       dtype tag (1 = float32, 2 = int32)
    4 x u64   shape H, W, D, C
    3 x f64   spacing sH, sW, sD
    raw       buffer, row-major, channel fastest
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

VOL_MAGIC = b"NEUVOL01"
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<i4")}
_HEADER = struct.Struct("<8sI4Q3d")


class VolFormatError(OSError):
    """Raised for truncated or corrupt .vol payloads."""


@dataclass
class Volume4:
    """Dense (H, W, D, C) float volume with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"Volume4 needs 4 axes (H, W, D, C), got shape {self.data.shape}")
        if self.data.dtype not in (np.float32, np.float64):
            raise ValueError(f"Volume4 holds float32/float64 data, got {self.data.dtype}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive mm values, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Volume4 data contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass
class LabelVolume:
    """Integer class-id labels of shape (H, W, D); 0 is background."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_classes: int = field(default=0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"LabelVolume needs 3 axes (H, W, D), got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"LabelVolume holds integer data, got {self.data.dtype}")
        self.data = self.data.astype(np.int32, copy=False)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive mm values, got {self.spacing}")
        if self.data.size and self.data.min() < 0:
            raise ValueError("labels must be non-negative")
        observed = int(self.data.max()) + 1 if self.data.size else 1
        if self.num_classes <= 0:
            self.num_classes = observed
        elif observed > self.num_classes:
            raise ValueError(f"label id {observed - 1} exceeds num_classes={self.num_classes}")

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return self.data.shape


def concat_channels(volumes: list[Volume4]) -> Volume4:
    """Concatenate volumes along the channel axis.

    All inputs must share spatial shape and spacing exactly.
    """
    if not volumes:
        raise ValueError("concat_channels needs at least one volume")
    head = volumes[0]
    for v in volumes[1:]:
        if v.spatial_shape != head.spatial_shape:
            raise ValueError(f"spatial shape mismatch: {v.spatial_shape} vs {head.spatial_shape}")
        if v.spacing != head.spacing:
            raise ValueError(f"spacing mismatch: {v.spacing} vs {head.spacing}")
    return Volume4(np.concatenate([v.data for v in volumes], axis=3), head.spacing)


def crop_to_nonzero(vol: Volume4) -> tuple[Volume4, tuple[tuple[int, int], ...]]:
    """Crop to the tight bounding box of voxels nonzero in any channel.

    Returns the cropped volume and the per-axis (start, stop) box in the
    input's index space. Raises on an all-zero volume.
    """
    mask = np.any(vol.data != 0, axis=3)
    if not mask.any():
        raise ValueError("crop_to_nonzero: volume is identically zero")
    bbox = []
    for ax in range(3):
        hit = np.any(mask, axis=tuple(a for a in range(3) if a != ax))
        idx = np.nonzero(hit)[0]
        bbox.append((int(idx[0]), int(idx[-1]) + 1))
    (h0, h1), (w0, w1), (d0, d1) = bbox
    return Volume4(vol.data[h0:h1, w0:w1, d0:d1], vol.spacing), tuple(bbox)


def crop_label(lbl: LabelVolume, bbox: tuple[tuple[int, int], ...]) -> LabelVolume:
    (h0, h1), (w0, w1), (d0, d1) = bbox
    return LabelVolume(lbl.data[h0:h1, w0:w1, d0:d1], lbl.spacing, lbl.num_classes)


def _target_shape(shape, spacing, target_spacing):
    # physical extent is preserved: new_n = round(n * sp / tsp), at least 1
    return tuple(
        max(1, int(round(n * sp / tsp)))
        for n, sp, tsp in zip(shape, spacing, target_spacing)
    )


def _source_coords(new_n, n, sp, tsp):
    # centers align: output voxel o sits at (o + 0.5) * tsp mm, mapped back
    # into fractional source index units
    o = np.arange(new_n, dtype=np.float64)
    return (o + 0.5) * (tsp / sp) - 0.5


def resample(vol: Volume4, target_spacing: tuple[float, float, float],
             mode: str = "trilinear") -> Volume4:
    """Resample onto a grid with the given spacing (mm).

    ``trilinear`` interpolates with clamp-to-edge boundary handling,
    ``nearest`` picks the closest source voxel center. Resampling to the
    volume's own spacing is an exact identity.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if len(target_spacing) != 3 or any(s <= 0 for s in target_spacing):
        raise ValueError(f"target spacing must be 3 positive mm values, got {target_spacing}")
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resample mode {mode!r}")

    src = vol.data
    n = vol.spatial_shape
    new_n = _target_shape(n, vol.spacing, target_spacing)
    coords = [_source_coords(new_n[a], n[a], vol.spacing[a], target_spacing[a]) for a in range(3)]

    if mode == "nearest":
        idx = [np.clip(np.floor(c + 0.5).astype(np.int64), 0, n[a] - 1) for a, c in enumerate(coords)]
        out = src[np.ix_(idx[0], idx[1], idx[2])]
        return Volume4(np.ascontiguousarray(out), target_spacing)

    lo, hi, frac = [], [], []
    for a, c in enumerate(coords):
        i0 = np.floor(c).astype(np.int64)
        f = c - i0
        lo.append(np.clip(i0, 0, n[a] - 1))
        hi.append(np.clip(i0 + 1, 0, n[a] - 1))
        frac.append(f.astype(src.dtype))
    out = np.zeros(new_n + (vol.channels,), dtype=src.dtype)
    for bh in (0, 1):
        wh = (frac[0] if bh else 1 - frac[0])[:, None, None, None]
        ih = hi[0] if bh else lo[0]
        for bw in (0, 1):
            ww = (frac[1] if bw else 1 - frac[1])[None, :, None, None]
            iw = hi[1] if bw else lo[1]
            for bd in (0, 1):
                wd = (frac[2] if bd else 1 - frac[2])[None, None, :, None]
                idd = hi[2] if bd else lo[2]
                out += wh * ww * wd * src[np.ix_(ih, iw, idd)]
    return Volume4(out, target_spacing)


def resample_label(lbl: LabelVolume, target_spacing: tuple[float, float, float]) -> LabelVolume:
    """Nearest-neighbor label resampling (labels never interpolate)."""
    as_vol = Volume4(lbl.data[..., None].astype(np.float32), lbl.spacing)
    near = resample(as_vol, target_spacing, mode="nearest")
    return LabelVolume(near.data[..., 0].astype(np.int32), target_spacing, lbl.num_classes)


def _write_vol(path, array, spacing, tag):
    header = _HEADER.pack(VOL_MAGIC, tag, *(int(s) for s in array.shape), *spacing)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype=_DTYPE_TAGS[tag]).tobytes())


def _read_vol(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise VolFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, tag, h, w, d, c, sh, sw, sd = _HEADER.unpack_from(raw)
    if magic != VOL_MAGIC:
        raise VolFormatError(f"{path}: bad magic {magic!r}")
    if tag not in _DTYPE_TAGS:
        raise VolFormatError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    want = h * w * d * c * dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) != want:
        raise VolFormatError(f"{path}: payload is {len(payload)} bytes, header implies {want}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, d, c)
    return arr, (sh, sw, sd), tag


def save_volume(path, vol: Volume4) -> None:
    """Write a Volume4 as float32 .vol (the on-disk image precision)."""
    _write_vol(path, vol.data.astype(np.float32, copy=False), vol.spacing, 1)


def load_volume(path) -> Volume4:
    arr, spacing, tag = _read_vol(path)
    if tag != 1:
        raise VolFormatError(f"{path}: expected float32 volume, found dtype tag {tag}")
    return Volume4(arr.copy(), spacing)


def save_label(path, lbl: LabelVolume) -> None:
    _write_vol(path, lbl.data[..., None], lbl.spacing, 2)


def load_label(path, num_classes: int = 0) -> LabelVolume:
    arr, spacing, tag = _read_vol(path)
    if tag != 2:
        raise VolFormatError(f"{path}: expected int32 labels, found dtype tag {tag}")
    if arr.shape[3] != 1:
        raise VolFormatError(f"{path}: label files carry one channel, found {arr.shape[3]}")
    return LabelVolume(arr[..., 0].copy(), spacing, num_classes)
