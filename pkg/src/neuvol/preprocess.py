"""Dataset fingerprinting, normalisation, phantom data, and patch sampling.

The fingerprint collects per-axis median and 10th-percentile spacings plus,
for CT, intensity statistics of the pooled foreground voxels: clip bounds at
the 0.5/99.5 percentiles and mean/std computed on the clipped pool. MRI-like
data is normalised per sample instead, so the fingerprint carries no global
intensity stats.

Phantom volumes are CT-flavoured synthetic cases: a soft-tissue background
with one bright ellipsoid or cuboid per foreground class (distinct intensity
bands, additive noise), placed without overlap so every class is present in
every case.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume, Volume4, resample, resample_label

MODALITIES = ("CT", "MRI")
CLIP_PERCENTILES = (0.5, 99.5)
ANISO_FACTOR = 3.0
MRI_STD_FLOOR = 1e-8

PHANTOM_BACKGROUND = 100.0
PHANTOM_CLASS_BANDS = (300.0, 600.0, 900.0, 1200.0, 1500.0)
PHANTOM_NOISE_STD = 30.0


@dataclass
class DatasetFingerprint:
    modality: str
    median_spacing: tuple[float, float, float]
    spacing_p10: tuple[float, float, float]
    num_classes: int
    foreground_clip: tuple[float, float] | None = None
    foreground_mean: float | None = None
    foreground_std: float | None = None


@dataclass
class SegSample:
    """One training/evaluation case."""

    case_id: str
    image: Volume4
    label: LabelVolume | None = None

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.image.spacing


def fingerprint(cases, modality: str) -> DatasetFingerprint:
    """Scan (image, label) pairs once and freeze dataset-level statistics."""
    if modality not in MODALITIES:
        raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
    spacings = []
    num_classes = 2
    fg_pool = []
    for vol, lab in cases:
        spacings.append(vol.spacing)
        num_classes = max(num_classes, lab.num_classes)
        if modality == "CT":
            fg_pool.append(vol.data[lab.data > 0].ravel())
    if not spacings:
        raise ValueError("fingerprint needs at least one case")
    spacings = np.asarray(spacings, dtype=np.float64)
    median = tuple(float(v) for v in np.median(spacings, axis=0))
    p10 = tuple(float(v) for v in np.percentile(spacings, 10, axis=0))

    fp = DatasetFingerprint(modality, median, p10, num_classes)
    if modality == "CT":
        pool = np.concatenate(fg_pool) if fg_pool else np.array([])
        if pool.size == 0:
            raise ValueError("CT fingerprint needs foreground voxels")
        lo, hi = (float(v) for v in np.percentile(pool, CLIP_PERCENTILES))
        clipped = np.clip(pool, lo, hi)
        fp.foreground_clip = (lo, hi)
        fp.foreground_mean = float(clipped.mean())
        fp.foreground_std = float(clipped.std())
        if fp.foreground_std == 0.0:
            raise ValueError("CT foreground has zero variance")
    return fp


def target_spacing(fp: DatasetFingerprint) -> tuple[float, float, float]:
    """Median spacing per axis, except a strongly anisotropic axis (median
    at least 3x the smallest other-axis median) drops to its 10th
    percentile to limit the resampling gap."""
    med = fp.median_spacing
    out = []
    for a in range(3):
        others = [med[b] for b in range(3) if b != a]
        if med[a] >= ANISO_FACTOR * min(others):
            out.append(fp.spacing_p10[a])
        else:
            out.append(med[a])
    return tuple(out)


def normalize(vol: Volume4, fp: DatasetFingerprint) -> Volume4:
    """CT: clip to fingerprint bounds, then global z-score. MRI: per-sample,
    per-channel z-score with a tiny std floor."""
    data = vol.data.astype(np.float32)
    if fp.modality == "CT":
        data = np.clip(data, fp.foreground_clip[0], fp.foreground_clip[1])
        data = (data - fp.foreground_mean) / fp.foreground_std
    else:
        mean = data.mean(axis=(0, 1, 2), keepdims=True)
        std = data.std(axis=(0, 1, 2), keepdims=True)
        data = (data - mean) / np.maximum(std, MRI_STD_FLOOR)
    return Volume4(data.astype(np.float32), vol.spacing)


def preprocess_case(vol: Volume4, lab: LabelVolume | None, fp: DatasetFingerprint,
                    spacing: tuple[float, float, float] | None = None):
    """Resample to the target spacing and normalise; labels ride along with
    nearest-neighbour resampling."""
    if spacing is None:
        spacing = target_spacing(fp)
    out_vol = normalize(resample(vol, spacing), fp)
    out_lab = None if lab is None else resample_label(lab, spacing)
    return out_vol, out_lab


def save_fingerprint(path: str, fp: DatasetFingerprint) -> None:
    with open(path, "w") as fh:
        json.dump({
            "modality": fp.modality,
            "median_spacing": list(fp.median_spacing),
            "spacing_p10": list(fp.spacing_p10),
            "num_classes": fp.num_classes,
            "foreground_clip": None if fp.foreground_clip is None else list(fp.foreground_clip),
            "foreground_mean": fp.foreground_mean,
            "foreground_std": fp.foreground_std,
        }, fh, indent=2)
        fh.write("\n")


def load_fingerprint(path: str) -> DatasetFingerprint:
    with open(path) as fh:
        raw = json.load(fh)
    clip = raw.get("foreground_clip")
    return DatasetFingerprint(
        modality=raw["modality"],
        median_spacing=tuple(raw["median_spacing"]),
        spacing_p10=tuple(raw["spacing_p10"]),
        num_classes=int(raw["num_classes"]),
        foreground_clip=None if clip is None else tuple(clip),
        foreground_mean=raw.get("foreground_mean"),
        foreground_std=raw.get("foreground_std"),
    )


# -------------------------------------------------------------- phantoms

def _blob_mask(shape, center, radii, cuboid: bool) -> np.ndarray:
    grids = np.ogrid[: shape[0], : shape[1], : shape[2]]
    if cuboid:
        mask = np.ones(shape, dtype=bool)
        for g, c, r in zip(grids, center, radii):
            mask &= np.abs(g - c) <= r
        return mask
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def make_phantoms(num_cases: int, num_classes: int, shape=(32, 32, 32),
                  spacing=(1.0, 1.0, 1.0), seed: int = 0):
    """Seeded synthetic (image, label) pairs; num_classes counts the
    background, so num_classes=3 means two foreground structures."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2 (background plus one)")
    if num_classes - 1 > len(PHANTOM_CLASS_BANDS):
        raise ValueError(f"at most {len(PHANTOM_CLASS_BANDS) + 1} classes supported")
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in shape)
    min_side = min(shape)
    cases = []
    for _ in range(num_cases):
        img = np.full(shape, PHANTOM_BACKGROUND, dtype=np.float32)
        lab = np.zeros(shape, dtype=np.int32)
        for cls in range(1, num_classes):
            placed = False
            for attempt in range(60):
                radii = rng.uniform(max(2.0, min_side / 12), min_side / 5, size=3)
                center = [rng.uniform(r + 1, s - r - 2) for r, s in zip(radii, shape)]
                mask = _blob_mask(shape, center, radii, cuboid=bool(rng.integers(2)))
                if attempt < 59 and (mask & (lab > 0)).any():
                    continue  # overlap: try a new spot
                mask &= lab == 0  # last resort keeps earlier classes intact
                if mask.any():
                    lab[mask] = cls
                    img[mask] = PHANTOM_CLASS_BANDS[cls - 1]
                    placed = True
                    break
            if not placed:
                raise RuntimeError(f"could not place class {cls}; volume too small")
        img += rng.normal(0.0, PHANTOM_NOISE_STD, size=shape).astype(np.float32)
        cases.append((Volume4(img[..., None], spacing),
                      LabelVolume(lab, spacing, num_classes)))
    return cases


# ------------------------------------------------- augmentation/sampling

def mirror_augment(img: np.ndarray, lab: np.ndarray, rng,
                   axes_mask=(True, True, True)) -> tuple[np.ndarray, np.ndarray]:
    """Flip each enabled spatial axis independently with probability 1/2;
    image and label flip together."""
    for axis, enabled in enumerate(axes_mask):
        if enabled and rng.random() < 0.5:
            img = np.flip(img, axis=axis)
            lab = np.flip(lab, axis=axis)
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def sample_patch(img: np.ndarray, lab: np.ndarray, patch, rng,
                 force_foreground: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Crop a training patch; volumes smaller than the patch are edge-padded
    first. With force_foreground, the patch is centred on a random
    foreground voxel when one exists."""
    patch = tuple(int(p) for p in patch)
    pads = [(0, max(0, p - s)) for p, s in zip(patch, img.shape[:3])]
    if any(hi for _, hi in pads):
        img = np.pad(img, pads + [(0, 0)], mode="edge")
        lab = np.pad(lab, pads, mode="edge")

    starts = []
    if force_foreground and (lab > 0).any():
        fg = np.argwhere(lab > 0)
        center = fg[rng.integers(len(fg))]
        for c, p, n in zip(center, patch, lab.shape):
            starts.append(int(np.clip(c - p // 2, 0, n - p)))
    else:
        for p, n in zip(patch, lab.shape):
            starts.append(int(rng.integers(0, n - p + 1)))
    sl = tuple(slice(s, s + p) for s, p in zip(starts, patch))
    return np.ascontiguousarray(img[sl]), np.ascontiguousarray(lab[sl])
