"""Stage 1: coarse organ localization and fixed-size region cropping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..data import Volume, downsample
from ..network import ModelState
from .training import infer_padded


@dataclass
class LocalizationResult:
    predicted_centroid: tuple[float, float, float] | None
    reference_center: tuple[float, float, float]
    final_centroid: tuple[float, float, float]
    crop_offset: tuple[int, int, int]
    region_size: int

    def crop_slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + self.region_size) for o in self.crop_offset)

    def contains(self, mask: np.ndarray) -> bool:
        """True when every foreground voxel of ``mask`` lies inside the crop box."""
        idx = np.argwhere(mask)
        if idx.size == 0:
            return True
        lo = np.asarray(self.crop_offset)
        return bool((idx.min(axis=0) >= lo).all() and (idx.max(axis=0) < lo + self.region_size).all())


def landmark_center(voxels: np.ndarray, threshold: float = 200.0) -> tuple[float, float, float]:
    """Midpoint of the centroids of the two largest bright components.

    With a single bright component its centroid is used; with none, the
    volume centre.
    """
    bright = voxels > threshold
    labels, n = ndimage.label(bright)
    if n == 0:
        return tuple(float((s - 1) / 2) for s in voxels.shape)
    sizes = ndimage.sum_labels(bright, labels, index=np.arange(1, n + 1))
    keep = np.argsort(-sizes, kind="stable")[:2] + 1
    centroids = np.array(ndimage.center_of_mass(bright, labels, keep))
    return tuple(float(c) for c in centroids.mean(axis=0))


def crop_offset(center, shape, size: int) -> tuple[int, int, int]:
    """Start of a ``size``-wide box centred on ``center``, clipped to the volume."""
    out = []
    for c, n in zip(center, shape):
        start = int(np.floor(c - (size - 1) / 2 + 0.5))
        out.append(int(min(max(start, 0), max(n - size, 0))))
    return tuple(out)


def combine_centers(predicted, reference) -> tuple[float, float, float]:
    if predicted is None:
        return tuple(float(v) for v in reference)
    return tuple(float((p + r) / 2) for p, r in zip(predicted, reference))


def localize_from_mask(
    coarse: np.ndarray | None,
    factor: int,
    voxels: np.ndarray,
    region_size: int,
    landmark_threshold: float = 200.0,
) -> LocalizationResult:
    """Localization given a coarse mask at ``1/factor`` resolution."""
    predicted = None
    if coarse is not None and coarse.any():
        predicted = tuple(float(c) * factor for c in ndimage.center_of_mass(coarse.astype(np.float64)))
    reference = landmark_center(voxels, landmark_threshold)
    final = combine_centers(predicted, reference)
    return LocalizationResult(predicted, reference, final, crop_offset(final, voxels.shape, region_size), region_size)


def localize(
    detector: ModelState | None,
    volume: Volume,
    factor: int,
    region_size: int,
    landmark_threshold: float = 200.0,
) -> LocalizationResult:
    """Locate the organ in a preprocessed volume.

    The detector segments the down-sampled volume; the centroid of its mask is
    averaged with the landmark midpoint. An empty mask (or no detector) falls
    back to the landmark midpoint alone.
    """
    coarse = None
    if detector is not None:
        coarse = infer_padded(detector, downsample(volume, factor).voxels)
    return localize_from_mask(coarse, factor, volume.voxels, region_size, landmark_threshold)


def crop_region(voxels: np.ndarray, loc: LocalizationResult, pad_mode: str = "edge") -> np.ndarray:
    """The crop box of ``loc``; axes shorter than the box are padded with ``pad_mode``."""
    region = voxels[loc.crop_slices()]
    short = [(0, loc.region_size - s) for s in region.shape]
    if any(p for _, p in short):
        region = np.pad(region, short, mode=pad_mode)
    return np.ascontiguousarray(region)


def paste_region(region_mask: np.ndarray, loc: LocalizationResult, full_shape) -> np.ndarray:
    """Inverse of :func:`crop_region` for a predicted mask."""
    out = np.zeros(full_shape, dtype=region_mask.dtype)
    sl = loc.crop_slices()
    target = out[sl]
    target[...] = region_mask[tuple(slice(0, s) for s in target.shape)]
    return out
