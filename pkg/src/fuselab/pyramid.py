"""Gaussian/Laplacian pyramids and classical multi-scale exposure fusion."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .image_core import SceneSets
from .weight_maps import normalize_weights, raw_weight

KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def max_levels(shape) -> int:
    """Levels until both dimensions have shrunk to a single pixel."""
    return 1 + math.ceil(math.log2(max(shape[:2])))


def default_levels(shape) -> int:
    return max(1, int(math.floor(math.log2(min(shape[:2])))) - 1)


def _check_levels(shape, levels: int) -> None:
    if levels < 1 or levels > max_levels(shape):
        raise ValueError(f"{levels} pyramid levels infeasible for size {shape[0]}x{shape[1]} "
                         f"(max {max_levels(shape)})")


def blur(p: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(p, KERNEL, axis=0, mode="nearest")
    return ndimage.correlate1d(out, KERNEL, axis=1, mode="nearest")


def downsample(p: np.ndarray) -> np.ndarray:
    """Blur then keep every second sample; odd sizes round up."""
    return blur(p)[::2, ::2]


def _upsample_axis(p: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    # Zero insertion then the 5-tap kernel x2, with replicate padding applied
    # to the coarse samples.  Even outputs take (1,6,1)/8 of the neighbours,
    # odd outputs (4,4)/8.
    p = np.moveaxis(p, axis, 0)
    n = p.shape[0]
    left = p[np.maximum(np.arange(n) - 1, 0)]
    right = p[np.minimum(np.arange(n) + 1, n - 1)]
    out = np.empty((2 * n,) + p.shape[1:])
    out[0::2] = (left + 6.0 * p + right) / 8.0
    out[1::2] = (p + right) / 2.0
    return np.moveaxis(out[:n_out], 0, axis)


def upsample(p: np.ndarray, shape) -> np.ndarray:
    """Expand a coarse level to ``shape`` (at most twice its size)."""
    out = _upsample_axis(p, shape[0], 0)
    return _upsample_axis(out, shape[1], 1)


def gaussian_pyramid(p: np.ndarray, levels: int) -> list:
    p = np.asarray(p, dtype=np.float64)
    _check_levels(p.shape, levels)
    pyr = [p]
    for _ in range(levels - 1):
        pyr.append(downsample(pyr[-1]))
    return pyr


def laplacian_pyramid(p: np.ndarray, levels: int) -> list:
    gauss = gaussian_pyramid(p, levels)
    pyr = [g - upsample(gauss[i + 1], g.shape) for i, g in enumerate(gauss[:-1])]
    pyr.append(gauss[-1])
    return pyr


def collapse(pyr) -> np.ndarray:
    out = pyr[-1]
    for detail in reversed(pyr[:-1]):
        out = detail + upsample(out, detail.shape)
    return out


def mertens_weights(images) -> list:
    return normalize_weights([raw_weight(im) for im in images])


def unclipped_mertens(images, levels: int | None = None) -> np.ndarray:
    """Weight-pyramid x Laplacian-pyramid blend of ``images`` before clamping."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    shape = images[0].shape
    if levels is None:
        levels = default_levels(shape)
    _check_levels(shape, levels)
    weight_pyrs = [gaussian_pyramid(w, levels) for w in mertens_weights(images)]
    fused = np.empty(shape)
    for c in range(shape[2]):
        acc = None
        for img, wpyr in zip(images, weight_pyrs):
            term = [w * l for w, l in zip(wpyr, laplacian_pyramid(img[:, :, c], levels))]
            acc = term if acc is None else [a + t for a, t in zip(acc, term)]
        fused[:, :, c] = collapse(acc)
    return fused


def mertens_fuse_images(images, levels: int | None = None) -> np.ndarray:
    return np.clip(unclipped_mertens(images, levels), 0.0, 1.0)


def mertens_fuse(sets: SceneSets, levels: int | None = None) -> np.ndarray:
    """Classical fusion of the images in the fusion set, clamped to [0, 1]."""
    return mertens_fuse_images(sets.fuse_images, levels)
