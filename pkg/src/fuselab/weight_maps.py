"""Per-pixel quality weights and their edge-preserving smoothing.

The quality measure is the classical contrast x saturation x well-exposedness
product.  Normalized weights form a partition of unity over the measurement
set; the smoothed variant is filtered with a guided filter steered by each
image's luminance and then re-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .image_core import SceneSets, as_image, as_plane, to_luminance

WEIGHT_FLOOR = 1e-12
EXPOSEDNESS_SIGMA = 0.2
GUIDED_EPS = 1e-2

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class WeightSet:
    raw: list
    normalized: list
    smoothed: list


def contrast_map(img: np.ndarray) -> np.ndarray:
    """Absolute 3x3 Laplacian response of the luminance, replicate borders."""
    y = to_luminance(as_image(img))
    # kernel is symmetric, so correlation and convolution agree
    return np.abs(ndimage.correlate(y, LAPLACIAN, mode="nearest"))


def saturation_map(img: np.ndarray) -> np.ndarray:
    """Population standard deviation across the RGB channels.

    Uses the pairwise form ``var = sum_{i<j} (v_i - v_j)^2 / 9`` so gray
    pixels give exactly zero.
    """
    img = as_image(img)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return np.sqrt(((r - g) ** 2 + (g - b) ** 2 + (b - r) ** 2) / 9.0)


def well_exposedness_map(img: np.ndarray, sigma: float = EXPOSEDNESS_SIGMA) -> np.ndarray:
    img = as_image(img)
    return np.exp(-np.sum((img - 0.5) ** 2, axis=2) / (2.0 * sigma * sigma))


def raw_weight(img: np.ndarray) -> np.ndarray:
    """Unnormalized weight C*S*E plus a tiny floor so flat pixels stay defined."""
    return contrast_map(img) * saturation_map(img) * well_exposedness_map(img) + WEIGHT_FLOOR


def normalize_weights(raws) -> list:
    """Divide each plane by the per-pixel sum over all planes."""
    planes = [as_plane(r) for r in raws]
    if not planes:
        raise ValueError("need at least one weight plane")
    shape = planes[0].shape
    if any(p.shape != shape for p in planes):
        raise ShapeError("weight planes differ in size")
    stack = np.stack(planes)
    if np.any(stack < 0):
        raise ValueError("weights must be nonnegative")
    total = stack.sum(axis=0)
    flat = total == 0
    if flat.any():
        stack[:, flat] = WEIGHT_FLOOR
        total = stack.sum(axis=0)
    return list(stack / total)


def box_mean(p: np.ndarray, radius: int) -> np.ndarray:
    """Mean over a (2r+1)^2 window with replicate padding."""
    return ndimage.uniform_filter(p, size=2 * radius + 1, mode="nearest")


def guided_filter(guide: np.ndarray, src: np.ndarray, radius: int, eps: float) -> np.ndarray:
    """Classical guided image filter with a grayscale guide.

    Parameters
    ----------
    guide : ndarray (H, W)
        Guidance plane.
    src : ndarray (H, W)
        Plane to be filtered.
    radius : int
        Window half-width, windows are ``(2r+1) x (2r+1)``.
    eps : float
        Regularization on the local slope.
    """
    guide = as_plane(guide)
    src = as_plane(src)
    if guide.shape != src.shape:
        raise ShapeError(f"guide {guide.shape} and input {src.shape} differ")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean_g = box_mean(guide, radius)
    mean_s = box_mean(src, radius)
    cov_gs = box_mean(guide * src, radius) - mean_g * mean_s
    var_g = box_mean(guide * guide, radius) - mean_g * mean_g
    a = cov_gs / (var_g + eps)
    b = mean_s - a * mean_g
    return box_mean(a, radius) * guide + box_mean(b, radius)


def default_radius(shape) -> int:
    return max(2, min(shape[:2]) // 16)


def smoothed_weights_for(images, radius: int | None = None, eps: float = GUIDED_EPS) -> WeightSet:
    """Raw, normalized and smoothed weights for an explicit list of images."""
    images = [as_image(im) for im in images]
    if radius is None:
        radius = default_radius(images[0].shape)
    raws = [raw_weight(im) for im in images]
    normalized = normalize_weights(raws)
    filtered = [guided_filter(to_luminance(im), w, radius, eps) for im, w in zip(images, normalized)]
    # filtering can dip slightly below zero near strong edges
    filtered = [np.maximum(f, 0.0) + WEIGHT_FLOOR for f in filtered]
    return WeightSet(raws, normalized, normalize_weights(filtered))


def smoothed_weights(sets: SceneSets, radius: int | None = None, eps: float = GUIDED_EPS) -> WeightSet:
    """Weights over the measurement set, as used by the weighted absolute error."""
    return smoothed_weights_for(sets.measure_images, radius, eps)
