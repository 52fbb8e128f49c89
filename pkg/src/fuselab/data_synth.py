"""Seed-deterministic synthetic HDR scenes and exposure brackets.

Scenes are built in the log-radiance domain and affinely rescaled so the
final map spans exactly the requested dynamic range around a chosen
geometric center.  Disks are uniform-radiance regions with distinct levels;
together with the background (label 0) they partition the image, which is
what the brightness-order analysis needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .image_core import ExposureStack, quantize

KINDS = ("gradient", "disks", "value-noise", "composite")


@dataclass(frozen=True)
class RadianceMap:
    radiance: np.ndarray          # (H, W, 3) linear, > 0
    regions: np.ndarray | None    # (H, W) int labels, 0 = background

    @property
    def shape(self):
        return self.radiance.shape[:2]

    @property
    def dynamic_range(self) -> float:
        return float(self.radiance.max() / self.radiance.min())

    def region_luminance(self) -> dict:
        """Mean radiance luminance per region label."""
        lum = self.radiance @ np.array([0.299, 0.587, 0.114])
        return {int(r): float(lum[self.regions == r].mean()) for r in np.unique(self.regions)}


def _value_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, (cells + 1, cells + 1))
    zoom = ndimage.zoom(coarse, size / (cells + 1), order=3, mode="nearest", grid_mode=True)
    return ndimage.gaussian_filter(zoom[:size, :size], sigma=size / (4 * cells))


def _disks(rng, size: int, count: int):
    labels = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    placed = []
    for _ in range(count * 20):
        if len(placed) == count:
            break
        r = rng.uniform(size * 0.08, size * 0.16)
        cy, cx = rng.uniform(r + 1, size - r - 1, 2)
        if any(math.hypot(cy - py, cx - px) < r + pr + 2 for py, px, pr in placed):
            continue
        placed.append((cy, cx, r))
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = len(placed)
    return labels


def synth_radiance(seed: int, size: int = 64, kind: str = "composite",
                   dynamic_range: float = 1000.0, center: float = 0.025,
                   n_disks: int = 5) -> RadianceMap:
    """Deterministic scene radiance.

    ``center`` is the geometric mean of the smallest and largest radiance,
    and max/min equals ``dynamic_range`` over all pixels and channels.
    """
    if size < 16:
        raise ValueError("size must be >= 16")
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; choose from {KINDS}")
    if not 1.0 < dynamic_range <= 1e4:
        raise ValueError("dynamic_range must lie in (1, 1e4]")
    rng = np.random.default_rng(seed)
    xs = np.linspace(0.0, 1.0, size)
    gradient = np.broadcast_to(xs[None, :], (size, size))
    regions = None

    if kind == "gradient":
        log_lum = gradient.copy()
        tint = np.ones(3)
        log_rad = log_lum[..., None] + np.log(tint)
    else:
        noise = _value_noise(rng, size, cells=4)
        noise /= max(np.abs(noise).max(), 1e-12)
        if kind == "value-noise":
            log_lum = noise
        elif kind == "disks":
            log_lum = np.full((size, size), -0.5)
        else:
            angle = rng.uniform(0, 2 * np.pi)
            yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
            ramp = np.cos(angle) * xx + np.sin(angle) * yy
            log_lum = 0.6 * (ramp - ramp.mean()) + 0.4 * noise
        tint_field = 0.1 * np.stack([_value_noise(rng, size, cells=2) for _ in range(3)], axis=2)
        log_rad = log_lum[..., None] + tint_field
        if kind in ("disks", "composite"):
            regions = _disks(rng, size, n_disks)
            n = int(regions.max())
            # distinct, well separated levels across the full span
            levels = rng.permutation(np.linspace(-1.0, 1.0, n)) if n > 1 else np.zeros(n)
            levels = levels + rng.uniform(-0.05, 0.05, n)
            for lab in range(1, n + 1):
                tint = rng.uniform(-0.05, 0.05, 3)
                log_rad[regions == lab] = levels[lab - 1] + tint
    if regions is None:
        regions = np.zeros((size, size), dtype=np.int64)

    lo, hi = log_rad.min(), log_rad.max()
    unit = (log_rad - lo) / (hi - lo) - 0.5 if hi > lo else np.zeros_like(log_rad)
    radiance = center * np.exp(unit * math.log(dynamic_range))
    return RadianceMap(radiance, regions)


def expose(r: RadianceMap, dt: float, gamma: float = 2.2,
           noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """8-bit capture through a gamma response with hard clipping."""
    if dt <= 0:
        raise ValueError("exposure time must be positive")
    linear = dt * r.radiance
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        linear = np.maximum(linear + noise_sigma * rng.standard_normal(linear.shape), 0.0)
    return quantize(np.clip(linear, 0.0, 1.0) ** (1.0 / gamma))


def make_bracket(r: RadianceMap, times, gamma: float = 2.2, name: str = "",
                 noise_sigma: float = 0.0, seed: int = 0) -> ExposureStack:
    times = [float(t) for t in times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError(f"exposure times must be strictly increasing: {times}")
    rng = np.random.default_rng(seed)
    images = tuple(expose(r, t, gamma, noise_sigma, rng) for t in times)
    return ExposureStack(images, tuple(times), name=name, regions=r.regions)


def center_for_times(times) -> float:
    """Radiance center that lands mid-tone (0.2 linear) at the geometric-mean time."""
    return 0.2 / math.exp(np.mean(np.log(np.asarray(times, dtype=np.float64))))


def make_corpus(seed: int, n_scenes: int, size: int = 64, times=(1.0, 8.0, 64.0),
                kind: str = "composite", dynamic_range: float = 1000.0) -> list:
    """``n_scenes`` brackets whose per-scene seeds are spawned from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(n_scenes)
    center = center_for_times(times)
    corpus = []
    for i, child in enumerate(children):
        scene_seed = int(child.generate_state(1)[0])
        rmap = synth_radiance(scene_seed, size, kind, dynamic_range, center)
        corpus.append(make_bracket(rmap, times, name=f"scene_{seed}_{i:03d}"))
    return corpus
