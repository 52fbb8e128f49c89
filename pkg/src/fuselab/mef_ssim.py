"""MEF-SSIM quality index, weighted absolute error and the combined loss.

All quantities are measured against a *measurement set* of exposures that
may be larger than the set actually fused.  The reference side (desired
patches, smoothed weights) depends only on the measurement images, so it is
precomputed once per scene in a :class:`LossTarget`; the fused image enters
either as a plain array (evaluators) or as a :class:`Tensor` (training).

Patch variances and covariances use the population (1/N) normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .errors import ShapeError
from .image_core import LUMA_WEIGHTS, SceneSets, as_image, to_luminance
from .weight_maps import GUIDED_EPS, smoothed_weights_for

DEGENERATE_CONTRAST = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lam: float = 10.0
    patch_size: int = 8
    stride: int = 4
    sigma_g: float = 0.2
    sigma_l: float = 0.5
    tau: float = 0.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    guided_radius: int | None = None
    guided_eps: float = GUIDED_EPS

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError("stride must lie in [1, patch_size]")
        if self.sigma_g <= 0 or self.sigma_l <= 0:
            raise ValueError("sigma_g and sigma_l must be positive")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")


@dataclass(frozen=True)
class PatchStats:
    l: float
    c: float
    s: np.ndarray
    patch: np.ndarray

    @property
    def degenerate(self) -> bool:
        return self.c < DEGENERATE_CONTRAST


@dataclass(frozen=True)
class DesiredPatch:
    c_hat: float
    s_hat: np.ndarray
    l_hat: float
    patch: np.ndarray


# -- patches --------------------------------------------------------------

def patch_count(shape, size: int, stride: int) -> int:
    h, w = shape[:2]
    return ((h - size) // stride + 1) * ((w - size) // stride + 1)


def patch_index(shape, size: int, stride: int) -> np.ndarray:
    """Flat indices of every window, shape ``(M, size*size)``, row-major."""
    h, w = shape[:2]
    if size > min(h, w):
        raise ShapeError(f"patch size {size} exceeds image size {h}x{w}")
    grid = np.arange(h * w).reshape(h, w)
    win = sliding_window_view(grid, (size, size))[::stride, ::stride]
    return win.reshape(-1, size * size)


def extract_patches(p: np.ndarray, size: int, stride: int) -> np.ndarray:
    """Sliding windows of a plane as rows of an ``(M, size*size)`` array."""
    p = np.asarray(p, dtype=np.float64)
    return p.reshape(-1)[patch_index(p.shape, size, stride)]


def decompose_patch(patch) -> PatchStats:
    """Split a patch into mean intensity, contrast and unit structure."""
    patch = np.asarray(patch, dtype=np.float64).ravel()
    if patch.size == 0:
        raise ValueError("empty patch")
    l = patch.mean()
    centered = patch - l
    c = float(np.linalg.norm(centered))
    s = centered / c if c >= DEGENERATE_CONTRAST else np.zeros_like(centered)
    return PatchStats(float(l), c, s, patch)


def intensity_weight(global_mean, local_mean, cfg: LossConfig):
    return np.exp(-(global_mean - cfg.tau) ** 2 / (2 * cfg.sigma_g ** 2)
                  - (local_mean - cfg.tau) ** 2 / (2 * cfg.sigma_l ** 2))


def desired_patch(patches, global_means, cfg: LossConfig = LossConfig()) -> DesiredPatch:
    """Desired patch assembled from co-located patches of every measurement image."""
    stats = [decompose_patch(p) for p in patches]
    if not stats:
        raise ValueError("need at least one patch")
    c_hat = max(st.c for st in stats)
    strength = np.array([np.abs(st.patch - st.l).max() for st in stats])
    s_bar = np.zeros_like(stats[0].s)
    if strength.sum() > 0:
        s_bar = sum(a * st.s for a, st in zip(strength, stats)) / strength.sum()
    norm = np.linalg.norm(s_bar)
    s_hat = s_bar / norm if norm >= DEGENERATE_CONTRAST else np.zeros_like(s_bar)
    if norm < DEGENERATE_CONTRAST:
        c_hat = 0.0
    wl = np.array([intensity_weight(mu, st.l, cfg) for mu, st in zip(global_means, stats)])
    l_hat = float(np.dot(wl, [st.l for st in stats]) / wl.sum())
    return DesiredPatch(c_hat, s_hat, l_hat, c_hat * s_hat + l_hat)


def desired_patches(lums, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Vectorized desired patches for all windows, shape ``(M, P)``."""
    lums = [np.asarray(y, dtype=np.float64) for y in lums]
    idx = patch_index(lums[0].shape, cfg.patch_size, cfg.stride)
    pats = np.stack([y.reshape(-1)[idx] for y in lums])            # (K, M, P)
    l = pats.mean(axis=2)
    centered = pats - l[..., None]
    c = np.linalg.norm(centered, axis=2)
    ok = c >= DEGENERATE_CONTRAST
    s = np.where(ok[..., None], centered / np.where(ok, c, 1.0)[..., None], 0.0)
    strength = np.abs(centered).max(axis=2)
    total = strength.sum(axis=0)
    s_bar = np.einsum("km,kmp->mp", strength, s) / np.where(total > 0, total, 1.0)[:, None]
    norm = np.linalg.norm(s_bar, axis=1)
    good = norm >= DEGENERATE_CONTRAST
    s_hat = np.where(good[:, None], s_bar / np.where(good, norm, 1.0)[:, None], 0.0)
    c_hat = np.where(good, c.max(axis=0), 0.0)
    mu = np.array([y.mean() for y in lums])
    wl = intensity_weight(mu[:, None], l, cfg)
    l_hat = (wl * l).sum(axis=0) / wl.sum(axis=0)
    return c_hat[:, None] * s_hat + l_hat[:, None]


# -- precomputed reference ----------------------------------------------------

@dataclass(frozen=True)
class LossTarget:
    """Everything the losses need from the measurement set of one scene."""

    cfg: LossConfig
    shape: tuple
    index: np.ndarray        # (M, P) flat patch indices
    desired: np.ndarray      # (M, P)
    desired_mean: np.ndarray  # (M,)
    desired_centered: np.ndarray
    desired_var: np.ndarray
    images: np.ndarray       # (K, H, W, 3) measurement images
    weights: np.ndarray      # (K, H, W) smoothed, re-normalized

    @property
    def n_patches(self) -> int:
        return self.index.shape[0]


def build_target(images, cfg: LossConfig = LossConfig()) -> LossTarget:
    images = [as_image(im) for im in images]
    shape = images[0].shape[:2]
    if any(im.shape[:2] != shape for im in images):
        raise ShapeError("measurement images differ in size")
    size = min(cfg.patch_size, *shape)
    if size != cfg.patch_size:
        cfg = LossConfig(**{**cfg.__dict__, "patch_size": size, "stride": min(cfg.stride, size)})
    desired = desired_patches([to_luminance(im) for im in images], cfg)
    d_mean = desired.mean(axis=1)
    d_cent = desired - d_mean[:, None]
    weights = smoothed_weights_for(images, cfg.guided_radius, cfg.guided_eps).smoothed
    return LossTarget(cfg, shape, patch_index(shape, cfg.patch_size, cfg.stride), desired,
                      d_mean, d_cent, (d_cent ** 2).mean(axis=1), np.stack(images), np.stack(weights))


def scene_target(sets: SceneSets, cfg: LossConfig = LossConfig()) -> LossTarget:
    return build_target(sets.measure_images, cfg)


def _check_fused(target: LossTarget, fused: np.ndarray) -> np.ndarray:
    fused = as_image(fused)
    if fused.shape[:2] != target.shape:
        raise ShapeError(f"fused image {fused.shape[:2]} does not match stack {target.shape}")
    return fused


# -- evaluators on arrays ------------------------------------------------

def ssim_map(target: LossTarget, fused: np.ndarray) -> np.ndarray:
    """Per-patch similarity between the fused image and the desired patches."""
    fused = _check_fused(target, fused)
    cfg = target.cfg
    fp = to_luminance(fused).reshape(-1)[target.index]
    f_mean = fp.mean(axis=1)
    f_cent = fp - f_mean[:, None]
    f_var = (f_cent ** 2).mean(axis=1)
    cov = (f_cent * target.desired_centered).mean(axis=1)
    lum = (2 * target.desired_mean * f_mean + cfg.c1) / (f_mean ** 2 + target.desired_mean ** 2 + cfg.c1)
    struct = (2 * cov + cfg.c2) / (f_var + target.desired_var + cfg.c2)
    return lum * struct


def target_index(target: LossTarget, fused) -> float:
    return float(ssim_map(target, fused).mean())


def target_loss_w(target: LossTarget, fused) -> float:
    fused = _check_fused(target, fused)
    resid = np.abs(fused[None] - target.images).sum(axis=3)
    h, w = target.shape
    return float((target.weights * resid).sum() / (h * w))


def mef_ssim_index(sets: SceneSets, fused, cfg: LossConfig = LossConfig()) -> float:
    """Mean patch similarity of ``fused`` against the measurement set."""
    return target_index(scene_target(sets, cfg), fused)


def loss_S(sets: SceneSets, fused, cfg: LossConfig = LossConfig()) -> float:  # noqa: N802
    return 1.0 - mef_ssim_index(sets, fused, cfg)


def loss_W(sets: SceneSets, fused, cfg: LossConfig = LossConfig()) -> float:  # noqa: N802
    """Smoothed-weight L1 distance to each measurement image, per pixel."""
    return target_loss_w(scene_target(sets, cfg), fused)


def total_loss(sets: SceneSets, fused, cfg: LossConfig = LossConfig()) -> float:
    target = scene_target(sets, cfg)
    return (1.0 - target_index(target, fused)) + cfg.lam * target_loss_w(target, fused)


@dataclass(frozen=True)
class LossReport:
    loss_s: float
    loss_w: float
    total: float
    score: float


def evaluate_losses(target: LossTarget, fused) -> LossReport:
    score = target_index(target, fused)
    lw = target_loss_w(target, fused)
    return LossReport(1.0 - score, lw, (1.0 - score) + target.cfg.lam * lw, score)


# -- differentiable path ------------------------------------------------------

_LUMA = LUMA_WEIGHTS.reshape(1, 3, 1, 1)


def tensor_losses(target: LossTarget, fused: ad.Tensor):
    """``(total, loss_s, loss_w)`` as tensors for a ``(1, 3, H, W)`` fused tensor."""
    if fused.shape[0] != 1 or fused.shape[1] != 3 or fused.shape[2:] != target.shape:
        raise ShapeError(f"fused tensor {fused.shape} does not match target {target.shape}")
    cfg = target.cfg
    lum = ad.ops.sum(ad.mul(fused, _LUMA), axis=1)                      # (1, H, W)
    fp = ad.take(lum, target.index)                                     # (M, P)
    f_mean = ad.mean(fp, axis=1, keepdims=True)
    f_cent = ad.sub(fp, f_mean)
    f_var = ad.mean(ad.power(f_cent, 2.0), axis=1)
    cov = ad.mean(ad.mul(f_cent, target.desired_centered), axis=1)
    f_mean = ad.reshape(f_mean, (-1,))
    d_mean = target.desired_mean
    lum_term = (2.0 * d_mean * f_mean + cfg.c1) / (f_mean * f_mean + (d_mean ** 2 + cfg.c1))
    struct_term = (2.0 * cov + cfg.c2) / (f_var + (target.desired_var + cfg.c2))
    loss_s = 1.0 - ad.mean(lum_term * struct_term)

    images = target.images.transpose(0, 3, 1, 2)                         # (K, 3, H, W)
    resid = ad.absolute(ad.sub(fused, images))
    h, w = target.shape
    loss_w = ad.ops.sum(ad.mul(resid, target.weights[:, None])) * (1.0 / (h * w))
    return loss_s + cfg.lam * loss_w, loss_s, loss_w
