"""Interpolation matrices for separable resizing.

Each builder returns an ``(n_out, n_in)`` matrix whose rows sum to one, so
constants are preserved.  Sample positions use half-pixel centers and
out-of-range taps are clamped to the border.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

CUBIC_A = -0.5


def cubic_kernel(t: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    t = np.abs(t)
    near = ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    far = ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _source_positions(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


@lru_cache(maxsize=None)
def cubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = _source_positions(n_in, n_out)
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        idx = base + tap
        wts = cubic_kernel(src - idx)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), wts)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = np.clip(_source_positions(n_in, n_out), 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def resize_plane(p: np.ndarray, size, kind: str = "cubic") -> np.ndarray:
    """Resize a 2-D array with the same matrices the tensor ops use."""
    build = cubic_matrix if kind == "cubic" else bilinear_matrix
    return build(p.shape[0], size[0]) @ p @ build(p.shape[1], size[1]).T
