"""Image containers, 8-bit file I/O and the exposure-stack data model.

Images are ``(H, W, 3)`` float64 arrays and planes are ``(H, W)`` float64
arrays, both holding values in [0, 1].  Quantization to bytes happens only
at file boundaries.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .errors import ImageFormatError, SetConstructionError, ShapeError, TruncatedImageError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def as_image(arr) -> np.ndarray:
    """Validate and return an ``(H, W, 3)`` float64 image."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError("image must be at least 1x1")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def as_plane(arr) -> np.ndarray:
    plane = np.asarray(arr, dtype=np.float64)
    if plane.ndim != 2 or plane.shape[0] < 1 or plane.shape[1] < 1:
        raise ShapeError(f"expected (H, W) plane, got shape {plane.shape}")
    return plane


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize to uint8 with clamping and round-half-away-from-zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def from_bytes(data: np.ndarray) -> np.ndarray:
    return np.asarray(data, dtype=np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits without touching the filesystem."""
    return from_bytes(to_bytes(img))


# -- file I/O ---------------------------------------------------------------

def _read_ppm(raw: bytes, path) -> np.ndarray:
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    tokens = []
    pos = 2
    n = len(raw)
    while len(tokens) < 3:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise TruncatedImageError(f"{path}: PPM header ends early")
        tokens.append(raw[start:pos])
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: invalid dimensions {width}x{height}")
    if pos >= n:
        raise TruncatedImageError(f"{path}: PPM header ends early")
    pos += 1  # single whitespace byte before raster
    need = width * height * 3
    body = raw[pos:pos + need]
    if len(body) < need:
        raise TruncatedImageError(f"{path}: expected {need} raster bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
PNG_COLOR_TYPES = {0: "grayscale", 2: "RGB", 3: "palette", 4: "grayscale+alpha", 6: "RGBA"}


def _check_png_header(raw: bytes, path) -> None:
    # Pillow reports 16-bit RGB as mode "RGB", so read depth and color type from IHDR
    if len(raw) < 33 or raw[12:16] != b"IHDR":
        raise TruncatedImageError(f"{path}: PNG header is incomplete")
    depth, color = raw[24], raw[25]
    if color != 2:
        kind = PNG_COLOR_TYPES.get(color, f"type {color}")
        raise ImageFormatError(f"{path}: unsupported PNG color type {kind}; need RGB without alpha")
    if depth != 8:
        raise ImageFormatError(f"{path}: unsupported PNG bit depth {depth}; need 8")


def _read_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: not a PNG file")
            if im.mode != "RGB":
                raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode!r}; need 8-bit RGB")
            im.load()
            return np.asarray(im, dtype=np.uint8).copy()
    except (SyntaxError, EOFError) as exc:
        raise TruncatedImageError(f"{path}: {exc}") from exc
    except OSError as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        if "truncated" in str(exc).lower() or "broken" in str(exc).lower():
            raise TruncatedImageError(f"{path}: {exc}") from exc
        raise ImageFormatError(f"{path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB PNG or binary PPM (P6) as an image in [0, 1].

    Raises
    ------
    FileNotFoundError
        The path does not exist.
    ImageFormatError
        Unsupported bit depth, color type or container.
    TruncatedImageError
        The pixel stream is shorter than the header promises.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P6":
        data = _read_ppm(raw, path)
    elif raw[:8] == PNG_SIGNATURE:
        _check_png_header(raw, path)
        data = _read_png(path)
    else:
        raise ImageFormatError(f"{path}: unrecognized file signature")
    return from_bytes(data)


def save_image(img: np.ndarray, path) -> None:
    """Write ``img`` as 8-bit PNG, or PPM when the suffix is ``.ppm``."""
    path = Path(path)
    arr = np.asarray(img, dtype=np.float64)
    data = to_bytes(arr)
    if data.ndim == 2:
        if path.suffix.lower() == ".ppm":
            data = np.repeat(data[:, :, None], 3, axis=2)
        else:
            PILImage.fromarray(data, mode="L").save(path)
            return
    if path.suffix.lower() == ".ppm":
        h, w, _ = data.shape
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(data).tobytes())
    else:
        PILImage.fromarray(np.ascontiguousarray(data), mode="RGB").save(path)


def save_label_map(labels: np.ndarray, path) -> None:
    """Store integer labels 0..255 as an 8-bit grayscale PNG."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must fit in 8 bits")
    PILImage.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_label_map(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode != "L":
            raise ImageFormatError(f"{path}: label map must be 8-bit grayscale")
        return np.asarray(im, dtype=np.int64).copy()


def to_luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB image; works on any array with a trailing RGB axis."""
    img = np.asarray(img, dtype=np.float64)
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


# -- exposure stacks ----------------------------------------------------------

@dataclass(frozen=True)
class ExposureStack:
    """Differently exposed images of one static scene, ordered by exposure time."""

    images: tuple
    times: tuple
    name: str = ""
    regions: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        images = tuple(as_image(im) for im in self.images)
        times = tuple(float(t) for t in self.times)
        if not images:
            raise ShapeError("exposure stack is empty")
        if len(images) != len(times):
            raise ShapeError(f"{len(images)} images but {len(times)} exposure times")
        shape = images[0].shape
        for im in images[1:]:
            if im.shape != shape:
                raise ShapeError(f"stack images differ in size: {shape} vs {im.shape}")
        if any(t <= 0 for t in times):
            raise SetConstructionError("exposure times must be positive")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise SetConstructionError(f"exposure times must be strictly increasing: {times}")
        if self.regions is not None and np.shape(self.regions) != shape[:2]:
            raise ShapeError("region label map does not match image size")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "times", times)

    def __len__(self):
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int]:
        return self.images[0].shape[:2]


@dataclass(frozen=True)
class SceneSets:
    """A stack plus the 0-based index lists of the fused and measurement sets."""

    stack: ExposureStack
    fuse_idx: tuple
    measure_idx: tuple

    @property
    def fuse_images(self) -> list[np.ndarray]:
        return [self.stack.images[i] for i in self.fuse_idx]

    @property
    def measure_images(self) -> list[np.ndarray]:
        return [self.stack.images[i] for i in self.measure_idx]


def _check_index_list(idx: Sequence[int], k: int, label: str) -> tuple:
    idx = tuple(int(i) for i in idx)
    if not idx:
        raise SetConstructionError(f"{label} index list is empty")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise SetConstructionError(f"{label} indices must be strictly increasing: {idx}")
    if idx[0] < 0 or idx[-1] >= k:
        raise SetConstructionError(f"{label} indices {idx} out of range for {k} images")
    return idx


def make_scene_sets(stack: ExposureStack, fuse_idx, measure_idx) -> SceneSets:
    """Validate fuse ⊆ measure ⊆ {0..K-1} with sorted, duplicate-free indices."""
    k = len(stack)
    fuse = _check_index_list(fuse_idx, k, "fuse")
    measure = _check_index_list(measure_idx, k, "measure")
    missing = set(fuse) - set(measure)
    if missing:
        raise SetConstructionError(
            f"fuse indices {sorted(missing)} are not in the measurement set {measure}")
    return SceneSets(stack, fuse, measure)


# -- stack manifests --------------------------------------------------------

def read_manifest(path) -> ExposureStack:
    """Read a ``<relative-path> <exposure-seconds>`` manifest into a stack.

    A ``regions.png`` label map next to the manifest is attached when present.
    """
    path = Path(path)
    images, times = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise SetConstructionError(f"{path}:{lineno}: expected '<path> <seconds>'")
        try:
            t = float(parts[1])
        except ValueError as exc:
            raise SetConstructionError(f"{path}:{lineno}: bad exposure time {parts[1]!r}") from exc
        images.append(load_image(path.parent / parts[0]))
        times.append(t)
    regions_path = path.parent / "regions.png"
    regions = load_label_map(regions_path) if regions_path.exists() else None
    return ExposureStack(tuple(images), tuple(times), name=path.parent.name, regions=regions)


def write_manifest(stack: ExposureStack, directory, suffix: str = ".png") -> Path:
    """Write every image of ``stack`` plus ``manifest.txt`` into ``directory``."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    lines = []
    for k, (img, t) in enumerate(zip(stack.images, stack.times)):
        fname = f"exp_{k:02d}{suffix}"
        save_image(img, directory / fname)
        lines.append(f"{fname} {t!r}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    if stack.regions is not None:
        save_label_map(stack.regions, directory / "regions.png")
    return manifest
