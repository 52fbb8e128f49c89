import struct
import zlib

import numpy as np
import pytest

from fuselab.data_synth import center_for_times, make_bracket, synth_radiance


def png_bytes(width, height, depth, color_type, rows):
    """Hand-built PNG so format checks do not depend on an encoder."""
    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", width, height, depth, color_type, 0, 0, 0)
    raw = b"".join(b"\x00" + r for r in rows)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b"")


def random_image(rng, h, w):
    return rng.uniform(0.0, 1.0, (h, w, 3))


def random_stack_images(rng, k, h, w):
    """``k`` distinct 8-bit images with varied exposure-like brightness."""
    base = rng.uniform(0.0, 1.0, (h, w, 3))
    return [np.round(np.clip(base * s + rng.normal(0, 0.05, base.shape), 0, 1) * 255) / 255
            for s in np.geomspace(0.3, 2.0, k)]


def synthetic_bracket(seed=0, size=32, times=(1.0, 8.0, 64.0), kind="composite"):
    rmap = synth_radiance(seed, size, kind, center=center_for_times(times))
    return make_bracket(rmap, times, name=f"s{seed}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance outcomes: criterion number -> list of (passed, title, detail), one per part
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        passed = all(p for p, _, _ in parts)
        title = "; ".join(t for _, t, _ in parts)
        detail = "; ".join(d for _, _, d in parts if d)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {title}  [{detail}]")
