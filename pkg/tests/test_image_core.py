import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuselab.errors import ImageFormatError, SetConstructionError, ShapeError, TruncatedImageError
from fuselab.image_core import (
    ExposureStack,
    load_image,
    make_scene_sets,
    quantize,
    read_manifest,
    save_image,
    to_bytes,
    to_luminance,
    write_manifest,
)

from conftest import png_bytes


def write_ppm(path, width, height, payload, header=None):
    head = header if header is not None else f"P6\n{width} {height}\n255\n".encode()
    path.write_bytes(head + payload)


class TestLoad:
    def test_ppm_extremes(self, tmp_path):
        p = tmp_path / "a.ppm"
        write_ppm(p, 2, 1, bytes([255, 255, 255, 0, 0, 0]))
        np.testing.assert_array_equal(load_image(p), [[[1, 1, 1], [0, 0, 0]]])

    def test_byte_128(self, tmp_path):
        p = tmp_path / "a.ppm"
        write_ppm(p, 1, 1, bytes([128, 128, 128]))
        assert load_image(p)[0, 0, 0] == pytest.approx(0.50196, abs=1e-5)
        assert load_image(p)[0, 0, 0] == 128 / 255

    def test_ppm_comments_and_whitespace(self, tmp_path):
        p = tmp_path / "a.ppm"
        write_ppm(p, 1, 1, bytes([1, 2, 3]), header=b"P6 # comment\n1\t1\n# another\n255\n")
        np.testing.assert_array_equal(load_image(p)[0, 0], np.array([1, 2, 3]) / 255)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.png")

    def test_truncated_ppm(self, tmp_path):
        p = tmp_path / "a.ppm"
        write_ppm(p, 2, 2, bytes(5))
        with pytest.raises(TruncatedImageError):
            load_image(p)

    def test_ppm_16bit_rejected(self, tmp_path):
        p = tmp_path / "a.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(ImageFormatError):
            load_image(p)

    def test_png_rgb8(self, tmp_path):
        p = tmp_path / "a.png"
        p.write_bytes(png_bytes(2, 1, 8, 2, [bytes([0, 128, 255, 10, 20, 30])]))
        np.testing.assert_array_equal(load_image(p), np.array([[[0, 128, 255], [10, 20, 30]]]) / 255)

    def test_png_16bit_rejected(self, tmp_path):
        p = tmp_path / "a.png"
        p.write_bytes(png_bytes(1, 1, 16, 2, [bytes(6)]))
        with pytest.raises(ImageFormatError, match="bit depth"):
            load_image(p)

    @pytest.mark.parametrize("color_type, row", [(0, bytes(1)), (6, bytes(4)), (4, bytes(2))])
    def test_png_colortype_rejected(self, tmp_path, color_type, row):
        p = tmp_path / "a.png"
        p.write_bytes(png_bytes(1, 1, 8, color_type, [row]))
        with pytest.raises(ImageFormatError, match="color type"):
            load_image(p)

    def test_png_truncated(self, tmp_path):
        p = tmp_path / "a.png"
        data = png_bytes(8, 8, 8, 2, [bytes(range(24))] * 8)
        p.write_bytes(data[:-30])
        with pytest.raises((TruncatedImageError, ImageFormatError)):
            load_image(p)

    def test_png_truncated_is_distinct(self, tmp_path):
        p = tmp_path / "a.png"
        p.write_bytes(png_bytes(1, 1, 8, 2, [bytes(3)])[:20])
        with pytest.raises(TruncatedImageError):
            load_image(p)

    def test_unknown_signature(self, tmp_path):
        p = tmp_path / "a.bin"
        p.write_bytes(b"GIF89a....")
        with pytest.raises(ImageFormatError):
            load_image(p)


class TestSave:
    @pytest.mark.parametrize("value, byte", [(1.0, 255), (0.5, 128), (1.7, 255), (-0.3, 0), (0.0, 0)])
    def test_quantization(self, value, byte):
        assert to_bytes(np.array([value]))[0] == byte

    @pytest.mark.parametrize("suffix", [".png", ".ppm"])
    def test_roundtrip_bit_exact(self, tmp_path, rng, suffix):
        data = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
        p = tmp_path / f"a{suffix}"
        save_image(data / 255.0, p)
        np.testing.assert_array_equal(to_bytes(load_image(p)), data)
        # re-saving the loaded image gives identical file bytes
        q = tmp_path / f"b{suffix}"
        save_image(load_image(p), q)
        assert p.read_bytes() == q.read_bytes()

    def test_quantize_idempotent(self, rng):
        q = quantize(rng.uniform(-0.5, 1.5, (4, 4, 3)))
        np.testing.assert_array_equal(quantize(q), q)


class TestLuminance:
    @pytest.mark.parametrize("rgb, y", [((1, 1, 1), 1.0), ((0, 0, 0), 0.0), ((1, 0, 0), 0.299)])
    def test_values(self, rgb, y):
        assert to_luminance(np.array(rgb, dtype=float)) == pytest.approx(y, abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
    def test_range(self, rgb):
        y = to_luminance(np.array(rgb))
        assert -1e-15 <= y <= 1 + 1e-15


def stack_of(k, h=4, w=4):
    return ExposureStack(tuple(np.full((h, w, 3), 0.1 * (i + 1)) for i in range(k)), tuple(2.0 ** i for i in range(k)))


class TestStack:
    def test_times_must_increase(self):
        with pytest.raises(SetConstructionError):
            ExposureStack((np.zeros((2, 2, 3)),) * 2, (1.0, 1.0))

    def test_shapes_must_match(self):
        with pytest.raises(ShapeError):
            ExposureStack((np.zeros((2, 2, 3)), np.zeros((2, 3, 3))), (1.0, 2.0))

    def test_case1_shape(self):
        sets = make_scene_sets(stack_of(3), [0, 2], [0, 1, 2])
        assert len(sets.fuse_images) == 2 and len(sets.measure_images) == 3

    def test_case2_shape(self):
        sets = make_scene_sets(stack_of(5), [1, 2, 3], [0, 1, 2, 3, 4])
        assert sets.fuse_idx == (1, 2, 3)

    @pytest.mark.parametrize("fuse, measure", [([1], [0]), ([1, 0], [0, 1]), ([0, 0], [0, 1]), ([0], [0, 3]), ([], [0])])
    def test_rejects(self, fuse, measure):
        with pytest.raises(SetConstructionError):
            make_scene_sets(stack_of(3), fuse, measure)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(-1, 5), max_size=5), st.lists(st.integers(-1, 5), max_size=5))
    def test_accepts_exactly_valid_pairs(self, fuse, measure):
        k = 4

        def ok(idx):
            return bool(idx) and all(0 <= i < k for i in idx) and all(b > a for a, b in zip(idx, idx[1:]))

        valid = ok(fuse) and ok(measure) and set(fuse) <= set(measure)
        if valid:
            sets = make_scene_sets(stack_of(k), fuse, measure)
            assert list(sets.fuse_idx) == fuse
        else:
            with pytest.raises(SetConstructionError):
                make_scene_sets(stack_of(k), fuse, measure)


class TestManifest:
    def test_roundtrip(self, tmp_path, rng):
        imgs = tuple(quantize(rng.uniform(0, 1, (6, 5, 3))) for _ in range(3))
        regions = rng.integers(0, 4, (6, 5))
        stack = ExposureStack(imgs, (0.01, 0.08, 0.64), regions=regions)
        manifest = write_manifest(stack, tmp_path / "scene")
        back = read_manifest(manifest)
        assert back.times == stack.times
        for a, b in zip(back.images, imgs):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(back.regions, regions)

    def test_bad_line(self, tmp_path):
        (tmp_path / "m.txt").write_text("justonefield\n")
        with pytest.raises(SetConstructionError):
            read_manifest(tmp_path / "m.txt")
