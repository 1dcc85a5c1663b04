import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siftinv.errors import FormatError, InvalidInputError, InvalidParameterError
from siftinv.image import (GrayImage, Kernel, RgbImage, convolve, gaussian_kernel,
                           load_gray, load_rgb, save_image, to_grayscale)

from helpers import naive_convolve


class TestToGrayscale:
    def test_pure_white(self):
        img = RgbImage(np.ones((4, 4, 3), dtype=np.float32))
        assert np.allclose(to_grayscale(img).data, 1.0, atol=1e-6)

    def test_pure_black(self):
        img = RgbImage(np.zeros((4, 4, 3), dtype=np.float32))
        assert np.allclose(to_grayscale(img).data, 0.0)

    def test_pure_red_weight(self):
        data = np.zeros((2, 2, 3), dtype=np.float32)
        data[:, :, 0] = 1.0
        assert np.allclose(to_grayscale(RgbImage(data)).data, 0.299, atol=1e-6)

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            img = RgbImage(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
            g = to_grayscale(img).data
            assert g.min() >= 0.0 and g.max() <= 1.0


class TestGaussianKernel:
    def test_profile_matches_formula(self):
        # normalization cancels in the ratio, exposing the raw exponential
        k = gaussian_kernel(1.0, radius=3)
        w = k.weights.astype(np.float64)
        center = w[3, 3]
        for y in range(7):
            for x in range(7):
                expected = np.exp(-((x - 3) ** 2 + (y - 3) ** 2) / 2.0)
                assert w[y, x] / center == pytest.approx(expected, rel=1e-5)

    def test_center_is_inverse_two_pi_before_normalization(self):
        k = gaussian_kernel(1.0, radius=5)
        w = k.weights.astype(np.float64)
        # recover the raw center value: raw = center / sum(raw) and the raw
        # grid sums to nearly the full mass, so center/sum ~ 1/(2*pi)
        raw_center = 1.0 / (2.0 * np.pi)
        assert w[5, 5] == pytest.approx(raw_center, rel=1e-3)

    @given(sigma=st.floats(0.5, 4.0), radius=st.integers(1, 6))
    @settings(max_examples=30, deadline=None)
    def test_symmetry_and_normalization(self, sigma, radius):
        k = gaussian_kernel(sigma, radius=radius)
        w = k.weights.astype(np.float64)
        assert np.allclose(w, w[::-1, ::-1])
        assert (w >= 0).all()
        assert abs(w.sum() - 1.0) < 1e-6

    def test_default_radius_sum(self):
        w = gaussian_kernel(1.6, radius=4).weights.astype(np.float64)
        assert abs(float(w.sum()) - 1.0) < 1e-9

    def test_bad_sigma(self):
        with pytest.raises(InvalidParameterError):
            gaussian_kernel(0.0)
        with pytest.raises(InvalidParameterError):
            gaussian_kernel(-1.5)


def _identity_kernel():
    w = np.zeros((3, 3), dtype=np.float32)
    w[1, 1] = 1.0
    return Kernel(radius=1, weights=w)


class TestConvolve:
    def test_constant_image_preserved(self):
        img = GrayImage(np.full((16, 16), 0.37, dtype=np.float32))
        out = convolve(img, gaussian_kernel(1.6))
        assert np.allclose(out.data, 0.37, atol=1e-6)

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        img = GrayImage(rng.uniform(0, 1, (12, 12)).astype(np.float32))
        out = convolve(img, _identity_kernel())
        assert np.allclose(out.data, img.data, atol=1e-7)

    def test_impulse_imprints_kernel(self):
        data = np.zeros((11, 11), dtype=np.float32)
        data[5, 5] = 1.0
        k = gaussian_kernel(1.0, radius=3)
        out = convolve(GrayImage(data), k)
        expected = naive_convolve(data, k.weights.astype(np.float64))
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_linearity(self):
        rng = np.random.default_rng(1)
        i1 = rng.uniform(0, 1, (14, 14)).astype(np.float32)
        i2 = rng.uniform(0, 1, (14, 14)).astype(np.float32)
        a, b = 0.3, 0.5
        k = gaussian_kernel(1.2)
        lhs = convolve(GrayImage(a * i1 + b * i2), k).data
        rhs = a * convolve(GrayImage(i1), k).data + b * convolve(GrayImage(i2), k).data
        assert np.abs(lhs - rhs).max() < 1e-6


class TestContainers:
    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidInputError):
            GrayImage(np.full((4, 4), 1.5, dtype=np.float32))
        with pytest.raises(InvalidInputError):
            RgbImage(-0.1 * np.ones((4, 4, 3), dtype=np.float32))

    def test_immutable(self):
        img = GrayImage(np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(ValueError):
            img.data[0, 0] = 1.0

    def test_kernel_shape_validated(self):
        from siftinv.errors import ShapeError
        with pytest.raises(ShapeError):
            Kernel(radius=2, weights=np.ones((3, 3), dtype=np.float32))


class TestFileIo:
    @pytest.mark.parametrize("ext", [".png", ".pgm"])
    def test_gray_roundtrip(self, tmp_path, ext):
        rng = np.random.default_rng(3)
        img = GrayImage(rng.uniform(0, 1, (9, 7)).astype(np.float32))
        path = tmp_path / f"img{ext}"
        save_image(img, path)
        back = load_gray(path)
        quantized = np.rint(img.data * 255) / 255.0
        assert np.allclose(back.data, quantized, atol=1e-6)

    @pytest.mark.parametrize("ext", [".png", ".ppm"])
    def test_rgb_roundtrip(self, tmp_path, ext):
        rng = np.random.default_rng(4)
        img = RgbImage(rng.uniform(0, 1, (6, 8, 3)).astype(np.float32))
        path = tmp_path / f"img{ext}"
        save_image(img, path)
        back = load_rgb(path)
        quantized = np.rint(img.data * 255) / 255.0
        assert np.allclose(back.data, quantized, atol=1e-6)

    def test_pnm_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P9\n3 3\n255\n" + b"\x00" * 9)
        with pytest.raises(FormatError):
            load_gray(path)

    def test_pnm_truncated(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
        with pytest.raises(FormatError):
            load_gray(path)

    def test_unsupported_extension(self, tmp_path):
        img = GrayImage(np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(InvalidParameterError):
            save_image(img, tmp_path / "img.bmp")
