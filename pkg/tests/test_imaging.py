from __future__ import annotations

import numpy as np
import pytest

from dmk.imaging import (
    ImageError,
    SsimParams,
    as_image,
    normalize,
    read_image,
    resize_bilinear,
    ssim,
    ssim_map,
    subtract,
    to_luma,
    write_image,
)


def ssim_direct(a, b, params=SsimParams()):
    """Per-position SSIM with an explicit 2-D Gaussian window."""
    x, y = to_luma(a), to_luma(b)
    n = params.window_size
    r = (n - 1) / 2
    g = np.exp(-((np.arange(n) - r) ** 2) / (2 * params.sigma**2))
    win = np.outer(g, g)
    win /= win.sum()
    h, w = x.shape
    out = np.zeros((h - n + 1, w - n + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            px, py = x[i : i + n, j : j + n], y[i : i + n, j : j + n]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * (px - mx) ** 2).sum()
            vy = (win * (py - my) ** 2).sum()
            cxy = (win * (px - mx) * (py - my)).sum()
            out[i, j] = ((2 * mx * my + params.c1) * (2 * cxy + params.c2)) / (
                (mx**2 + my**2 + params.c1) * (vx + vy + params.c2)
            )
    return out


class TestSubtract:
    def test_same(self, rng):
        a = rng.integers(0, 256, (8, 8, 3))
        assert not subtract(a, a).any()

    def test_constant(self):
        np.testing.assert_array_equal(subtract(np.full((4, 4, 3), 100), np.full((4, 4, 3), 150)), 50)

    def test_signed(self):
        assert subtract(np.full((2, 2), 255), np.zeros((2, 2))).min() == -255

    def test_shape_mismatch(self):
        with pytest.raises(ImageError):
            subtract(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestNormalize:
    def test_extremes(self):
        assert (normalize(np.full((3, 3, 3), 255)) == 1.0).all()
        assert (normalize(np.zeros((3, 3, 3))) == 0.0).all()

    def test_rejects_nan(self):
        with pytest.raises(ImageError):
            as_image(np.array([[np.nan]]))

    def test_rejects_bad_channels(self):
        with pytest.raises(ImageError):
            as_image(np.zeros((3, 3, 2)))


class TestSsim:
    def test_identity(self, rng):
        a = rng.uniform(0, 255, (24, 20, 3))
        assert abs(ssim(a, a) - 1.0) <= 1e-12

    def test_constant_closed_form(self):
        c1 = SsimParams().c1
        v = ssim(np.zeros((16, 16, 3)), np.full((16, 16, 3), 255.0))
        assert abs(v - c1 / (255.0**2 + c1)) <= 1e-12
        assert abs(v - 9.999e-5) <= 1e-8

    def test_symmetric(self, rng):
        a, b = rng.uniform(0, 255, (2, 16, 16, 3))
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12

    def test_matches_direct_window(self, rng):
        a = rng.uniform(0, 255, (15, 17, 3))
        b = np.clip(a + rng.normal(0, 30, a.shape), 0, 255)
        np.testing.assert_allclose(ssim_map(a, b), ssim_direct(a, b), rtol=0, atol=1e-10)

    def test_range(self, rng):
        a, b = rng.uniform(0, 255, (2, 16, 16, 3))
        assert -1.0 <= ssim(a, b) <= 1.0

    def test_too_small(self):
        with pytest.raises(ImageError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_shape_mismatch(self):
        with pytest.raises(ImageError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))

    def test_params_validated(self):
        with pytest.raises(ValueError):
            SsimParams(k1=0)


class TestResize:
    def test_constant(self):
        out = resize_bilinear(np.full((5, 7, 3), 42.0), 13, 3)
        assert out.shape == (3, 13, 3)
        np.testing.assert_allclose(out, 42.0)

    def test_monotone(self):
        out = resize_bilinear(np.array([[0.0, 255.0]]), 4, 1)[0, :, 0]
        assert np.all(np.diff(out) >= 0)
        assert out[0] == 0.0 and out[-1] == 255.0

    def test_identity_bit_identical(self, rng):
        a = rng.uniform(0, 255, (6, 9, 3))
        out = resize_bilinear(a, 9, 6)
        np.testing.assert_array_equal(out, a)
        assert out is not a

    def test_downscale_averages(self):
        out = resize_bilinear(np.array([[0.0, 10.0, 20.0, 30.0]]), 2, 1)[0, :, 0]
        np.testing.assert_allclose(out, [5.0, 25.0])


def test_png_round_trip(tmp_path, rng):
    a = rng.integers(0, 256, (9, 11, 3)).astype(np.float64)
    write_image(a, tmp_path / "a.png")
    np.testing.assert_array_equal(read_image(tmp_path / "a.png"), a)
    g = rng.integers(0, 256, (9, 11)).astype(np.float64)
    write_image(g, tmp_path / "g.png")
    np.testing.assert_array_equal(read_image(tmp_path / "g.png")[:, :, 0], g)
