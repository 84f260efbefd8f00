import math

import numpy as np
import pytest

from irrm.imageio import ImageU8
from irrm.metrics import (IDENTICAL, bicubic_resize, cubic, gaussian_window, psnr, resize_weights, ssim,
                          to_luma)
from irrm.tensor import Tensor

RNG = np.random.default_rng(5)


def random_image(h=32, w=32):
    return ImageU8(RNG.integers(0, 256, (h, w, 3), dtype=np.uint8))


def luma_loop(img):
    p = img.pixels.astype(np.float64) / 255
    out = np.zeros(p.shape[:2])
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            r, g, b = p[i, j]
            out[i, j] = 65.481 * r + 128.553 * g + 24.966 * b + 16
    return out


def psnr_loop(a, b, border):
    ya, yb = luma_loop(a), luma_loop(b)
    h, w = ya.shape
    acc, n = 0.0, 0
    for i in range(border, h - border):
        for j in range(border, w - border):
            acc += (ya[i, j] - yb[i, j]) ** 2
            n += 1
    return 10 * math.log10(255 ** 2 / (acc / n))


def ssim_loop(ya, yb):
    g = gaussian_window()
    win = np.outer(g, g)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    h, w = ya.shape
    vals = []
    for i in range(h - 10):
        for j in range(w - 10):
            pa, pb = ya[i:i + 11, j:j + 11], yb[i:i + 11, j:j + 11]
            ma, mb = np.sum(win * pa), np.sum(win * pb)
            va = np.sum(win * pa * pa) - ma * ma
            vb = np.sum(win * pb * pb) - mb * mb
            cab = np.sum(win * pa * pb) - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# -- luma -------------------------------------------------------------------------------------


def test_luma_white_black_and_ordering():
    white = to_luma(np.ones((1, 3, 1, 1))).item()
    assert white == pytest.approx(235.0)
    assert to_luma(np.zeros((1, 3, 1, 1))).item() == pytest.approx(16.0)
    red = to_luma(np.array([1.0, 0, 0]).reshape(1, 3, 1, 1)).item()
    green = to_luma(np.array([0, 1.0, 0]).reshape(1, 3, 1, 1)).item()
    assert green > red


def test_luma_range_and_loop_oracle():
    img = random_image(8, 8)
    y = to_luma(img).numpy()[0, 0]
    np.testing.assert_allclose(y, luma_loop(img), atol=1e-10)
    assert y.min() >= 16 and y.max() <= 235


# -- bicubic ----------------------------------------------------------------------------------


def test_kernel_half_integer_taps():
    np.testing.assert_allclose(cubic([-1.5, -0.5, 0.5, 1.5]), [-0.0625, 0.5625, 0.5625, -0.0625])
    assert cubic(0.0) == 1.0 and cubic(1.0) == 0.0 and cubic(2.0) == 0.0


def test_upscale_impulse_response_matches_closed_form():
    x = np.zeros((1, 1, 1, 16))
    x[..., 8] = 1.0
    row = bicubic_resize(np.repeat(x, 16, axis=2), 2)[0, 0, 0]
    # output pixel centres sit a quarter sample either side of each input centre
    offsets = (np.arange(32) + 0.5) / 2 - 0.5 - 8
    np.testing.assert_allclose(row, cubic(offsets), atol=1e-12)
    np.testing.assert_allclose(row[15:19], [0.2265625, 0.8671875, 0.8671875, 0.2265625])


@pytest.mark.parametrize("scale", [0.25, 0.5, 2, 4])
def test_constants_preserved(scale):
    out = bicubic_resize(np.full((1, 3, 16, 16), 0.37), scale)
    assert out.shape == (1, 3, int(16 * scale), int(16 * scale))
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


@pytest.mark.parametrize("scale", [0.25, 0.5, 2, 4])
def test_mean_preserved_on_random_images(scale):
    x = RNG.uniform(0, 1, (2, 3, 32, 32))
    assert bicubic_resize(x, scale).mean() == pytest.approx(x.mean(), rel=1e-3)


def test_unsupported_scale():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((1, 1, 8, 8)), 3)


def test_rows_sum_to_one():
    for s in (0.25, 0.5, 2, 4):
        np.testing.assert_allclose(resize_weights(12, s).sum(axis=1), 1.0, atol=1e-12)


def test_tensor_in_tensor_out():
    t = Tensor(np.ones((1, 1, 8, 8)))
    out = bicubic_resize(t, 0.5)
    assert isinstance(out, Tensor) and out.shape == (1, 1, 4, 4)


def test_downscale_matches_reference_resampler_on_natural_image():
    pil = pytest.importorskip("PIL.Image")
    data = pytest.importorskip("skimage.data")
    img = data.astronaut()[:256, :256]
    x = img.transpose(2, 0, 1)[None] / 255.0
    for scale in (0.5, 0.25):
        n = int(256 * scale)
        ours = bicubic_resize(x, scale)[0] * 255
        ref = np.stack([np.asarray(pil.fromarray(img[:, :, c].astype(np.float32), "F").resize((n, n), pil.BICUBIC))
                        for c in range(3)])
        # the reference drops out-of-range taps instead of clamping, so compare away from the border
        b = int(2 / scale)
        assert np.abs(ours - ref)[:, b:-b, b:-b].max() <= 1.0


# -- PSNR -------------------------------------------------------------------------------------


def test_psnr_identical_is_sentinel():
    img = random_image()
    assert psnr(img, img) == IDENTICAL and math.isinf(psnr(img, img))


def test_psnr_uniform_error_of_one():
    a = np.full((16, 16), 100, dtype=np.float64)[None, None] / 255
    b = a + 1 / 255
    assert psnr(a, b) == pytest.approx(48.1308036, abs=1e-6)


def test_psnr_mse_100():
    a = np.zeros((1, 1, 8, 8))
    b = np.full((1, 1, 8, 8), 10 / 255)
    assert psnr(a, b) == pytest.approx(28.1308036, abs=1e-6)


def test_psnr_matches_loop_and_is_symmetric():
    a, b = random_image(), random_image()
    assert psnr(a, b, crop_border=2) == pytest.approx(psnr_loop(a, b, 2), abs=1e-6)
    assert psnr(a, b, 3) == psnr(b, a, 3)


def test_psnr_default_crop_is_scale():
    a, b = random_image(), random_image()
    assert psnr(a, b, scale=4) == psnr(a, b, crop_border=4)


def test_psnr_decreases_with_noise():
    base = RNG.uniform(0.2, 0.8, (1, 3, 32, 32))
    noise = RNG.standard_normal(base.shape)
    values = [psnr(base, base + amp * noise) for amp in (0.001, 0.01, 0.05, 0.1)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_psnr_dimension_mismatch():
    with pytest.raises(ValueError):
        psnr(random_image(8, 8), random_image(8, 10))


# -- SSIM -------------------------------------------------------------------------------------


def test_ssim_identical_is_one():
    img = random_image()
    assert ssim(img, img) == 1.0


def test_ssim_inverted_image_matches_loop():
    yy, xx = np.mgrid[0:24, 0:24]
    a = np.where((yy // 4 + xx // 4) % 2 == 0, 230.0, 20.0) + RNG.uniform(0, 10, (24, 24))
    b = 255 - a
    got = ssim(a[None, None] / 255, b[None, None] / 255)
    assert -1 < got < 0.5
    assert got == pytest.approx(ssim_loop(a, b), abs=1e-6)


def test_ssim_random_pair_matches_loop_and_symmetric():
    a, b = RNG.uniform(0, 255, (20, 20)), RNG.uniform(0, 255, (20, 20))
    s_ab = ssim(a[None, None] / 255, b[None, None] / 255)
    assert s_ab == pytest.approx(ssim_loop(a, b), abs=1e-6)
    assert s_ab == pytest.approx(ssim(b[None, None] / 255, a[None, None] / 255), abs=1e-9)


def test_ssim_constant_offset_closed_form():
    m1, m2 = 100.0, 110.0
    c1 = (0.01 * 255) ** 2
    expected = (2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1)
    got = ssim(np.full((1, 1, 16, 16), m1 / 255), np.full((1, 1, 16, 16), m2 / 255))
    assert got == pytest.approx(expected, abs=1e-9)


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((1, 1, 8, 8)), np.ones((1, 1, 8, 8)))
