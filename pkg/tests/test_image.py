import numpy as np
import pytest

from ered.data import synthetic_image
from ered.image import PSNR_CAP, as_image, load_image, mse, psnr, save_image, ssim


def test_psnr_identical_hits_cap(rng):
    x = rng.uniform(size=(8, 8, 1))
    assert psnr(x, x) == PSNR_CAP == 99.0


def test_psnr_constant_offset():
    # 10 log10(1 / 0.1^2) = 20 dB
    a = np.full((4, 4), 0.3)
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)


def test_psnr_zero_vs_one():
    assert psnr(np.zeros((3, 3)), np.ones((3, 3))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((3, 3)), peak=0)


def test_psnr_decreases_with_noise_amplitude():
    x = synthetic_image(32)
    amps = [0.01, 0.02, 0.05, 0.1]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(x.shape)
        vals = [psnr(x + a * z, x) for a in amps]
        assert all(b < a for a, b in zip(vals, vals[1:]))


def test_ssim_identity_and_bounds():
    x = synthetic_image(32)
    assert ssim(x, x) == pytest.approx(1.0)
    v = ssim(1 - x, x)
    assert -1 < v < 1


def test_ssim_symmetric(rng):
    x = synthetic_image(32)
    y = np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)


def _brute_ssim(x, y):
    """Direct evaluation: 11x11 Gaussian window (std 1.5), valid positions only, averaged."""
    r = np.arange(11) - 5
    g = np.exp(-(r**2) / (2 * 1.5**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            px, py = x[i : i + 11, j : j + 11], y[i : i + 11, j : j + 11]
            mx, my = np.sum(w * px), np.sum(w * py)
            vx = np.sum(w * px * px) - mx**2
            vy = np.sum(w * py * py) - my**2
            cxy = np.sum(w * px * py) - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_brute_force_on_patch(rng):
    x = rng.uniform(0.2, 0.8, size=(16, 16))
    y = x + 0.01 + 0.02 * rng.standard_normal(x.shape)
    # skimage crops a border of (win - 1) / 2 pixels before averaging.
    assert ssim(y, x) == pytest.approx(_brute_ssim(y, x), abs=1e-10)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_row_major_offset():
    h, w, c = 3, 4, 3
    flat = np.arange(h * w * c, dtype=float)
    img = flat.reshape(h, w, c)
    for r, col, ch in [(0, 0, 0), (1, 2, 1), (2, 3, 2)]:
        assert img[r, col, ch] == flat[(r * w + col) * c + ch]


def test_as_image_rejects_nonfinite():
    with pytest.raises(ValueError):
        as_image(np.array([[np.nan]]))


@pytest.mark.parametrize("bits,bound", [(8, 1 / 510), (16, 1 / 131070)])
@pytest.mark.parametrize("channels", [1, 3])
def test_png_round_trip(tmp_path, rng, bits, bound, channels):
    x = rng.uniform(size=(8, 8, channels))
    p = tmp_path / "img.png"
    save_image(x, p, bits)
    assert np.max(np.abs(load_image(p) - x)) <= bound + 1e-15


def test_pgm_ppm_round_trip(tmp_path, rng):
    g = rng.uniform(size=(5, 6, 1))
    save_image(g, tmp_path / "a.pgm")
    assert np.max(np.abs(load_image(tmp_path / "a.pgm") - g)) <= 1 / 510 + 1e-15
    c = rng.uniform(size=(5, 6, 3))
    save_image(c, tmp_path / "a.ppm")
    assert np.max(np.abs(load_image(tmp_path / "a.ppm") - c)) <= 1 / 510 + 1e-15


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")
    with pytest.raises(ValueError):
        load_image(tmp_path / "x.jpg")
    bad = tmp_path / "corrupt.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(ValueError):
        load_image(bad)


def test_mse_basic():
    assert mse(np.zeros(4), np.full(4, 0.5)) == pytest.approx(0.25)
