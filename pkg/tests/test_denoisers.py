import io
import struct
import sys

import numpy as np
import pytest

from ered.data import synthetic_image
from ered.denoisers import (
    DctThresholdDenoiser,
    ExternalDenoiser,
    GmmOracleDenoiser,
    LinearShrinkDenoiser,
    PerturbedOracleDenoiser,
    dct_threshold_denoise,
    linear_shrink_denoise,
    make_denoiser,
    perturbed_oracle_denoise,
)
from ered.ednz import (
    HEADER,
    ProtocolError,
    decode_frame,
    encode_frame,
    load_tensor,
    read_frame,
    save_tensor,
    serve,
)
from ered.gmm import random_prior
from ered.transforms import Flip, Rot90


def _dct_matrix(n):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


def _brute_dct_denoise(x, sigma, b, mult):
    C = _dct_matrix(b)
    h, w = x.shape
    acc = np.zeros_like(x)
    cnt = np.zeros_like(x)
    for i in range(h - b + 1):
        for j in range(w - b + 1):
            coef = C @ x[i : i + b, j : j + b] @ C.T
            keep = np.abs(coef) >= mult * sigma
            keep[0, 0] = True
            acc[i : i + b, j : j + b] += C.T @ (coef * keep) @ C
            cnt[i : i + b, j : j + b] += 1
    return acc / cnt


def test_dct_matches_brute_force(rng):
    x = rng.uniform(size=(12, 11))
    for sigma in (0.01, 0.1):
        np.testing.assert_allclose(
            DctThresholdDenoiser(4, 2.5)(x, sigma), _brute_dct_denoise(x, sigma, 4, 2.5), atol=1e-13
        )


def test_dct_tiny_sigma_is_identity(rng):
    x = rng.uniform(size=(10, 10, 2))
    np.testing.assert_allclose(DctThresholdDenoiser()(x, 1e-12), x, atol=1e-12)


def test_dct_flip_and_rot_equivariant():
    x = synthetic_image(32) + 0.05 * np.random.default_rng(0).standard_normal((32, 32, 1))
    den = DctThresholdDenoiser()
    d = den(x, 0.05)
    for t in (Flip(True, False), Flip(False, True), Rot90(1)):
        np.testing.assert_allclose(den(t.apply(x), 0.05), t.apply(d), atol=1e-12)


def test_dct_reduces_noise():
    x = synthetic_image(32)
    noisy = x + 0.05 * np.random.default_rng(1).standard_normal(x.shape)
    assert np.mean((dct_threshold_denoise(noisy, 0.05) - x) ** 2) < 0.5 * np.mean((noisy - x) ** 2)


def test_dct_errors():
    with pytest.raises(ValueError):
        DctThresholdDenoiser()(np.zeros((4, 4)), 0.1)
    with pytest.raises(ValueError):
        DctThresholdDenoiser()(np.zeros((16, 16)), 0.0)


def test_linear_shrink(rng):
    x = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(linear_shrink_denoise(x, 0.5), 0.5 * x)
    for c in (0.0, 1.5):
        with pytest.raises(ValueError):
            LinearShrinkDenoiser(c)


def test_oracle_and_perturbation(rng):
    prior = random_prior(rng, 4, 3, shape=(2, 2))
    x = rng.standard_normal((2, 2))
    exact = GmmOracleDenoiser(prior)(x, 0.3)
    np.testing.assert_array_equal(exact, prior.mmse(x, 0.3))
    pert = perturbed_oracle_denoise(prior, 0.3, 0.01, x, seed=4)
    gap = pert - exact
    assert 0 < np.max(np.abs(gap)) <= 0.01
    np.testing.assert_array_equal(pert, perturbed_oracle_denoise(prior, 0.3, 0.01, x, seed=4))
    np.testing.assert_array_equal(PerturbedOracleDenoiser(prior, 0.0)(x, 0.3), exact)
    with pytest.raises(ValueError):
        PerturbedOracleDenoiser(prior, -1)


def test_make_denoiser_round_trip(rng):
    prior = random_prior(rng, 2, 2)
    for den in (GmmOracleDenoiser(prior), PerturbedOracleDenoiser(prior, 0.1, 3), LinearShrinkDenoiser(0.8),
                DctThresholdDenoiser(4, 2.0)):
        again = make_denoiser(den.to_dict())
        assert again.to_dict() == den.to_dict()
    with pytest.raises(ValueError):
        make_denoiser({"kind": "bm3d"})


# EDNZ framing -------------------------------------------------------------


def test_frame_layout():
    x = np.arange(6, dtype=float).reshape(1, 2, 3)
    data = encode_frame(x, 0.25)
    assert data[:4] == b"EDNZ"
    assert struct.unpack("<IIIIf", data[4:24]) == (1, 1, 2, 3, 0.25)
    np.testing.assert_array_equal(np.frombuffer(data[24:], "<f4"), np.arange(6))


def test_frame_round_trip(rng):
    x = rng.standard_normal((3, 4, 2))
    y, s = decode_frame(encode_frame(x, 0.1))
    np.testing.assert_array_equal(y, x.astype(np.float32))
    assert s == pytest.approx(0.1)
    y2, _ = decode_frame(encode_frame(x[:, :, 0], 0.1))
    assert y2.shape == (3, 4, 1)


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + struct.pack("<I", 2) + d[8:],
    lambda d: d[:-4],
    lambda d: d[:10],
])
def test_frame_errors(mutate):
    with pytest.raises(ProtocolError):
        decode_frame(mutate(encode_frame(np.zeros((2, 2, 1)), 0.1)))


def test_serve_in_memory():
    frames = encode_frame(np.ones((2, 2, 1)), 0.5) + encode_frame(np.zeros((1, 3, 1)), 0.1)
    out = io.BytesIO()
    serve(lambda x, s: 2 * x, io.BytesIO(frames), out)
    out.seek(0)
    a, sa = read_frame(out)
    b, _ = read_frame(out)
    assert read_frame(out) is None
    np.testing.assert_array_equal(a, 2 * np.ones((2, 2, 1)))
    assert sa == 0.5 and b.shape == (1, 3, 1)


def test_tensor_file(tmp_path, rng):
    x = rng.uniform(size=(4, 5, 3))
    save_tensor(tmp_path / "t.ednz", x)
    np.testing.assert_array_equal(load_tensor(tmp_path / "t.ednz"), x.astype(np.float32).astype(np.float64))


# External process ---------------------------------------------------------


def test_external_echo(echo_server, rng):
    x = rng.uniform(size=(5, 6))
    with ExternalDenoiser(echo_server, timeout=30) as den:
        for _ in range(3):  # the child is reused across calls
            out = den(x, 0.1)
            assert out.shape == x.shape
            np.testing.assert_array_equal(out, x.astype(np.float32))


def test_external_wrong_dims(wrong_dims_server):
    with ExternalDenoiser(wrong_dims_server, timeout=30) as den:
        with pytest.raises(ProtocolError, match="1x1x1"):
            den(np.zeros((3, 3, 1)), 0.1)


def test_external_silent_child_times_out():
    cmd = [sys.executable, "-c", "import time, sys; sys.stdin.buffer.read(); time.sleep(30)"]
    with ExternalDenoiser(cmd, timeout=0.5) as den:
        with pytest.raises(TimeoutError):
            den(np.zeros((2, 2, 1)), 0.1)


def test_external_crashing_child():
    cmd = [sys.executable, "-c", f"import sys; sys.stdin.buffer.read({HEADER.size}); sys.exit(1)"]
    with ExternalDenoiser(cmd, timeout=10) as den:
        with pytest.raises(ProtocolError):
            den(np.zeros((2, 2, 1)), 0.1)


def test_external_nonfinite_response(tmp_path):
    script = tmp_path / "nan.py"
    script.write_text(
        "import sys\nimport numpy as np\nfrom ered.ednz import read_frame, write_frame\n"
        "while (f := read_frame(sys.stdin.buffer)) is not None:\n"
        "    write_frame(sys.stdout.buffer, np.full(f[0].shape, np.nan), f[1])\n"
    )
    with ExternalDenoiser([sys.executable, str(script)], timeout=30) as den:
        with pytest.raises(ProtocolError, match="non-finite"):
            den(np.zeros((2, 2, 1)), 0.1)
