import numpy as np
import pytest

from ered.denoisers import GmmOracleDenoiser, LinearShrinkDenoiser
from ered.equivariant import (
    EquivariantConfig,
    equivariant_denoise,
    equivariant_regularizer,
    equivariant_score_estimate,
    exact_equivariant_score,
    oracle_terms,
    oracle_terms_batch,
    single_sample_direction,
)
from ered.gmm import GmmPrior, random_prior, symmetrize
from ered.transforms import Flip, TransformSpec


@pytest.fixture
def prior():
    return random_prior(np.random.default_rng(3), 4, 3, shape=(2, 2))


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("kind", ["identity", "flip", "rot90", "circular_translation"])
def test_oracle_score_is_gradient_of_regularizer(prior, kind, rng):
    spec = TransformSpec(kind, max_shift=1)
    x = rng.standard_normal((2, 2))
    r, s = oracle_terms(prior, spec, 0.4, x)
    fd = _fd_grad(lambda z: oracle_terms(prior, spec, 0.4, z)[0], x)
    np.testing.assert_allclose(s, fd, atol=1e-7)


def test_oracle_identity_matches_prior(prior, rng):
    x = rng.standard_normal((2, 2))
    r, s = oracle_terms(prior, TransformSpec("identity"), 0.3, x)
    assert r == pytest.approx(-prior.log_density(x, 0.3))
    np.testing.assert_allclose(s, -prior.score(x, 0.3))


def test_oracle_flip_is_plain_average(prior, rng):
    x = rng.standard_normal((2, 2))
    elems = [Flip(v, h) for v in (False, True) for h in (False, True)]
    r_ref = -np.mean([prior.log_density(t.apply(x), 0.3) for t in elems])
    s_ref = -np.mean([t.apply(prior.score(t.apply(x), 0.3)) for t in elems], axis=0)
    r, s = oracle_terms(prior, TransformSpec("flip"), 0.3, x)
    assert r == pytest.approx(r_ref, abs=1e-13)
    np.testing.assert_allclose(s, s_ref, atol=1e-13)


def test_invariant_prior_makes_group_average_trivial(prior, rng):
    sym = symmetrize(prior, [t for t, _ in TransformSpec("flip").elements()])
    x = rng.standard_normal((2, 2))
    r, s = oracle_terms(sym, TransformSpec("flip"), 0.2, x)
    assert r == pytest.approx(-sym.log_density(x, 0.2), abs=1e-12)
    np.testing.assert_allclose(s, -sym.score(x, 0.2), atol=1e-12)


def test_gauss_hermite_against_monte_carlo(rng):
    p = GmmPrior([0.4, 0.6], [[0.0, 1.0], [1.0, -1.0]], [0.5, 0.8])
    x = np.array([0.3, 0.2])
    spec = TransformSpec("gaussian_noising", scale=0.3)
    r_gh, s_gh = oracle_terms(p, spec, 0.2, x)
    r_mc, s_mc = oracle_terms(p, TransformSpec("mixture", components=(spec,), weights=(1.0,)), 0.2, x)
    assert r_mc == pytest.approx(r_gh)  # mixture of one delegates to the same quadrature
    # independent Monte Carlo
    z = np.random.default_rng(0).standard_normal((200_000, 2))
    ev = p.evaluate(x + 0.3 * z, 0.2, mmse=False)
    assert -ev["log_p"].mean() == pytest.approx(r_gh, abs=5e-3)
    np.testing.assert_allclose(-ev["score"].mean(axis=0), s_gh, atol=1e-2)


def test_gaussian_prior_noising_closed_form():
    # N(0, tau^2) smoothed to tau^2 + sigma^2, then averaged over x + c z:
    # r = (|x|^2 + d c^2) / (2 v) + d/2 log(2 pi v), s = x / v.
    tau, sigma, c = 0.7, 0.4, 0.5
    p = GmmPrior([1.0], [[0.0, 0.0, 0.0]], [tau])
    x = np.array([0.2, -0.5, 1.0])
    v = tau**2 + sigma**2
    r, s = oracle_terms(p, TransformSpec("gaussian_noising", scale=c), sigma, x)
    assert r == pytest.approx((x @ x + 3 * c**2) / (2 * v) + 1.5 * np.log(2 * np.pi * v), abs=1e-12)
    np.testing.assert_allclose(s, x / v, atol=1e-12)


def test_monte_carlo_requires_generator(prior):
    with pytest.raises(ValueError):
        oracle_terms(prior, TransformSpec("subpixel_rotation"), 0.2, np.zeros((2, 2)))


def test_batch_matches_pointwise(prior, rng):
    X = rng.standard_normal((6, 2, 2))
    sig = rng.uniform(0.1, 1.0, size=6)
    for spec in (TransformSpec("flip"), TransformSpec("rot90"), TransformSpec("circular_translation", max_shift=1)):
        r, s = oracle_terms_batch(prior, spec, sig, X)
        for i in range(6):
            ri, si = oracle_terms(prior, spec, sig[i], X[i])
            assert r[i] == pytest.approx(ri, abs=1e-12)
            np.testing.assert_allclose(s[i], si, atol=1e-12)


def test_score_estimate_with_oracle_equals_exact(prior, rng):
    x = rng.standard_normal((2, 2))
    for kind in ("identity", "flip", "rot90"):
        spec = TransformSpec(kind)
        cfg = EquivariantConfig(spec, sigma=0.3)
        est = equivariant_score_estimate(GmmOracleDenoiser(prior), cfg, x)
        np.testing.assert_allclose(est, exact_equivariant_score(prior, spec, 0.3, x), atol=1e-11)
    assert equivariant_regularizer(prior, TransformSpec("identity"), 0.3, x) == pytest.approx(
        -prior.log_density(x, 0.3))


def test_equivariant_denoiser_is_equivariant(prior, rng):
    cfg = EquivariantConfig(TransformSpec("flip"), sigma=0.3)
    den = GmmOracleDenoiser(prior)
    x = rng.standard_normal((2, 2))
    out = equivariant_denoise(den, cfg, x)
    for t, _ in TransformSpec("flip").elements():
        np.testing.assert_allclose(equivariant_denoise(den, cfg, t.apply(x)), t.apply(out), atol=1e-13)


def test_linear_shrink_stays_linear_shrink(rng):
    x = rng.standard_normal((3, 3))
    cfg = EquivariantConfig(TransformSpec("rot90"), sigma=0.1)
    np.testing.assert_allclose(equivariant_denoise(LinearShrinkDenoiser(0.7), cfg, x), 0.7 * x, atol=1e-15)


def test_sampling_needs_rng_and_averages(prior, rng):
    cfg = EquivariantConfig(TransformSpec("circular_translation", max_shift=1), sigma=0.3, n_mc=1)
    x = rng.standard_normal((2, 2))
    with pytest.raises(ValueError):
        equivariant_denoise(GmmOracleDenoiser(prior), cfg, x)
    # Single-sample directions average to lam * s(x).
    cfg = EquivariantConfig(TransformSpec("rot90"), sigma=0.3, lam=2.0, enumerate_finite=False)
    draws = np.mean([single_sample_direction(GmmOracleDenoiser(prior), cfg, x, rng)[0] for _ in range(20000)],
                    axis=0)
    exact = 2.0 * exact_equivariant_score(prior, TransformSpec("rot90"), 0.3, x)
    np.testing.assert_allclose(draws, exact, atol=0.05 * np.abs(exact).max() + 1e-3)


@pytest.mark.parametrize("kw", [dict(sigma=0), dict(lam=-1), dict(n_mc=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EquivariantConfig(**kw)
