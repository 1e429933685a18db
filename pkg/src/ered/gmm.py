"""Isotropic Gaussian-mixture priors with closed-form smoothing.

Smoothing a mixture with ``N(0, sigma^2 I)`` only inflates each component's
variance, so the smoothed density, its score and the MMSE denoiser are all
available exactly. These serve as ground truth for everything else.
"""

from __future__ import annotations

import math
from typing import Any

import numpy as np


class GmmPrior:
    """Mixture ``sum_j w_j N(mu_j, tau_j^2 I)`` over arrays of shape ``shape``.

    Treat instances as immutable; evaluation is pure.
    """

    def __init__(self, weights, means, stds, shape=None):
        w = np.asarray(weights, dtype=np.float64).ravel()
        mu = np.asarray(means, dtype=np.float64)
        mu = mu.reshape(len(w), -1)
        tau = np.asarray(stds, dtype=np.float64).ravel()
        if tau.size == 1 and len(w) > 1:
            tau = np.full(len(w), tau[0])
        if len(tau) != len(w):
            raise ValueError("one std per component is required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(tau <= 0):
            raise ValueError("component stds must be positive")
        if not np.all(np.isfinite(mu)):
            raise ValueError("means must be finite")
        if shape is None:
            shape = (mu.shape[1],)
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != mu.shape[1]:
            raise ValueError(f"shape {shape} does not match dimension {mu.shape[1]}")
        self.weights = w
        self.means = mu
        self.stds = tau
        self.shape = shape
        with np.errstate(divide="ignore"):
            self._log_w = np.log(w)

    def __repr__(self):
        return f"GmmPrior(components={self.n_components}, shape={self.shape})"

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _flatten(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.shape or (x.ndim == 1 and x.size == self.dim):
            return x.reshape(1, self.dim), False
        if x.shape[1:] == self.shape or (x.ndim == 2 and x.shape[1] == self.dim):
            return x.reshape(x.shape[0], self.dim), True
        raise ValueError(f"input of shape {x.shape} does not match prior shape {self.shape}")

    def evaluate(self, x: np.ndarray, sigma: float = 0.0, mmse: bool = True) -> dict[str, Any]:
        """Log density, score, responsibilities and (optionally) the MMSE estimate at ``x``.

        ``x`` is a single point (shape ``self.shape``) or a batch with a leading axis.
        Returned arrays keep that batching.
        """
        X, batched = self._flatten(x)
        sig2 = np.asarray(sigma, dtype=np.float64) ** 2
        if np.any(sig2 < 0) or np.any(np.asarray(sigma) < 0):
            raise ValueError("sigma must be nonnegative")
        if sig2.ndim:
            sig2 = sig2.reshape(-1, 1)  # one level per batch row
        var = self.stds**2 + sig2  # (K,) or (n, K)
        diff = self.means - X[:, None, :]  # (n, K, d)
        sq = np.einsum("nkd,nkd->nk", diff, diff)
        log_comp = (self._log_w - 0.5 * self.dim * np.log(2 * np.pi * var)) - 0.5 * sq / var
        top = log_comp.max(axis=1, keepdims=True)
        ex = np.exp(log_comp - top)
        tot = ex.sum(axis=1, keepdims=True)
        resp = ex / tot
        score = np.einsum("nk,nkd->nd", resp / var, diff)
        out_shape = (X.shape[0], *self.shape) if batched else self.shape
        log_p = (top + np.log(tot))[:, 0]
        out = {
            "log_p": log_p if batched else float(log_p[0]),
            "score": score.reshape(out_shape),
            "resp": resp if batched else resp[0],
        }
        if mmse:
            # Per-component posterior mean x + (sigma^2 / var_j)(mu_j - x), mixed by responsibility.
            post = np.einsum("nk,nkd->nd", resp * (sig2 / var), diff)
            out["mmse"] = (X + post).reshape(out_shape)
        return out

    def log_density(self, x, sigma: float = 0.0):
        return self.evaluate(x, sigma, mmse=False)["log_p"]

    def score(self, x, sigma: float = 0.0) -> np.ndarray:
        return self.evaluate(x, sigma, mmse=False)["score"]

    def mmse(self, x, sigma: float) -> np.ndarray:
        if np.any(np.asarray(sigma) <= 0):
            raise ValueError("the MMSE denoiser needs sigma > 0")
        return self.evaluate(x, sigma)["mmse"]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return (self.means[idx] + self.stds[idx, None] * z).reshape(n, *self.shape)

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "shape": list(self.shape),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GmmPrior:
        return cls(d["weights"], d["means"], d["stds"], d.get("shape"))


def gmm_log_density(prior: GmmPrior, sigma: float, x: np.ndarray):
    """``log p_sigma(x)`` with ``p_sigma = N_sigma * p``."""
    return prior.log_density(x, sigma)


def gmm_score(prior: GmmPrior, sigma: float, x: np.ndarray) -> np.ndarray:
    """``grad log p_sigma(x)``."""
    return prior.score(x, sigma)


def gmm_mmse_denoise(prior: GmmPrior, sigma: float, x: np.ndarray) -> np.ndarray:
    """Posterior mean ``E[x0 | x0 + sigma*n = x]``; equals ``x + sigma^2 * score`` by Tweedie."""
    return prior.mmse(x, sigma)


def random_prior(
    rng: np.random.Generator,
    dim: int,
    n_components: int,
    spread: float = 2.0,
    std_range: tuple[float, float] = (0.2, 1.5),
    shape: tuple[int, ...] | None = None,
) -> GmmPrior:
    w = rng.dirichlet(np.ones(n_components))
    w = w / w.sum()
    means = spread * rng.standard_normal((n_components, dim))
    stds = rng.uniform(*std_range, size=n_components)
    return GmmPrior(w, means, stds, shape)


def symmetrize(prior: GmmPrior, transforms) -> GmmPrior:
    """Close a prior under a finite set of linear isometries.

    Each component is replicated at every image of its mean (weights split
    evenly), which makes ``p o g = p`` for every ``g`` in a group.
    """
    weights, means, stds = [], [], []
    for w, mu, tau in zip(prior.weights, prior.means, prior.stds):
        for t in transforms:
            weights.append(w / len(transforms))
            means.append(np.asarray(t.apply(mu.reshape(prior.shape))).ravel())
            stds.append(tau)
    weights = np.asarray(weights)
    return GmmPrior(weights / weights.sum(), means, stds, prior.shape)
