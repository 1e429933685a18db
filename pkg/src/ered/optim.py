"""Stochastic gradient restoration loop (ERED) and its RED special case.

Each iteration draws one transform ``G`` and steps along::

    x <- x - delta_k * grad f(x) - delta_k * (lam / sigma^2) J_G(x)^T (G(x) - D(G(x)))

When the denoiser is a Gaussian-mixture oracle, every logged iteration
also records the exact gradient norm of the smoothed objective and the
noise term of the stochastic gradient.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .denoisers import Denoiser
from .equivariant import oracle_terms, oracle_terms_batch
from .forward import POSITIVITY_FLOOR, ForwardModel
from .gmm import GmmPrior
from .transforms import TransformSpec, sample

X0_POLICIES = ("default", "observation", "adjoint", "constant")


@dataclass(frozen=True)
class StepSchedule:
    """``delta_k = delta0`` (constant) or ``delta0 / (k + 1)^alpha`` (polynomial)."""

    kind: str = "constant"
    delta0: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial"):
            raise ValueError(f"unknown step schedule {self.kind!r}")
        if self.delta0 <= 0:
            raise ValueError("delta0 must be positive")

    def __call__(self, k: int) -> float:
        if self.kind == "constant":
            return self.delta0
        return self.delta0 / (k + 1) ** self.alpha

    @property
    def decreasing_summable(self) -> bool:
        """Whether the steps sum to infinity while their squares do not."""
        return self.kind == "polynomial" and 0.5 < self.alpha <= 1.0


def step_size(schedule: StepSchedule, k: int) -> float:
    if k < 0:
        raise ValueError("k must be nonnegative")
    return schedule(k)


@dataclass(frozen=True)
class SigmaSchedule:
    """Constant denoiser level, or a log-linear decrease over the first part of the run."""

    kind: str = "constant"
    sigma0: float = 0.05
    sigma_final: float | None = None
    anneal_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in ("constant", "annealed"):
            raise ValueError(f"unknown sigma schedule {self.kind!r}")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if self.kind == "annealed":
            if self.sigma_final is None or not 0 < self.sigma_final <= self.sigma0:
                raise ValueError("annealing needs 0 < sigma_final <= sigma0")
            if not 0 < self.anneal_fraction <= 1:
                raise ValueError("anneal_fraction must lie in (0, 1]")

    def at(self, k: int, n_iter: int) -> float:
        if self.kind == "constant":
            return self.sigma0
        span = max(1, int(round(self.anneal_fraction * n_iter)) - 1)
        t = min(1.0, k / span)
        return math.exp((1 - t) * math.log(self.sigma0) + t * math.log(self.sigma_final))


@dataclass(frozen=True)
class EredRunConfig:
    denoiser: Denoiser
    lam: float = 1.0
    step: StepSchedule = field(default_factory=StepSchedule)
    sigma: SigmaSchedule = field(default_factory=SigmaSchedule)
    iterations: int = 100
    transform: TransformSpec = field(default_factory=lambda: TransformSpec("identity"))
    seed: int = 0
    x0: str | np.ndarray = "default"
    trace_stride: int = 1
    snapshot_stride: int = 0
    positivity_floor: bool = False
    n_mc: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.trace_stride < 1 or self.n_mc < 1:
            raise ValueError("trace_stride and n_mc must be at least 1")
        if isinstance(self.x0, str) and self.x0 not in X0_POLICIES:
            raise ValueError(f"unknown x0 policy {self.x0!r}")

    def describe(self) -> dict[str, Any]:
        return {
            "lambda": self.lam,
            "step": {"kind": self.step.kind, "delta0": self.step.delta0, "alpha": self.step.alpha},
            "sigma": {
                "kind": self.sigma.kind,
                "sigma0": self.sigma.sigma0,
                "sigma_final": self.sigma.sigma_final,
                "anneal_fraction": self.sigma.anneal_fraction,
            },
            "iterations": self.iterations,
            "transform": self.transform.to_dict(),
            "denoiser": self.denoiser.to_dict(),
            "seed": self.seed,
            "x0": self.x0 if isinstance(self.x0, str) else "explicit",
            "trace_stride": self.trace_stride,
            "positivity_floor": self.positivity_floor,
            "n_mc": self.n_mc,
        }


TRACE_COLUMNS = (
    "k",
    "f",
    "objective",
    "grad_norm",
    "direction_norm",
    "xi_norm",
    "xi_mean_norm",
    "xi_second_moment",
    "sigma_k",
    "delta_k",
    "transform",
)


@dataclass
class RunTrace:
    """Per-logged-iteration diagnostics plus the final iterate.

    Oracle columns (``objective``, ``grad_norm`` and the ``xi_*`` noise
    statistics) are NaN when no mixture prior is available.
    """

    columns: dict[str, np.ndarray]
    x: np.ndarray
    metadata: dict[str, Any]
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    wall_time: float = 0.0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __len__(self) -> int:
        return len(self.columns["k"])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for i in range(len(self)):
                row = []
                for name in TRACE_COLUMNS:
                    v = self.columns[name][i]
                    if isinstance(v, (float, np.floating)):
                        row.append("" if math.isnan(v) else repr(float(v)))
                    else:
                        row.append(str(v))
                w.writerow(row)


class DivergenceError(RuntimeError):
    """Raised when an iterate stops being finite; carries the partial trace."""

    def __init__(self, message: str, trace: RunTrace):
        super().__init__(message)
        self.trace = trace


def _initial_point(cfg: EredRunConfig, model: ForwardModel, y: np.ndarray) -> np.ndarray:
    if not isinstance(cfg.x0, str):
        return np.array(cfg.x0, dtype=np.float64)
    if cfg.x0 == "default":
        x = model.initial_point(y)
    elif cfg.x0 == "observation":
        x = np.array(y, dtype=np.float64)
    elif cfg.x0 == "adjoint":
        x = model.adjoint(y)
    else:
        shape = model.adjoint(y).shape
        x = np.full(shape, float(np.mean(y)))
    return np.array(x, dtype=np.float64)


def _oracle_prior(cfg: EredRunConfig, prior: GmmPrior | None) -> GmmPrior | None:
    if prior is not None:
        return prior
    return getattr(cfg.denoiser, "prior", None)


def ered_run(
    cfg: EredRunConfig,
    model: ForwardModel,
    y: np.ndarray,
    prior: GmmPrior | None = None,
) -> RunTrace:
    """Run the stochastic restoration loop for ``cfg.iterations`` steps.

    The run is fully determined by ``cfg.seed``. Traces stop with a
    :class:`DivergenceError` as soon as an iterate becomes non-finite.
    """
    if model.kind == "despeckle" and not cfg.positivity_floor:
        raise ValueError("despeckling runs need positivity_floor=True")
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    y = np.asarray(y, dtype=np.float64)
    x = _initial_point(cfg, model, y)
    if cfg.positivity_floor:
        x = np.maximum(x, POSITIVITY_FLOOR)
    oracle = _oracle_prior(cfg, prior)
    spec, lam, n_iter = cfg.transform, cfg.lam, cfg.iterations
    rows: dict[str, list] = {name: [] for name in ("k", "f", "direction_norm", "sigma_k", "delta_k", "transform")}
    # Logged iterates, directions and data gradients for the oracle columns.
    logged_x: list[np.ndarray] = []
    logged_dir: list[np.ndarray] = []
    logged_grad: list[np.ndarray] = []
    snapshots: dict[int, np.ndarray] = {}
    max_norm = float(np.linalg.norm(x))

    def trace(final_x, status):
        cols = {name: np.asarray(vals) for name, vals in rows.items()}
        cols.update(_oracle_columns(oracle, spec, lam, cols, logged_x, logged_dir, logged_grad))
        meta = {
            "config": cfg.describe(),
            "model": model.kind,
            "status": status,
            "max_iterate_norm": max_norm,
            "steps_satisfy_decrease_conditions": cfg.step.decreasing_summable,
            "oracle": oracle is not None,
        }
        return RunTrace(cols, final_x, meta, snapshots, time.perf_counter() - start)

    for k in range(n_iter):
        delta = cfg.step(k)
        sigma = cfg.sigma.at(k, n_iter)
        grad_f = model.fidelity_grad(x, y)
        if cfg.n_mc == 1:
            t = sample(spec, rng, sigma)
            gx = t.apply(x)
            direction = t.jtvp(x, gx - cfg.denoiser(gx, sigma)) * (lam / sigma**2)
            label = t.label
        else:
            direction = np.zeros_like(x)
            labels = []
            for _ in range(cfg.n_mc):
                t = sample(spec, rng, sigma)
                gx = t.apply(x)
                direction += t.jtvp(x, gx - cfg.denoiser(gx, sigma))
                labels.append(t.label)
            direction *= lam / (sigma**2 * cfg.n_mc)
            label = "+".join(labels)

        if k % cfg.trace_stride == 0 or k == n_iter - 1:
            rows["k"].append(k)
            rows["f"].append(model.fidelity(x, y))
            rows["direction_norm"].append(float(np.linalg.norm(direction)))
            rows["sigma_k"].append(sigma)
            rows["delta_k"].append(delta)
            rows["transform"].append(label)
            if oracle is not None:
                logged_x.append(x)
                logged_dir.append(direction)
                logged_grad.append(grad_f)
        if cfg.snapshot_stride and k % cfg.snapshot_stride == 0:
            snapshots[k] = x.copy()

        x_new = x - delta * (grad_f + direction)
        if cfg.positivity_floor:
            x_new = np.maximum(x_new, POSITIVITY_FLOOR)
        if not np.all(np.isfinite(x_new)):
            raise DivergenceError(
                f"non-finite iterate at k={k + 1} "
                f"(|grad f|={np.linalg.norm(grad_f):.3g}, |direction|={np.linalg.norm(direction):.3g})",
                trace(x, "diverged"),
            )
        x = x_new
        max_norm = max(max_norm, float(np.linalg.norm(x)))

    return trace(x, "ok")


def _oracle_columns(oracle, spec, lam, cols, xs, dirs, grads) -> dict[str, np.ndarray]:
    """Objective, exact gradient norm and stochastic-gradient noise ``xi_k`` per logged row.

    ``xi_k`` is the sampled direction minus its exact expectation under the
    prior, ``lam * s(x_k)``; running statistics average over logged rows.
    """
    n = len(cols["k"])
    names = ("objective", "grad_norm", "xi_norm", "xi_mean_norm", "xi_second_moment")
    if oracle is None or n == 0:
        return {name: np.full(n, np.nan) for name in names}
    X = np.stack(xs)
    r, s = oracle_terms_batch(oracle, spec, cols["sigma_k"], X)
    axes = tuple(range(1, X.ndim))
    grad = np.stack(grads) + lam * s
    xi = np.stack(dirs) - lam * s
    xi_sq = np.sum(xi * xi, axis=axes)
    counts = np.arange(1, n + 1)
    xi_mean = np.cumsum(xi, axis=0) / counts.reshape((-1,) + (1,) * len(axes))
    return {
        "objective": cols["f"] + lam * r,
        "grad_norm": np.sqrt(np.sum(grad * grad, axis=axes)),
        "xi_norm": np.sqrt(xi_sq),
        "xi_mean_norm": np.sqrt(np.sum(xi_mean * xi_mean, axis=axes)),
        "xi_second_moment": np.cumsum(xi_sq) / counts,
    }


def red_run(cfg: EredRunConfig, model: ForwardModel, y: np.ndarray, prior: GmmPrior | None = None) -> RunTrace:
    """Plain RED: the same loop with the transform set reduced to the identity."""
    return ered_run(replace(cfg, transform=TransformSpec("identity")), model, y, prior)


def grad_norm_oracle(
    prior: GmmPrior | None,
    transform: TransformSpec,
    lam: float,
    sigma: float,
    model: ForwardModel,
    y: np.ndarray,
    x: np.ndarray,
    n_mc: int = 4096,
    rng: np.random.Generator | None = None,
) -> float:
    """``|grad f(x) + lam * s(x)|`` with the exact equivariant score of ``prior``."""
    if prior is None:
        raise ValueError("the oracle gradient norm needs a Gaussian-mixture prior")
    _, s = oracle_terms(prior, transform, sigma, x, n_mc, rng)
    return float(np.linalg.norm(model.fidelity_grad(x, y) + lam * s))


def objective_oracle(prior, transform, lam, sigma, model, y, x, n_mc=4096, rng=None) -> float:
    """``f(x) + lam * r(x)`` with the exact equivariant regularizer of ``prior``."""
    r, _ = oracle_terms(prior, transform, sigma, x, n_mc, rng)
    return model.fidelity(x, y) + lam * r
