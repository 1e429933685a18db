"""Executable checks of the identities and limit claims behind ERED.

Each check returns a :class:`CheckReport`. Hard checks pass or fail against
a stated tolerance; informational checks (``hard=False``) always pass and
only record fitted quantities. Limits (``sigma -> 0``, ``k -> inf``) are
rendered as monotone decrease plus a threshold over finite sequences.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.optimize import curve_fit
from scipy.stats import linregress

from .denoisers import Denoiser, GmmOracleDenoiser, LinearShrinkDenoiser, PerturbedOracleDenoiser
from .equivariant import EquivariantConfig, equivariant_denoise, oracle_terms
from .forward import ForwardModel, gaussian_kernel
from .gmm import GmmPrior, random_prior, symmetrize
from .optim import EredRunConfig, RunTrace, SigmaSchedule, StepSchedule, ered_run
from .transforms import Flip, SubpixelRotation, Transform, TransformSpec, dense_matrix


@dataclass
class CheckReport:
    name: str
    passed: bool
    measured: dict[str, Any]
    tolerance: dict[str, Any]
    parameters: dict[str, Any]
    runtime: float = 0.0
    worst_point: list | None = None
    hard: bool = True

    @property
    def status(self) -> str:
        return "pass" if self.passed else "fail"

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["status"] = self.status
        return _jsonable(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _timed(fn: Callable[..., CheckReport]) -> Callable[..., CheckReport]:
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        report = fn(*args, **kwargs)
        report.runtime = time.perf_counter() - t0
        return report

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@dataclass(frozen=True)
class CompactGrid:
    """Evaluation set ``K``: a box lattice or uniform random points, closed under a group.

    ``per_axis`` points per coordinate give a lattice (small dimensions only);
    otherwise ``n_random`` points are drawn with ``seed``.
    """

    shape: tuple[int, ...]
    low: float = -2.0
    high: float = 2.0
    per_axis: int | None = None
    n_random: int = 200
    seed: int = 0

    def base_points(self) -> np.ndarray:
        d = math.prod(self.shape)
        if self.per_axis is not None:
            axis = np.linspace(self.low, self.high, self.per_axis)
            pts = np.array(list(itertools.product(axis, repeat=d)))
        else:
            rng = np.random.default_rng(self.seed)
            pts = rng.uniform(self.low, self.high, size=(self.n_random, d))
        return pts.reshape(-1, *self.shape)

    def points(self, spec: TransformSpec | None = None) -> np.ndarray:
        """Base points plus their images under every element of a finite ``spec``."""
        pts = self.base_points()
        if spec is None or not spec.finite:
            return pts
        images = [np.stack([t.apply(x) for x in pts]) for t, _ in spec.elements()]
        allpts = np.concatenate(images).reshape(-1, math.prod(self.shape))
        uniq = np.unique(np.round(allpts, 12), axis=0)
        return uniq.reshape(-1, *self.shape)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _report_worst(errors: np.ndarray, pts: np.ndarray) -> list:
    return pts[int(np.argmax(errors))].tolist()


# Tweedie ------------------------------------------------------------------


@_timed
def check_tweedie(
    n_priors: int = 200,
    sigmas: tuple[float, ...] = (0.05, 0.3, 1.0),
    max_dim: int = 8,
    max_components: int = 5,
    points_per_prior: int = 20,
    seed: int = 0,
    tol: float = 1e-10,
) -> CheckReport:
    """``(x - D*(x)) / sigma^2`` against ``-grad log p_sigma(x)``, relative error."""
    rng = np.random.default_rng(seed)
    worst, worst_pt = 0.0, None
    for _ in range(n_priors):
        d = int(rng.integers(1, max_dim + 1))
        prior = random_prior(rng, d, int(rng.integers(1, max_components + 1)))
        for sigma in sigmas:
            x = prior.sample(points_per_prior, rng) + sigma * rng.standard_normal((points_per_prior, d))
            ev = prior.evaluate(x, sigma)
            lhs = (x - ev["mmse"]) / sigma**2
            rhs = -ev["score"]
            err = np.linalg.norm(lhs - rhs, axis=1) / np.maximum(np.linalg.norm(rhs, axis=1), 1e-300)
            i = int(np.argmax(err))
            if err[i] > worst:
                worst, worst_pt = float(err[i]), {"x": x[i].tolist(), "sigma": sigma, "dim": d}
    return CheckReport(
        "tweedie",
        worst < tol,
        {"max_relative_error": worst},
        {"max_relative_error": tol},
        {"n_priors": n_priors, "sigmas": list(sigmas), "max_dim": max_dim,
         "max_components": max_components, "seed": seed},
        worst_point=worst_pt,
    )


# Score composition ----------------------------------------------------------


def _fd_gradient(fn: Callable[[np.ndarray], np.ndarray], X: np.ndarray, h: float) -> np.ndarray:
    """Central differences of a batched scalar function ``fn(X) -> (n,)``."""
    n = X.shape[0]
    flat = X.reshape(n, -1)
    grad = np.empty_like(flat)
    for i in range(flat.shape[1]):
        e = np.zeros(flat.shape[1])
        e[i] = h
        grad[:, i] = (fn((flat + e).reshape(X.shape)) - fn((flat - e).reshape(X.shape))) / (2 * h)
    return grad.reshape(X.shape)


def _check_elements(spec: TransformSpec, n_sampled: int, seed: int) -> list[Transform]:
    if spec.finite:
        return [t for t, _ in spec.elements()]
    rng = np.random.default_rng(seed)
    return [spec.sample(rng, 1.0) for _ in range(n_sampled)]


@_timed
def check_score_composition(
    prior: GmmPrior,
    spec: TransformSpec,
    grid: CompactGrid,
    sigma: float = 0.5,
    method: str = "analytic",
    fd_step: float = 1e-5,
    n_sampled: int = 4,
    tol: float | None = None,
    seed: int = 0,
) -> CheckReport:
    """Chain rule ``grad(log p o g)(x) = J_g(x)^T grad log p(g(x))`` on a grid.

    ``analytic`` obtains the reference gradient from the dense matrix of ``g``
    (probed through ``apply`` only); ``fd`` uses central differences.
    """
    if method not in ("analytic", "fd"):
        raise ValueError("method must be 'analytic' or 'fd'")
    tol = tol if tol is not None else (1e-10 if method == "analytic" else 1e-5)
    pts = grid.points()
    n = len(pts)
    worst, worst_pt = 0.0, None
    for t in _check_elements(spec, n_sampled, seed):
        gx = np.stack([t.apply(x) for x in pts])
        score = prior.score(gx, sigma)
        claimed = np.stack([t.jtvp(x, s) for x, s in zip(pts, score)])
        if method == "analytic":
            M, _ = dense_matrix(t, grid.shape)
            ref = (score.reshape(n, -1) @ M).reshape(pts.shape)
        else:
            ref = _fd_gradient(
                lambda X: prior.log_density(np.stack([t.apply(x) for x in X]), sigma), pts, fd_step
            )
        err = np.max(np.abs(claimed - ref).reshape(n, -1), axis=1)
        if err.max() > worst:
            worst, worst_pt = float(err.max()), {"x": _report_worst(err, pts), "transform": t.label}
    return CheckReport(
        f"score_composition[{spec.kind},{method}]",
        worst < tol,
        {"max_abs_error": worst},
        {"max_abs_error": tol},
        {"transform": spec.to_dict(), "sigma": sigma, "grid": grid.to_dict(), "method": method, "seed": seed},
        worst_point=worst_pt,
    )


# Haar invariance -------------------------------------------------------------


def group_average_log_density(prior: GmmPrior, spec: TransformSpec, sigma: float, X: np.ndarray) -> np.ndarray:
    """``r(x) = -sum_g p_g log p_sigma(g(x))`` for a batch of points."""
    r = np.zeros(len(X))
    for t, p in spec.elements():
        r -= p * prior.log_density(np.stack([t.apply(x) for x in X]), sigma)
    return r


@_timed
def check_haar_invariance(
    prior: GmmPrior, spec: TransformSpec, grid: CompactGrid, sigma: float = 0.3, tol: float = 1e-10
) -> CheckReport:
    """The group-averaged regularizer is unchanged by any group element."""
    if not spec.finite:
        raise ValueError("Haar invariance is checked on finite groups")
    pts = grid.points(spec)
    base = group_average_log_density(prior, spec, sigma, pts)
    worst, worst_pt = 0.0, None
    for t, _ in spec.elements():
        moved = group_average_log_density(prior, spec, sigma, np.stack([t.apply(x) for x in pts]))
        err = np.abs(moved - base)
        if err.max() > worst:
            worst, worst_pt = float(err.max()), {"x": _report_worst(err, pts), "transform": t.label}
    return CheckReport(
        f"haar_invariance[{spec.kind}]",
        worst < tol,
        {"max_abs_error": worst, "n_points": len(pts)},
        {"max_abs_error": tol},
        {"transform": spec.to_dict(), "sigma": sigma, "grid": grid.to_dict()},
        worst_point=worst_pt,
    )


def prior_invariance_error(prior: GmmPrior, spec: TransformSpec, pts: np.ndarray) -> float:
    """``max |log p(g(x)) - log p(x)|`` over the grid and the group."""
    base = prior.log_density(pts, 0.0)
    return max(
        float(np.max(np.abs(prior.log_density(np.stack([t.apply(x) for x in pts]), 0.0) - base)))
        for t, _ in spec.elements()
    )


# Score convergence ----------------------------------------------------------


def single_gaussian_score_error(tau: float, sigma: float, max_norm: float) -> float:
    """Sup-norm gap between the scores of ``N(0, tau^2)`` and its smoothed version."""
    return abs(1.0 / tau**2 - 1.0 / (tau**2 + sigma**2)) * max_norm


def score_errors(prior: GmmPrior, spec: TransformSpec, sigmas, pts: np.ndarray) -> np.ndarray:
    """``e(sigma) = max_x |s(x) - s_sigma(x)|`` with exact enumeration of ``spec``."""
    s0 = -prior.score(pts, 0.0).reshape(len(pts), -1)
    out = []
    for sigma in sigmas:
        s = np.stack([oracle_terms(prior, spec, sigma, x)[1] for x in pts]).reshape(len(pts), -1)
        out.append(float(np.max(np.linalg.norm(s - s0, axis=1))))
    return np.array(out)


@_timed
def check_score_convergence(
    prior: GmmPrior,
    spec: TransformSpec,
    grid: CompactGrid,
    sigmas: tuple[float, ...] = (0.5, 0.2, 0.1, 0.05, 0.02, 0.01),
    ratio_tol: float = 0.1,
    invariance_tol: float = 1e-12,
) -> CheckReport:
    """Sup-norm score error shrinks strictly along a decreasing ``sigma`` list.

    The prior's invariance under ``spec`` is asserted first.
    """
    pts = grid.points(spec)
    inv = prior_invariance_error(prior, spec, pts)
    params = {"transform": spec.to_dict(), "sigmas": list(sigmas), "grid": grid.to_dict(),
              "n_components": prior.n_components}
    tol = {"prior_invariance": invariance_tol, "ratio": ratio_tol, "strictly_decreasing": True}
    if inv >= invariance_tol:
        return CheckReport("score_convergence", False, {"prior_invariance": inv}, tol, params)
    e = score_errors(prior, spec, sigmas, pts)
    decreasing = bool(np.all(np.diff(e) < 0))
    ratio = float(e[-1] / e[0]) if e[0] > 0 else math.inf
    return CheckReport(
        "score_convergence",
        decreasing and ratio <= ratio_tol,
        {"prior_invariance": inv, "errors": e.tolist(), "ratio": ratio, "strictly_decreasing": decreasing},
        tol,
        params,
    )


@_timed
def check_single_gaussian_score(
    tau: float = 0.8,
    spec: TransformSpec | None = None,
    grid: CompactGrid | None = None,
    sigmas: tuple[float, ...] = (0.5, 0.2, 0.1, 0.05, 0.02, 0.01),
    tol: float = 1e-9,
) -> CheckReport:
    """Measured score error of a centred Gaussian against its closed form."""
    spec = spec or TransformSpec("flip")
    grid = grid or CompactGrid((2, 2), per_axis=5)
    prior = GmmPrior([1.0], np.zeros((1, math.prod(grid.shape))), [tau], grid.shape)
    pts = grid.points(spec)
    measured = score_errors(prior, spec, sigmas, pts)
    max_norm = float(np.max(np.linalg.norm(pts.reshape(len(pts), -1), axis=1)))
    expected = np.array([single_gaussian_score_error(tau, s, max_norm) for s in sigmas])
    gap = float(np.max(np.abs(measured - expected)))
    return CheckReport(
        "score_convergence_single_gaussian",
        gap < tol,
        {"measured": measured.tolist(), "closed_form": expected.tolist(), "max_gap": gap},
        {"max_gap": tol},
        {"tau": tau, "transform": spec.to_dict(), "sigmas": list(sigmas), "grid": grid.to_dict()},
    )


# Critical points -------------------------------------------------------------


def _objective_terms(prior, spec, lam, model, y, sigma, x):
    r, s = oracle_terms(prior, spec, sigma, x)
    return model.fidelity(x, y) + lam * r, model.fidelity_grad(x, y) + lam * s


def find_critical_point(
    prior: GmmPrior,
    spec: TransformSpec,
    lam: float,
    model: ForwardModel,
    y: np.ndarray,
    sigma: float,
    x0: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 20_000,
    max_step: float = 10.0,
) -> tuple[np.ndarray, float, int]:
    """Full-gradient descent with Armijo backtracking on ``f + lam * r_sigma``.

    ``sigma = 0`` uses the unsmoothed prior. Returns ``(x, |grad|, iterations)``.
    """
    x = np.array(x0, dtype=np.float64)
    F, g = _objective_terms(prior, spec, lam, model, y, sigma, x)
    step = 1.0
    for it in range(max_iter):
        gn = float(np.linalg.norm(g))
        if gn < tol:
            return x, gn, it
        step = min(2.0 * step, max_step)
        while True:
            x_new = x - step * g
            F_new, g_new = _objective_terms(prior, spec, lam, model, y, sigma, x_new)
            decrease = 0.5 * step * gn**2
            if decrease > 64 * np.finfo(float).eps * max(1.0, abs(F)):
                if F_new <= F - decrease:
                    break
            elif np.linalg.norm(g_new) < 0.999 * gn:
                # Below the rounding error of F the Armijo test is blind; a
                # smaller gradient is required instead.
                break
            step *= 0.5
            if step < 1e-14:
                raise RuntimeError(f"line search failed at |grad|={gn:.3g}")
        x, F, g = x_new, F_new, g_new
    return x, float(np.linalg.norm(g)), max_iter


@_timed
def check_critical_point_convergence(
    prior: GmmPrior,
    spec: TransformSpec,
    model: ForwardModel,
    y: np.ndarray,
    lam: float = 1.0,
    sigmas: tuple[float, ...] = (0.5, 0.2, 0.1, 0.05, 0.02, 0.01),
    x0: np.ndarray | None = None,
    final_tol: float = 1e-3,
    grad_tol: float = 1e-10,
) -> CheckReport:
    """Critical points of the smoothed objective approach one of the unsmoothed objective.

    Each ``sigma`` starts from the previous solution, so the sequence stays in
    one basin; the limit point is then found from the last smoothed solution.
    """
    x = np.array(y if x0 is None else x0, dtype=np.float64)
    sols, grads = [], []
    for sigma in sigmas:
        x, gn, _ = find_critical_point(prior, spec, lam, model, y, sigma, x, grad_tol)
        sols.append(x)
        grads.append(gn)
    x_star, g_star, _ = find_critical_point(prior, spec, lam, model, y, 0.0, x, grad_tol)
    dist = np.array([np.linalg.norm(s - x_star) for s in sols])
    decreasing = bool(np.all(np.diff(dist) < 0)) or bool(np.all(dist == 0))
    converged = max(grads + [g_star]) < grad_tol
    return CheckReport(
        "critical_point_convergence",
        decreasing and dist[-1] < final_tol and converged,
        {"distances": dist.tolist(), "grad_norms": grads + [g_star], "x_star": x_star.tolist(),
         "decreasing": decreasing},
        {"final_distance": final_tol, "grad_norm": grad_tol},
        {"transform": spec.to_dict(), "lambda": lam, "sigmas": list(sigmas), "model": model.kind,
         "sigma_y": model.sigma_y, "n_components": prior.n_components},
    )


def single_gaussian_critical_point(
    mu: np.ndarray, tau: float, model: ForwardModel, y: np.ndarray, lam: float, sigma: float
) -> np.ndarray:
    """Stationary point of ``f + lam * r_sigma`` for a Gaussian prior and Gaussian ``f``.

    Solves ``(A^T A / sigma_y^2 + lam / (tau^2 + sigma^2)) x = A^T y / sigma_y^2 + lam mu / (tau^2 + sigma^2)``
    with ``A`` assembled column by column.
    """
    shape = np.shape(mu)
    n = int(np.prod(shape))
    A = np.empty((int(np.prod(model.output_shape(shape))), n))
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        A[:, i] = model.forward(e.reshape(shape)).ravel()
        e[i] = 0.0
    c = lam / (tau**2 + sigma**2)
    lhs = A.T @ A / model.sigma_y**2 + c * np.eye(n)
    rhs = A.T @ np.ravel(y) / model.sigma_y**2 + c * np.ravel(mu)
    return np.linalg.solve(lhs, rhs).reshape(shape)


@_timed
def check_single_gaussian_critical_point(
    tau: float = 0.7,
    lam: float = 1.0,
    sigmas: tuple[float, ...] = (0.5, 0.2, 0.1, 0.05, 0.02, 0.01),
    seed: int = 0,
    tol: float = 1e-8,
) -> CheckReport:
    """Descent solutions against the linear-system solution, 4x4 deblurring."""
    rng = np.random.default_rng(seed)
    shape = (4, 4)
    spec = TransformSpec("flip")
    mu = np.full(shape, 0.3)  # flip-invariant mean
    prior = GmmPrior([1.0], mu.reshape(1, -1), [tau], shape)
    model = ForwardModel("deblur", kernel=gaussian_kernel(3, 0.8), sigma_y=0.5)
    y = model.degrade(rng.uniform(0, 1, shape), rng)
    gaps = []
    for sigma in sigmas:
        x, _, _ = find_critical_point(prior, spec, lam, model, y, sigma, y)
        gaps.append(float(np.max(np.abs(x - single_gaussian_critical_point(mu, tau, model, y, lam, sigma)))))
    return CheckReport(
        "critical_point_single_gaussian",
        max(gaps) < tol,
        {"max_abs_gap": gaps},
        {"max_abs_gap": tol},
        {"tau": tau, "lambda": lam, "sigmas": list(sigmas), "seed": seed},
    )


# Lipschitz preservation ----------------------------------------------------


@_timed
def check_lipschitz_preservation(
    denoiser: Denoiser,
    lipschitz: float,
    spec: TransformSpec,
    shape: tuple[int, ...] = (4, 4),
    n_pairs: int = 1000,
    sigma: float = 0.1,
    seed: int = 0,
    slack: float = 1e-9,
) -> CheckReport:
    """``|D~(x) - D~(y)| / |x - y| <= L`` for the enumerated equivariant denoiser."""
    rng = np.random.default_rng(seed)
    cfg = EquivariantConfig(spec, sigma=sigma, enumerate_finite=True)
    ratios = np.empty(n_pairs)
    for i in range(n_pairs):
        a, b = rng.standard_normal(shape), rng.standard_normal(shape)
        da = equivariant_denoise(denoiser, cfg, a)
        db = equivariant_denoise(denoiser, cfg, b)
        ratios[i] = np.linalg.norm(da - db) / np.linalg.norm(a - b)
    worst = float(ratios.max())
    return CheckReport(
        f"lipschitz_preservation[{spec.kind}]",
        worst <= lipschitz + slack,
        {"max_ratio": worst},
        {"max_ratio": lipschitz + slack},
        {"denoiser": denoiser.to_dict(), "transform": spec.to_dict(), "n_pairs": n_pairs, "seed": seed},
    )


# Growth -----------------------------------------------------------------------


def _growth_model(r, a, b, n):
    return a + b * r**n


@_timed
def check_assumption_growth(
    fn: Callable[[np.ndarray], np.ndarray],
    dim: int,
    radius: float = 10.0,
    n_radii: int = 20,
    samples: int = 64,
    seed: int = 0,
    label: str = "score",
) -> CheckReport:
    """Fit ``max_{|x|=r} |fn(x)| ~ a + b r^n``. Informational only.

    Any such fit implies a bound ``C (1 + r^n)`` with ``C = max(a, b)``.
    """
    rng = np.random.default_rng(seed)
    radii = np.linspace(radius / n_radii, radius, n_radii)
    dirs = rng.standard_normal((samples, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    peaks = np.array([max(float(np.linalg.norm(fn(r * u))) for u in dirs) for r in radii])
    (a, b, n), _ = curve_fit(
        _growth_model, radii, peaks, p0=(1.0, 1.0, 1.0), bounds=([0, 0, 0], [np.inf, np.inf, 10]), maxfev=20000
    )
    resid = peaks - _growth_model(radii, a, b, n)
    return CheckReport(
        f"assumption_growth[{label}]",
        True,
        {"exponent": float(n), "constant": float(max(a, b)), "intercept": float(a), "slope": float(b),
         "rms_residual": float(np.sqrt(np.mean(resid**2))),
         "peaks": peaks.tolist()},
        {},
        {"radius": radius, "n_radii": n_radii, "samples": samples, "seed": seed},
        hard=False,
    )


# Operators ------------------------------------------------------------------


def direct_circular_convolution(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Spatial circular convolution with the kernel centred at ``(kh // 2, kw // 2)``."""
    kh, kw = kernel.shape
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * np.roll(x, (i - kh // 2, j - kw // 2), axis=(0, 1))
    return out


@_timed
def check_operators(seed: int = 0, size: int = 32, tol: float = 1e-10, fd_tol: float = 1e-5) -> CheckReport:
    """FFT vs direct convolution, adjoint dot products and fidelity gradients."""
    rng = np.random.default_rng(seed)
    measured: dict[str, float] = {}
    kernels = {"gauss9": gaussian_kernel(9, 1.6), "rand5x3": rng.uniform(0, 1, (5, 3))}
    conv = 0.0
    for k in kernels.values():
        model = ForwardModel("deblur", kernel=k, sigma_y=0.1)
        x = rng.standard_normal((size, size))
        conv = max(conv, float(np.max(np.abs(model.forward(x) - direct_circular_convolution(x, model.kernel)))))
    measured["fft_vs_direct"] = conv

    def dot_gap(fwd, adj, in_shape, out_shape):
        u, v = rng.standard_normal(in_shape), rng.standard_normal(out_shape)
        return abs(float(np.sum(fwd(u) * v) - np.sum(u * adj(v))))

    deblur = ForwardModel("deblur", kernel=kernels["rand5x3"], sigma_y=0.1)
    sr = ForwardModel("super_resolution", kernel=gaussian_kernel(7, 1.2), sr_factor=2, sigma_y=0.1)
    rot = SubpixelRotation(0.37)
    shp = (size, size)
    measured["adjoint_deblur"] = max(dot_gap(deblur.forward, deblur.adjoint, shp, shp) for _ in range(5))
    measured["adjoint_sr"] = max(dot_gap(sr.forward, sr.adjoint, shp, sr.output_shape(shp)) for _ in range(5))
    measured["adjoint_subpixel_rotation"] = max(
        dot_gap(rot.apply, lambda v: rot.jtvp(v, v), shp, shp) for _ in range(5)
    )
    fd_errs = {}
    small = (6, 6)
    models = {
        "denoise": ForwardModel("denoise", sigma_y=0.5),
        "deblur": ForwardModel("deblur", kernel=gaussian_kernel(3, 0.8), sigma_y=0.5),
        "super_resolution": ForwardModel("super_resolution", kernel=gaussian_kernel(3, 0.8), sr_factor=2, sigma_y=0.5),
        "despeckle": ForwardModel("despeckle", looks=50),
    }
    for name, m in models.items():
        truth = rng.uniform(0.5, 1.5, small)
        y = m.degrade(truth, rng)
        x = rng.uniform(0.5, 1.5, small)
        g = m.fidelity_grad(x, y)
        fd = _fd_gradient(lambda X: np.array([m.fidelity(xx, y) for xx in X]), x[None], 1e-5)[0]
        fd_errs[name] = float(np.max(np.abs(fd - g)) / max(1.0, float(np.max(np.abs(g)))))
    measured.update({f"fidelity_grad_{k}": v for k, v in fd_errs.items()})
    hard_ok = all(v < tol for k, v in measured.items() if not k.startswith("fidelity_grad"))
    fd_ok = all(v < fd_tol for v in fd_errs.values())
    return CheckReport(
        "operators",
        hard_ok and fd_ok,
        measured,
        {"exact": tol, "finite_difference_relative": fd_tol},
        {"seed": seed, "size": size},
    )


# Stochastic convergence -----------------------------------------------------


@dataclass(frozen=True)
class ConvergenceProblem:
    """Four-pixel test problem for the stochastic convergence checks.

    The prior is symmetric under the horizontal flip only, so single-sample
    directions of the full flip group carry genuine noise.
    """

    lam: float = 0.03
    sigma: float = 0.5
    sigma_y: float = 0.25
    delta0: float = 0.1
    alpha: float = 0.75
    iterations: int = 100_000
    seed: int = 1
    y: tuple[tuple[float, ...], ...] = ((0.5, -0.2), (0.3, 0.8))

    def prior(self) -> GmmPrior:
        base = GmmPrior(
            [0.5, 0.5], [[1.0, 0.2, -0.5, 0.3], [-0.7, 0.4, 0.1, 0.9]], [0.5, 0.7], (2, 2)
        )
        return symmetrize(base, [Flip(False, False), Flip(False, True)])

    def model(self) -> ForwardModel:
        return ForwardModel("denoise", sigma_y=self.sigma_y)

    def config(self, denoiser: Denoiser, seed: int | None = None) -> EredRunConfig:
        return EredRunConfig(
            denoiser,
            lam=self.lam,
            step=StepSchedule("polynomial", self.delta0, self.alpha),
            sigma=SigmaSchedule("constant", self.sigma),
            iterations=self.iterations,
            transform=TransformSpec("flip"),
            seed=self.seed if seed is None else seed,
        )

    def run(self, eps: float = 0.0, seed: int | None = None) -> RunTrace:
        prior = self.prior()
        den = GmmOracleDenoiser(prior) if eps == 0 else PerturbedOracleDenoiser(prior, eps, seed=3)
        return ered_run(self.config(den, seed), self.model(), np.array(self.y), prior=prior)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@_timed
def check_unbiased_convergence(
    problem: ConvergenceProblem | None = None,
    trace: RunTrace | None = None,
    grad_tol: float = 1e-3,
    oscillation_tol: float = 1e-4,
    window: int = 10_000,
) -> CheckReport:
    """Exact oracle denoiser: gradient norm vanishes and the objective settles."""
    problem = problem or ConvergenceProblem()
    trace = trace if trace is not None else problem.run()
    g = float(trace["grad_norm"][-1])
    tail = trace["objective"][-window:]
    osc = float(np.max(tail) - np.min(tail))
    return CheckReport(
        "unbiased_convergence",
        g < grad_tol and osc < oscillation_tol,
        {"final_grad_norm": g, "objective_oscillation": osc, "max_iterate_norm": trace.metadata["max_iterate_norm"]},
        {"final_grad_norm": grad_tol, "objective_oscillation": oscillation_tol},
        problem.to_dict(),
    )


def plateau(trace: RunTrace, fraction: float = 0.1) -> float:
    g = trace["grad_norm"]
    return float(np.median(g[-max(1, int(len(g) * fraction)) :]))


@_timed
def check_biased_convergence(
    problem: ConvergenceProblem | None = None,
    eps_list: tuple[float, ...] = (1e-3, 1e-2, 1e-1),
    traces: dict[float, RunTrace] | None = None,
    r2_tol: float = 0.9,
) -> CheckReport:
    """Inexact denoiser: the gradient plateau grows with the bias and stays below ``M sqrt(eta)``.

    ``eta = lam * eps / sigma^2`` (flip Jacobians have unit norm). ``M`` is the
    smallest constant covering every plateau; ``R^2`` is that of a least-squares
    line through ``(log eta, log P)``.
    """
    problem = problem or ConvergenceProblem()
    traces = traces or {eps: problem.run(eps) for eps in eps_list}
    P = np.array([plateau(traces[e]) for e in eps_list])
    eta = np.array([problem.lam * e / problem.sigma**2 for e in eps_list])
    M = float(np.max(P / np.sqrt(eta)))
    fit = linregress(np.log(eta), np.log(P))
    r2 = float(fit.rvalue**2)
    nondecreasing = bool(np.all(np.diff(P) >= 0))
    bounded = bool(np.all(P <= M * np.sqrt(eta)))
    return CheckReport(
        "biased_convergence",
        nondecreasing and bounded and r2 >= r2_tol,
        {"plateaus": P.tolist(), "eta": eta.tolist(), "M": M, "loglog_slope": float(fit.slope),
         "r2": r2, "nondecreasing": nondecreasing},
        {"r2": r2_tol},
        {**problem.to_dict(), "eps": list(eps_list)},
    )


def trend_test(values: np.ndarray, n_batches: int = 10) -> tuple[float, float]:
    """One-sided test for a positive linear trend in ``values``.

    The series is cut into ``n_batches`` contiguous batches and the batch
    means are regressed on the batch index. Batches are long compared with
    the correlation time of the iterates, so the means are close to
    independent and the ordinary slope t-test (``n_batches - 2`` degrees of
    freedom) keeps its nominal size. Returns ``(slope, p_value)``.
    """
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2 * n_batches:
        raise ValueError(f"need at least {2 * n_batches} values, got {len(v)}")
    means = v[len(v) % n_batches :].reshape(n_batches, -1).mean(axis=1)
    fit = linregress(np.arange(n_batches, dtype=np.float64), means)
    slope, p_two = float(fit.slope), float(fit.pvalue)
    if not math.isfinite(p_two):  # constant series: no trend
        return slope, 1.0
    return slope, p_two / 2 if slope > 0 else 1 - p_two / 2


@_timed
def check_noise_moments(traces: dict[str, RunTrace], level: float = 0.05, n_batches: int = 10) -> CheckReport:
    """Second moment of the gradient noise shows no upward trend over the last half of each run."""
    measured = {}
    ok = True
    for name, tr in traces.items():
        sq = tr["xi_norm"] ** 2
        half = sq[len(sq) // 2 :]
        slope, p = trend_test(half, n_batches)
        measured[name] = {"slope": slope, "p_value": p, "second_moment": float(tr["xi_second_moment"][-1]),
                          "max_iterate_norm": tr.metadata["max_iterate_norm"]}
        ok &= p >= level and bool(np.all(np.isfinite(sq)))
    return CheckReport("noise_moments", ok, measured, {"p_value_min": level},
                       {"runs": sorted(traces), "n_batches": n_batches})


# Suites ---------------------------------------------------------------------


def _flip_invariant_bimodal(shape=(2, 2)) -> GmmPrior:
    d = math.prod(shape)
    base = GmmPrior([0.6, 0.4], [np.linspace(0.2, 1.0, d), np.linspace(-0.8, -0.1, d)], [0.5, 0.6], shape)
    return symmetrize(base, [t for t, _ in TransformSpec("flip").elements()])


def _asymmetric_prior(shape=(2, 2), seed: int = 11) -> GmmPrior:
    return random_prior(np.random.default_rng(seed), math.prod(shape), 3, spread=1.0, shape=shape)


def suite_tweedie(seed: int = 0) -> list[CheckReport]:
    return [check_tweedie(seed=seed)]


def suite_composition(seed: int = 0) -> list[CheckReport]:
    prior = _asymmetric_prior((3, 3), seed + 11)
    grid = CompactGrid((3, 3), n_random=50, seed=seed)
    out = [
        check_score_composition(prior, TransformSpec(kind), grid)
        for kind in ("identity", "flip", "rot90")
    ]
    out.append(check_score_composition(prior, TransformSpec("circular_translation", max_shift=2), grid))
    sub_prior = _asymmetric_prior((4, 4), seed + 12)
    out.append(
        check_score_composition(
            sub_prior, TransformSpec("subpixel_rotation"), CompactGrid((4, 4), n_random=20, seed=seed),
            method="fd", seed=seed,
        )
    )
    return out


def suite_haar(seed: int = 0) -> list[CheckReport]:
    prior = _asymmetric_prior((2, 2), seed + 11)
    grid = CompactGrid((2, 2), per_axis=6)
    out = [check_haar_invariance(prior, TransformSpec(k), grid) for k in ("identity", "flip", "rot90")]
    # Shifts in [-1, 1] are uniform on Z_3 x Z_3 only for a 3 x 3 image.
    out.append(
        check_haar_invariance(
            _asymmetric_prior((3, 3), seed + 13),
            TransformSpec("circular_translation", max_shift=1),
            CompactGrid((3, 3), n_random=1000, seed=seed),
        )
    )
    return out


def suite_score_convergence(seed: int = 0) -> list[CheckReport]:
    return [
        check_score_convergence(_flip_invariant_bimodal(), TransformSpec("flip"), CompactGrid((2, 2), per_axis=4)),
        check_single_gaussian_score(),
    ]


def suite_critical_points(seed: int = 0) -> list[CheckReport]:
    prior = _flip_invariant_bimodal()
    y = np.array([[0.9, 0.4], [0.5, 1.1]])
    return [
        check_critical_point_convergence(prior, TransformSpec("flip"), ForwardModel("denoise", sigma_y=0.5), y),
        check_single_gaussian_critical_point(seed=seed),
    ]


def suite_lipschitz(seed: int = 0) -> list[CheckReport]:
    den = LinearShrinkDenoiser(0.9)
    mix = TransformSpec("mixture", components=(TransformSpec("flip"), TransformSpec("rot90")), weights=(0.5, 0.5))
    return [
        check_lipschitz_preservation(den, 0.9, spec, seed=seed)
        for spec in (TransformSpec("identity"), TransformSpec("flip"), TransformSpec("rot90"), mix)
    ]


def suite_growth(seed: int = 0) -> list[CheckReport]:
    gauss = GmmPrior([1.0], [[0.0, 0.0, 0.0, 0.0]], [0.8])
    mixture = random_prior(np.random.default_rng(seed), 4, 3)
    pert = PerturbedOracleDenoiser(mixture, 0.1, seed=seed)
    return [
        check_assumption_growth(lambda x: gauss.score(x, 0.1), 4, seed=seed, label="gaussian_score"),
        check_assumption_growth(lambda x: LinearShrinkDenoiser(0.9)(x, 0.1), 4, seed=seed, label="linear_shrink"),
        check_assumption_growth(lambda x: pert(x, 0.1), 4, seed=seed, label="perturbed_oracle"),
    ]


def suite_operators(seed: int = 0) -> list[CheckReport]:
    return [check_operators(seed=seed)]


def suite_convergence(seed: int = 0) -> list[CheckReport]:
    """Stochastic runs; shared between the unbiased, biased and noise-moment checks."""
    problem = ConvergenceProblem(seed=seed + 1)
    base = problem.run()
    biased = {eps: problem.run(eps) for eps in (1e-3, 1e-2, 1e-1)}
    moments = {"oracle": base, **{f"eps={e:g}": tr for e, tr in biased.items()}}
    return [
        check_unbiased_convergence(problem, base),
        check_biased_convergence(problem, traces=biased),
        check_noise_moments(moments),
    ]


SUITES: dict[str, Callable[[int], list[CheckReport]]] = {
    "tweedie": suite_tweedie,
    "composition": suite_composition,
    "haar": suite_haar,
    "score_convergence": suite_score_convergence,
    "critical_points": suite_critical_points,
    "lipschitz": suite_lipschitz,
    "growth": suite_growth,
    "operators": suite_operators,
    "convergence": suite_convergence,
}


def run_suite(name: str, seed: int = 0) -> list[CheckReport]:
    if name == "all":
        return [r for key in SUITES for r in SUITES[key](seed)]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    return SUITES[name](seed)
