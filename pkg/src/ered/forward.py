"""Degradation models and their data-fidelity terms.

All blurs are circular convolutions computed with FFTs, so the forward
operator is diagonal in Fourier space and its adjoint is exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("denoise", "deblur", "super_resolution", "despeckle")
POSITIVITY_FLOOR = 1e-6


def gaussian_kernel(size: int, std: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / std) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def box_kernel(size: int) -> np.ndarray:
    return np.full((size, size), 1.0 / size**2)


def delta_kernel(size: int = 1) -> np.ndarray:
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def load_kernel(path: str | Path) -> np.ndarray:
    """Read a kernel text file: a line ``h w`` then ``h`` rows of ``w`` numbers."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or len(lines[0]) != 2:
        raise ValueError(f"{path}: first line must be 'h w'")
    try:
        h, w = int(lines[0][0]), int(lines[0][1])
    except ValueError as err:
        raise ValueError(f"{path}: bad dimensions line {lines[0]}") from err
    if h <= 0 or w <= 0:
        raise ValueError(f"{path}: kernel dimensions must be positive")
    rows = lines[1:]
    if len(rows) != h:
        raise ValueError(f"{path}: expected {h} rows, found {len(rows)}")
    try:
        k = np.array([[float(v) for v in row] for row in rows if len(row) == w])
    except ValueError as err:
        raise ValueError(f"{path}: non-numeric kernel entry") from err
    if k.shape != (h, w):
        bad = next(i for i, row in enumerate(rows) if len(row) != w)
        raise ValueError(f"{path}: row {bad + 1} has {len(rows[bad])} entries, expected {w}")
    if not np.all(np.isfinite(k)):
        raise ValueError(f"{path}: kernel has non-finite entries")
    total = k.sum()
    if total == 0:
        raise ValueError(f"{path}: kernel sums to zero")
    if abs(total - 1.0) > 1e-6:
        log.warning("kernel %s sums to %.6g; renormalizing", path, total)
    return k / total


def save_kernel(kernel: np.ndarray, path: str | Path) -> None:
    k = np.asarray(kernel, dtype=np.float64)
    rows = [f"{k.shape[0]} {k.shape[1]}"] + [" ".join(repr(float(v)) for v in row) for row in k]
    Path(path).write_text("\n".join(rows) + "\n")


def _spatial(x: np.ndarray) -> tuple[int, int]:
    if x.ndim < 2:
        raise ValueError(f"expected an image with two spatial axes, got shape {x.shape}")
    return x.shape[0], x.shape[1]


@dataclass(frozen=True, eq=False)
class ForwardModel:
    """Degradation ``y ~ N(A x)`` with its negative log-likelihood ``f``.

    ``sigma_y = inf`` turns the data term off (``f = 0``) for prior-only runs.
    """

    kind: str = "denoise"
    kernel: np.ndarray = field(default_factory=lambda: delta_kernel(1))
    sr_factor: int = 1
    sigma_y: float = 0.0
    looks: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown forward model {self.kind!r}")
        k = np.asarray(self.kernel, dtype=np.float64)
        if k.ndim != 2 or not np.all(np.isfinite(k)) or k.sum() == 0:
            raise ValueError("kernel must be a finite 2-D array with nonzero sum")
        object.__setattr__(self, "kernel", k / k.sum())
        if self.sr_factor < 1:
            raise ValueError("sr_factor must be at least 1")
        if self.sigma_y < 0:
            raise ValueError("sigma_y must be nonnegative")
        if self.looks < 1:
            raise ValueError("looks must be at least 1")

    @property
    def linear(self) -> bool:
        return self.kind != "despeckle"

    # Operators -------------------------------------------------------------

    def _otf(self, shape: tuple[int, int]) -> np.ndarray:
        h, w = shape
        kh, kw = self.kernel.shape
        if kh > h or kw > w:
            raise ValueError(f"kernel {kh}x{kw} larger than image {h}x{w}")
        pad = np.zeros((h, w))
        pad[:kh, :kw] = self.kernel
        pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        return np.fft.rfft2(pad)

    def _conv(self, x: np.ndarray, adjoint: bool = False) -> np.ndarray:
        h, w = _spatial(x)
        otf = self._otf((h, w))
        if adjoint:
            otf = np.conj(otf)
        if x.ndim > 2:
            otf = otf.reshape(otf.shape + (1,) * (x.ndim - 2))
        return np.fft.irfft2(np.fft.rfft2(x, axes=(0, 1)) * otf, s=(h, w), axes=(0, 1))

    def blur(self, x: np.ndarray) -> np.ndarray:
        return self._conv(np.asarray(x, dtype=np.float64))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """``A x``: blur (deblur, SR) then decimate (SR); identity otherwise."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind in ("denoise", "despeckle"):
            return x
        out = self._conv(x)
        if self.kind == "super_resolution":
            h, w = _spatial(x)
            s = self.sr_factor
            if h % s or w % s:
                raise ValueError(f"sr_factor {s} does not divide image size {h}x{w}")
            out = out[::s, ::s]
        return out

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        """``A^T v``: zero-fill upsample (SR) then correlate with the kernel."""
        v = np.asarray(v, dtype=np.float64)
        if self.kind in ("denoise", "despeckle"):
            return v
        if self.kind == "super_resolution":
            s = self.sr_factor
            up = np.zeros((v.shape[0] * s, v.shape[1] * s) + v.shape[2:])
            up[::s, ::s] = v
            v = up
        return self._conv(v, adjoint=True)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        if self.kind != "super_resolution":
            return tuple(shape)
        s = self.sr_factor
        return (shape[0] // s, shape[1] // s) + tuple(shape[2:])

    # Observation simulator ------------------------------------------------

    def degrade(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "despeckle":
            speckle = rng.gamma(shape=self.looks, scale=1.0 / self.looks, size=x.shape)
            return x * speckle
        ax = self.forward(x)
        if self.sigma_y > 0 and math.isfinite(self.sigma_y):
            ax = ax + self.sigma_y * rng.standard_normal(ax.shape)
        return ax

    # Data fidelity --------------------------------------------------------

    def _check_positive(self, x: np.ndarray) -> None:
        if np.any(x < POSITIVITY_FLOOR):
            raise ValueError(
                f"despeckling fidelity needs x >= {POSITIVITY_FLOOR:g}; min is {float(np.min(x)):.3g}"
            )

    def _gaussian_scale(self) -> float:
        if math.isinf(self.sigma_y):
            return 0.0
        if self.sigma_y == 0:
            raise ValueError("Gaussian fidelity needs sigma_y > 0")
        return 1.0 / self.sigma_y**2

    def fidelity(self, x: np.ndarray, y: np.ndarray) -> float:
        """``f(x)``: ``|Ax - y|^2 / (2 sigma_y^2)`` or the Gamma speckle NLL."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "despeckle":
            self._check_positive(x)
            return float(self.looks * np.sum(np.log(x) + y / x))
        scale = self._gaussian_scale()
        if scale == 0.0:
            return 0.0
        r = self.forward(x) - y
        return float(0.5 * scale * np.sum(r * r))

    def fidelity_grad(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "despeckle":
            self._check_positive(x)
            return self.looks * (1.0 / x - y / x**2)
        scale = self._gaussian_scale()
        if scale == 0.0:
            return np.zeros_like(x)
        if self.kind == "denoise":
            return scale * (x - y)
        return scale * self.adjoint(self.forward(x) - y)

    def initial_point(self, y: np.ndarray) -> np.ndarray:
        """Default starting point: ``A^T y`` for blurs, ``y`` otherwise."""
        if self.kind in ("deblur", "super_resolution"):
            return self.adjoint(y)
        return np.array(y, dtype=np.float64)

    # Serialization --------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "kernel": self.kernel.tolist(),
            "sr_factor": self.sr_factor,
            "sigma_y": self.sigma_y,
            "looks": self.looks,
        }


def make_kernel(spec: Any, base_dir: Path | None = None) -> np.ndarray:
    """Kernel from a config value: a file path, an inline 2-D list or a generator dict."""
    if spec is None:
        return delta_kernel(1)
    if isinstance(spec, str):
        p = Path(spec)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return load_kernel(p)
    if isinstance(spec, dict):
        kind = spec.get("kind")
        if kind == "gaussian":
            return gaussian_kernel(int(spec["size"]), float(spec["std"]))
        if kind == "box":
            return box_kernel(int(spec["size"]))
        if kind == "delta":
            return delta_kernel(int(spec.get("size", 1)))
        raise ValueError(f"unknown kernel generator {kind!r}")
    return np.asarray(spec, dtype=np.float64)


def make_model(cfg: dict[str, Any], base_dir: Path | None = None) -> ForwardModel:
    cfg = dict(cfg)
    unknown = set(cfg) - {"kind", "kernel", "sr_factor", "sigma_y", "looks"}
    if unknown:
        raise ValueError(f"unknown model fields: {sorted(unknown)}")
    kernel = make_kernel(cfg.pop("kernel", None), base_dir)
    return ForwardModel(kernel=kernel, **cfg)


def operator_norm(model: ForwardModel, shape: tuple[int, ...], iters: int = 100, seed: int = 0) -> float:
    """Power-iteration estimate of ``||A||`` for a linear model."""
    if not model.linear:
        raise ValueError("operator norm is defined for linear models only")
    v = np.random.default_rng(seed).standard_normal(shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = model.adjoint(model.forward(v))
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
    return math.sqrt(lam)
