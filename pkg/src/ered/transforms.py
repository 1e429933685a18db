"""Transformation groups and their Jacobian-transpose actions.

A :class:`TransformSpec` describes a set of transformations together with the
law used to draw from it. :func:`sample` realises one :class:`Transform`,
which knows how to apply itself to an image and how to apply its Jacobian
transpose to a vector.

All transforms act on arrays whose first two axes are spatial (rows,
columns); trailing axes (channels) are carried along unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Any

import numpy as np
import scipy.sparse as sp

KINDS = (
    "identity",
    "rot90",
    "flip",
    "circular_translation",
    "subpixel_rotation",
    "gaussian_noising",
    "mixture",
)

# Groups up to this size are averaged exactly unless told otherwise.
MAX_AUTO_ENUMERATE = 8


class Transform:
    """One realised group element ``G``."""

    linear = True
    label = "transform"

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jtvp(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Return ``J_G(x)^T v``."""
        raise NotImplementedError

    def _check(self, x: np.ndarray, v: np.ndarray) -> None:
        if x.shape != v.shape:
            raise ValueError(f"shape mismatch: {x.shape} vs {v.shape}")


@dataclass(frozen=True)
class Identity(Transform):
    label = "id"

    def apply(self, x):
        return x

    def jtvp(self, x, v):
        self._check(x, v)
        return v


def _require_square(x: np.ndarray, what: str) -> None:
    if x.ndim < 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"{what} needs a square image, got shape {x.shape}")


@dataclass(frozen=True)
class Rot90(Transform):
    k: int

    @property
    def label(self):
        return f"rot{self.k % 4}"

    def apply(self, x):
        _require_square(x, "rot90")
        return np.rot90(x, self.k, axes=(0, 1))

    def jtvp(self, x, v):
        self._check(x, v)
        _require_square(v, "rot90")
        return np.rot90(v, -self.k, axes=(0, 1))


@dataclass(frozen=True)
class Flip(Transform):
    vertical: bool
    horizontal: bool

    @property
    def label(self):
        return f"flip{int(self.vertical)}{int(self.horizontal)}"

    def apply(self, x):
        if self.vertical:
            x = x[::-1]
        if self.horizontal:
            x = x[:, ::-1]
        return x

    def jtvp(self, x, v):
        self._check(x, v)
        return self.apply(v)


@dataclass(frozen=True)
class CircularShift(Transform):
    dy: int
    dx: int

    @property
    def label(self):
        return f"shift{self.dy:+d}{self.dx:+d}"

    def apply(self, x):
        return np.roll(x, (self.dy, self.dx), axis=(0, 1))

    def jtvp(self, x, v):
        # A circular shift is a permutation, so its Jacobian transpose is the reverse shift.
        self._check(x, v)
        return np.roll(v, (-self.dy, -self.dx), axis=(0, 1))


@lru_cache(maxsize=64)
def rotation_matrix(height: int, width: int, theta: float) -> sp.csr_matrix:
    """Sparse bilinear-interpolation operator rotating an ``height x width`` grid by ``theta``.

    Output pixel ``p`` samples the input at ``R(-theta)(p - c) + c`` where ``c`` is
    the image centre; samples falling outside the grid wrap around periodically.
    """
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    cos, sin = math.cos(theta), math.sin(theta)
    ry, rx = rows - cy, cols - cx
    src_y = cos * ry - sin * rx + cy
    src_x = sin * ry + cos * rx + cx
    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    fy = src_y - y0
    fx = src_x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = (rows * width + cols).ravel()
    data, ii, jj = [], [], []
    for oy, ox, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        src = ((y0 + oy) % height) * width + (x0 + ox) % width
        ii.append(out)
        jj.append(src.ravel())
        data.append(w.ravel())
    n = height * width
    mat = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(ii), np.concatenate(jj))), shape=(n, n)
    )
    return mat.tocsr()


@dataclass(frozen=True)
class SubpixelRotation(Transform):
    theta: float

    @property
    def label(self):
        return f"rotsub{self.theta:+.6f}"

    def _mat(self, x):
        _require_square(x, "subpixel rotation")
        return rotation_matrix(x.shape[0], x.shape[1], float(self.theta))

    def apply(self, x):
        flat = x.reshape(x.shape[0] * x.shape[1], -1)
        return np.asarray(self._mat(x) @ flat).reshape(x.shape)

    def jtvp(self, x, v):
        # Adjoint of the interpolation operator (weights scattered back), not the inverse rotation.
        self._check(x, v)
        flat = v.reshape(v.shape[0] * v.shape[1], -1)
        return np.asarray(self._mat(x).T @ flat).reshape(v.shape)


@dataclass(frozen=True)
class GaussianNoising(Transform):
    """``x -> x + scale * z`` with ``z ~ N(0, I)`` drawn from ``noise_seed``."""

    scale: float
    noise_seed: int
    linear = False

    @property
    def label(self):
        return f"noise{self.noise_seed}"

    def noise(self, shape) -> np.ndarray:
        return np.random.default_rng(self.noise_seed).standard_normal(shape)

    def apply(self, x):
        return x + self.scale * self.noise(x.shape)

    def jtvp(self, x, v):
        self._check(x, v)
        return v


@dataclass(frozen=True)
class TransformSpec:
    """A transformation set and its sampling law.

    ``scale`` applies to ``gaussian_noising``; ``None`` ties it to the denoiser
    noise level passed to :func:`sample`. ``components``/``weights`` describe a
    ``mixture``.
    """

    kind: str
    max_shift: int = 8
    scale: float | None = None
    components: tuple[TransformSpec, ...] = ()
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "mixture":
            if not self.components or len(self.components) != len(self.weights):
                raise ValueError("mixture needs matching components and weights")
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("mixture weights must be nonnegative and sum to 1")
        if self.kind == "circular_translation" and self.max_shift < 0:
            raise ValueError("max_shift must be nonnegative")
        if self.scale is not None and self.scale < 0:
            raise ValueError("noise scale must be nonnegative")

    @property
    def finite(self) -> bool:
        if self.kind == "mixture":
            return all(c.finite for c in self.components)
        return self.kind not in ("subpixel_rotation", "gaussian_noising")

    @property
    def size(self) -> int | None:
        """Number of group elements, or ``None`` for infinite sets."""
        if not self.finite:
            return None
        return len(self.elements())

    @property
    def isometric(self) -> bool:
        """True when every element is a linear isometry (``J^T = G^{-1}``)."""
        if self.kind == "mixture":
            return all(c.isometric for c in self.components)
        return self.kind in ("identity", "rot90", "flip", "circular_translation")

    def elements(self) -> list[tuple[Transform, float]]:
        """All elements with their probabilities (finite sets only)."""
        return list(self._elements)

    @cached_property
    def _elements(self) -> tuple[tuple[Transform, float], ...]:
        return tuple(self._enumerate())

    def _enumerate(self):
        if self.kind == "identity":
            return [(Identity(), 1.0)]
        if self.kind == "rot90":
            return [(Rot90(k), 0.25) for k in range(4)]
        if self.kind == "flip":
            return [(Flip(v, h), 0.25) for v in (False, True) for h in (False, True)]
        if self.kind == "circular_translation":
            r = range(-self.max_shift, self.max_shift + 1)
            p = 1.0 / len(r) ** 2
            return [(CircularShift(dy, dx), p) for dy in r for dx in r]
        if self.kind == "mixture":
            out = []
            for comp, w in zip(self.components, self.weights):
                out.extend((t, w * p) for t, p in comp.elements())
            return out
        raise ValueError(f"{self.kind} is not a finite set")

    def sample(self, rng: np.random.Generator, sigma: float | None = None) -> Transform:
        return sample(self, rng, sigma)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "circular_translation":
            d["max_shift"] = self.max_shift
        if self.kind == "gaussian_noising" and self.scale is not None:
            d["scale"] = self.scale
        if self.kind == "mixture":
            d["components"] = [c.to_dict() for c in self.components]
            d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any] | str) -> TransformSpec:
        if isinstance(d, str):
            return cls(d)
        d = dict(d)
        kind = d.pop("kind")
        comps = tuple(cls.from_dict(c) for c in d.pop("components", ()))
        weights = d.pop("weights", None)
        if kind == "mixture" and weights is None:
            weights = [1.0 / len(comps)] * len(comps)
        unknown = set(d) - {"max_shift", "scale"}
        if unknown:
            raise ValueError(f"unknown transform fields: {sorted(unknown)}")
        return cls(kind, components=comps, weights=tuple(weights or ()), **d)


def sample(spec: TransformSpec, rng: np.random.Generator, sigma: float | None = None) -> Transform:
    """Draw one transform from ``spec``'s law using the caller's generator."""
    kind = spec.kind
    if kind == "identity":
        return Identity()
    if kind == "rot90":
        return Rot90(int(rng.integers(4)))
    if kind == "flip":
        code = int(rng.integers(4))
        return Flip(bool(code & 2), bool(code & 1))
    if kind == "circular_translation":
        dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
        return CircularShift(int(dy), int(dx))
    if kind == "subpixel_rotation":
        return SubpixelRotation(float(rng.uniform(-math.pi, math.pi)))
    if kind == "gaussian_noising":
        scale = spec.scale if spec.scale is not None else sigma
        if scale is None:
            raise ValueError("gaussian_noising needs a scale or the denoiser sigma")
        return GaussianNoising(float(scale), int(rng.integers(2**63)))
    # mixture: pick a component, then draw from it
    idx = int(rng.choice(len(spec.components), p=np.asarray(spec.weights)))
    return sample(spec.components[idx], rng, sigma)


def should_enumerate(spec: TransformSpec, enumerate_finite: bool | None) -> bool:
    """Decide whether an expectation over ``spec`` is computed exactly.

    ``None`` enumerates finite groups of at most ``MAX_AUTO_ENUMERATE`` elements.
    """
    if not spec.finite or enumerate_finite is False:
        return False
    if enumerate_finite:
        return True
    return spec.size <= MAX_AUTO_ENUMERATE


def mean_jtg(
    spec: TransformSpec,
    x: np.ndarray,
    n_mc: int = 1,
    rng: np.random.Generator | None = None,
    enumerate: bool = False,
    sigma: float | None = None,
) -> np.ndarray:
    """Estimate ``E[J_G(x)^T G(x)]``, exactly by enumeration when requested on a finite group."""
    if enumerate and spec.finite:
        acc = np.zeros_like(x, dtype=np.float64)
        for t, p in spec.elements():
            acc += p * t.jtvp(x, t.apply(x))
        return acc
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    if rng is None:
        raise ValueError("sampling needs a generator")
    acc = np.zeros_like(x, dtype=np.float64)
    for _ in range(n_mc):
        t = sample(spec, rng, sigma)
        acc += t.jtvp(x, t.apply(x))
    return acc / n_mc


def dense_matrix(t: Transform, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(M, b)`` with ``t(x) = M @ x.ravel() + b`` by probing basis vectors.

    Only meaningful for affine transforms; used by checks that need an
    independent route to the Jacobian.
    """
    n = int(np.prod(shape))
    b = np.asarray(t.apply(np.zeros(shape))).ravel()
    cols = np.empty((n, n))
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        cols[:, i] = np.asarray(t.apply(e.reshape(shape))).ravel() - b
        e[i] = 0.0
    return cols, b
