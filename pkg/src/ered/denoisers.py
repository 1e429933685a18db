"""Denoisers ``D_sigma``.

Every denoiser is a callable ``D(x, sigma) -> array`` of the same shape as
``x``. :func:`make_denoiser` builds one from its JSON description.
"""

from __future__ import annotations

import os
import selectors
import shlex
import subprocess
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dctn, idctn

from .ednz import HEADER, ProtocolError, decode_frame, encode_frame, parse_header
from .gmm import GmmPrior


class Denoiser:
    kind = "denoiser"
    prior: GmmPrior | None = None

    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind}

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class GmmOracleDenoiser(Denoiser):
    """Exact MMSE denoiser of a Gaussian-mixture prior."""

    kind = "gmm_oracle"

    def __init__(self, prior: GmmPrior):
        self.prior = prior

    def __call__(self, x, sigma):
        return self.prior.mmse(x, sigma)

    def to_dict(self):
        return {"kind": self.kind, "prior": self.prior.to_dict()}


class PerturbedOracleDenoiser(Denoiser):
    """MMSE denoiser plus ``eps * sin(W x + b)``.

    The perturbation is smooth, bounded by ``eps`` in every coordinate and
    fixed by ``seed``, so ``D - D*`` is a deterministic error of sup-norm ``eps``.
    """

    kind = "perturbed_oracle"

    def __init__(self, prior: GmmPrior, eps: float, seed: int = 0, frequency: float = 1.0):
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        self.prior = prior
        self.eps = float(eps)
        self.seed = int(seed)
        self.frequency = float(frequency)
        rng = np.random.default_rng(seed)
        d = prior.dim
        self._w = frequency * rng.standard_normal((d, d)) / np.sqrt(d)
        self._b = rng.uniform(0.0, 2 * np.pi, size=d)

    def perturbation(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).reshape(-1, self.prior.dim)
        return np.sin(flat @ self._w.T + self._b).reshape(np.shape(x))

    def __call__(self, x, sigma):
        out = self.prior.mmse(x, sigma)
        if self.eps:
            out = out + self.eps * self.perturbation(x)
        return out

    def to_dict(self):
        return {
            "kind": self.kind,
            "prior": self.prior.to_dict(),
            "eps": self.eps,
            "seed": self.seed,
            "frequency": self.frequency,
        }


class LinearShrinkDenoiser(Denoiser):
    """``x -> c * x``; Lipschitz with constant exactly ``c``."""

    kind = "linear_shrink"

    def __init__(self, c: float):
        if not 0 < c <= 1:
            raise ValueError("shrink factor must lie in (0, 1]")
        self.c = float(c)

    def __call__(self, x, sigma):
        return self.c * np.asarray(x, dtype=np.float64)

    def to_dict(self):
        return {"kind": self.kind, "c": self.c}


class DctThresholdDenoiser(Denoiser):
    """Sliding-window DCT hard thresholding with uniform aggregation.

    Every ``block x block`` patch is transformed with an orthonormal DCT, AC
    coefficients below ``multiplier * sigma`` are zeroed and the overlapping
    reconstructions are averaged.
    """

    kind = "dct_threshold"

    def __init__(self, block: int = 8, multiplier: float = 3.0):
        self.block = int(block)
        self.multiplier = float(multiplier)

    def __call__(self, x, sigma):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 2
        img = x[:, :, None] if squeeze else x
        h, w = img.shape[:2]
        b = self.block
        if h < b or w < b:
            raise ValueError(f"image {h}x{w} is smaller than the {b}x{b} block")
        out = np.empty_like(img)
        counts = np.zeros((h, w))
        for i in range(b):
            for j in range(b):
                counts[i : i + h - b + 1, j : j + w - b + 1] += 1.0
        thr = self.multiplier * sigma
        for ch in range(img.shape[2]):
            patches = sliding_window_view(img[:, :, ch], (b, b))
            coef = dctn(patches, axes=(-2, -1), norm="ortho")
            dc = coef[..., 0, 0].copy()
            coef[np.abs(coef) < thr] = 0.0
            coef[..., 0, 0] = dc
            rec = idctn(coef, axes=(-2, -1), norm="ortho")
            acc = np.zeros((h, w))
            for i in range(b):
                for j in range(b):
                    acc[i : i + h - b + 1, j : j + w - b + 1] += rec[:, :, i, j]
            out[:, :, ch] = acc / counts
        return out[:, :, 0] if squeeze else out

    def to_dict(self):
        return {"kind": self.kind, "block": self.block, "multiplier": self.multiplier}


class ExternalDenoiser(Denoiser):
    """Denoiser running in a child process that speaks EDNZ on stdin/stdout.

    The child is started lazily and kept alive across calls; call
    :meth:`close` (or use as a context manager) to stop it.
    """

    kind = "external"

    def __init__(self, command: str | list[str], timeout: float = 60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = float(timeout)
        self._proc: subprocess.Popen | None = None

    def _start(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
            )
        return self._proc

    def _read(self, n: int) -> bytes:
        proc = self._proc
        fd = proc.stdout.fileno()
        buf = bytearray()
        with selectors.DefaultSelector() as sel:
            sel.register(fd, selectors.EVENT_READ)
            while len(buf) < n:
                if not sel.select(self.timeout):
                    self.close(kill=True)
                    raise TimeoutError(f"external denoiser silent for {self.timeout} s")
                chunk = os.read(fd, n - len(buf))
                if not chunk:
                    raise ProtocolError(
                        f"child closed its output after {len(buf)} of {n} expected bytes"
                    )
                buf.extend(chunk)
        return bytes(buf)

    def __call__(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 2
        img = x[:, :, None] if squeeze else x
        proc = self._start()
        try:
            proc.stdin.write(encode_frame(img, sigma))
            proc.stdin.flush()
        except BrokenPipeError as err:
            raise ProtocolError("external denoiser closed its input") from err
        header = self._read(HEADER.size)
        h, w, c, _ = parse_header(header)
        if (h, w, c) != img.shape:
            self.close()
            raise ProtocolError(
                f"response frame is {h}x{w}x{c}, request was {img.shape[0]}x{img.shape[1]}x{img.shape[2]}"
            )
        out, _ = decode_frame(header + self._read(4 * h * w * c))
        if not np.all(np.isfinite(out)):
            raise ProtocolError("response contains non-finite values")
        out = out.astype(np.float64)
        return out[:, :, 0] if squeeze else out

    def close(self, kill: bool = False):
        if self._proc is not None:
            proc, self._proc = self._proc, None
            if kill:
                proc.kill()
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def to_dict(self):
        return {"kind": self.kind, "command": self.command, "timeout": self.timeout}


def make_denoiser(cfg: dict[str, Any]) -> Denoiser:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind in ("gmm_oracle", "perturbed_oracle"):
        prior = cfg.pop("prior")
        prior = prior if isinstance(prior, GmmPrior) else GmmPrior.from_dict(prior)
        if kind == "gmm_oracle":
            return GmmOracleDenoiser(prior)
        return PerturbedOracleDenoiser(prior, **cfg)
    if kind == "linear_shrink":
        return LinearShrinkDenoiser(**cfg)
    if kind == "dct_threshold":
        return DctThresholdDenoiser(**cfg)
    if kind == "external":
        return ExternalDenoiser(**cfg)
    raise ValueError(f"unknown denoiser kind {kind!r}")


def linear_shrink_denoise(x: np.ndarray, c: float) -> np.ndarray:
    return LinearShrinkDenoiser(c)(x, 1.0)


def perturbed_oracle_denoise(prior: GmmPrior, sigma: float, eps: float, x: np.ndarray, seed: int = 0):
    return PerturbedOracleDenoiser(prior, eps, seed)(x, sigma)


def dct_threshold_denoise(x: np.ndarray, sigma: float) -> np.ndarray:
    return DctThresholdDenoiser()(x, sigma)
