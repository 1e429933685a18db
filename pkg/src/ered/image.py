"""Image arrays, quality metrics and file I/O.

Images are ``float64`` arrays of shape ``(H, W, C)`` with ``C`` in ``{1, 3}``.
Row-major layout means pixel ``(r, c, ch)`` sits at flat offset
``(r * W + c) * C + ch``.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
from skimage.metrics import structural_similarity

PSNR_CAP = 99.0
SSIM_WINDOW = 11

_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm"}


def as_image(x: np.ndarray) -> np.ndarray:
    """Return ``x`` as a float64 ``(H, W, C)`` array, adding a channel axis to 2-D input."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W) or (H, W, C) with C in {{1, 3}}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def mse(x: np.ndarray, ref: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return float(np.mean((x - ref) ** 2))


def psnr(x: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP`` for identical inputs."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(x, ref)
    if err == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak**2 / err)))


def ssim(x: np.ndarray, ref: np.ndarray) -> float:
    """Channel-averaged SSIM with an 11x11 Gaussian window (sigma 1.5) and data range 1."""
    x = as_image(x)
    ref = as_image(ref)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(
        structural_similarity(
            x,
            ref,
            data_range=1.0,
            channel_axis=2,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8/16-bit PNG or PGM/PPM file into ``[0, 1]``."""
    path = Path(path)
    if path.suffix.lower() not in _SUFFIXES:
        raise ValueError(f"unsupported image format: {path.suffix!r}")
    if not path.is_file():
        raise FileNotFoundError(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"could not decode image file {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"unsupported sample type {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = raw[:, :, ::-1]  # BGR -> RGB
    return as_image(raw.astype(np.float64) / scale)


def save_image(image: np.ndarray, path: str | Path, bit_depth: int = 8) -> None:
    """Write ``image`` (clipped to ``[0, 1]``) as PNG or PGM/PPM with 8 or 16 bits per sample."""
    path = Path(path)
    if path.suffix.lower() not in _SUFFIXES:
        raise ValueError(f"unsupported image format: {path.suffix!r}")
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    img = as_image(image)
    if path.suffix.lower() == ".pgm" and img.shape[2] != 1:
        raise ValueError("PGM files hold single-channel images")
    if path.suffix.lower() == ".ppm" and img.shape[2] != 3:
        raise ValueError("PPM files hold three-channel images")
    top = 255 if bit_depth == 8 else 65535
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    q = np.rint(np.clip(img, 0.0, 1.0) * top).astype(dtype)
    q = q[:, :, 0] if q.shape[2] == 1 else q[:, :, ::-1]
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"failed to write {path}")
