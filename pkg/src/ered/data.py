"""Bundled synthetic test images.

The images are generated, not stored, so they are identical on every
platform. Config files refer to them as ``fixture:<name>``.
"""

from __future__ import annotations

import numpy as np

FIXTURE_PREFIX = "fixture:"


def synthetic_image(size: int = 64) -> np.ndarray:
    """Grayscale ``(size, size, 1)`` scene with flat regions, sharp edges and texture."""
    r, c = np.mgrid[0:size, 0:size] / (size - 1.0)
    img = 0.25 + 0.35 * r  # vertical ramp
    disk = (r - 0.35) ** 2 + (c - 0.3) ** 2 < 0.18**2
    img = np.where(disk, 0.85, img)
    square = (np.abs(r - 0.7) < 0.15) & (np.abs(c - 0.68) < 0.18)
    img = np.where(square, 0.15, img)
    stripes = (c > 0.55) & (r < 0.4)
    img = np.where(stripes, img + 0.18 * np.sin(2 * np.pi * 6 * (r + c)), img)
    return np.clip(img, 0.0, 1.0)[:, :, None]


FIXTURES = {
    "synthetic64": lambda: synthetic_image(64),
    "synthetic32": lambda: synthetic_image(32),
}


def is_fixture(name: str) -> bool:
    return isinstance(name, str) and name.startswith(FIXTURE_PREFIX)


def load_fixture(name: str) -> np.ndarray:
    key = name[len(FIXTURE_PREFIX) :] if is_fixture(name) else name
    if key not in FIXTURES:
        raise ValueError(f"unknown fixture {key!r}; available: {sorted(FIXTURES)}")
    return FIXTURES[key]()
