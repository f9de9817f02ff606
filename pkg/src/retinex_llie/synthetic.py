"""Seeded synthetic low/normal-light pairs for smoke tests and overfit runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import imgio


def make_pair(size: int = 64, seed: int = 0, gain: float = 0.15, noise: float = 0.01,
              exposure: float = 1.0):
    """A normal-light scene and a darkened, noisy copy of it.

    The scene is a few soft color gradients plus flat rectangles; the dark
    copy multiplies it by a smooth illumination field around ``gain`` and
    adds Gaussian noise. ``exposure`` scales the normal-light scene itself.
    Both are quantized to 8-bit levels.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    high = np.empty((3, size, size))
    for c in range(3):
        fy, fx, ph = rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0, 2 * np.pi)
        high[c] = 0.55 + 0.25 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    for _ in range(4):
        y0, x0 = rng.integers(0, size - size // 4, size=2)
        h, w = rng.integers(size // 8, size // 3, size=2)
        high[:, y0:y0 + h, x0:x0 + w] = rng.uniform(0.15, 0.95, size=(3, 1, 1))
    high *= exposure
    illum = gain * (0.8 + 0.4 * (0.5 * yy + 0.5 * xx))
    low = high * illum + rng.normal(0.0, noise, size=high.shape)
    q = lambda a: np.round(np.clip(a, 0, 1) * 255.0) / 255.0  # noqa: E731
    return q(low)[None].astype(np.float32), q(high)[None].astype(np.float32)


def write_dataset(root, n: int = 2, size: int = 64, seed: int = 0, fmt: str = "png") -> Path:
    """Write ``n`` synthetic pairs under ``root/low`` and ``root/high``."""
    root = Path(root)
    (root / "low").mkdir(parents=True, exist_ok=True)
    (root / "high").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        low, high = make_pair(size, seed + i)
        imgio.save_image(low, root / "low" / f"{i:03d}.{fmt}")
        imgio.save_image(high, root / "high" / f"{i:03d}.{fmt}")
    return root
