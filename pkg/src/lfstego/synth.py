"""Procedural test images: band-limited noise, gradients and soft shapes.

Used to build zero-dependency datasets for tests and the desk-scale run.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .imaging import save_image


def _power_law_noise(rng: np.random.Generator, side: int, beta: float) -> np.ndarray:
    f = np.fft.fftfreq(side)
    r = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    r[0, 0] = 1.0
    amp = r ** (-beta / 2)
    amp[0, 0] = 0.0
    phase = rng.standard_normal((3, side, side)) + 1j * rng.standard_normal((3, side, side))
    field = np.fft.ifft2(phase * amp).real
    field -= field.mean(axis=(1, 2), keepdims=True)
    field /= field.std(axis=(1, 2), keepdims=True) + 1e-12
    return field


def natural_image(seed: int, side: int = 64) -> torch.Tensor:
    """A photo-like RGB image: colour gradient, 1/f texture and a few soft shapes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / (np.ptp(t) + 1e-12)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    tex = _power_law_noise(rng, side, rng.uniform(1.8, 2.6))
    mix = rng.uniform(0.3, 1.0)
    tex = mix * tex[:1] + (1 - mix) * tex
    img = img + rng.uniform(0.05, 0.15) * tex

    for _ in range(rng.integers(2, 7)):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.35, 2)
        colour = rng.uniform(0, 1, 3)
        softness = rng.uniform(0.01, 0.05)
        if rng.random() < 0.5:
            dist = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) - 1
        else:
            dist = np.maximum(np.abs(yy - cy) / ry, np.abs(xx - cx) / rx) - 1
        mask = 0.5 * (1 - np.tanh(dist / (2 * softness)))
        alpha = rng.uniform(0.5, 1.0) * mask
        img = img * (1 - alpha) + colour[:, None, None] * alpha
    return torch.from_numpy(np.clip(img, 0, 1)).to(torch.float32)


def band_limited_image(seed: int, side: int, radius: float, amplitude: float = 0.2) -> torch.Tensor:
    """Mid-gray image whose spectrum is zero outside ``radius`` (centered units)."""
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(side) * side
    r = np.sqrt(fy[:, None] ** 2 + fy[None, :] ** 2)
    spec = np.fft.fft2(rng.standard_normal((3, side, side))) * (r <= radius)
    field = np.fft.ifft2(spec).real
    field -= field.mean(axis=(1, 2), keepdims=True)
    field *= amplitude / (np.abs(field).max() + 1e-12)
    return torch.from_numpy(0.5 + field)


def cosine_image(side: int, k: int, axis: int = 1, amplitude: float = 0.5, offset: float = 0.5):
    n = np.arange(side)
    wave = offset + amplitude * np.cos(2 * np.pi * k * n / side)
    grid = np.broadcast_to(wave[None, :] if axis == 1 else wave[:, None], (side, side))
    return torch.from_numpy(np.repeat(grid[None], 3, axis=0).copy())


def write_dataset(root: str | Path, n_train: int, n_eval: int, side: int = 64, seed: int = 0) -> Path:
    """Write ``<root>/{train,eval}/*.png`` with disjoint seeds."""
    root = Path(root)
    for split, count, offset in (("train", n_train, 0), ("eval", n_eval, 1_000_000)):
        out = root / split
        out.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            save_image(natural_image(seed * 10_000_000 + offset + i, side), out / f"{i:05d}.png")
    return root
