"""Frequency-domain tools: centered 2D DFT, circular filters, the focal
frequency loss, and azimuthally integrated power spectra.

All functions act on the last two dimensions, so single images ``(3, H, W)``
and batches ``(B, 3, H, W)`` are handled alike.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ContractError

REFERENCE_SIDE = 256
_DEBUG = bool(os.environ.get("LFSTEGO_DEBUG"))


def dft2(x: torch.Tensor) -> torch.Tensor:
    """Unnormalized 2D DFT with the zero frequency moved to the center."""
    return torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1))


def idft2(spec: torch.Tensor) -> torch.Tensor:
    return torch.fft.ifft2(torch.fft.ifftshift(spec, dim=(-2, -1)))


def r_max(height: int, width: int | None = None) -> float:
    width = height if width is None else width
    return math.hypot(width / 2, height / 2)


def scaled_cutoff(d: float, side: int, reference: int = REFERENCE_SIDE) -> float:
    """Transfer a cutoff chosen at ``reference`` resolution to ``side``."""
    return d * side / reference


def radius_grid(height: int, width: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Distance of every centered-spectrum bin from the DC bin."""
    fy = torch.arange(height, dtype=dtype, device=device) - height // 2
    fx = torch.arange(width, dtype=dtype, device=device) - width // 2
    return torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def _check_cutoff(d: float, height: int, width: int) -> None:
    rm = r_max(height, width)
    if not (0.0 <= d <= rm + 1e-12):
        raise ConfigError(f"cutoff d={d} outside [0, {rm:.4f}]")


def low_pass_mask(height: int, width: int, d: float, shape: str = "ideal", dtype=torch.float64, device=None):
    r = radius_grid(height, width, dtype, device)
    if shape == "ideal":
        return (r <= d).to(dtype)
    if shape == "gaussian":
        if d == 0:
            return (r == 0).to(dtype)
        return torch.exp(-(r**2) / (2.0 * d * d))
    raise ConfigError(f"unknown filter shape {shape!r}")


def _real_part(z: torch.Tensor) -> torch.Tensor:
    if _DEBUG:
        tol = 1e-9 if z.dtype == torch.complex128 else 1e-4
        scale = max(1.0, float(z.real.abs().max()))
        residue = float(z.imag.abs().max()) if z.numel() else 0.0
        assert residue <= tol * scale, f"imaginary residue {residue:.3e} after inverse DFT"
    return z.real


def _apply_mask(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return _real_part(idft2(dft2(x) * mask.to(x.dtype)))


def low_pass(x: torch.Tensor, d: float, clamp: tuple[float, float] | None = (0.0, 1.0), shape: str = "ideal"):
    """Keep the bins within radius ``d`` of DC.

    ``clamp`` is the valid range of the input type: ``(0, 1)`` for images,
    ``None`` for signed feature maps. Differentiable in ``x``.
    """
    h, w = x.shape[-2:]
    _check_cutoff(d, h, w)
    out = _apply_mask(x, low_pass_mask(h, w, d, shape, device=x.device))
    return out if clamp is None else out.clamp(*clamp)


def high_pass(x: torch.Tensor, d: float, clamp: tuple[float, float] | None = (0.0, 1.0), shape: str = "ideal"):
    """Keep the bins strictly outside radius ``d`` (the complement of ``low_pass``)."""
    h, w = x.shape[-2:]
    _check_cutoff(d, h, w)
    out = _apply_mask(x, 1.0 - low_pass_mask(h, w, d, shape, device=x.device))
    return out if clamp is None else out.clamp(*clamp)


def frequency_weights(q: torch.Tensor, target: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Spectrum weight ``|F_q - F_t|^alpha`` scaled to max 1 per image and channel.

    Returned detached: the weight acts as a constant in the loss.
    """
    with torch.no_grad():
        w = (dft2(q) - dft2(target)).abs() ** alpha
        peak = w.amax(dim=(-2, -1), keepdim=True)
        w = torch.where(peak > 0, w / torch.where(peak > 0, peak, torch.ones_like(peak)), torch.zeros_like(w))
    return w


def focal_frequency_loss(q: torch.Tensor, target: torch.Tensor, alpha: float = 1.0, weight: torch.Tensor | None = None):
    """Weighted squared spectral distance, ``1/(WH) * sum w |F_q - F_t|^2``.

    Averaged over channels (and batch). ``weight`` defaults to
    :func:`frequency_weights`; pass it explicitly to evaluate the loss at a
    fixed weighting.
    """
    if q.shape != target.shape:
        raise ContractError(f"shape mismatch {tuple(q.shape)} vs {tuple(target.shape)}")
    diff = dft2(q) - dft2(target)
    if weight is None:
        weight = frequency_weights(q, target, alpha)
    err = weight * (diff.real**2 + diff.imag**2)
    return err.mean()


def out_of_band_fraction(q: torch.Tensor, d: float) -> torch.Tensor:
    """Fraction of spectral energy at radius > ``d``, per leading index."""
    h, w = q.shape[-2:]
    power = dft2(q.to(torch.float64)).abs() ** 2
    outside = radius_grid(h, w, device=q.device) > d
    total = power.sum(dim=(-3, -2, -1))
    return (power * outside).sum(dim=(-3, -2, -1)) / total


def radial_bins(side: int) -> torch.Tensor:
    """Nearest-integer radius of each bin; radii past ``side // 2`` fold into the last bin."""
    r = radius_grid(side, side)
    return torch.round(r).clamp(max=side // 2).to(torch.long)


def radial_bin_counts(side: int) -> np.ndarray:
    return np.bincount(radial_bins(side).flatten().numpy(), minlength=side // 2 + 1)


@dataclass
class RadialSpectrum:
    values: np.ndarray

    @property
    def radii(self) -> np.ndarray:
        return np.arange(len(self.values))

    def normalized(self) -> "RadialSpectrum":
        return RadialSpectrum(self.values / self.values.sum())

    def to_csv(self, path: str | Path) -> None:
        write_spectra_csv(path, {"energy": self})


def azimuthal_integral(img: torch.Tensor, normalize: bool = False) -> RadialSpectrum:
    """Power spectrum binned by radius, summed over channels.

    Energies are ``|X|^2 / (W H)``, so the bins add up to ``sum(pixel^2)``.
    """
    if img.dim() == 2:
        img = img[None]
    h, w = img.shape[-2:]
    if h != w:
        raise ContractError(f"azimuthal integral needs a square image, got {h}x{w}")
    power = (dft2(img.detach().to(torch.float64)).abs() ** 2) / (h * w)
    power = power.reshape(-1, h, w).sum(0)
    values = torch.zeros(h // 2 + 1, dtype=torch.float64)
    values.index_add_(0, radial_bins(h).flatten(), power.flatten())
    spec = RadialSpectrum(values.numpy())
    return spec.normalized() if normalize else spec


def average_spectrum(images, normalize: bool = False) -> RadialSpectrum:
    spectra = [azimuthal_integral(x, normalize).values for x in images]
    if not spectra:
        raise ContractError("no images to average")
    return RadialSpectrum(np.mean(spectra, axis=0))


def write_spectra_csv(path: str | Path, spectra: dict[str, RadialSpectrum], reference: str | None = None) -> None:
    """Write ``radius,<name>...`` columns; with ``reference`` add relative deviations."""
    names = list(spectra)
    n = len(next(iter(spectra.values())).values)
    header = ["radius"] + names
    others = [k for k in names if reference is not None and k != reference]
    header += [f"rel_dev_{k}" for k in others]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k in range(n):
            row = [k] + [repr(float(spectra[name].values[k])) for name in names]
            for name in others:
                ref = spectra[reference].values[k]
                row.append(repr(float(abs(spectra[name].values[k] - ref) / ref)) if ref > 0 else "nan")
            wr.writerow(row)


def band_deviation(test: RadialSpectrum, ref: RadialSpectrum, lo_frac: float = 0.75) -> float:
    """Relative deviation of total energy in the radial band ``[lo_frac*K, K]``."""
    k = len(ref.values) - 1
    lo = int(math.ceil(lo_frac * k))
    a, b = test.values[lo:].sum(), ref.values[lo:].sum()
    return float(abs(a - b) / b)
