"""Fidelity and retrieval metrics: PSNR, global SSIM, NCC, success rate, residues."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import torch
import torch.nn.functional as F

from .errors import ContractError, UndefinedMetricError

NCC_THRESHOLD = 0.95
REPORT_COLUMNS = ("id", "psnr_db", "ssim", "ncc", "valid")


def _pair(x, y) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(x).detach().to(torch.float64)
    y = torch.as_tensor(y).detach().to(torch.float64)
    if x.shape != y.shape:
        raise ContractError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(((x - y) ** 2).mean())


def psnr(x, y, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs.

    Use ``max_value=255`` for 8-bit-scale data.
    """
    err = mse(x, y)
    if err == 0:
        return math.inf
    return 20.0 * math.log10(max_value) - 10.0 * math.log10(err)


def _channels(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None]
    return x.reshape(-1, x.shape[-2], x.shape[-1])


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    t = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(t**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x, y, dynamic_range: float = 1.0, k1: float = 0.01, k2: float = 0.03, windowed: bool = False) -> float:
    """Structural similarity from whole-channel statistics, averaged over channels.

    Variances and covariance use the population convention (divide by N).
    ``windowed=True`` switches to the usual 11x11 Gaussian-window variant.
    """
    x, y = _pair(x, y)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    xs, ys = _channels(x), _channels(y)
    if windowed:
        win = _gaussian_window()[None, None]
        xs, ys = xs[:, None], ys[:, None]
        mu_x, mu_y = F.conv2d(xs, win), F.conv2d(ys, win)
        var_x = F.conv2d(xs * xs, win) - mu_x**2
        var_y = F.conv2d(ys * ys, win) - mu_y**2
        cov = F.conv2d(xs * ys, win) - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
        return float(s.mean())
    mu_x = xs.mean(dim=(-2, -1))
    mu_y = ys.mean(dim=(-2, -1))
    dx = xs - mu_x[:, None, None]
    dy = ys - mu_y[:, None, None]
    var_x = (dx**2).mean(dim=(-2, -1))
    var_y = (dy**2).mean(dim=(-2, -1))
    cov = (dx * dy).mean(dim=(-2, -1))
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2))
    return float(s.mean())


def ncc(s, s_hat) -> float:
    """Cosine similarity of the flattened pixel vectors (all channels)."""
    a, b = _pair(s, s_hat)
    a, b = a.flatten(), b.flatten()
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise UndefinedMetricError("NCC undefined for a zero-norm image")
    return float(torch.dot(a, b) / (na * nb))


def success_rate(nccs: Iterable[float], threshold: float = NCC_THRESHOLD) -> float:
    """Fraction of retrievals whose NCC is strictly above ``threshold``."""
    values = list(nccs)
    if not values:
        raise ContractError("success rate of an empty set")
    return sum(v > threshold for v in values) / len(values)


def residue(a, b, gain: float = 10.0) -> torch.Tensor:
    """Amplified absolute difference ``clamp(gain * |a - b|, 0, 1)``."""
    a_, b_ = _pair(a, b)
    out = (gain * (a_ - b_).abs()).clamp(0, 1)
    return out.to(torch.as_tensor(a).dtype if torch.is_tensor(a) else torch.float64)


@dataclass
class MetricRow:
    id: str
    psnr_db: float
    ssim: float
    ncc: float
    valid: bool


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    threshold: float = NCC_THRESHOLD

    def add(self, id: str, psnr_db: float, ssim_value: float, ncc_value: float) -> MetricRow:
        row = MetricRow(str(id), float(psnr_db), float(ssim_value), float(ncc_value), bool(ncc_value > self.threshold))
        self.rows.append(row)
        return row

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            raise ContractError("empty report")
        n = len(self.rows)
        return {
            "mean_psnr": sum(r.psnr_db for r in self.rows) / n,
            "mean_ssim": sum(r.ssim for r in self.rows) / n,
            "mean_ncc": sum(r.ncc for r in self.rows) / n,
            "sr": sum(r.valid for r in self.rows) / n,
        }

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(REPORT_COLUMNS)
            for r in sorted(self.rows, key=lambda r: r.id):
                wr.writerow([r.id, repr(r.psnr_db), repr(r.ssim), repr(r.ncc), int(r.valid)])

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "rows": [asdict(r) for r in sorted(self.rows, key=lambda r: r.id)],
            "aggregate": self.aggregate(),
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True))
