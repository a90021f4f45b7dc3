"""Image distortions used to harden the retriever and to test robustness.

Every attack takes a unit-range image ``(3, H, W)`` or batch ``(B, 3, H, W)``
and returns a tensor of the same shape and range. Attacks other than the
exact JPEG codec are differentiable with respect to the image.

:func:`attack_layer` draws a random composition of attacks and returns an
:class:`AttackPlan` that replays the same distortion.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import torch
import torch.nn.functional as F

from . import imaging
from .errors import ConfigError
from .spectral import high_pass, low_pass, r_max

ORDER = ("lowpass", "blur", "noise", "jitter", "crop", "jpeg")
BASE_POOL = ("lowpass", "blur", "noise", "jpeg")
GEOMETRIC_POOL = ("jitter", "crop")

_LUMA = (0.299, 0.587, 0.114)

_QT_LUMA = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
]
_QT_CHROMA = [
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
] + [[99] * 8] * 4


def _batched(img: torch.Tensor) -> tuple[torch.Tensor, bool]:
    imaging.check_image(img)
    return (img[None], True) if img.dim() == 3 else (img, False)


def _round_st(x: torch.Tensor) -> torch.Tensor:
    """Round in the forward pass, identity gradient in the backward pass."""
    return x + (torch.round(x) - x).detach()


# --- JPEG -------------------------------------------------------------------


def quant_tables(quality: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """IJG quality-scaled luma and chroma quantization tables."""
    if not 1 <= int(quality) <= 100:
        raise ConfigError(f"jpeg quality must be in [1, 100], got {quality}")
    q = int(quality)
    scale = 5000 // q if q < 50 else 200 - 2 * q
    out = []
    for base in (_QT_LUMA, _QT_CHROMA):
        t = (torch.tensor(base, dtype=torch.long) * scale + 50) // 100
        out.append(t.clamp(1, 255).to(dtype))
    return out[0], out[1]


def _dct_matrix(dtype) -> torch.Tensor:
    n = torch.arange(8, dtype=torch.float64)
    k = n[:, None]
    m = torch.cos((2 * n[None, :] + 1) * k * math.pi / 16)
    m[0] *= math.sqrt(1 / 8)
    m[1:] *= math.sqrt(2 / 8)
    return m.to(dtype)


def rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    """JFIF conversion on the 0-255 scale, channel dim -3."""
    r, g, b = x.unbind(-3)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return torch.stack([y, cb, cr], -3)


def ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x.unbind(-3)
    cb, cr = cb - 128, cr - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], -3)


def differentiable_jpeg(img: torch.Tensor, quality: int, rounding: bool = True) -> torch.Tensor:
    """Block-DCT JPEG simulation (4:4:4) with straight-through rounding.

    ``rounding=False`` gives the smooth surrogate whose gradient the
    straight-through path reproduces.
    """
    x, single = _batched(img)
    rnd = _round_st if rounding else (lambda t: t)
    b, _, h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    H, W = x.shape[-2:]
    ycc = rnd(rgb_to_ycbcr(x * 255.0)) - 128.0
    qy, qc = quant_tables(quality, x.dtype)
    qt = torch.stack([qy, qc, qc]).to(x.device)[None, :, None, None]  # (1,3,1,1,8,8)
    d = _dct_matrix(x.dtype).to(x.device)
    blocks = ycc.reshape(b, 3, H // 8, 8, W // 8, 8).permute(0, 1, 2, 4, 3, 5)
    coef = d @ blocks @ d.T
    coef = rnd(coef / qt) * qt
    blocks = d.T @ coef @ d
    ycc = blocks.permute(0, 1, 2, 4, 3, 5).reshape(b, 3, H, W) + 128.0
    rgb = rnd(ycbcr_to_rgb(rnd(ycc.clamp(0, 255))).clamp(0, 255)) / 255.0
    rgb = rgb[..., :h, :w].clamp(0, 1)
    return rgb[0] if single else rgb


def jpeg_attack(img: torch.Tensor, quality: int, mode: str = "exact") -> torch.Tensor:
    if mode == "exact":
        return imaging.jpeg_roundtrip(img.detach(), quality)
    if mode == "differentiable":
        return differentiable_jpeg(img, quality)
    raise ConfigError(f"unknown jpeg mode {mode!r}")


# --- blur, noise ------------------------------------------------------------


def gaussian_kernel1d(sigma: float, kernel_size: int, dtype=torch.float64) -> torch.Tensor:
    if sigma <= 0:
        raise ConfigError("blur sigma must be > 0")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError("blur kernel size must be a positive odd integer")
    t = torch.arange(kernel_size, dtype=torch.float64) - kernel_size // 2
    g = torch.exp(-(t**2) / (2.0 * sigma * sigma))
    return (g / g.sum()).to(dtype)


def gaussian_blur(img: torch.Tensor, sigma: float, kernel_size: int = 7) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding."""
    x, single = _batched(img)
    g = gaussian_kernel1d(sigma, kernel_size, x.dtype).to(x.device)
    p = kernel_size // 2
    c = x.shape[1]
    mode = "reflect" if min(x.shape[-2:]) > p else "replicate"
    y = F.pad(x, (p, p, 0, 0), mode=mode)
    y = F.conv2d(y, g.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    y = F.pad(y, (0, 0, p, p), mode=mode)
    y = F.conv2d(y, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    y = y.clamp(0, 1)
    return y[0] if single else y


def noise_field(shape, sigma_8bit: float, seed: int, dtype=torch.float32) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=g, dtype=torch.float64).mul(sigma_8bit / 255.0).to(dtype)


def additive_noise(img: torch.Tensor, sigma_8bit: float, seed: int) -> torch.Tensor:
    """Add i.i.d. Gaussian noise with std ``sigma_8bit / 255``; the field is fixed by ``seed``."""
    if sigma_8bit < 0:
        raise ConfigError("noise sigma must be >= 0")
    if sigma_8bit == 0:
        return img
    return (img + noise_field(img.shape, sigma_8bit, seed, img.dtype).to(img.device)).clamp(0, 1)


def poisson_noise(img: torch.Tensor, scale: float, seed: int) -> torch.Tensor:
    """Shot noise with rate ``img * scale``; straight-through gradient."""
    if scale <= 0:
        raise ConfigError("poisson scale must be > 0")
    g = torch.Generator().manual_seed(int(seed))
    rate = (img.detach().to(torch.float64) * scale).clamp(min=0)
    noisy = (torch.poisson(rate, generator=g) / scale).to(img.dtype)
    return (img + (noisy - img).detach()).clamp(0, 1)


# --- colour -----------------------------------------------------------------


def _gray(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(-3)
    return (_LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b).unsqueeze(-3)


def _hue_matrix(turns: float, dtype) -> torch.Tensor:
    """Rotation about the gray axis by ``turns`` of a full circle."""
    th = 2 * math.pi * turns
    k = torch.full((3,), 1 / math.sqrt(3), dtype=torch.float64)
    kx = torch.tensor([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]], dtype=torch.float64)
    m = math.cos(th) * torch.eye(3, dtype=torch.float64) + math.sin(th) * kx + (1 - math.cos(th)) * torch.outer(k, k)
    return m.to(dtype)


def adjust_color(img, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.0) -> torch.Tensor:
    """Apply brightness, contrast, saturation and hue changes in that order."""
    x = img
    if brightness != 1.0:
        x = (x * brightness).clamp(0, 1)
    if contrast != 1.0:
        m = _gray(x).mean(dim=(-3, -2, -1), keepdim=True)
        x = (m + contrast * (x - m)).clamp(0, 1)
    if saturation != 1.0:
        g = _gray(x)
        x = (g + saturation * (x - g)).clamp(0, 1)
    if hue != 0.0:
        m = _hue_matrix(hue, x.dtype).to(x.device)
        x = torch.einsum("ij,...jhw->...ihw", m, x).clamp(0, 1)
    return x


def sample_jitter(strength: dict[str, float], gen: torch.Generator) -> dict[str, float]:
    out = {}
    for name in ("brightness", "contrast", "saturation"):
        beta = float(strength.get(name, 0.0))
        if beta < 0:
            raise ConfigError(f"{name} strength must be >= 0")
        out[name] = imaging.uniform(gen, 1 - beta, 1 + beta) if beta > 0 else 1.0
    beta_h = float(strength.get("hue", 0.0))
    if beta_h < 0:
        raise ConfigError("hue strength must be >= 0")
    out["hue"] = imaging.uniform(gen, -beta_h, beta_h) if beta_h > 0 else 0.0
    return out


def color_jitter(img: torch.Tensor, strength: dict[str, float], gen: torch.Generator) -> torch.Tensor:
    return adjust_color(img, **sample_jitter(strength, gen))


# --- geometry ---------------------------------------------------------------


def sample_crop_box(height: int, width: int, scale: tuple[float, float], gen: torch.Generator,
                    ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """Random ``(top, left, h, w)`` covering an area fraction in ``scale``."""
    lo, hi = scale
    if not (0 < lo <= hi <= 1):
        raise ConfigError(f"crop scale must satisfy 0 < lo <= hi <= 1, got {scale}")
    area = height * width
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * imaging.uniform(gen, lo, hi)
        aspect = math.exp(imaging.uniform(gen, *log_r))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = imaging.randint(gen, height - h + 1)
            left = imaging.randint(gen, width - w + 1)
            return top, left, h, w
    side = min(height, width, int(round(math.sqrt(area * hi))))
    return (height - side) // 2, (width - side) // 2, side, side


def crop_resize(img: torch.Tensor, box: tuple[int, int, int, int]) -> torch.Tensor:
    x, single = _batched(img)
    top, left, h, w = (int(v) for v in box)
    H, W = x.shape[-2:]
    y = x[..., top : top + h, left : left + w]
    if (h, w) != (H, W):
        y = F.interpolate(y, size=(H, W), mode="bilinear", align_corners=False).clamp(0, 1)
    return y[0] if single else y


def resize_crop(img: torch.Tensor, scale_range: tuple[float, float], gen: torch.Generator) -> torch.Tensor:
    box = sample_crop_box(img.shape[-2], img.shape[-1], scale_range, gen)
    return crop_resize(img, box)


# --- composition ------------------------------------------------------------


@dataclass
class AttackConfig:
    jpeg_quality: tuple[int, int] = (40, 90)
    noise_sigma: float = 10.0
    blur_sigma: tuple[float, float] = (0.5, 2.0)
    kernel_size: int = 7
    lowpass_frac: tuple[float, float] = (0.4, 0.9)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.1
    crop_scale: tuple[float, float] = (0.5, 1.0)
    per_attack_probability: float = 0.25
    include_geometric_in_training: bool = False

    def __post_init__(self):
        for name in ("jpeg_quality", "blur_sigma", "lowpass_frac", "crop_scale"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.per_attack_probability <= 1:
            raise ConfigError("per_attack_probability must be in [0, 1]")
        lo, hi = self.jpeg_quality
        if not 1 <= lo <= hi <= 100:
            raise ConfigError("jpeg_quality range must lie in [1, 100]")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError("kernel_size must be odd")
        if not 0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ConfigError("blur_sigma range must be positive and ordered")
        if not 0 <= self.lowpass_frac[0] <= self.lowpass_frac[1] <= 1:
            raise ConfigError("lowpass_frac must be an ordered range within [0, 1]")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")
        if min(self.noise_sigma, self.brightness, self.contrast, self.saturation, self.hue) < 0:
            raise ConfigError("noise and jitter strengths must be >= 0")

    @property
    def pool(self) -> tuple[str, ...]:
        names = set(BASE_POOL)
        if self.include_geometric_in_training:
            names |= set(GEOMETRIC_POOL)
        return tuple(n for n in ORDER if n in names)

    def jitter_strength(self) -> dict[str, float]:
        return {"brightness": self.brightness, "contrast": self.contrast, "saturation": self.saturation, "hue": self.hue}


@dataclass
class AttackStep:
    name: str
    active: bool
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class AttackPlan:
    steps: list[AttackStep] = field(default_factory=list)

    @property
    def active_steps(self) -> list[AttackStep]:
        return [s for s in self.steps if s.active]

    @property
    def is_empty(self) -> bool:
        return not self.active_steps

    def to_json(self) -> str:
        return json.dumps({"steps": [asdict(s) for s in self.steps]}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AttackPlan":
        data = json.loads(line)
        return cls([AttackStep(s["name"], bool(s["active"]), dict(s["params"])) for s in data["steps"]])


def sample_params(name: str, cfg: AttackConfig, side: int, gen: torch.Generator) -> dict[str, Any]:
    if name == "lowpass":
        lo, hi = cfg.lowpass_frac
        return {"d": imaging.uniform(gen, lo, hi) * r_max(side)}
    if name == "blur":
        return {"sigma": imaging.uniform(gen, *cfg.blur_sigma), "kernel_size": cfg.kernel_size}
    if name == "noise":
        return {"sigma": imaging.uniform(gen, 0.0, cfg.noise_sigma), "seed": imaging.randint(gen, 2**62)}
    if name == "jitter":
        return sample_jitter(cfg.jitter_strength(), gen)
    if name == "crop":
        top, left, h, w = sample_crop_box(side, side, cfg.crop_scale, gen)
        return {"box": [top, left, h, w]}
    if name == "jpeg":
        lo, hi = cfg.jpeg_quality
        return {"quality": lo + imaging.randint(gen, hi - lo + 1)}
    raise ConfigError(f"unknown attack {name!r}")


def apply_attack(img: torch.Tensor, name: str, params: dict[str, Any], mode: str = "differentiable") -> torch.Tensor:
    if name == "lowpass":
        return low_pass(img, float(params["d"]))
    if name == "highpass":
        return high_pass(img, float(params["d"]))
    if name == "blur":
        return gaussian_blur(img, float(params["sigma"]), int(params.get("kernel_size", 7)))
    if name == "noise":
        return additive_noise(img, float(params["sigma"]), int(params["seed"]))
    if name == "poisson":
        return poisson_noise(img, float(params["scale"]), int(params["seed"]))
    if name == "jitter":
        return adjust_color(img, **{k: float(params[k]) for k in ("brightness", "contrast", "saturation", "hue")})
    if name == "crop":
        return crop_resize(img, tuple(params["box"]))
    if name == "jpeg":
        return jpeg_attack(img, int(params["quality"]), mode)
    raise ConfigError(f"unknown attack {name!r}")


def replay(img: torch.Tensor, plan: AttackPlan, mode: str = "differentiable") -> torch.Tensor:
    x = img
    for step in plan.active_steps:
        x = apply_attack(x, step.name, step.params, mode)
    return x


def sample_plan(cfg: AttackConfig, side: int, gen: torch.Generator) -> AttackPlan:
    steps = []
    for name in cfg.pool:
        active = imaging.uniform(gen) < cfg.per_attack_probability
        steps.append(AttackStep(name, active, sample_params(name, cfg, side, gen) if active else {}))
    return AttackPlan(steps)


def attack_layer(img: torch.Tensor, cfg: AttackConfig, gen: torch.Generator, mode: str = "differentiable"):
    """Randomly distort ``img``; each pooled attack fires independently.

    Returns ``(attacked, plan)`` for a single image and ``(attacked, plans)``
    with one plan per item for a batch.
    """
    x, single = _batched(img)
    side = x.shape[-1]
    plans = [sample_plan(cfg, side, gen) for _ in range(x.shape[0])]
    if all(p.is_empty for p in plans):
        out = x
    else:
        out = torch.stack([replay(x[i], p, mode) if not p.is_empty else x[i] for i, p in enumerate(plans)])
    return (out[0], plans[0]) if single else (out, plans)
