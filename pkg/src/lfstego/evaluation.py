"""Evaluation protocols: fidelity, robustness, specificity and filter sweeps."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from . import imaging
from .attacks import AttackConfig, adjust_color, attack_layer, crop_resize, gaussian_blur, jpeg_attack, sample_crop_box, sample_jitter
from .errors import ContractError, UndefinedMetricError
from .metrics import NCC_THRESHOLD, MetricReport, ncc, psnr, ssim, success_rate
from .models import StegoModel
from .spectral import high_pass, low_pass, out_of_band_fraction, r_max

ROBUSTNESS_ATTACKS = ("jpeg", "lowpass", "blur", "jitter", "crop")


@dataclass
class EvalAttackParams:
    jpeg_quality: int = 50
    blur_sigma: float = 1.0
    blur_kernel: int = 7
    lowpass_frac: float = 0.5
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.1
    crop_scale: float = 0.75

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def _batched_call(fn, x: torch.Tensor, chunk: int = 32) -> torch.Tensor:
    return torch.cat([fn(x[i : i + chunk]) for i in range(0, len(x), chunk)])


@torch.no_grad()
def embed_all(model: StegoModel, covers: torch.Tensor, secrets: torch.Tensor, quantize: bool = True):
    """Containers (8-bit quantized unless told otherwise) and feature maps."""
    model.eval()
    q = _batched_call(model.embed, secrets)
    containers = (covers + q).clamp(0, 1)
    if quantize:
        containers = imaging.quantize(containers)
    return containers, q


@torch.no_grad()
def retrieve_all(model: StegoModel, images: torch.Tensor) -> torch.Tensor:
    model.eval()
    return _batched_call(model.retrieve, images)


def _safe_ncc(a, b) -> float:
    try:
        return ncc(a, b)
    except UndefinedMetricError:
        # an all-black retrieval carries no correlation with the secret
        return 0.0


def compare(refs: torch.Tensor, outs: torch.Tensor, ids=None, threshold: float = NCC_THRESHOLD) -> MetricReport:
    if len(refs) == 0:
        raise ContractError("empty evaluation set")
    rep = MetricReport(threshold=threshold)
    ids = ids if ids is not None else [f"{i:05d}" for i in range(len(refs))]
    for i, (a, b) in enumerate(zip(refs, outs)):
        rep.add(ids[i], psnr(a, b), ssim(a, b), _safe_ncc(a, b))
    return rep


def make_pairs(images: torch.Tensor, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    covers, secrets = imaging.pair_indices(len(images), imaging.seeded_generator(seed, 7))
    return images[covers], images[secrets]


def fidelity(model, covers, secrets) -> dict[str, MetricReport]:
    containers, _ = embed_all(model, covers, secrets)
    recovered = retrieve_all(model, containers)
    return {"container": compare(covers, containers), "secret": compare(secrets, recovered)}


def apply_eval_attack(name: str, images: torch.Tensor, params: EvalAttackParams, seed: int) -> torch.Tensor:
    """Evaluation-time attacks with fixed strengths (exact JPEG codec)."""
    side = images.shape[-1]
    if name == "jpeg":
        return jpeg_attack(images, params.jpeg_quality, "exact")
    if name == "lowpass":
        return imaging.quantize(low_pass(images, params.lowpass_frac * r_max(side)))
    if name == "blur":
        return imaging.quantize(gaussian_blur(images, params.blur_sigma, params.blur_kernel))
    gen = imaging.seeded_generator(seed, 11)
    if name == "jitter":
        strength = {"brightness": params.brightness, "contrast": params.contrast,
                    "saturation": params.saturation, "hue": params.hue}
        return imaging.quantize(torch.stack([adjust_color(x, **sample_jitter(strength, gen)) for x in images]))
    if name == "crop":
        s = params.crop_scale
        return imaging.quantize(torch.stack([crop_resize(x, sample_crop_box(side, side, (s, s), gen)) for x in images]))
    raise ContractError(f"unknown evaluation attack {name!r}")


def robustness(model, covers, secrets, params: EvalAttackParams | None = None, seed: int = 0) -> dict[str, MetricReport]:
    params = params or EvalAttackParams()
    containers, _ = embed_all(model, covers, secrets)
    out = {}
    for name in ROBUSTNESS_ATTACKS:
        attacked = apply_eval_attack(name, containers, params, seed)
        out[name] = compare(secrets, retrieve_all(model, attacked))
    return out


def damaged_clean(covers: torch.Tensor, attack_cfg: AttackConfig, seed: int) -> torch.Tensor:
    """Covers run through the training attack layer (exact codec) with every image attacked at least once."""
    gen = imaging.seeded_generator(seed, 13)
    out = []
    for x in covers:
        for _ in range(64):
            y, plan = attack_layer(x, attack_cfg, gen, mode="exact")
            if not plan.is_empty:
                break
        out.append(y)
    return imaging.quantize(torch.stack(out))


def specificity(model, covers, secrets, attack_cfg: AttackConfig | None = None, seed: int = 0) -> dict[str, MetricReport]:
    attack_cfg = attack_cfg or AttackConfig(include_geometric_in_training=True)
    return {
        "clean": compare(secrets, retrieve_all(model, covers)),
        "damaged_clean": compare(secrets, retrieve_all(model, damaged_clean(covers, attack_cfg, seed))),
    }


def sweep_filters(model, covers, secrets, d_list) -> list[dict]:
    containers, _ = embed_all(model, covers, secrets)
    rows = []
    for kind, fn in (("highpass", high_pass), ("lowpass", low_pass)):
        for d in d_list:
            attacked = imaging.quantize(fn(containers, float(d)))
            nccs = [_safe_ncc(s, r) for s, r in zip(secrets, retrieve_all(model, attacked))]
            rows.append({"filter": kind, "d": float(d), "mean_ncc": sum(nccs) / len(nccs), "sr": success_rate(nccs)})
    return rows


@torch.no_grad()
def feature_band_fraction(model, secrets: torch.Tensor, d: float) -> float:
    """Mean fraction of feature-map energy outside radius ``d``."""
    model.eval()
    q = _batched_call(model.embed, secrets)
    return float(out_of_band_fraction(q, d).mean())


def summarize(reports: dict[str, MetricReport]) -> dict[str, dict]:
    return {k: v.aggregate() for k, v in reports.items()}
