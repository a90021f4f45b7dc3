"""Embedding (UNet) and retrieval (CEILNet-style) networks, container
construction and checkpoints."""
from __future__ import annotations

import math
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

from .errors import ConfigError, ContractError, ImageIOError

CHECKPOINT_FORMAT = "lfstego-checkpoint/1"


@dataclass
class EmbedderSpec:
    side: int = 64
    base_channels: int = 32
    max_channels: int = 256
    depth: int | None = None

    def __post_init__(self):
        if self.side < 2 or self.side & (self.side - 1):
            raise ConfigError(f"side must be a power of two >= 2, got {self.side}")
        if self.depth is None:
            self.depth = int(math.log2(self.side))
        if self.depth < 1 or 2**self.depth > self.side:
            raise ConfigError(f"depth {self.depth} too deep for side {self.side}")

    @property
    def widths(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.max_channels) for i in range(self.depth)]


@dataclass
class RetrieverSpec:
    width: int = 16
    down_blocks: int = 3
    res_blocks: int = 9
    up_blocks: int = 3

    def __post_init__(self):
        if self.down_blocks < 1 or self.up_blocks < 1 or self.res_blocks < 0 or self.width < 1:
            raise ConfigError("retriever needs >= 1 down/up block and a positive width")


def _conv_init(module: nn.Module, gain: float) -> None:
    if isinstance(module, nn.ConvTranspose2d):
        k = module.kernel_size[0] * module.kernel_size[1] // (module.stride[0] * module.stride[1])
        nn.init.normal_(module.weight, 0.0, gain / math.sqrt(module.in_channels * k))
    elif isinstance(module, nn.Conv2d):
        fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
        nn.init.normal_(module.weight, 0.0, gain / math.sqrt(fan_in))
    else:
        return
    if module.bias is not None:
        nn.init.zeros_(module.bias)


class Embedder(nn.Module):
    """UNet mapping a secret image to a feature map of the same size.

    Encoder blocks: 4x4 stride-2 conv, LeakyReLU(0.2), BatchNorm. Decoder
    blocks: 4x4 stride-2 transposed conv, ReLU, BatchNorm, fed with the
    matching encoder features. Ends in a sigmoid.
    """

    def __init__(self, spec: EmbedderSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths
        self.down = nn.ModuleList()
        c_in = 3
        for i, w in enumerate(widths):
            layers: list[nn.Module] = [nn.Conv2d(c_in, w, 4, 2, 1), nn.LeakyReLU(0.2)]
            if i < len(widths) - 1:
                layers.append(nn.BatchNorm2d(w))
            self.down.append(nn.Sequential(*layers))
            c_in = w
        self.up = nn.ModuleList()
        for i in reversed(range(1, len(widths))):
            c_in = widths[i] if i == len(widths) - 1 else 2 * widths[i]
            self.up.append(nn.Sequential(nn.ConvTranspose2d(c_in, widths[i - 1], 4, 2, 1), nn.ReLU(), nn.BatchNorm2d(widths[i - 1])))
        last_in = widths[0] if len(widths) == 1 else 2 * widths[0]
        self.head = nn.ConvTranspose2d(last_in, 3, 4, 2, 1)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        skips = []
        x = s
        for block in self.down:
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = block(x)
            x = torch.cat([x, skips.pop()], 1)
        return torch.sigmoid(self.head(x))


def _unit(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride, 1), nn.BatchNorm2d(c_out), nn.ReLU())


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1), nn.BatchNorm2d(channels), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 1, 1), nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Retriever(nn.Module):
    """Down-sampling units, residual blocks, up-sampling units, sigmoid output."""

    def __init__(self, spec: RetrieverSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        down: list[nn.Module] = [_unit(3, w)]
        for _ in range(spec.down_blocks - 2):
            down.append(_unit(w, w))
        if spec.down_blocks > 1:
            down.append(_unit(w, 2 * w, stride=2))
            inner = 2 * w
        else:
            down = [_unit(3, 2 * w, stride=2)]
            inner = 2 * w
        self.down = nn.Sequential(*down)
        self.res = nn.Sequential(*[ResidualBlock(inner) for _ in range(spec.res_blocks)])
        up: list[nn.Module] = [nn.Sequential(nn.ConvTranspose2d(inner, w, 4, 2, 1), nn.BatchNorm2d(w), nn.ReLU())]
        for _ in range(spec.up_blocks - 2):
            up.append(_unit(w, w))
        up.append(nn.Conv2d(w, 3, 3, 1, 1))
        self.up = nn.Sequential(*up)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.up(self.res(self.down(x))))


class StegoModel(nn.Module):
    """Embedder and retriever trained jointly.

    ``residual="centered"`` maps the embedder's sigmoid output ``o`` to the
    signed feature map ``strength * (2o - 1)``; ``residual="raw"`` adds ``o``
    unchanged.
    """

    def __init__(self, embedder_spec: EmbedderSpec, retriever_spec: RetrieverSpec,
                 strength: float = 0.2, residual: str = "centered"):
        super().__init__()
        if residual not in ("centered", "raw"):
            raise ConfigError(f"unknown residual mode {residual!r}")
        self.embedder_spec = embedder_spec
        self.retriever_spec = retriever_spec
        self.strength = float(strength)
        self.residual = residual
        self.embedder = Embedder(embedder_spec)
        self.retriever = Retriever(retriever_spec)

    def _check(self, x: torch.Tensor) -> None:
        side = self.embedder_spec.side
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-1] != side or x.shape[-2] != side:
            raise ContractError(f"expected (B,3,{side},{side}) input, got {tuple(x.shape)}")

    def embed(self, s: torch.Tensor) -> torch.Tensor:
        self._check(s)
        o = self.embedder(s)
        return o if self.residual == "raw" else self.strength * (2 * o - 1)

    def retrieve(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.retriever(x)

    def hide(self, cover: torch.Tensor, secret: torch.Tensor) -> torch.Tensor:
        return make_container(cover, self.embed(secret))

    def describe(self) -> dict[str, Any]:
        return {
            "embedder": asdict(self.embedder_spec),
            "retriever": asdict(self.retriever_spec),
            "strength": self.strength,
            "residual": self.residual,
        }


def make_container(cover: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """``clamp(cover + q, 0, 1)``."""
    if cover.shape != q.shape:
        raise ContractError(f"shape mismatch {tuple(cover.shape)} vs {tuple(q.shape)}")
    return (cover + q).clamp(0, 1)


def init_params(embedder_spec: EmbedderSpec, retriever_spec: RetrieverSpec, seed: int,
                strength: float = 0.2, residual: str = "centered", dtype=torch.float32) -> StegoModel:
    """Build a model with fan-in scaled normal weights drawn from ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = StegoModel(embedder_spec, retriever_spec, strength, residual)
        model.embedder.apply(lambda m: _conv_init(m, math.sqrt(2 / (1 + 0.2**2))))
        model.retriever.apply(lambda m: _conv_init(m, math.sqrt(2)))
    return model.to(dtype)


def save_checkpoint(path: str | Path, model: StegoModel, optimizer: torch.optim.Optimizer | None = None,
                    epoch: int = 0, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model": model.describe(),
        "state": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "rng": torch.get_rng_state(),
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise ImageIOError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[StegoModel, dict]:
    """Return ``(model, payload)``; the model is in evaluation mode."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise ImageIOError(f"no such checkpoint: {path}") from exc
    except (RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise ConfigError(f"{path} is not a checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint")
    desc = payload["model"]
    model = StegoModel(EmbedderSpec(**desc["embedder"]), RetrieverSpec(**desc["retriever"]),
                       desc["strength"], desc["residual"])
    first = next(iter(payload["state"].values()))
    model = model.to(first.dtype)
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload
