"""Image I/O, 8-bit codecs, dataset splits and seeded randomness.

Images are float tensors shaped ``(3, H, W)`` (or ``(B, 3, H, W)`` for
batches) with values in ``[0, 1]``. Conversion to 8-bit happens only at file
boundaries and inside the JPEG codec.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import ConfigError, ContractError, DecodeError, FormatError, ImageIOError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
_CONVERTIBLE_MODES = {"RGB", "RGBA", "L", "LA", "P", "PA", "CMYK", "YCbCr", "1"}


def seeded_generator(seed: int, stream: int | None = None) -> torch.Generator:
    """Return a torch generator for ``seed``; ``stream`` selects an independent substream."""
    if stream is None:
        value = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
    else:
        ss = np.random.SeedSequence([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, int(stream)])
        value = int(ss.generate_state(1, dtype=np.uint64)[0])
    g = torch.Generator()
    g.manual_seed(value & 0x7FFF_FFFF_FFFF_FFFF)
    return g


def randint(gen: torch.Generator, high: int) -> int:
    return int(torch.randint(high, (1,), generator=gen).item())


def uniform(gen: torch.Generator, lo: float = 0.0, hi: float = 1.0) -> float:
    u = float(torch.rand((), generator=gen, dtype=torch.float64).item())
    return lo + (hi - lo) * u


def check_image(img: torch.Tensor) -> None:
    if img.dim() not in (3, 4) or img.shape[-3] != 3:
        raise ContractError(f"expected (3,H,W) or (B,3,H,W) image, got {tuple(img.shape)}")


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` unit-range tensor to an ``(H, W, 3)`` uint8 array."""
    check_image(img)
    arr = img.detach().to(torch.float64).clamp(0, 1).mul(255.0).round()
    return arr.to(torch.uint8).permute(1, 2, 0).contiguous().numpy()


def from_uint8(arr: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.array(arr, copy=True)).permute(2, 0, 1).to(dtype) / 255.0


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Round to the nearest 8-bit level, keeping dtype and shape."""
    return img.clamp(0, 1).mul(255.0).round().div(255.0)


def encode_jpeg(img: torch.Tensor, quality: int) -> bytes:
    """Encode one image with the real JPEG codec (4:4:4, baseline IJG tables)."""
    if not 1 <= int(quality) <= 100:
        raise ConfigError(f"jpeg quality must be in [1, 100], got {quality}")
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(img), "RGB").save(buf, format="JPEG", quality=int(quality), subsampling=0)
    return buf.getvalue()


def jpeg_roundtrip(img: torch.Tensor, quality: int) -> torch.Tensor:
    if img.dim() == 4:
        return torch.stack([jpeg_roundtrip(x, quality) for x in img])
    data = encode_jpeg(img, quality)
    decoded = np.asarray(PILImage.open(io.BytesIO(data)).convert("RGB"))
    return from_uint8(decoded, img.dtype)


def _resize(img: torch.Tensor, side: int) -> torch.Tensor:
    if img.shape[-1] == side and img.shape[-2] == side:
        return img
    out = F.interpolate(img[None], size=(side, side), mode="bilinear", align_corners=False, antialias=True)
    return out[0].clamp(0, 1)


def center_crop_square(img: torch.Tensor) -> torch.Tensor:
    h, w = img.shape[-2:]
    m = min(h, w)
    top, left = (h - m) // 2, (w - m) // 2
    return img[..., top : top + m, left : left + m]


def load_image(path: str | Path, side: int | None = None) -> torch.Tensor:
    """Load an image file, center-crop it to a square and resize to ``side``."""
    path = Path(path)
    try:
        pil = PILImage.open(path)
        pil.load()
    except FileNotFoundError as exc:
        raise ImageIOError(f"no such image: {path}") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if pil.mode not in _CONVERTIBLE_MODES:
        raise FormatError(f"{path}: unsupported pixel mode {pil.mode!r}")
    img = from_uint8(np.asarray(pil.convert("RGB")))
    img = center_crop_square(img)
    if side is not None:
        img = _resize(img, int(side))
    return img.contiguous()


def save_image(img: torch.Tensor, path: str | Path, format: str = "png", quality: int = 90) -> None:
    path = Path(path)
    if img.dim() != 3:
        raise ContractError("save_image expects a single (3,H,W) image")
    fmt = format.lower()
    if fmt not in ("png", "jpg", "jpeg"):
        raise ConfigError(f"unknown image format {format!r}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "png":
            PILImage.fromarray(to_uint8(img), "RGB").save(path, format="PNG")
        else:
            path.write_bytes(encode_jpeg(img, quality))
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def null_image(side: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """The all-black image the retriever should emit for clean inputs."""
    if side < 1:
        raise ConfigError("side must be >= 1")
    return torch.zeros(3, side, side, dtype=dtype)


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_stack(paths: Sequence[str | Path], side: int) -> torch.Tensor:
    if not paths:
        raise ConfigError("no images to load")
    return torch.stack([load_image(p, side) for p in paths])


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    eval: list


def make_splits(paths: Sequence, eval_count: int, gen: torch.Generator) -> DatasetSplit:
    paths = list(paths)
    if not 0 <= eval_count < len(paths):
        raise ConfigError(f"eval_count={eval_count} must be < number of paths ({len(paths)})")
    order = torch.randperm(len(paths), generator=gen).tolist()
    ev = sorted(order[:eval_count])
    tr = sorted(order[eval_count:])
    return DatasetSplit(train=[paths[i] for i in tr], eval=[paths[i] for i in ev])


def pair_indices(n: int, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """One epoch of (cover, secret) index pairs drawn without replacement.

    Covers and secrets come from the same pool; an image is never paired with
    itself.
    """
    if n < 2:
        raise ConfigError("need at least two images to form pairs")
    covers = torch.randperm(n, generator=gen)
    shift = 1 + randint(gen, n - 1)
    secrets = covers.roll(shift)
    return covers, secrets
