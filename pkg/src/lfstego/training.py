"""Loss terms, joint training step and the epoch loop with step-decayed Adam."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import torch

from . import imaging
from .attacks import ORDER, AttackConfig, attack_layer
from .errors import ConfigError, ContractError, NumericError
from .models import EmbedderSpec, RetrieverSpec, StegoModel, init_params, make_container, save_checkpoint
from .spectral import focal_frequency_loss, low_pass, r_max, scaled_cutoff

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "l_emb", "l_freq", "l_ret", "l_cln", "total", "lr"] + [f"n_{a}" for a in ORDER]


# "paper" keeps the full-scale optimizer settings; "desk" is tuned for short CPU runs at 64 px
PRESETS: dict[str, dict] = {
    "paper": {"side": 256, "steps_per_epoch": 2500, "epochs": 12},
    "desk": {"lr": 1e-3, "betas": (0.9, 0.999), "decay_every": 7, "retriever": {"width": 24},
             "weights": {"emb": 3.0, "freq": 0.1, "ret": 1.0, "cln": 0.3}},
}


@dataclass
class LossWeights:
    emb: float = 1.0
    freq: float = 1.0
    ret: float = 1.0
    cln: float = 1.0

    def __post_init__(self):
        vals = (self.emb, self.freq, self.ret, self.cln)
        if min(vals) < 0 or max(vals) <= 0:
            raise ConfigError("loss weights must be >= 0 with at least one > 0")


@dataclass
class TrainConfig:
    side: int = 64
    d: float = 50.0  # kept-disk radius at 256x256, rescaled to `side`
    batch_size: int = 16
    steps_per_epoch: int = 100
    epochs: int = 10
    lr: float = 1e-4
    betas: tuple[float, float] = (0.1, 0.5)
    lr_decay: float = 0.2
    decay_every: int = 3
    strength: float = 0.2
    residual: str = "centered"
    ffl_alpha: float = 1.0
    use_attack_layer: bool = True
    use_freq_loss: bool = True
    use_clean_loss: bool = True
    seed: int = 0
    deterministic: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    attack: AttackConfig = field(default_factory=AttackConfig)
    embedder: EmbedderSpec | None = None
    retriever: RetrieverSpec = field(default_factory=RetrieverSpec)

    def __post_init__(self):
        for name, kind in (("weights", LossWeights), ("attack", AttackConfig),
                           ("embedder", EmbedderSpec), ("retriever", RetrieverSpec)):
            value = getattr(self, name)
            if isinstance(value, dict):
                try:
                    setattr(self, name, kind(**value))
                except TypeError as exc:
                    raise ConfigError(f"{name}: {exc}") from exc
        if self.embedder is None:
            self.embedder = EmbedderSpec(side=self.side)
        self.betas = tuple(self.betas)
        if self.embedder.side != self.side:
            raise ConfigError("embedder side must equal the training side")
        for name in ("side", "batch_size", "steps_per_epoch", "lr", "strength", "decay_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 <= self.cutoff <= r_max(self.side):
            raise ConfigError(f"cutoff {self.cutoff} outside [0, r_max]")

    @property
    def cutoff(self) -> float:
        return scaled_cutoff(self.d, self.side)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"no such config file: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def embedding_loss(cover: torch.Tensor, container: torch.Tensor) -> torch.Tensor:
    return _mse(cover, container)


def retrieval_loss(secret: torch.Tensor, recovered: torch.Tensor) -> torch.Tensor:
    return _mse(secret, recovered)


def clean_loss(r_clean: torch.Tensor) -> torch.Tensor:
    """Distance of the retriever's output on clean covers from the black image."""
    return (r_clean**2).mean()


def total_loss(components: dict[str, torch.Tensor], weights: LossWeights,
               use_freq_loss: bool = True, use_clean_loss: bool = True) -> torch.Tensor:
    for name, value in components.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericError(f"non-finite {name} loss: {float(value)}")
    total = weights.emb * components["emb"] + weights.ret * components["ret"]
    if use_freq_loss:
        total = total + weights.freq * components["freq"]
    if use_clean_loss:
        total = total + weights.cln * components["cln"]
    return total


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: decayed by ``lr_decay`` every ``decay_every`` epochs."""
    return cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.decay_every)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    l_emb: float
    l_freq: float
    l_ret: float
    l_cln: float
    total: float
    lr: float
    attacks: dict[str, int] = field(default_factory=dict)

    def row(self) -> list:
        return [self.epoch, self.step] + [repr(float(v)) for v in
                (self.l_emb, self.l_freq, self.l_ret, self.l_cln, self.total, self.lr)] + \
               [self.attacks.get(a, 0) for a in ORDER]


@dataclass
class TrainState:
    model: StegoModel
    optimizer: torch.optim.Optimizer
    attack_gen: torch.Generator
    pair_gen: torch.Generator
    epoch: int = 0
    step: int = 0
    plans: list = field(default_factory=list)


def new_state(cfg: TrainConfig) -> TrainState:
    model = init_params(cfg.embedder, cfg.retriever, cfg.seed, cfg.strength, cfg.residual)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    return TrainState(model, opt, imaging.seeded_generator(cfg.seed, 1), imaging.seeded_generator(cfg.seed, 2))


def compute_losses(model: StegoModel, cover: torch.Tensor, secret: torch.Tensor, cfg: TrainConfig,
                   attack_gen: torch.Generator | None = None):
    """Forward pass of the full pipeline; returns ``(components, plans)``."""
    q = model.embed(secret)
    q_target = low_pass(q, cfg.cutoff, clamp=None).detach()
    container = make_container(cover, q)
    plans: list = []
    attacked = container
    if cfg.use_attack_layer and attack_gen is not None:
        attacked, plans = attack_layer(container, cfg.attack, attack_gen)
    out = model.retrieve(torch.cat([attacked, cover]))
    recovered, r_clean = out[: len(cover)], out[len(cover):]
    components = {
        "emb": embedding_loss(cover, container),
        "freq": focal_frequency_loss(q, q_target, cfg.ffl_alpha),
        "ret": retrieval_loss(secret, recovered),
        "cln": clean_loss(r_clean),
    }
    return components, plans


def train_step(state: TrainState, cover: torch.Tensor, secret: torch.Tensor, cfg: TrainConfig) -> TrainLogRecord:
    state.model.train()
    components, plans = compute_losses(state.model, cover, secret, cfg, state.attack_gen)
    total = total_loss(components, cfg.weights, cfg.use_freq_loss, cfg.use_clean_loss)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.step += 1
    state.plans = plans
    counts = {a: 0 for a in ORDER}
    for p in plans:
        for s in p.active_steps:
            counts[s.name] += 1
    return TrainLogRecord(
        epoch=state.epoch, step=state.step,
        l_emb=components["emb"].item(), l_freq=components["freq"].item(),
        l_ret=components["ret"].item(), l_cln=components["cln"].item(),
        total=total.item(), lr=state.optimizer.param_groups[0]["lr"], attacks=counts,
    )


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _batches(n: int, cfg: TrainConfig, gen: torch.Generator):
    while True:
        covers, secrets = imaging.pair_indices(n, gen)
        for i in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            yield covers[i : i + cfg.batch_size], secrets[i : i + cfg.batch_size]


def write_log(path: str | Path, records: list[TrainLogRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_COLUMNS)
        for r in records:
            wr.writerow(r.row())


def train(cfg: TrainConfig, images: torch.Tensor, out_dir: str | Path | None = None,
          callback: Callable[[TrainLogRecord], None] | None = None) -> tuple[StegoModel, list[TrainLogRecord]]:
    """Run ``epochs x steps_per_epoch`` joint steps over ``images`` (N, 3, side, side).

    With ``out_dir`` a checkpoint is written after every epoch plus
    ``final.ckpt`` and ``train_log.csv``. On a non-finite loss the last
    epoch checkpoint is kept and :class:`NumericError` propagates.
    """
    if images.dim() != 4 or len(images) == 0:
        raise ConfigError("training set is empty")
    if images.shape[-1] != cfg.side:
        raise ConfigError(f"training images are {images.shape[-1]}px, config side is {cfg.side}")
    if len(images) < max(2, cfg.batch_size):
        raise ConfigError(f"need at least {max(2, cfg.batch_size)} training images")
    set_deterministic(cfg.deterministic)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = new_state(cfg)
    records: list[TrainLogRecord] = []
    batches = _batches(len(images), cfg, state.pair_gen)
    extra = {"config": cfg.to_dict()}
    if out is not None and cfg.epochs == 0:
        save_checkpoint(out / "final.ckpt", state.model, state.optimizer, 0, extra)
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        for group in state.optimizer.param_groups:
            group["lr"] = lr_at_epoch(cfg, epoch)
        for _ in range(cfg.steps_per_epoch):
            ci, si = next(batches)
            rec = train_step(state, images[ci], images[si], cfg)
            records.append(rec)
            if callback is not None:
                callback(rec)
        log.info("epoch %d: total=%.5f emb=%.2e ret=%.4f cln=%.4f", epoch, rec.total, rec.l_emb, rec.l_ret, rec.l_cln)
        if out is not None:
            extra["generators"] = {"attack": state.attack_gen.get_state(), "pairing": state.pair_gen.get_state()}
            save_checkpoint(out / f"epoch{epoch:03d}.ckpt", state.model, state.optimizer, epoch, extra)
            write_log(out / "train_log.csv", records)
    if out is not None:
        save_checkpoint(out / "final.ckpt", state.model, state.optimizer, cfg.epochs, extra)
        write_log(out / "train_log.csv", records)
    state.model.eval()
    return state.model, records
