"""Two-loss training loop with epoch-wise loss balancing and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch

from .losses import (
    FocalParams,
    LossState,
    SoftLabelParams,
    TransformParams,
    combine_output,
    combine_output_without_transform,
    focal_loss,
    regression_loss,
    soft_label,
    update_loss_weight,
)
from .network import CANONICAL_SHAPE, DOWNSCALE_SHAPE, VARIANTS, ModelBundle, NetworkConfig, build_model
from .seeding import derive_seed

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BCKP"
CKPT_VERSION = 1
LOG_COLUMNS = ("epoch", "lr", "rho_s", "rho_r", "seg_weight", "total", "wall_time")


class TrainingDivergence(FloatingPointError):
    def __init__(self, message: str, last_checkpoint=None):
        super().__init__(f"{message}; last checkpoint: {last_checkpoint}")
        self.last_checkpoint = last_checkpoint


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "bcae"
    batch_size: int = 32
    epochs: int = 2000
    lr_initial: float = 0.01
    lr_decay_factor: float = 0.95
    lr_decay_every: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    n_train: int = 960
    n_test: int = 320
    h_train: float = 0.5
    gamma: float = 2.0
    mu: float = 6.0
    alpha: float = 20.0
    input_shape: tuple[int, int, int] = CANONICAL_SHAPE
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("split sizes must be positive")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(input_shape=tuple(self.input_shape), variant=self.variant)

    def config_hash(self) -> str:
        """Hash of everything that shapes the trajectory (run length excluded)."""
        d = asdict(self)
        d.pop("epochs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def desk_config(**overrides) -> TrainConfig:
    """Small-scale settings for CPU runs; same code path as the full config."""
    base = dict(input_shape=DOWNSCALE_SHAPE, epochs=200, batch_size=1, lr_initial=0.003, betas=(0.9, 0.95),
                n_train=4, n_test=4)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at_epoch(epoch: int, config: TrainConfig = TrainConfig()) -> float:
    """Step decay; ``epoch`` counts completed epochs (0 for the first)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr_initial * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def make_variant(kind: str, input_shape=CANONICAL_SHAPE, seed: int = 0) -> ModelBundle:
    kind = kind.lower()
    if kind not in VARIANTS:
        raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    return build_model(NetworkConfig(input_shape=tuple(input_shape), variant=kind), seed)


def batch_losses(bundle: ModelBundle, x: torch.Tensor, config: TrainConfig):
    """Return (L_s or None, L_r) for one batch of raw ADC frames (B, 1, ...)."""
    seg, reg = bundle(x)
    if bundle.variant == "cae":
        return None, regression_loss(reg, x)
    labels = soft_label(x, SoftLabelParams(config.mu, config.alpha))
    l_s = focal_loss(seg, labels, FocalParams(config.gamma))
    if bundle.variant == "bcae":
        combined = combine_output(reg, seg, config.h_train, TransformParams())
    else:
        combined = combine_output_without_transform(reg, seg, config.h_train)
    return l_s, regression_loss(combined, x)


def _stack(frames) -> torch.Tensor:
    arr = np.stack([np.asarray(f, dtype=np.float32) for f in frames])
    return torch.from_numpy(arr)[:, None]


class Trainer:
    """Owns a model, its AdamW optimizer, the loss state and the shuffle stream."""

    def __init__(self, config: TrainConfig, bundle: ModelBundle | None = None):
        torch.use_deterministic_algorithms(True)
        self.config = config
        self.bundle = bundle or build_model(config.network_config(), derive_seed(config.seed, "init"))
        self.optimizer = torch.optim.AdamW(
            self.bundle.parameters(), lr=config.lr_initial, betas=config.betas, weight_decay=config.weight_decay
        )
        self.loss_state = LossState()
        self.rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
        self.history: list[dict] = []
        self.last_checkpoint = None

    @property
    def epoch(self) -> int:
        return self.loss_state.epoch

    def train_epoch(self, data: torch.Tensor) -> dict:
        if len(data) == 0:
            raise ValueError("no training data")
        cfg = self.config
        lr = lr_at_epoch(self.epoch, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        weight = self.loss_state.seg_weight
        t0 = time.perf_counter()
        self.bundle.train()
        order = self.rng.permutation(len(data))
        sum_s = sum_r = sum_total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            x = data[idx]
            l_s, l_r = batch_losses(self.bundle, x, cfg)
            total = l_r if l_s is None else weight * l_s + l_r
            if not torch.isfinite(total):
                raise TrainingDivergence(f"non-finite loss at epoch {self.epoch + 1}", self.last_checkpoint)
            self.optimizer.zero_grad(set_to_none=True)
            total.backward()
            self.optimizer.step()
            n = len(idx)
            sum_r += l_r.item() * n
            sum_total += total.item() * n
            if l_s is not None:
                sum_s += l_s.item() * n
        n_all = len(order)
        rho_r = sum_r / n_all
        rho_s = None if self.bundle.variant == "cae" else sum_s / n_all
        state = replace(self.loss_state, rho_s=rho_s, rho_r=rho_r)
        self.loss_state = update_loss_weight(state)
        record = {
            "epoch": self.loss_state.epoch,
            "lr": lr,
            "rho_s": rho_s,
            "rho_r": rho_r,
            "seg_weight": weight,
            "total": sum_total / n_all,
            "wall_time": time.perf_counter() - t0,
        }
        self.history.append(record)
        log.info("epoch=%d lr=%.6g rho_s=%s rho_r=%.6g seg_weight=%.6g total=%.6g",
                 record["epoch"], lr, rho_s, rho_r, weight, record["total"])
        return record

    def fit(self, frames, epochs: int | None = None, checkpoint_path=None, checkpoint_every: int = 0):
        data = frames if isinstance(frames, torch.Tensor) else _stack(frames)
        target = self.config.epochs if epochs is None else epochs
        while self.epoch < target:
            self.train_epoch(data)
            if checkpoint_path and checkpoint_every and self.epoch % checkpoint_every == 0:
                self.save_checkpoint(checkpoint_path)
        if checkpoint_path:
            self.save_checkpoint(checkpoint_path)
        return self.history

    # -- checkpoints ---------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        header = {
            "epoch": self.epoch,
            "config_hash": self.config.config_hash(),
            "train_config": asdict(self.config),
            "network_config": self.bundle.config.to_dict(),
            "init_seed": self.bundle.seed,
            "loss_state": self.loss_state.to_dict(),
            "history": self.history,
        }
        buf = io.BytesIO()
        torch.save(
            {
                "model": self.bundle.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "rng": self.rng.bit_generator.state,
            },
            buf,
        )
        hbytes = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(hbytes)) + hbytes + buf.getvalue())
        self.last_checkpoint = str(path)

    @classmethod
    def from_checkpoint(cls, path, config: TrainConfig | None = None) -> "Trainer":
        header, payload_offset = _read_header(path)
        saved = TrainConfig.from_dict(header["train_config"])
        if config is not None and config.config_hash() != header["config_hash"]:
            raise CheckpointError(
                f"checkpoint config hash {header['config_hash']} != requested {config.config_hash()}"
            )
        config = config or saved
        with open(path, "rb") as fh:
            fh.seek(payload_offset)
            raw = fh.read()
        try:
            payload = torch.load(io.BytesIO(raw), weights_only=False)
        except Exception as exc:
            raise CheckpointError(f"{path}: corrupt tensor payload ({exc})") from exc
        bundle = build_model(NetworkConfig.from_dict(header["network_config"]), header["init_seed"])
        bundle.load_state_dict(payload["model"])
        trainer = cls(config, bundle)
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.rng.bit_generator.state = payload["rng"]
        trainer.loss_state = LossState.from_dict(header["loss_state"])
        trainer.history = header["history"]
        trainer.last_checkpoint = str(path)
        return trainer


def _read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10 or head[:4] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<HI", head[4:])
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        raw = fh.read(hlen)
    if len(raw) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(raw), 10 + hlen
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc


def inspect_checkpoint(path) -> dict:
    """Header fields only; tensors are not read."""
    return _read_header(path)[0]


def save_checkpoint(trainer: Trainer, path) -> None:
    trainer.save_checkpoint(path)


def load_checkpoint(path, config: TrainConfig | None = None) -> Trainer:
    return Trainer.from_checkpoint(path, config)


def write_log_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: ("" if row[k] is None else row[k]) for k in LOG_COLUMNS})


def train(config: TrainConfig, frames, checkpoint_path=None) -> Trainer:
    trainer = Trainer(config)
    trainer.fit(frames, checkpoint_path=checkpoint_path)
    return trainer
