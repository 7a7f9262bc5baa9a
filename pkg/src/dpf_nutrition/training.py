"""Multi-task training: per-task L1 losses, geometric-mean total loss,
exponential learning-rate decay and binary checkpoints."""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import NUTRIENTS, AugmentConfig, RGBDSample, augment
from .errors import CheckpointError, ConfigError, ConfigMismatchError, ContractError, TrainingDivergedError
from .model import FusionNet, ModelConfig, prepare_batch

CHECKPOINT_MAGIC = b"DPFN"
CHECKPOINT_VERSION = 1
LOSS_KEYS = ("L_cal", "L_mass", "L_fat", "L_carb", "L_protein")


@dataclass(frozen=True)
class SubtaskLosses:
    cal: float
    mass: float
    fat: float
    carb: float
    protein: float

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ContractError(f"subtask loss {name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.cal, self.mass, self.fat, self.carb, self.protein)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr0: float = 5e-5
    decay: float = 0.98
    # "epoch" or "step": the period of one decay multiplication
    decay_every: str = "epoch"
    epochs: int = 150
    batch: int = 8
    seed: int = 0
    loss_epsilon: float = 1e-8
    grad_clip: float | None = None
    weight_decay: float = 0.0
    flip_prob: float = 0.5
    normalize_targets: bool = True
    max_steps: int | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigError("only 'adam' is supported", "train.optimizer")
        if not self.lr0 > 0:
            raise ConfigError("must be > 0", "train.lr0")
        if not 0 < self.decay <= 1:
            raise ConfigError("must be in (0, 1]", "train.decay")
        if self.decay_every not in ("epoch", "step"):
            raise ConfigError("must be 'epoch' or 'step'", "train.decay_every")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "train.epochs")
        if self.batch < 2:
            # batch-norm statistics need more than one sample
            raise ConfigError("must be >= 2", "train.batch")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# losses


def subtask_loss(pred, truth):
    """Mean absolute deviation between predictions and ground truth.

    Tensors keep their autograd graph; anything else returns a float.
    """
    if isinstance(pred, torch.Tensor) or isinstance(truth, torch.Tensor):
        pred, truth = torch.as_tensor(pred), torch.as_tensor(truth)
        if pred.shape != truth.shape or pred.numel() == 0:
            raise ValueError(f"need equal non-empty batches, got {tuple(pred.shape)} and {tuple(truth.shape)}")
        if not (torch.isfinite(pred).all() and torch.isfinite(truth).all()):
            raise ValueError("non-finite value in loss input")
        return (pred - truth).abs().mean()
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise ValueError(f"need equal non-empty batches, got {pred.shape} and {truth.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(truth))):
        raise ValueError("non-finite value in loss input")
    return float(np.mean(np.abs(pred - truth)))


def total_loss(losses, epsilon: float = 1e-8):
    """Fifth root of the product of the subtask losses, each floored at ``epsilon``.

    Evaluated as ``exp(mean(log(max(L_k, eps))))``.  Accepts a
    :class:`SubtaskLosses`, a sequence of floats, or a tensor of five losses.
    """
    if isinstance(losses, SubtaskLosses):
        losses = losses.as_tuple()
    if isinstance(losses, torch.Tensor) or any(isinstance(v, torch.Tensor) for v in losses):
        t = torch.stack([torch.as_tensor(v) for v in losses]) if not isinstance(losses, torch.Tensor) else losses
        if (t.detach() < 0).any():
            raise ContractError("subtask losses must be non-negative")
        return torch.exp(torch.log(t.clamp_min(epsilon)).mean())
    arr = np.asarray(losses, dtype=np.float64)
    if np.any(arr < 0):
        raise ContractError("subtask losses must be non-negative")
    return float(np.exp(np.mean(np.log(np.maximum(arr, epsilon)))))


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.decay ** epoch


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict | None
    epoch: int
    config_hash: str
    model_config: dict
    train_config: dict | None = None
    history: list[dict] = field(default_factory=list)
    rng_state: torch.Tensor | None = None
    format_version: int = CHECKPOINT_VERSION

    def build_model(self) -> FusionNet:
        model = FusionNet(ModelConfig.from_dict(self.model_config))
        model.load_state_dict(self.model_state)
        return model.eval()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``DPFN | u16 version | u32 header len | header json | u64 payload len |
    payload | u32 crc32``, little endian, via an atomic rename."""
    header = json.dumps({
        "epoch": ckpt.epoch,
        "config_hash": ckpt.config_hash,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "history": ckpt.history,
    }).encode("utf-8")
    buf = io.BytesIO()
    torch.save({"model": ckpt.model_state, "optimizer": ckpt.optimizer_state, "rng": ckpt.rng_state}, buf)
    payload = buf.getvalue()
    body = b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<H", ckpt.format_version),
        struct.pack("<I", len(header)), header,
        struct.pack("<Q", len(payload)), payload,
    ])
    body += struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 10:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {CHECKPOINT_VERSION})")
    try:
        (crc,) = struct.unpack_from("<I", data, len(data) - 4)
        if zlib.crc32(data[:-4]) != crc:
            raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
        pos = 6
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        payload = torch.load(io.BytesIO(data[pos:pos + plen]), map_location="cpu", weights_only=True)
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint: {exc}") from exc
    ckpt = Checkpoint(
        model_state=payload["model"],
        optimizer_state=payload["optimizer"],
        epoch=header["epoch"],
        config_hash=header["config_hash"],
        model_config=header["model_config"],
        train_config=header["train_config"],
        history=header["history"],
        rng_state=payload["rng"],
        format_version=version,
    )
    if expected_hash is not None and expected_hash != ckpt.config_hash:
        warnings.warn(
            f"checkpoint config hash {ckpt.config_hash} differs from expected {expected_hash}",
            stacklevel=2,
        )
        if not force:
            raise ConfigMismatchError(
                f"{path}: config hash mismatch ({ckpt.config_hash} != {expected_hash}); pass force=True to load anyway"
            )
    return ckpt


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list[dict]


def _batches(order: Sequence[int], size: int) -> list[list[int]]:
    out = [list(order[i:i + size]) for i in range(0, len(order), size)]
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2].extend(out.pop())
    return out


def _init_output_scale(model: FusionNet, samples: Sequence[RGBDSample]) -> None:
    means = np.mean([s.target.as_array() for s in samples], axis=0)
    with torch.no_grad():
        model.output_scale.copy_(torch.as_tensor(np.maximum(means, 1e-6)))
        for head in model.heads:
            head.bias.fill_(1.0)


def fit(
    model: FusionNet,
    train_set: Sequence[RGBDSample],
    config: TrainConfig,
    callbacks: Sequence[Callable[[dict, FusionNet], None]] = (),
    log_path=None,
    checkpoint_path=None,
    resume: Checkpoint | None = None,
) -> FitResult:
    """Train ``model`` in place and return the final checkpoint and loss history.

    Shuffling and flips for epoch ``e`` are drawn from ``default_rng([seed, e])``,
    so a resumed run replays exactly what an uninterrupted one would.
    """
    if len(train_set) < 2:
        raise ValueError("training needs at least 2 samples")
    mcfg = model.config
    dtype = next(model.parameters()).dtype
    aug = AugmentConfig(resize_to=mcfg.image_size, crop_to=mcfg.image_size, flip_prob=config.flip_prob)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr0, weight_decay=config.weight_decay)

    start_epoch, history, step = 0, [], 0
    if resume is not None:
        model.load_state_dict(resume.model_state)
        if resume.optimizer_state is not None:
            opt.load_state_dict(resume.optimizer_state)
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
        start_epoch = resume.epoch
        history = [dict(h) for h in resume.history]
        step = sum(h.get("steps", 0) for h in history)
    elif config.normalize_targets:
        _init_output_scale(model, train_set)

    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def snapshot(epoch):
        return Checkpoint(
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            optimizer_state=opt.state_dict(),
            epoch=epoch,
            config_hash=mcfg.config_hash(),
            model_config=mcfg.to_dict(),
            train_config=config.to_dict(),
            history=[dict(h) for h in history],
            rng_state=torch.get_rng_state(),
        )

    try:
        for epoch in range(start_epoch, config.epochs):
            if config.max_steps is not None and step >= config.max_steps:
                break
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(len(train_set))
            model.train()
            sums = np.zeros(len(NUTRIENTS))
            total_sum, count, epoch_steps = 0.0, 0, 0
            lr = lr_at(epoch, config)
            for b, idx in enumerate(_batches(order, config.batch)):
                if config.max_steps is not None and step >= config.max_steps:
                    break
                if config.decay_every == "step":
                    lr = config.lr0 * config.decay ** step
                for group in opt.param_groups:
                    group["lr"] = lr
                batch = [augment(train_set[i], aug, rng) for i in idx]
                rgb, depth, y = prepare_batch(batch, mcfg, dtype)
                out = model(rgb, depth)
                per_task = (out - y).abs().mean(dim=0)
                loss = total_loss(per_task, config.loss_epsilon)
                if not torch.isfinite(loss) or not torch.isfinite(per_task).all():
                    ids = [train_set[i].dish_id for i in idx]
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {b} (dishes {ids[:4]})"
                    )
                opt.zero_grad()
                loss.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                step += 1
                epoch_steps += 1
                n = len(idx)
                sums += per_task.detach().double().numpy() * n
                total_sum += float(loss.detach()) * n
                count += n
            if count == 0:
                break
            record = {"epoch": epoch, "lr": lr}
            record.update(zip(LOSS_KEYS, (sums / count).tolist()))
            record["L_total"] = total_sum / count
            record["steps"] = epoch_steps
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps({k: record[k] for k in ("epoch", "lr", *LOSS_KEYS, "L_total")}) + "\n")
                log_fh.flush()
            for cb in callbacks:
                cb(record, model)
            if checkpoint_path and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, snapshot(epoch + 1))
        final = snapshot(history[-1]["epoch"] + 1 if history else start_epoch)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, final)
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return FitResult(final, history)
