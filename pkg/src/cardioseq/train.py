"""Loss, optimizer, the two-stage schedule, and checkpointing.

Stage 1 trains the encoder alone against its logits head, frame by frame
(no recurrence); stage 2 trains encoder and decoder together on whole
sequences with the learning rate decaying by a fixed factor each epoch.
Both stages step the optimizer once per sequence — the batch is always
exactly one sequence.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from . import tensor, tensorio
from .data import SequenceSample, augment
from .model import ConfigError, ModelConfig, SegModel
from .tensor import ShapeError, Tensor

LOSS_MODES = ("cross_entropy", "cross_entropy_plus_soft_dice")


class CheckpointError(Exception):
    """The checkpoint file is malformed, tampered, or incompatible."""


@dataclass
class TrainConfig:
    stage1_epochs: int = 10
    stage1_lr: float = 1e-4
    stage2_epochs: int = 10
    stage2_lr: float = 1e-4
    lr_decay_per_epoch: float = 0.7
    loss_mode: str = "cross_entropy"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    augment: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError(f"lr decay must lie in (0,1], "
                             f"got {self.lr_decay_per_epoch}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}, "
                             f"got {self.loss_mode!r}")


# -- loss -----------------------------------------------------------------

def soft_dice_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """1 minus the mean soft Dice of the three foreground classes."""
    probs = tensor.softmax_channels(logits)
    total = None
    for cls in (1, 2, 3):
        p = tensor.slice_channels(probs, cls, cls + 1)
        t = Tensor((np.asarray(labels) == cls)
                   .astype(logits.data.dtype)[None])
        inter = (p * t).sum()
        denom = p.sum() + t.sum() + 1e-6
        d = (inter * 2.0) * tensor.reciprocal(denom)
        total = d if total is None else total + d
    return 1.0 - total * (1.0 / 3.0)


def loss(logits: Tensor, labels: np.ndarray,
         mode: str = "cross_entropy") -> Tensor:
    if mode not in LOSS_MODES:
        raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")
    value = tensor.cross_entropy_logits(logits, labels)
    if mode == "cross_entropy_plus_soft_dice":
        value = value + soft_dice_loss(logits, labels)
    return value


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def optimizer_step(named_params, state: AdamState, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> None:
    """One adaptive-moment update with bias correction over all parameters."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} shape {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def clip_gradients(named_params, max_norm: float) -> None:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = total ** 0.5
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale


def zero_gradients(named_params) -> None:
    for _, p in named_params:
        p.grad = None


def parameter_digest(named_params) -> str:
    h = hashlib.sha256()
    for name, p in named_params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


# -- training stages ---------------------------------------------------------

def _check_labeled(dataset) -> None:
    for sample in dataset:
        if sample.labels is None:
            raise datamod.DataError(f"{sample.patient_id}: training requires "
                                    "labeled sequences")


def _frame_tensors(sample: SequenceSample) -> list[Tensor]:
    return [vol.data for vol in sample.frames]


def train_stage1(model: SegModel, dataset, config: TrainConfig,
                 state: AdamState | None = None) -> list[dict]:
    """Encoder-only pretraining on the logits head; decoder untouched."""
    config.validate()
    _check_labeled(dataset)
    if not dataset:
        raise datamod.DataError("empty training set")
    rng = np.random.default_rng(int(config.seed))
    enc_params = model.encoder_parameters()
    all_params = model.named_parameters()
    if state is None:
        state = AdamState()
    records = []
    it = 0
    for epoch in range(config.stage1_epochs):
        for sample in dataset:
            s = augment(sample, rng) if config.augment else sample
            zero_gradients(all_params)
            total = 0.0
            for t, frame in enumerate(_frame_tensors(s)):
                feats = model.encode(frame)
                frame_loss = loss(feats.logits_head, s.labels[t],
                                  config.loss_mode)
                frame_loss.backward()
                total += frame_loss.item()
            if config.grad_clip is not None:
                clip_gradients(enc_params, config.grad_clip)
            optimizer_step(enc_params, state, config.stage1_lr,
                           config.beta1, config.beta2, config.eps)
            records.append({"stage": 1, "epoch": epoch, "iter": it,
                            "lr": config.stage1_lr, "loss": total,
                            "patient": s.patient_id})
            it += 1
    return records


def train_stage2(model: SegModel, dataset, config: TrainConfig,
                 state: AdamState | None = None) -> list[dict]:
    """Joint training over full sequences with per-epoch lr decay."""
    config.validate()
    _check_labeled(dataset)
    if not dataset:
        raise datamod.DataError("empty training set")
    if model.config.direction == "baseline":
        raise ConfigError("stage 2 requires a recurrent decoder; "
                          "baseline mode stops after stage 1")
    if model.config.direction == "bidirectional":
        for sample in dataset:
            if len(sample.frames) < 2:
                raise datamod.DataError(
                    f"{sample.patient_id}: bidirectional training needs at "
                    f"least 2 frames, got {len(sample.frames)}")
    rng = np.random.default_rng(int(config.seed) + 1)
    params = model.named_parameters()
    if state is None:
        state = AdamState()
    records = []
    it = 0
    for epoch in range(config.stage2_epochs):
        lr = config.stage2_lr * config.lr_decay_per_epoch ** epoch
        for sample in dataset:
            s = augment(sample, rng) if config.augment else sample
            zero_gradients(params)
            logits = model.forward_sequence(_frame_tensors(s))
            total = None
            for t, lg in enumerate(logits):
                frame_loss = loss(lg, s.labels[t], config.loss_mode)
                total = frame_loss if total is None else total + frame_loss
            total.backward()
            if config.grad_clip is not None:
                clip_gradients(params, config.grad_clip)
            optimizer_step(params, state, lr,
                           config.beta1, config.beta2, config.eps)
            records.append({"stage": 2, "epoch": epoch, "iter": it,
                            "lr": lr, "loss": total.item(),
                            "patient": s.patient_id})
            it += 1
    return records


def write_log(records, path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"CSCK"
CKPT_VERSION = 1


def config_digest(config: ModelConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(model: SegModel, state: AdamState | None, path,
                    epoch: int = 0, extra: dict | None = None) -> None:
    meta = {
        "model_config": model.config.to_dict(),
        "config_digest": config_digest(model.config),
        "epoch": int(epoch),
        "adam_step": 0 if state is None else state.step,
        "extra": extra or {},
    }
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in model.named_parameters():
        entries.append((name, p.data))
    if state is not None:
        for name in state.m:
            entries.append((f"adam.m.{name}", state.m[name]))
            entries.append((f"adam.v.{name}", state.v[name]))

    meta_blob = json.dumps(meta, sort_keys=True).encode()
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<II", CKPT_VERSION, len(meta_blob))
    out += meta_blob
    out += struct.pack("<I", len(entries))
    for name, arr in entries:
        name_b = name.encode()
        payload = tensorio.encode_array(arr)
        out += struct.pack("<H", len(name_b))
        out += name_b
        out += struct.pack("<Q", len(payload))
        out += payload
    out += hashlib.sha256(bytes(out)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_checkpoint_raw(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parses and integrity-checks a checkpoint without building a model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 44 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch "
                              "(file tampered or corrupted)")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    try:
        meta = json.loads(blob[offset:offset + meta_len].decode())
        offset += meta_len
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode()
            offset += name_len
            (payload_len,) = struct.unpack_from("<Q", blob, offset)
            offset += 8
            arr, end = tensorio.decode_array(blob, offset)
            if end != offset + payload_len:
                raise CheckpointError(f"{path}: entry {name} length mismatch")
            entries[name] = arr
            offset += payload_len
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError,
            tensorio.TensorFormatError) as exc:
        raise CheckpointError(f"{path}: truncated or malformed: {exc}") from exc
    return meta, entries


def load_checkpoint(path) -> tuple[SegModel, AdamState, dict]:
    meta, entries = read_checkpoint_raw(path)
    config = ModelConfig.from_dict(meta["model_config"])
    if config_digest(config) != meta["config_digest"]:
        raise CheckpointError(f"{path}: config digest mismatch")
    model = SegModel(config)
    for name, p in model.named_parameters():
        if name not in entries:
            raise CheckpointError(f"{path}: missing parameter {name}")
        arr = entries[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape "
                                  f"{arr.shape}, expected {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    state = AdamState(step=int(meta.get("adam_step", 0)))
    for name in entries:
        if name.startswith("adam.m."):
            state.m[name[len("adam.m."):]] = entries[name]
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v."):]] = entries[name]
    return model, state, meta
