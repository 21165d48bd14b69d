"""Encoder-decoder segmentation network for cine volume sequences.

The encoder is a residual U-Net over a single frame: a contracting path of
residual blocks separated by max pooling, then an expansive path that
upsamples, projects channels with a 1x1x1 convolution, and fuses with the
matching contracting feature by pointwise addition. It emits one feature map
per resolution level (coarsest first) plus a 4-class logits head at full
resolution.

The decoder is a hierarchy of ConvLSTM cells, one per level. For each frame,
levels run coarse to fine; each cell consumes the encoder feature at its
level concatenated with the upsampled output of the coarser cell, and carries
its own hidden/cell state across frames. Running one such stack over frames
1..T and a second over T..1 and averaging their logits gives the
bidirectional mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .layers import (Conv3d, ConvLSTMCell, ConvLSTMState, ResidualBlock,
                     initial_state)
from .tensor import ShapeError, Tensor

N_CLASSES = 4  # background, LV, RV, MYO

DIRECTIONS = ("baseline", "forward_only", "bidirectional")
FUSIONS = ("average", "learned")


class ConfigError(ValueError):
    """A model configuration violates its own constraints."""


@dataclass
class ModelConfig:
    """Topology description for the network.

    pool_factors, when given, holds one (d,h,w) factor per level transition,
    finest transition first. When None, factors are derived from the input
    depth: (2,2,2) while the running depth is at least 8, (1,2,2) below.
    """
    levels: int = 4
    channels: tuple[int, ...] = (8, 16, 32, 64)
    pool_factors: tuple[tuple[int, int, int], ...] | None = None
    direction: str = "bidirectional"
    normalize: bool = True
    fusion: str = "average"

    def validate(self) -> None:
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ConfigError(f"need {self.levels} channel widths, "
                              f"got {self.channels}")
        if any(a >= b for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channels must be strictly increasing, "
                              f"got {self.channels}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, "
                              f"got {self.direction!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, "
                              f"got {self.fusion!r}")
        if self.pool_factors is not None:
            if len(self.pool_factors) != self.levels - 1:
                raise ConfigError(f"need {self.levels - 1} pooling factors, "
                                  f"got {self.pool_factors}")
            for f in self.pool_factors:
                if len(f) != 3 or any(x < 1 for x in f):
                    raise ConfigError(f"bad pooling factors {f}")

    def resolve_pools(self, extents) -> tuple[tuple[int, int, int], ...]:
        """Per-transition pooling factors for a (D, H, W) input, finest first."""
        if self.pool_factors is not None:
            return tuple(tuple(f) for f in self.pool_factors)
        pools = []
        depth = int(extents[0])
        for _ in range(self.levels - 1):
            f = (2, 2, 2) if depth >= 8 else (1, 2, 2)
            pools.append(f)
            depth //= f[0]
        return tuple(pools)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "channels": list(self.channels),
            "pool_factors": (None if self.pool_factors is None
                             else [list(f) for f in self.pool_factors]),
            "direction": self.direction,
            "normalize": self.normalize,
            "fusion": self.fusion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        pf = d.get("pool_factors")
        return cls(
            levels=int(d["levels"]),
            channels=tuple(int(c) for c in d["channels"]),
            pool_factors=(None if pf is None
                          else tuple(tuple(int(x) for x in f) for f in pf)),
            direction=d["direction"],
            normalize=bool(d["normalize"]),
            fusion=d["fusion"],
        )


@dataclass
class EncoderFeatures:
    """Per-frame encoder output: g[0] is the coarsest level, g[-1] the finest."""
    g: list[Tensor]
    logits_head: Tensor


# A sequence of per-frame class-logit tensors, ascending frame order.
SequenceLogits = list


class DecoderStack:
    """One directional hierarchy of ConvLSTM cells plus its logits head."""

    def __init__(self, config: ModelConfig):
        ch = config.channels
        k = config.levels
        self.cells: list[ConvLSTMCell] = []
        for j in range(k):
            g_ch = ch[k - 1 - j]
            in_ch = g_ch if j == 0 else g_ch + ch[k - j]
            self.cells.append(ConvLSTMCell(in_ch, g_ch))
        self.head = Conv3d(ch[0], N_CLASSES, kernel_size=1)

    def init(self, rng: np.random.Generator) -> None:
        for cell in self.cells:
            cell.init(rng)
        self.head.init(rng)

    def named_parameters(self):
        params = []
        for j, cell in enumerate(self.cells):
            params += [(f"level{j}.{n}", p) for n, p in cell.named_parameters()]
        params += [(f"head.{n}", p) for n, p in self.head.named_parameters()]
        return params


class SegModel:
    """The full network; owns every parameter tensor."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.dtype = tensor.default_dtype()
        ch = config.channels
        k = config.levels
        self.down_blocks = [
            ResidualBlock(1 if i == 0 else ch[i - 1], ch[i],
                          normalize=config.normalize)
            for i in range(k)
        ]
        self.up_projs = [Conv3d(ch[i + 1], ch[i], kernel_size=1)
                         for i in range(k - 1)]
        self.up_blocks = [ResidualBlock(ch[i], ch[i], normalize=config.normalize)
                          for i in range(k - 1)]
        self.head = Conv3d(ch[0], N_CLASSES, kernel_size=1)
        self.fwd: DecoderStack | None = None
        self.bwd: DecoderStack | None = None
        if config.direction != "baseline":
            self.fwd = DecoderStack(config)
        if config.direction == "bidirectional":
            self.bwd = DecoderStack(config)
        self.fusion_conv: Conv3d | None = None
        if config.direction == "bidirectional" and config.fusion == "learned":
            self.fusion_conv = Conv3d(2 * N_CLASSES, N_CLASSES, kernel_size=1)

    def init(self, rng: np.random.Generator) -> None:
        for block in self.down_blocks:
            block.init(rng)
        for proj in self.up_projs:
            proj.init(rng)
        for block in self.up_blocks:
            block.init(rng)
        self.head.init(rng)
        if self.fwd is not None:
            self.fwd.init(rng)
        if self.bwd is not None:
            self.bwd.init(rng)
        if self.fusion_conv is not None:
            self.fusion_conv.init(rng)

    def named_parameters(self):
        params = []
        for i, block in enumerate(self.down_blocks):
            params += [(f"encoder.down{i}.{n}", p)
                       for n, p in block.named_parameters()]
        for i, proj in enumerate(self.up_projs):
            params += [(f"encoder.proj{i}.{n}", p)
                       for n, p in proj.named_parameters()]
        for i, block in enumerate(self.up_blocks):
            params += [(f"encoder.up{i}.{n}", p)
                       for n, p in block.named_parameters()]
        params += [(f"encoder.head.{n}", p) for n, p in self.head.named_parameters()]
        if self.fwd is not None:
            params += [(f"decoder_fwd.{n}", p) for n, p in self.fwd.named_parameters()]
        if self.bwd is not None:
            params += [(f"decoder_bwd.{n}", p) for n, p in self.bwd.named_parameters()]
        if self.fusion_conv is not None:
            params += [(f"fusion.{n}", p)
                       for n, p in self.fusion_conv.named_parameters()]
        return params

    def encoder_parameters(self):
        return [(n, p) for n, p in self.named_parameters()
                if n.startswith("encoder.")]

    # -- encoder ---------------------------------------------------------

    def _check_extents(self, extents, pools) -> None:
        need = [1, 1, 1]
        for f in pools:
            for a in range(3):
                need[a] *= f[a]
        for axis, (e, n) in enumerate(zip(extents, need)):
            if e % n != 0:
                raise ShapeError(
                    f"input extents {tuple(extents)} not divisible by the "
                    f"cumulative pooling factors {tuple(need)} (axis {axis}: "
                    f"{e} % {n} != 0)")

    def encode(self, frame: Tensor) -> EncoderFeatures:
        if frame.data.ndim != 4 or frame.shape[0] != 1:
            raise ShapeError(f"frame must be (1,D,H,W), got {frame.shape}")
        if frame.dtype != self.dtype:
            frame = Tensor(frame.data.astype(self.dtype))
        pools = self.config.resolve_pools(frame.shape[1:])
        self._check_extents(frame.shape[1:], pools)

        k = self.config.levels
        contracting = []
        x = frame
        for i in range(k):
            x = self.down_blocks[i](x)
            contracting.append(x)
            if i < k - 1:
                x = tensor.max_pool(x, pools[i])

        g = [contracting[k - 1]]
        for i in range(k - 2, -1, -1):
            up = tensor.upsample_nearest(g[-1], pools[i])
            fused = self.up_projs[i](up) + contracting[i]
            g.append(self.up_blocks[i](fused))
        return EncoderFeatures(g=g, logits_head=self.head(g[-1]))

    # -- decoder ---------------------------------------------------------

    def decode_directional(self, features_seq: list[EncoderFeatures],
                           direction: str,
                           stack: DecoderStack | None = None) -> SequenceLogits:
        """Runs one ConvLSTM stack over the sequence; returns ascending order.

        ``stack`` overrides the direction's own parameter stack; the swap is
        what makes the reverse-and-swap symmetry testable.
        """
        if direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward or backward, "
                             f"got {direction!r}")
        if not features_seq:
            raise ShapeError("empty sequence")
        shape0 = features_seq[0].g[-1].shape
        for feats in features_seq:
            if feats.g[-1].shape != shape0:
                raise ShapeError(f"mixed frame shapes in sequence: "
                                 f"{shape0} vs {feats.g[-1].shape}")
        if stack is None:
            stack = self.fwd if direction == "forward" else self.bwd
        if stack is None:
            raise ConfigError(f"model has no {direction} decoder stack "
                              f"(direction mode {self.config.direction!r})")

        k = self.config.levels
        pools = self.config.resolve_pools(shape0[1:])
        order = range(len(features_seq))
        if direction == "backward":
            order = reversed(order)

        states: list[ConvLSTMState | None] = [None] * k
        visited: list[Tensor] = []
        for t in order:
            g = features_seq[t].g
            y = None
            for j in range(k):
                if j == 0:
                    h_input = g[0]
                else:
                    up = tensor.upsample_nearest(y, pools[k - 1 - j])
                    h_input = tensor.concat_channels(g[j], up)
                state = states[j]
                if state is None:
                    state = initial_state(stack.cells[j], h_input.shape[1:])
                y, states[j] = stack.cells[j].step(h_input, state)
            visited.append(stack.head(y))
        if direction == "backward":
            visited.reverse()
        return visited

    # -- sequence drivers --------------------------------------------------

    def fuse(self, fwd: SequenceLogits, bwd: SequenceLogits) -> SequenceLogits:
        if self.fusion_conv is not None:
            if len(fwd) != len(bwd):
                raise ShapeError(f"sequence lengths differ: {len(fwd)} vs {len(bwd)}")
            return [self.fusion_conv(tensor.concat_channels(f, b))
                    for f, b in zip(fwd, bwd)]
        return fuse_bidirectional(fwd, bwd)

    def forward_sequence(self, frames: list[Tensor]) -> SequenceLogits:
        features = [self.encode(f) for f in frames]
        if self.config.direction == "baseline":
            return [feats.logits_head for feats in features]
        if self.config.direction == "forward_only":
            return self.decode_directional(features, "forward")
        fwd = self.decode_directional(features, "forward")
        bwd = self.decode_directional(features, "backward")
        return self.fuse(fwd, bwd)

    def segment(self, frames: list[Tensor]) -> list[np.ndarray]:
        logits = self.forward_sequence(frames)
        return [logits_to_labels(lg) for lg in logits]


def fuse_bidirectional(fwd: SequenceLogits, bwd: SequenceLogits) -> SequenceLogits:
    """Per-frame average of the two directional logit sequences."""
    if len(fwd) != len(bwd):
        raise ShapeError(f"sequence lengths differ: {len(fwd)} vs {len(bwd)}")
    return [(f + b) * 0.5 for f, b in zip(fwd, bwd)]


def logits_to_labels(logits: Tensor) -> np.ndarray:
    """Per-voxel argmax; ties resolve to the lowest class index."""
    return logits.data.argmax(axis=0).astype(np.uint8)


def segment_sequence(seq, model: SegModel) -> list[np.ndarray]:
    """Label volumes for every frame of a sequence sample."""
    frames = [vol.data if isinstance(vol.data, Tensor) else Tensor(vol.data)
              for vol in seq.frames]
    return model.segment(frames)
