"""Composite layers: convolution, residual block, ConvLSTM cell.

Every layer owns its parameter tensors and exposes them through
``named_parameters()`` so the optimizer and the checkpoint writer see one
flat, ordered registry. ``init(rng)`` fills parameters in declaration order
from a single generator, which makes initialization reproducible from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import ShapeError, Tensor


def init_parameters(layer, seed: int) -> None:
    """Seed-reproducible initialization of a layer (or model) tree."""
    layer.init(np.random.default_rng(int(seed)))


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # centered uniform, scale 1/sqrt(fan_in)
    scale = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-scale, scale, size=shape).astype(tensor.default_dtype())


def _prefixed(prefix: str, params):
    return [(f"{prefix}.{name}", p) for name, p in params]


class Conv3d:
    """3-D convolution layer; padding defaults to (k-1)/2 (shape-preserving)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        if padding is None:
            padding = (kernel_size - 1) // 2
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size, kernel_size)
        self.kernel = Tensor(np.zeros(shape, dtype=tensor.default_dtype()),
                             requires_grad=True)
        self.bias = (Tensor(np.zeros(out_channels, dtype=tensor.default_dtype()),
                            requires_grad=True) if bias else None)

    def init(self, rng: np.random.Generator) -> None:
        fan_in = self.in_channels * self.kernel_size ** 3
        self.kernel.data = _uniform(rng, self.kernel.shape, fan_in)
        if self.bias is not None:
            self.bias.data = np.zeros(self.out_channels, dtype=tensor.default_dtype())

    def named_parameters(self):
        params = [("kernel", self.kernel)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params

    def __call__(self, x: Tensor) -> Tensor:
        return tensor.conv(x, self.kernel, self.bias,
                           stride=self.stride, padding=self.padding)


class ResidualBlock:
    """Three 3x3x3 convolutions plus a shortcut path.

    The first two convolutions are each followed by (optional) instance
    normalization and ReLU; the third by normalization only. The single final
    ReLU is applied after the shortcut addition, so with all-zero convolution
    weights and a matching channel count the block reduces to ReLU(x).
    """

    def __init__(self, in_channels: int, out_channels: int, normalize: bool = True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.normalize = normalize
        self.conv1 = Conv3d(in_channels, out_channels)
        self.conv2 = Conv3d(out_channels, out_channels)
        self.conv3 = Conv3d(out_channels, out_channels)
        self.shortcut = (None if in_channels == out_channels
                         else Conv3d(in_channels, out_channels, kernel_size=1))

    def init(self, rng: np.random.Generator) -> None:
        self.conv1.init(rng)
        self.conv2.init(rng)
        self.conv3.init(rng)
        if self.shortcut is not None:
            self.shortcut.init(rng)

    def named_parameters(self):
        params = _prefixed("conv1", self.conv1.named_parameters())
        params += _prefixed("conv2", self.conv2.named_parameters())
        params += _prefixed("conv3", self.conv3.named_parameters())
        if self.shortcut is not None:
            params += _prefixed("shortcut", self.shortcut.named_parameters())
        return params

    def _norm(self, x: Tensor) -> Tensor:
        return tensor.instance_norm(x) if self.normalize else x

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.in_channels:
            raise ShapeError(f"block expects {self.in_channels} input channels, "
                             f"got {x.shape}")
        h = tensor.relu(self._norm(self.conv1(x)))
        h = tensor.relu(self._norm(self.conv2(h)))
        h = self._norm(self.conv3(h))
        s = x if self.shortcut is None else self.shortcut(x)
        return tensor.relu(h + s)


residual_forward = ResidualBlock.__call__


@dataclass
class ConvLSTMState:
    """Hidden/cell pair carried from one frame to the next."""
    hidden: Tensor
    cell: Tensor


class ConvLSTMCell:
    """Convolutional LSTM cell with fused gate kernels.

    The input-to-state and state-to-state kernels each produce 4*hidden
    channels, sliced into the gates in the order: input gate, forget gate,
    output gate, candidate.
    """

    def __init__(self, input_channels: int, hidden_channels: int,
                 kernel_size: int = 3):
        self.input_channels = input_channels
        self.hidden_channels = hidden_channels
        self.kernel_size = kernel_size
        pad = (kernel_size - 1) // 2
        self.pad = pad
        h4 = 4 * hidden_channels
        dt = tensor.default_dtype()
        k = kernel_size
        self.w_x = Tensor(np.zeros((h4, input_channels, k, k, k), dtype=dt),
                          requires_grad=True)
        self.w_h = Tensor(np.zeros((h4, hidden_channels, k, k, k), dtype=dt),
                          requires_grad=True)
        self.bias = Tensor(np.zeros(h4, dtype=dt), requires_grad=True)

    def init(self, rng: np.random.Generator) -> None:
        k3 = self.kernel_size ** 3
        self.w_x.data = _uniform(rng, self.w_x.shape, self.input_channels * k3)
        self.w_h.data = _uniform(rng, self.w_h.shape, self.hidden_channels * k3)
        bias = np.zeros(4 * self.hidden_channels, dtype=tensor.default_dtype())
        bias[self.hidden_channels:2 * self.hidden_channels] = 1.0  # forget gate
        self.bias.data = bias

    def named_parameters(self):
        return [("w_x", self.w_x), ("w_h", self.w_h), ("bias", self.bias)]

    def step(self, x: Tensor, state: ConvLSTMState) -> tuple[Tensor, ConvLSTMState]:
        if x.shape[0] != self.input_channels:
            raise ShapeError(f"cell expects {self.input_channels} input channels, "
                             f"got {x.shape}")
        expected = (self.hidden_channels,) + x.shape[1:]
        if state.hidden.shape != expected or state.cell.shape != expected:
            raise ShapeError(f"state shape {state.hidden.shape} does not match "
                             f"cell geometry {expected}")
        hc = self.hidden_channels
        z = (tensor.conv(x, self.w_x, self.bias, padding=self.pad)
             + tensor.conv(state.hidden, self.w_h, None, padding=self.pad))
        i = tensor.sigmoid(tensor.slice_channels(z, 0, hc))
        f = tensor.sigmoid(tensor.slice_channels(z, hc, 2 * hc))
        o = tensor.sigmoid(tensor.slice_channels(z, 2 * hc, 3 * hc))
        g = tensor.tanh(tensor.slice_channels(z, 3 * hc, 4 * hc))
        new_cell = f * state.cell + i * g
        new_hidden = o * tensor.tanh(new_cell)
        return new_hidden, ConvLSTMState(new_hidden, new_cell)

    __call__ = step


convlstm_step = ConvLSTMCell.step


def initial_state(cell: ConvLSTMCell, spatial) -> ConvLSTMState:
    """All-ones hidden and cell state: the no-prior-information start."""
    spatial = tuple(int(s) for s in spatial)
    if any(s < 1 for s in spatial):
        raise ShapeError(f"spatial extents must be positive, got {spatial}")
    shape = (cell.hidden_channels,) + spatial
    ones = np.ones(shape, dtype=tensor.default_dtype())
    return ConvLSTMState(Tensor(ones.copy()), Tensor(ones))
