"""Dense N-d tensors with reverse-mode automatic differentiation.

Volumes use channel-first axis order (C, D, H, W); the batch axis is always
one and therefore implicit. Binary operations demand identical shapes -- the
only broadcasting anywhere is a plain Python scalar operand. Two precisions
are supported: float32 (training default) and float64 (gradient checking).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes (or values standing in for shapes) are incompatible."""


class GraphError(RuntimeError):
    """The differentiation tape is missing, spent, or malformed."""


_default_dtype = np.dtype(np.float32)
_debug_checks = False
_grad_enabled = True


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dt}; use float32 or float64")
    global _default_dtype
    _default_dtype = dt


@contextmanager
def use_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the precision new tensors are created with."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every forward result (slow, for tests)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextmanager
def no_grad() -> Iterator[None]:
    """Skip tape construction inside the block (inference, finite differences)."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(_default_dtype)
    return arr


class Tensor:
    """A value node in the differentiation tape.

    Leaves are created directly (optionally with ``requires_grad``);
    operation results carry a backward closure that routes the incoming
    gradient to their parents. ``backward()`` on a scalar fills ``.grad``
    on every reachable tensor that requires one.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn",
                 "_op", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._op = "leaf"
        self._backward_ran = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self._op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return neg(sub(self, other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    # -- backward ------------------------------------------------------

    def backward(self) -> dict[int, np.ndarray]:
        """Reverse-mode sweep from a scalar loss.

        Returns a map from ``id(tensor)`` to the gradient array for every
        requires_grad leaf reached. Each tensor also receives ``.grad``.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_ran:
            raise GraphError("backward was already run on this tape; "
                             "rebuild the forward pass first")
        if not self._parents and not self.requires_grad:
            raise GraphError("loss is detached from any differentiable graph")

        topo = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        self._backward_ran = True

        grad_map: dict[int, np.ndarray] = {}
        for node in topo:
            if node.requires_grad and node._backward_fn is None and node.grad is not None:
                grad_map[id(node)] = node.grad
        return grad_map

    def _toposort(self) -> list["Tensor"]:
        # Iterative postorder; sequence tapes get too deep for recursion.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        return topo


def _scalar_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    if _debug_checks and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    out._op = op
    return out


def _coerce_operand(other, ref: Tensor) -> tuple[Tensor, bool]:
    """Returns (tensor, is_scalar). Only scalar broadcasting is permitted."""
    if isinstance(other, Tensor):
        if other.data.size == 1 and other.data.ndim == 0:
            return other, True
        if other.shape != ref.shape:
            raise ShapeError(f"operand shapes differ: {ref.shape} vs {other.shape}"
                             " (broadcasting is limited to scalars)")
        return other, False
    if np.isscalar(other) or (isinstance(other, np.ndarray) and other.ndim == 0):
        return _scalar_like(other, ref), True
    raise ShapeError(f"unsupported operand type {type(other)!r}")


# -- elementwise -------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b, b_scalar = _coerce_operand(b, a)
    out_data = a.data + b.data

    def _bwd(g):
        _accum(a, g)
        _accum(b, g.sum() if b_scalar else g)

    return _result(out_data, (a, b), "add", _bwd)


def sub(a: Tensor, b) -> Tensor:
    b, b_scalar = _coerce_operand(b, a)
    out_data = a.data - b.data

    def _bwd(g):
        _accum(a, g)
        _accum(b, -(g.sum()) if b_scalar else -g)

    return _result(out_data, (a, b), "sub", _bwd)


def mul(a: Tensor, b) -> Tensor:
    b, b_scalar = _coerce_operand(b, a)
    out_data = a.data * b.data

    def _bwd(g):
        _accum(a, g * b.data)
        _accum(b, (g * a.data).sum() if b_scalar else g * a.data)

    return _result(out_data, (a, b), "mul", _bwd)


def neg(a: Tensor) -> Tensor:
    def _bwd(g):
        _accum(a, -g)

    return _result(-a.data, (a,), "neg", _bwd)


# Backward slopes live at module level so a test build can swap one out and
# prove the gradient suite notices.

def _relu_grad(x: np.ndarray) -> np.ndarray:
    # subgradient at 0 is defined as 0
    return (x > 0).astype(x.dtype)


def _sigmoid_grad(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def _tanh_grad(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def relu(a: Tensor) -> Tensor:
    def _bwd(g):
        _accum(a, g * _relu_grad(a.data))

    return _result(np.maximum(a.data, 0), (a,), "relu", _bwd)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid exp overflow
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def _bwd(g):
        _accum(a, g * _sigmoid_grad(y))

    return _result(y, (a,), "sigmoid", _bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def _bwd(g):
        _accum(a, g * _tanh_grad(y))

    return _result(y, (a,), "tanh", _bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    y = np.log(a.data)

    def _bwd(g):
        _accum(a, g / a.data)

    return _result(y, (a,), "log", _bwd)


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise ValueError("reciprocal of zero")
    y = 1.0 / a.data

    def _bwd(g):
        _accum(a, -g * y * y)

    return _result(y, (a,), "reciprocal", _bwd)


def tensor_sum(a: Tensor) -> Tensor:
    def _bwd(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), "sum", _bwd)


# -- channel-axis operations ------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"non-channel extents differ: {a.shape} vs {b.shape}")
    ca = a.shape[0]
    out_data = np.concatenate([a.data, b.data], axis=0)

    def _bwd(g):
        _accum(a, g[:ca])
        _accum(b, g[ca:])

    return _result(out_data, (a, b), "concat_channels", _bwd)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"channel slice [{start}:{stop}) out of range for {a.shape}")

    def _bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            _accum(a, full)

    return _result(a.data[start:stop].copy(), (a,), "slice_channels", _bwd)


def softmax_channels(a: Tensor) -> Tensor:
    if a.shape[0] < 2:
        raise ShapeError(f"softmax needs at least 2 channels, got {a.shape}")
    z = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def _bwd(g):
        inner = (g * p).sum(axis=0, keepdims=True)
        _accum(a, p * (g - inner))

    return _result(p, (a,), "softmax_channels", _bwd)


def instance_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over all non-channel axes."""
    axes = tuple(range(1, a.data.ndim))
    if not axes:
        raise ShapeError("instance_norm expects a channel axis plus spatial axes")
    mean = a.data.mean(axis=axes, keepdims=True)
    var = a.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = (a.data - mean) * inv_std

    def _bwd(g):
        g_mean = g.mean(axis=axes, keepdims=True)
        gy_mean = (g * y).mean(axis=axes, keepdims=True)
        _accum(a, (g - g_mean - y * gy_mean) * inv_std)

    return _result(y, (a,), "instance_norm", _bwd)


# -- convolution -------------------------------------------------------

def _triple(v, name: str) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"{name} must have one entry per spatial axis, got {v!r}")
    return t  # type: ignore[return-value]


def _conv_forward(xp: np.ndarray, kernel: np.ndarray,
                  stride: tuple[int, int, int]) -> np.ndarray:
    kd, kh, kw = kernel.shape[2:]
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, ::stride[0], ::stride[1], ::stride[2]]
    out = np.tensordot(kernel, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    return np.ascontiguousarray(out)


def _conv_backward_input(g: np.ndarray, kernel: np.ndarray,
                         padded_shape: tuple[int, ...],
                         stride: tuple[int, int, int]) -> np.ndarray:
    # scatter-add one kernel offset at a time; each offset is a matmul
    gp = np.zeros(padded_shape, dtype=g.dtype)
    do, ho, wo = g.shape[1:]
    sd, sh, sw = stride
    kd, kh, kw = kernel.shape[2:]
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                contrib = np.tensordot(kernel[:, :, dz, dy, dx], g, axes=([0], [0]))
                gp[:, dz:dz + do * sd:sd, dy:dy + ho * sh:sh, dx:dx + wo * sw:sw] += contrib
    return gp


def _conv_backward_kernel(g: np.ndarray, xp: np.ndarray,
                          kernel_shape: tuple[int, ...],
                          stride: tuple[int, int, int]) -> np.ndarray:
    kd, kh, kw = kernel_shape[2:]
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, ::stride[0], ::stride[1], ::stride[2]]
    # [Cout, D',H',W'] x [Cin, D',H',W', kd,kh,kw] -> [Cout, Cin, kd,kh,kw]
    return np.tensordot(g, win, axes=([1, 2, 3], [1, 2, 3]))


def conv(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
         stride=1, padding=0) -> Tensor:
    """3-D cross-correlation with zero padding.

    x: (C_in, D, H, W); kernel: (C_out, C_in, kd, kh, kw); bias: (C_out,).
    Output spatial extents are (E + 2*pad - k) / stride + 1 per axis.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv input must be (C,D,H,W), got {x.shape}")
    if kernel.data.ndim != 5:
        raise ShapeError(f"conv kernel must be (Cout,Cin,kd,kh,kw), got {kernel.shape}")
    if x.shape[0] != kernel.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} has {x.shape[0]} channels "
                         f"but kernel {kernel.shape} expects {kernel.shape[1]}")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if any(s < 1 for s in stride):
        raise ShapeError(f"stride must be >= 1, got {stride}")
    kspatial = kernel.shape[2:]
    if any(k % 2 == 0 for k in kspatial):
        raise ShapeError(f"kernel spatial extents must be odd, got {kspatial}")
    for axis, (e, k, p, s) in enumerate(zip(x.shape[1:], kspatial, padding, stride)):
        span = e + 2 * p - k
        if span < 0:
            raise ShapeError(f"kernel does not fit padded input on axis {axis}: "
                             f"extent {e} + 2*{p} < {k}")
        if span % s != 0:
            raise ShapeError(f"non-integer output extent on axis {axis}: "
                             f"({e} + 2*{p} - {k}) is not divisible by stride {s}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {kernel.shape[0]} "
                         "output channels")

    pad_width = ((0, 0),) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pad_width)
    out_data = _conv_forward(xp, kernel.data, stride)
    if bias is not None:
        out_data += bias.data[:, None, None, None]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def _bwd(g):
        if x.requires_grad:
            gp = _conv_backward_input(g, kernel.data, xp.shape, stride)
            pd, ph, pw = padding
            d, h, w = x.shape[1:]
            _accum(x, gp[:, pd:pd + d, ph:ph + h, pw:pw + w])
        if kernel.requires_grad:
            _accum(kernel, _conv_backward_kernel(g, xp, kernel.shape, stride))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(1, 2, 3)))

    return _result(out_data, parents, "conv", _bwd)


# -- pooling and upsampling -------------------------------------------

def max_pool(x: Tensor, factors) -> Tensor:
    """Block max over (C,D,H,W) input; gradient goes to the first argmax."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool input must be (C,D,H,W), got {x.shape}")
    fd, fh, fw = _triple(factors, "factors")
    c, d, h, w = x.shape
    for axis, (e, f) in enumerate(zip((d, h, w), (fd, fh, fw))):
        if f < 1 or e % f != 0:
            raise ShapeError(f"extent {e} on axis {axis} not divisible by factor {f}")
    od, oh, ow = d // fd, h // fh, w // fw
    blocks = x.data.reshape(c, od, fd, oh, fh, ow, fw)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, od, oh, ow, fd * fh * fw)
    arg = blocks.argmax(axis=-1)  # first max in block scan order
    out_data = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def _bwd(g):
        if not x.requires_grad:
            return
        gb = np.zeros((c, od, oh, ow, fd * fh * fw), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(c, od, oh, ow, fd, fh, fw).transpose(0, 1, 4, 2, 5, 3, 6)
        _accum(x, gb.reshape(c, d, h, w))

    return _result(np.ascontiguousarray(out_data), (x,), "max_pool", _bwd)


def upsample_nearest(x: Tensor, factors) -> Tensor:
    """Replicate each cell ``factor`` times per spatial axis."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample input must be (C,D,H,W), got {x.shape}")
    fd, fh, fw = _triple(factors, "factors")
    if min(fd, fh, fw) < 1:
        raise ShapeError(f"factors must be >= 1, got {(fd, fh, fw)}")
    out_data = x.data
    for axis, f in zip((1, 2, 3), (fd, fh, fw)):
        if f > 1:
            out_data = np.repeat(out_data, f, axis=axis)

    def _bwd(g):
        if not x.requires_grad:
            return
        c, d, h, w = x.shape
        gsum = g.reshape(c, d, fd, h, fh, w, fw).sum(axis=(2, 4, 6))
        _accum(x, gsum)

    return _result(np.ascontiguousarray(out_data), (x,), "upsample_nearest", _bwd)


# -- classification loss ----------------------------------------------

def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean voxel-wise negative log softmax probability of the true class.

    logits: (C, *spatial); labels: integer array of shape ``spatial``.
    """
    labels = np.asarray(labels)
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits "
                         f"spatial extents {logits.shape[1:]}")
    n_classes = logits.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), "
                         f"got range [{labels.min()}, {labels.max()}]")
    flat = logits.data.reshape(n_classes, -1)
    idx = labels.reshape(-1).astype(np.intp)
    m = flat.max(axis=0)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=0)) + m
    n = idx.size
    loss = (lse - flat[idx, np.arange(n)]).sum() / n

    def _bwd(g):
        if not logits.requires_grad:
            return
        p = np.exp(flat - lse)
        p[idx, np.arange(n)] -= 1.0
        _accum(logits, (float(g) / n) * p.reshape(logits.shape))

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,),
                   "cross_entropy", _bwd)
