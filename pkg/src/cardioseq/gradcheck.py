"""64-bit finite-difference verification of every differentiable operation.

Each case builds a small randomized problem, computes analytic gradients by
backpropagation, then compares against central differences element by
element: |analytic - numeric| / max(1, |analytic|) must stay below the
threshold. Composite cases cover the residual block, the ConvLSTM recurrence
(three unrolled steps), the encoder, and the full bidirectional model over a
two-frame sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .layers import ConvLSTMCell, ResidualBlock, init_parameters, initial_state
from .model import ModelConfig, SegModel
from .tensor import Tensor
from .train import loss as train_loss

THRESHOLD = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def _fd_max_rel_err(targets, forward, step: float = STEP) -> float:
    """targets: (label, Tensor) pairs whose data is perturbed in place."""
    out = forward()
    out.backward()
    grads = []
    for label, t in targets:
        # a parameter outside the loss graph has gradient zero; central
        # differences will confirm or refute that
        grads.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        t.grad = None
    worst = 0.0
    with tensor.no_grad():
        for (label, t), grad in zip(targets, grads):
            flat = t.data.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lo_p = forward().item()
                flat[i] = orig - step
                lo_m = forward().item()
                flat[i] = orig
                fd = (lo_p - lo_m) / (2.0 * step)
                err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
                if err > worst:
                    worst = err
    return worst


def _leaf(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _proj(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _projected_sum(out: Tensor, r: Tensor) -> Tensor:
    return (out * r).sum()


# -- elementary op cases -------------------------------------------------

def _case_add(rng):
    a, b = _leaf(rng, (2, 3, 3)), _leaf(rng, (2, 3, 3))
    r = _proj(rng, (2, 3, 3))
    return [("a", a), ("b", b)], lambda: _projected_sum(a + b, r)


def _case_sub(rng):
    a, b = _leaf(rng, (2, 3, 3)), _leaf(rng, (2, 3, 3))
    r = _proj(rng, (2, 3, 3))
    return [("a", a), ("b", b)], lambda: _projected_sum(a - b, r)


def _case_mul(rng):
    a, b = _leaf(rng, (2, 3, 3)), _leaf(rng, (2, 3, 3))
    r = _proj(rng, (2, 3, 3))
    return [("a", a), ("b", b)], lambda: _projected_sum(a * b, r)


def _case_neg(rng):
    a = _leaf(rng, (2, 4))
    r = _proj(rng, (2, 4))
    return [("a", a)], lambda: _projected_sum(-a, r)


def _case_relu(rng):
    # keep values away from the kink at 0
    vals = rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    a = Tensor(vals, requires_grad=True)
    r = _proj(rng, (3, 4))
    return [("a", a)], lambda: _projected_sum(tensor.relu(a), r)


def _case_sigmoid(rng):
    a = _leaf(rng, (3, 4))
    r = _proj(rng, (3, 4))
    return [("a", a)], lambda: _projected_sum(tensor.sigmoid(a), r)


def _case_tanh(rng):
    a = _leaf(rng, (3, 4))
    r = _proj(rng, (3, 4))
    return [("a", a)], lambda: _projected_sum(tensor.tanh(a), r)


def _case_log(rng):
    a = Tensor(rng.uniform(0.3, 2.0, size=(3, 4)), requires_grad=True)
    r = _proj(rng, (3, 4))
    return [("a", a)], lambda: _projected_sum(tensor.log(a), r)


def _case_reciprocal(rng):
    vals = rng.uniform(0.4, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    a = Tensor(vals, requires_grad=True)
    r = _proj(rng, (3, 4))
    return [("a", a)], lambda: _projected_sum(tensor.reciprocal(a), r)


def _case_sum(rng):
    a = _leaf(rng, (2, 3, 3))
    return [("a", a)], lambda: (a * a).sum()


def _case_conv(rng):
    x = _leaf(rng, (2, 5, 5, 5))
    k = Tensor(rng.normal(size=(3, 2, 3, 3, 3)) * 0.3, requires_grad=True)
    b = _leaf(rng, (3,))
    r = _proj(rng, (3, 5, 3, 3))
    return ([("input", x), ("kernel", k), ("bias", b)],
            lambda: _projected_sum(
                tensor.conv(x, k, b, stride=(1, 2, 2), padding=1), r))


def _case_max_pool(rng):
    # distinct values with wide gaps so the argmax never flips under +-step
    vals = (rng.permutation(2 * 2 * 4 * 4).astype(np.float64)
            .reshape(2, 2, 4, 4)) * 0.1
    x = Tensor(vals, requires_grad=True)
    r = _proj(rng, (2, 2, 2, 2))
    return [("input", x)], lambda: _projected_sum(
        tensor.max_pool(x, (1, 2, 2)), r)


def _case_upsample(rng):
    x = _leaf(rng, (2, 2, 2, 2))
    r = _proj(rng, (2, 4, 4, 4))
    return [("input", x)], lambda: _projected_sum(
        tensor.upsample_nearest(x, (2, 2, 2)), r)


def _case_concat(rng):
    a, b = _leaf(rng, (2, 3, 3)), _leaf(rng, (3, 3, 3))
    r = _proj(rng, (5, 3, 3))
    return ([("a", a), ("b", b)],
            lambda: _projected_sum(tensor.concat_channels(a, b), r))


def _case_slice(rng):
    a = _leaf(rng, (4, 3, 3))
    r = _proj(rng, (2, 3, 3))
    return [("a", a)], lambda: _projected_sum(
        tensor.slice_channels(a, 1, 3), r)


def _case_softmax(rng):
    a = _leaf(rng, (4, 2, 2, 2))
    r = _proj(rng, (4, 2, 2, 2))
    return [("logits", a)], lambda: _projected_sum(
        tensor.softmax_channels(a), r)


def _case_instance_norm(rng):
    a = _leaf(rng, (2, 3, 4, 4))
    r = _proj(rng, (2, 3, 4, 4))
    return [("input", a)], lambda: _projected_sum(tensor.instance_norm(a), r)


def _case_cross_entropy(rng):
    logits = _leaf(rng, (4, 2, 2, 2))
    labels = rng.integers(0, 4, size=(2, 2, 2))
    return [("logits", logits)], lambda: tensor.cross_entropy_logits(
        logits, labels)


# -- composite cases --------------------------------------------------------

def _case_residual_block(rng):
    block = ResidualBlock(2, 3, normalize=True)
    init_parameters(block, int(rng.integers(2 ** 31)))
    x = _leaf(rng, (2, 2, 4, 4))
    r = _proj(rng, (3, 2, 4, 4))
    targets = [("input", x)] + block.named_parameters()
    return targets, lambda: _projected_sum(block(x), r)


def _case_convlstm_step(rng):
    cell = ConvLSTMCell(2, 2)
    init_parameters(cell, int(rng.integers(2 ** 31)))
    xs = [_leaf(rng, (2, 1, 4, 4)) for _ in range(3)]
    r = _proj(rng, (2, 1, 4, 4))

    def forward():
        state = initial_state(cell, (1, 4, 4))
        out = None
        for x in xs:
            out, state = cell.step(x, state)
        return _projected_sum(out, r)

    targets = cell.named_parameters() + [("x0", xs[0]), ("x2", xs[2])]
    return targets, forward


def _toy_config(direction: str) -> ModelConfig:
    return ModelConfig(levels=2, channels=(1, 2), pool_factors=((1, 2, 2),),
                       direction=direction, normalize=True)


def _case_encoder(rng):
    with tensor.use_dtype(np.float64):
        net = SegModel(_toy_config("baseline"))
        init_parameters(net, int(rng.integers(2 ** 31)))
    frame = _leaf(rng, (1, 1, 4, 4))
    r = _proj(rng, (4, 1, 4, 4))
    targets = [("frame", frame)] + net.named_parameters()
    return targets, lambda: _projected_sum(net.encode(frame).logits_head, r)


def _case_full_model(rng):
    with tensor.use_dtype(np.float64):
        net = SegModel(_toy_config("bidirectional"))
        init_parameters(net, int(rng.integers(2 ** 31)))
    frames = [_leaf(rng, (1, 1, 4, 4)) for _ in range(2)]
    labels = [rng.integers(0, 4, size=(1, 4, 4)) for _ in range(2)]

    def forward():
        logits = net.forward_sequence(frames)
        total = None
        for lg, lab in zip(logits, labels):
            term = train_loss(lg, lab)
            total = term if total is None else total + term
        return total

    targets = ([("frame0", frames[0]), ("frame1", frames[1])]
               + net.named_parameters())
    return targets, forward


CASES = [
    ("add", _case_add),
    ("sub", _case_sub),
    ("mul", _case_mul),
    ("neg", _case_neg),
    ("relu", _case_relu),
    ("sigmoid", _case_sigmoid),
    ("tanh", _case_tanh),
    ("log", _case_log),
    ("reciprocal", _case_reciprocal),
    ("sum", _case_sum),
    ("conv", _case_conv),
    ("max_pool", _case_max_pool),
    ("upsample_nearest", _case_upsample),
    ("concat_channels", _case_concat),
    ("slice_channels", _case_slice),
    ("softmax_channels", _case_softmax),
    ("instance_norm", _case_instance_norm),
    ("cross_entropy", _case_cross_entropy),
    ("residual_block", _case_residual_block),
    ("convlstm_step", _case_convlstm_step),
    ("encoder", _case_encoder),
    ("full_model", _case_full_model),
]


def run_suite(seed: int = 0, threshold: float = THRESHOLD,
              step: float = STEP) -> list[CheckResult]:
    results = []
    with tensor.use_dtype(np.float64):
        for index, (name, case) in enumerate(CASES):
            rng = np.random.default_rng(np.random.SeedSequence((int(seed), index)))
            targets, forward = case(rng)
            err = _fd_max_rel_err(targets, forward, step)
            results.append(CheckResult(name, err, err < threshold))
    return results


def format_report(results) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  max rel err {r.max_rel_err:10.3e}  {status}")
    worst = max(results, key=lambda r: r.max_rel_err)
    lines.append(f"worst: {worst.name} ({worst.max_rel_err:.3e})")
    return "\n".join(lines)


def suite_passed(results) -> bool:
    return all(r.passed for r in results)
