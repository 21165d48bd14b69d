"""Optimizer oracle, two-stage schedule contracts, checkpoint integrity."""

import hashlib
import json
import math
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cardioseq import tensorio
from cardioseq.data import DataError, PhantomConfig, generate_phantom_sequence
from cardioseq.layers import init_parameters
from cardioseq.model import ConfigError, ModelConfig, SegModel
from cardioseq.tensor import ShapeError, Tensor, cross_entropy_logits
from cardioseq.train import (
    AdamState,
    CheckpointError,
    TrainConfig,
    clip_gradients,
    config_digest,
    load_checkpoint,
    loss,
    optimizer_step,
    parameter_digest,
    read_checkpoint_raw,
    save_checkpoint,
    soft_dice_loss,
    train_stage1,
    train_stage2,
    write_log,
    zero_gradients,
)


def tiny_model(direction="bidirectional", seed=0):
    net = SegModel(ModelConfig(levels=2, channels=(2, 4), direction=direction))
    init_parameters(net, seed)
    return net


def tiny_dataset(n=1, frames=3, seed=0):
    out = []
    for i in range(n):
        cfg = PhantomConfig(frames=frames, extents=(2, 16, 16),
                            noise_std=0.05, seed=seed + i)
        out.append(generate_phantom_sequence(cfg, f"p{i:02d}"))
    return out


def reference_adam(p, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook bias-corrected implementation, kept independent on purpose."""
    p = np.array(p, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


# -- optimizer ---------------------------------------------------------------


def test_adam_matches_reference_over_many_steps():
    rng = np.random.default_rng(0)
    start = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(25)]

    p = Tensor(start.copy(), requires_grad=True)
    state = AdamState()
    for g in grads:
        p.grad = g.copy()
        optimizer_step([("p", p)], state, lr=0.01)
    assert_allclose(p.data, reference_adam(start, grads, 0.01), rtol=1e-9)
    assert state.step == 25


def test_adam_first_step_size_is_the_learning_rate():
    p = Tensor(np.zeros(4), requires_grad=True)
    p.grad = np.array([10.0, -0.5, 3.0, -80.0])
    optimizer_step([("p", p)], AdamState(), lr=0.25)
    assert_allclose(np.abs(p.data), np.full(4, 0.25), rtol=1e-5)
    assert_allclose(np.sign(p.data), [-1, 1, -1, 1])


def test_adam_zero_gradient_is_a_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState()
    p.grad = np.zeros(2)
    optimizer_step([("p", p)], state, lr=0.5)
    assert_allclose(p.data, [1.0, -2.0])
    # a missing gradient counts as zero too
    p.grad = None
    optimizer_step([("p", p)], state, lr=0.5)
    assert_allclose(p.data, [1.0, -2.0])


def test_adam_state_is_per_parameter_name():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState()
    a.grad, b.grad = np.ones(2), np.ones(3)
    optimizer_step([("a", a), ("b", b)], state, lr=0.1)
    assert set(state.m) == {"a", "b"}
    assert state.m["a"].shape == (2,)
    assert state.v["b"].shape == (3,)


def test_optimizer_rejects_mismatched_gradient_shape():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.zeros(3)
    with pytest.raises(ShapeError, match="gradient shape"):
        optimizer_step([("p", p)], AdamState(), lr=0.1)


def test_gradient_clipping_rescales_to_the_bound():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([0.0, 4.0])  # joint norm 5
    params = [("a", a), ("b", b)]
    clip_gradients(params, max_norm=1.0)
    norm = math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum()))
    assert norm == pytest.approx(1.0, rel=1e-6)
    assert_allclose(a.grad, [0.6, 0.0], rtol=1e-6)

    a.grad = np.array([0.1, 0.0])
    b.grad = np.array([0.0, 0.1])
    clip_gradients(params, max_norm=1.0)  # under the bound: untouched
    assert_allclose(a.grad, [0.1, 0.0])


def test_zero_gradients_clears_all():
    params = [("a", Tensor(np.zeros(2), requires_grad=True))]
    params[0][1].grad = np.ones(2)
    zero_gradients(params)
    assert params[0][1].grad is None


def test_parameter_digest_tracks_values_and_names():
    p = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    d1 = parameter_digest([("w", p)])
    assert d1 == parameter_digest([("w", p)])
    assert d1 != parameter_digest([("other", p)])
    p.data[0] = 5.0
    assert d1 != parameter_digest([("w", p)])


# -- loss --------------------------------------------------------------------


def test_loss_cross_entropy_mode_is_plain_cross_entropy():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(4, 2, 3, 3)).astype(np.float32))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    got = loss(logits, labels, "cross_entropy").item()
    want = cross_entropy_logits(Tensor(logits.data), labels).item()
    assert got == pytest.approx(want, rel=1e-6)


def test_combined_loss_adds_the_soft_dice_term():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.normal(size=(4, 1, 4, 4)).astype(np.float32))
    labels = rng.integers(0, 4, size=(1, 4, 4))
    ce = loss(logits, labels, "cross_entropy").item()
    both = loss(logits, labels, "cross_entropy_plus_soft_dice").item()
    sd = soft_dice_loss(Tensor(logits.data), labels).item()
    assert both == pytest.approx(ce + sd, rel=1e-5)


def test_soft_dice_rewards_confident_correct_masks():
    labels = np.zeros((1, 4, 4), np.int64)
    labels[0, :2, :2] = 1
    labels[0, 2:, 2:] = 2
    labels[0, :2, 2:] = 3
    perfect = np.full((4, 1, 4, 4), -30.0, np.float32)
    for c in range(4):
        perfect[c][labels == c] = 30.0
    assert soft_dice_loss(Tensor(perfect), labels).item() < 1e-3
    inverted = perfect[[0, 2, 3, 1]]  # rotate the foreground channels
    assert soft_dice_loss(Tensor(inverted), labels).item() > 0.95


def test_loss_rejects_unknown_mode():
    with pytest.raises(ValueError, match="loss mode"):
        loss(Tensor(np.zeros((4, 1, 1, 1), np.float32)), np.zeros((1, 1, 1), int),
             "hinge")


def test_train_config_validation():
    TrainConfig().validate()
    with pytest.raises(ValueError, match="learning rates"):
        TrainConfig(stage1_lr=0.0).validate()
    with pytest.raises(ValueError, match="lr decay"):
        TrainConfig(lr_decay_per_epoch=0.0).validate()
    with pytest.raises(ValueError, match="epoch counts"):
        TrainConfig(stage1_epochs=-1).validate()
    with pytest.raises(ValueError, match="loss mode"):
        TrainConfig(loss_mode="mse").validate()


# -- stage contracts -----------------------------------------------------------


def test_stage1_trains_encoder_and_freezes_decoder():
    net = tiny_model()
    enc_before = parameter_digest(net.encoder_parameters())
    dec_params = [(n, p) for n, p in net.named_parameters()
                  if not n.startswith("encoder.")]
    dec_before = parameter_digest(dec_params)
    train_stage1(net, tiny_dataset(), TrainConfig(stage1_epochs=2, augment=False))
    assert parameter_digest(net.encoder_parameters()) != enc_before
    assert parameter_digest(dec_params) == dec_before


def test_stage2_trains_encoder_and_decoder_jointly():
    net = tiny_model()
    enc_before = parameter_digest(net.encoder_parameters())
    dec_params = [(n, p) for n, p in net.named_parameters()
                  if n.startswith("decoder_")]
    dec_before = parameter_digest(dec_params)
    train_stage2(net, tiny_dataset(), TrainConfig(stage2_epochs=1, augment=False))
    assert parameter_digest(net.encoder_parameters()) != enc_before
    assert parameter_digest(dec_params) != dec_before


def test_stage2_gradient_reaches_recurrent_weights():
    net = tiny_model("forward_only")
    sample = tiny_dataset(frames=3)[0]
    logits = net.forward_sequence([v.data for v in sample.frames])
    total = None
    for t, lg in enumerate(logits):
        l = loss(lg, sample.labels[t])
        total = l if total is None else total + l
    total.backward()
    for j, cell in enumerate(net.fwd.cells):
        assert cell.w_h.grad is not None, f"level {j}"
        assert np.abs(cell.w_h.grad).max() > 0, f"level {j}"


def test_stage1_records_protocol_fields():
    net = tiny_model()
    dataset = tiny_dataset(n=2)
    records = train_stage1(net, dataset,
                           TrainConfig(stage1_epochs=3, stage1_lr=2e-4,
                                       augment=False))
    assert len(records) == 6  # one record per sequence per epoch
    assert [r["iter"] for r in records] == list(range(6))
    assert all(r["stage"] == 1 for r in records)
    assert all(r["lr"] == 2e-4 for r in records)
    assert [r["epoch"] for r in records] == [0, 0, 1, 1, 2, 2]
    assert {r["patient"] for r in records} == {"p00", "p01"}
    assert all(np.isfinite(r["loss"]) for r in records)


def test_stage2_learning_rate_decays_per_epoch():
    net = tiny_model()
    records = train_stage2(net, tiny_dataset(),
                           TrainConfig(stage2_epochs=3, stage2_lr=1e-4,
                                       lr_decay_per_epoch=0.7, augment=False))
    assert [r["lr"] for r in records] == pytest.approx([1e-4, 7e-5, 4.9e-5])
    assert all(r["stage"] == 2 for r in records)


def test_training_is_seed_deterministic():
    def run():
        net = tiny_model(seed=3)
        r1 = train_stage1(net, tiny_dataset(), TrainConfig(
            stage1_epochs=2, augment=True, seed=11))
        r2 = train_stage2(net, tiny_dataset(), TrainConfig(
            stage2_epochs=2, augment=True, seed=11))
        return r1 + r2, parameter_digest(net.named_parameters())

    (rec_a, dig_a), (rec_b, dig_b) = run(), run()
    assert dig_a == dig_b
    assert [r["loss"] for r in rec_a] == [r["loss"] for r in rec_b]


def test_stage2_rejects_baseline_models():
    net = tiny_model("baseline")
    with pytest.raises(ConfigError, match="baseline"):
        train_stage2(net, tiny_dataset(), TrainConfig(augment=False))


def test_bidirectional_stage2_needs_two_frames():
    net = tiny_model()
    sample = tiny_dataset(frames=3)[0]
    # bypass SequenceSample validation by trimming after construction
    sample.frames = sample.frames[:1]
    sample.labels = sample.labels[:1]
    with pytest.raises(DataError, match="at least 2 frames"):
        train_stage2(net, [sample], TrainConfig(augment=False))


def test_training_requires_labels():
    sample = tiny_dataset()[0]
    sample.labels = None
    with pytest.raises(DataError, match="requires"):
        train_stage1(tiny_model(), [sample], TrainConfig(augment=False))
    with pytest.raises(DataError, match="requires"):
        train_stage2(tiny_model(), [sample], TrainConfig(augment=False))


def test_training_rejects_empty_dataset():
    with pytest.raises(DataError, match="empty"):
        train_stage1(tiny_model(), [], TrainConfig())


def test_write_log_is_json_lines(tmp_path):
    path = tmp_path / "log.jsonl"
    write_log([{"stage": 1, "epoch": 0, "iter": 0, "lr": 1e-4, "loss": 2.5,
                "patient": "p00"}], path)
    rec = json.loads(path.read_text().splitlines()[0])
    assert rec == {"stage": 1, "epoch": 0, "iter": 0, "lr": 1e-4, "loss": 2.5,
                   "patient": "p00"}


# -- checkpoints ----------------------------------------------------------------


def rewrite_checkpoint(meta, entries, path):
    """Re-serialize a parsed checkpoint (for crafting corrupted variants)."""
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    out = bytearray()
    out += b"CSCK"
    out += struct.pack("<II", 1, len(meta_blob))
    out += meta_blob
    out += struct.pack("<I", len(entries))
    for name, arr in entries.items():
        name_b = name.encode()
        payload = tensorio.encode_array(arr)
        out += struct.pack("<H", len(name_b))
        out += name_b
        out += struct.pack("<Q", len(payload))
        out += payload
    out += hashlib.sha256(bytes(out)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    net = tiny_model()
    state = AdamState()
    train_stage1(net, tiny_dataset(), TrainConfig(stage1_epochs=1, augment=False),
                 state=state)
    path = tmp_path / "model.ckpt"
    save_checkpoint(net, state, path, epoch=4, extra={"note": "x"})

    again, state2, meta = load_checkpoint(path)
    assert meta["epoch"] == 4
    assert meta["extra"] == {"note": "x"}
    assert again.config == net.config
    for (n1, p1), (n2, p2) in zip(net.named_parameters(), again.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)
    assert state2.step == state.step
    for name in state.m:
        assert np.array_equal(state2.m[name], state.m[name])
        assert np.array_equal(state2.v[name], state.v[name])


def test_checkpoint_starts_with_magic(tmp_path):
    net = tiny_model("baseline")
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, None, path)
    assert path.read_bytes()[:4] == b"CSCK"


def test_baseline_checkpoint_contains_no_recurrent_entries(tmp_path):
    net = tiny_model("baseline")
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, None, path)
    _, entries = read_checkpoint_raw(path)
    assert entries
    assert all(not n.startswith(("decoder_fwd", "decoder_bwd")) for n in entries)


def test_tampered_checkpoint_is_rejected(tmp_path):
    net = tiny_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, None, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum mismatch"):
        read_checkpoint_raw(path)


def test_non_checkpoint_file_is_rejected(tmp_path):
    path = tmp_path / "nope.ckpt"
    path.write_bytes(b"GIF89a....")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_checkpoint_raw(path)


def test_unsupported_version_is_rejected(tmp_path):
    net = tiny_model("baseline")
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, None, path)
    blob = bytearray(path.read_bytes()[:-32])
    struct.pack_into("<I", blob, 4, 2)  # bump version, then re-sign
    blob += hashlib.sha256(bytes(blob)).digest()
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint_raw(path)


def test_missing_parameter_entry_is_rejected(tmp_path):
    net = tiny_model("baseline")
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, None, path)
    meta, entries = read_checkpoint_raw(path)
    entries.pop("encoder.head.kernel")
    rewrite_checkpoint(meta, entries, path)
    with pytest.raises(CheckpointError, match="missing parameter"):
        load_checkpoint(path)


def test_wrong_parameter_shape_is_rejected(tmp_path):
    net = tiny_model("baseline")
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, None, path)
    meta, entries = read_checkpoint_raw(path)
    entries["encoder.head.bias"] = np.zeros(9, np.float32)
    rewrite_checkpoint(meta, entries, path)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_stale_config_digest_is_rejected(tmp_path):
    net = tiny_model("baseline")
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, None, path)
    meta, entries = read_checkpoint_raw(path)
    meta["model_config"]["normalize"] = not meta["model_config"]["normalize"]
    rewrite_checkpoint(meta, entries, path)
    with pytest.raises(CheckpointError, match="config digest"):
        load_checkpoint(path)


def test_config_digest_is_canonical():
    a = ModelConfig(levels=2, channels=(2, 4))
    b = ModelConfig(levels=2, channels=(2, 4))
    c = ModelConfig(levels=2, channels=(2, 4), normalize=False)
    assert config_digest(a) == config_digest(b)
    assert config_digest(a) != config_digest(c)


def test_loaded_model_reproduces_predictions(tmp_path):
    net = tiny_model()
    dataset = tiny_dataset()
    train_stage1(net, dataset, TrainConfig(stage1_epochs=1, augment=False))
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, None, path)
    again, _, _ = load_checkpoint(path)
    frames = [v.data for v in dataset[0].frames]
    a = net.segment(frames)
    b = again.segment(frames)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
