"""Network topology contracts, temporal causality, directional symmetry."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cardioseq.layers import init_parameters
from cardioseq.model import (
    ConfigError,
    ModelConfig,
    SegModel,
    fuse_bidirectional,
    logits_to_labels,
)
from cardioseq.tensor import ShapeError, Tensor, no_grad


def tiny_config(direction="bidirectional", **kw):
    return ModelConfig(levels=2, channels=(2, 4), direction=direction, **kw)


def make_frames(t, extents=(1, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    return [Tensor(rng.normal(size=(1,) + extents).astype(np.float32))
            for _ in range(t)]


# -- configuration -------------------------------------------------------


def test_config_defaults_validate():
    ModelConfig().validate()


@pytest.mark.parametrize("kw,msg", [
    (dict(levels=1, channels=(4,)), "levels"),
    (dict(levels=3, channels=(4, 8)), "channel widths"),
    (dict(levels=2, channels=(8, 8)), "strictly increasing"),
    (dict(direction="both"), "direction"),
    (dict(fusion="max"), "fusion"),
    (dict(levels=2, channels=(2, 4), pool_factors=((2, 2, 2), (2, 2, 2))),
     "pooling factors"),
    (dict(levels=2, channels=(2, 4), pool_factors=((2, 0, 2),)), "bad pooling"),
])
def test_config_rejects_invalid_values(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        ModelConfig(**kw).validate()


def test_pool_factors_derived_from_depth():
    cfg = ModelConfig(levels=4, channels=(4, 8, 16, 32))
    # depth halves only while at least 8 slices remain
    assert cfg.resolve_pools((24, 96, 96)) == ((2, 2, 2), (2, 2, 2), (1, 2, 2))
    assert cfg.resolve_pools((8, 64, 64)) == ((2, 2, 2), (1, 2, 2), (1, 2, 2))
    assert cfg.resolve_pools((4, 32, 32)) == ((1, 2, 2), (1, 2, 2), (1, 2, 2))


def test_explicit_pool_factors_win():
    cfg = ModelConfig(levels=2, channels=(2, 4), pool_factors=((1, 4, 4),))
    assert cfg.resolve_pools((32, 32, 32)) == ((1, 4, 4),)


def test_config_dict_roundtrip():
    cfg = ModelConfig(levels=3, channels=(2, 4, 8), pool_factors=((2, 2, 2), (1, 2, 2)),
                      direction="forward_only", normalize=False, fusion="learned")
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


# -- encoder -------------------------------------------------------------


def test_encoder_feature_pyramid_shapes():
    cfg = ModelConfig(levels=3, channels=(2, 4, 8))
    net = SegModel(cfg)
    init_parameters(net, 0)
    feats = net.encode(Tensor(np.zeros((1, 4, 8, 8), np.float32)))
    # coarsest first; auto pools at depth 4 are (1,2,2) per transition
    assert [g.shape for g in feats.g] == [(8, 4, 2, 2), (4, 4, 4, 4), (2, 4, 8, 8)]
    assert feats.logits_head.shape == (4, 4, 8, 8)


def test_encoder_rejects_indivisible_extents():
    net = SegModel(tiny_config())
    with pytest.raises(ShapeError, match="not divisible"):
        net.encode(Tensor(np.zeros((1, 1, 7, 8), np.float32)))


def test_encoder_rejects_multichannel_frame():
    net = SegModel(tiny_config())
    with pytest.raises(ShapeError, match="frame"):
        net.encode(Tensor(np.zeros((2, 1, 8, 8), np.float32)))


# -- parameter registry ---------------------------------------------------


def test_parameter_namespaces_by_direction():
    def spaces(direction, fusion="average"):
        net = SegModel(tiny_config(direction, fusion=fusion))
        return {n.split(".")[0] for n, _ in net.named_parameters()}

    assert spaces("baseline") == {"encoder"}
    assert spaces("forward_only") == {"encoder", "decoder_fwd"}
    assert spaces("bidirectional") == {"encoder", "decoder_fwd", "decoder_bwd"}
    assert spaces("bidirectional", "learned") == {"encoder", "decoder_fwd",
                                                  "decoder_bwd", "fusion"}


def test_encoder_parameters_is_a_strict_subset():
    net = SegModel(tiny_config())
    enc = dict(net.encoder_parameters())
    full = dict(net.named_parameters())
    assert set(enc) < set(full)
    assert all(n.startswith("encoder.") for n in enc)


def test_directional_stacks_have_identical_structure():
    net = SegModel(tiny_config())
    fwd = [(n, p.shape) for n, p in net.fwd.named_parameters()]
    bwd = [(n, p.shape) for n, p in net.bwd.named_parameters()]
    assert fwd == bwd
    # but independent storage
    assert net.fwd.cells[0].w_x is not net.bwd.cells[0].w_x


def test_init_is_seed_reproducible_across_models():
    a, b, c = (SegModel(tiny_config()) for _ in range(3))
    init_parameters(a, 4)
    init_parameters(b, 4)
    init_parameters(c, 5)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2
        assert_allclose(p1.data, p2.data)
    assert any(not np.array_equal(p1.data, p2.data)
               for (_, p1), (_, p2) in zip(a.named_parameters(), c.named_parameters()))


# -- sequence forward passes ----------------------------------------------


@pytest.mark.parametrize("direction", ["baseline", "forward_only", "bidirectional"])
def test_forward_sequence_shape_contract(direction):
    net = SegModel(tiny_config(direction))
    init_parameters(net, 1)
    with no_grad():
        logits = net.forward_sequence(make_frames(3))
    assert len(logits) == 3
    assert all(lg.shape == (4, 1, 8, 8) for lg in logits)


@pytest.mark.parametrize("direction", ["baseline", "forward_only", "bidirectional"])
def test_single_frame_sequence_works(direction):
    net = SegModel(tiny_config(direction))
    init_parameters(net, 2)
    with no_grad():
        labels = net.segment(make_frames(1))
    assert len(labels) == 1
    assert labels[0].shape == (1, 8, 8)
    assert labels[0].dtype == np.uint8


def test_forward_pass_is_deterministic():
    net = SegModel(tiny_config())
    init_parameters(net, 3)
    frames = make_frames(2)
    with no_grad():
        a = net.forward_sequence(frames)
        b = net.forward_sequence(frames)
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)


def test_forward_scan_is_causal():
    """Forward-only predictions at frame t ignore frames after t, bit for bit."""
    net = SegModel(tiny_config("forward_only"))
    init_parameters(net, 5)
    frames = make_frames(3, seed=8)
    tampered = list(frames)
    tampered[2] = Tensor(frames[2].data + 1.0)
    with no_grad():
        base = net.forward_sequence(frames)
        poked = net.forward_sequence(tampered)
    assert np.array_equal(base[0].data, poked[0].data)
    assert np.array_equal(base[1].data, poked[1].data)
    assert not np.array_equal(base[2].data, poked[2].data)


def test_forward_scan_propagates_the_past():
    net = SegModel(tiny_config("forward_only"))
    init_parameters(net, 5)
    frames = make_frames(3, seed=9)
    tampered = list(frames)
    tampered[0] = Tensor(frames[0].data + 1.0)
    with no_grad():
        base = net.forward_sequence(frames)
        poked = net.forward_sequence(tampered)
    assert not np.array_equal(base[2].data, poked[2].data)


def test_bidirectional_mixes_both_directions():
    net = SegModel(tiny_config())
    init_parameters(net, 6)
    frames = make_frames(3, seed=10)
    for poke_at in (0, 2):
        tampered = list(frames)
        tampered[poke_at] = Tensor(frames[poke_at].data + 1.0)
        with no_grad():
            base = net.forward_sequence(frames)
            poked = net.forward_sequence(tampered)
        # every frame sees the perturbation from one side or the other
        assert all(not np.array_equal(b.data, p.data)
                   for b, p in zip(base, poked))


def test_reversed_input_with_swapped_stack_mirrors_forward_scan():
    # scanning the reversed sequence "backward" with the forward stack is the
    # exact same computation, so the outputs must match bit for bit
    net = SegModel(tiny_config())
    init_parameters(net, 7)
    frames = make_frames(4, seed=11)
    with no_grad():
        feats = [net.encode(f) for f in frames]
        fwd = net.decode_directional(feats, "forward")
        mirrored = net.decode_directional(feats[::-1], "backward", stack=net.fwd)
    for a, b in zip(fwd, reversed(mirrored)):
        assert np.array_equal(a.data, b.data)


def test_baseline_treats_frames_independently():
    net = SegModel(tiny_config("baseline"))
    init_parameters(net, 12)
    frames = make_frames(3, seed=13)
    tampered = list(frames)
    tampered[1] = Tensor(frames[1].data + 1.0)
    with no_grad():
        base = net.forward_sequence(frames)
        poked = net.forward_sequence(tampered)
    assert np.array_equal(base[0].data, poked[0].data)
    assert not np.array_equal(base[1].data, poked[1].data)
    assert np.array_equal(base[2].data, poked[2].data)


# -- fusion and labeling ---------------------------------------------------


def test_fuse_bidirectional_averages():
    f = [Tensor(np.full((4, 1, 2, 2), 2.0, np.float32))]
    b = [Tensor(np.full((4, 1, 2, 2), 4.0, np.float32))]
    fused = fuse_bidirectional(f, b)
    assert_allclose(fused[0].data, np.full((4, 1, 2, 2), 3.0))


def test_fuse_rejects_length_mismatch():
    t = [Tensor(np.zeros((4, 1, 1, 1), np.float32))]
    with pytest.raises(ShapeError, match="lengths differ"):
        fuse_bidirectional(t, t * 2)


def test_learned_fusion_changes_parameter_count_not_shapes():
    net = SegModel(tiny_config(fusion="learned"))
    init_parameters(net, 14)
    assert net.fusion_conv is not None
    assert net.fusion_conv.kernel.shape == (4, 8, 1, 1, 1)
    with no_grad():
        logits = net.forward_sequence(make_frames(2, seed=15))
    assert all(lg.shape == (4, 1, 8, 8) for lg in logits)


def test_logits_to_labels_breaks_ties_low():
    logits = Tensor(np.zeros((4, 1, 1, 2), np.float32))
    logits.data[2, 0, 0, 1] = 5.0
    labels = logits_to_labels(logits)
    assert labels.dtype == np.uint8
    assert labels[0, 0, 0] == 0  # four-way tie -> class 0
    assert labels[0, 0, 1] == 2


# -- decode error paths -----------------------------------------------------


def test_decode_requires_a_stack():
    net = SegModel(tiny_config("forward_only"))
    init_parameters(net, 0)
    feats = [net.encode(f) for f in make_frames(2)]
    with pytest.raises(ConfigError, match="no backward decoder"):
        net.decode_directional(feats, "backward")


def test_decode_rejects_unknown_direction():
    net = SegModel(tiny_config())
    with pytest.raises(ValueError, match="forward or backward"):
        net.decode_directional([], "sideways")


def test_decode_rejects_empty_sequence():
    net = SegModel(tiny_config())
    with pytest.raises(ShapeError, match="empty"):
        net.decode_directional([], "forward")


def test_decode_rejects_mixed_frame_shapes():
    net = SegModel(tiny_config())
    init_parameters(net, 0)
    feats = [net.encode(Tensor(np.zeros((1, 1, 8, 8), np.float32))),
             net.encode(Tensor(np.zeros((1, 1, 16, 16), np.float32)))]
    with pytest.raises(ShapeError, match="mixed frame shapes"):
        net.decode_directional(feats, "forward")
