from __future__ import annotations

import numpy as np
import pytest

from metricunet.errors import DimensionError, ValidationError
from metricunet.losses import LossConfig, total_loss
from metricunet.network import (
    NetworkSpec,
    build_detection_unet,
    build_metric_unet,
    build_unet,
    forward,
    head_parameter_names,
    trunk_parameter_names,
)
from metricunet.sampling import SamplingConfig, sample
from metricunet.tensor_core import load_checkpoint, save_checkpoint

SMALL = NetworkSpec(in_channels=3, encoder_channels=[4, 6, 8, 10], decoder_channels=[8, 6, 4], head_channels=4)


def count_by_enumeration(spec: NetworkSpec) -> int:
    """Independent count: conv+bn layers hold 9*cin*cout + 2*cout, tconvs 4*cin*cout + cout."""
    enc, dec = spec.encoder_channels, spec.decoder_channels
    total = 0
    cin = spec.in_channels
    for c in enc:
        total += 9 * cin * c + 2 * c + 9 * c * c + 2 * c
        cin = c
    for j, c in enumerate(dec):
        skip = enc[len(dec) - 1 - j]
        total += 4 * cin * c + c
        total += 9 * (c + skip) * c + 2 * c + 9 * c * c + 2 * c
        cin = c
    total += 9 * cin * spec.head_channels + 2 * spec.head_channels
    total += spec.head_channels * 2 + 2
    return total


def test_default_parameter_count_is_frozen():
    model = build_metric_unet()
    assert model.parameter_count() == count_by_enumeration(NetworkSpec())
    assert model.parameter_count() == 1_936_322
    # Same order of magnitude as the reported 3.28 million.
    assert 1e6 < model.parameter_count() < 1e7


def test_parameter_count_pure_function_of_spec():
    assert build_unet(SMALL, 0).parameter_count() == build_unet(SMALL, 5).parameter_count() == count_by_enumeration(SMALL)


def test_default_shapes():
    model = build_metric_unet()
    out = forward(model, np.zeros((1, 3, 64, 64), np.float32))
    assert out.logits.shape == (1, 2, 64, 64)
    assert out.embedding.shape == (1, 32, 64, 64)
    assert out.prob.shape == (1, 64, 64)


def test_detection_unet_shapes_and_size():
    det = build_detection_unet()
    assert det.spec.in_channels == 5
    assert max(det.spec.encoder_channels + det.spec.decoder_channels) == 32
    out = forward(det, np.zeros((1, 5, 64, 64), np.float32))
    assert out.logits.shape == (1, 2, 64, 64)
    assert det.parameter_count() < build_metric_unet().parameter_count()


def test_seeded_builds_identical():
    a, b = build_unet(SMALL, 3), build_unet(SMALL, 3)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    c = build_unet(SMALL, 4)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_zero_head_gives_half_probability():
    model = build_unet(SMALL, 0)
    model.params["segb.weight"].tensor.data[:] = 0
    model.params["segb.bias"].tensor.data[:] = 0
    out = forward(model, np.random.default_rng(0).standard_normal((2, 3, 16, 16)))
    np.testing.assert_array_equal(out.prob, 0.5)


def test_indivisible_input_names_constraint():
    with pytest.raises(DimensionError, match="divisible by 8"):
        forward(build_unet(SMALL, 0), np.zeros((1, 3, 20, 16)))


def test_wrong_channel_count():
    with pytest.raises(DimensionError, match="channels"):
        forward(build_unet(SMALL, 0), np.zeros((1, 4, 16, 16)))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"encoder_channels": [4, 8], "decoder_channels": [4, 2]},
        {"num_classes": 3},
        {"head_channels": 0},
        {"variant": "fancy"},
    ],
)
def test_invalid_specs(kwargs):
    with pytest.raises(ValidationError):
        build_unet(NetworkSpec(**kwargs), 0)


@pytest.mark.parametrize("size", [(8, 8), (16, 24), (32, 8)])
def test_shape_preservation(size):
    spec = NetworkSpec(in_channels=1, encoder_channels=[2, 2, 2, 2], decoder_channels=[2, 2, 2], head_channels=2)
    out = forward(build_unet(spec, 0), np.zeros((1, 1, *size)))
    assert out.logits.shape[2:] == size and out.embedding.shape[2:] == size


def test_whole_image_inference_equals_itself():
    model = build_unet(SMALL, 1).eval()
    x = np.random.default_rng(1).standard_normal((1, 3, 64, 64)).astype(np.float32)
    a = forward(model, x).logits.data
    b = forward(model, x).logits.data
    assert a.tobytes() == b.tobytes()


def test_eval_mode_uses_running_stats():
    model = build_unet(SMALL, 2).eval()
    x = np.random.default_rng(2).standard_normal((2, 3, 16, 16)).astype(np.float32)
    single = forward(model, x[:1]).logits.data
    batch = forward(model, x).logits.data[:1]
    np.testing.assert_allclose(single, batch, rtol=1e-5, atol=1e-5)


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(3)
    model = build_unet(SMALL, 3)
    x = rng.standard_normal((2, 3, 16, 16))
    labels = np.zeros((2, 16, 16), np.uint8)
    labels[:, 4:12, 5:11] = 1
    cfg = LossConfig(lam=1.0, strategies=[SamplingConfig("random", k=10), SamplingConfig("contour", k=10)])
    out = forward(model, x)
    tuples = [[sample(s, labels[b], out.prob[b], rng, b) for b in range(2)] for s in cfg.strategies]
    total_loss(out.logits, labels, out.embedding, tuples, cfg).total.backward()
    for name, p in model.params.items():
        if p.trainable:
            assert p.grad is not None and np.any(p.grad != 0), name


def test_head_and_trunk_partition():
    model = build_unet(SMALL, 0)
    head, trunk = set(head_parameter_names(model)), set(trunk_parameter_names(model))
    assert head and trunk and not head & trunk
    assert head | trunk == {n for n, p in model.params.items() if p.trainable}
    assert all(n.startswith(("sega.", "segb.")) for n in head)


def test_checkpoint_round_trip_gives_identical_forward(tmp_path):
    model = build_unet(SMALL, 7).eval()
    x = np.random.default_rng(7).standard_normal((1, 3, 16, 16)).astype(np.float32)
    save_checkpoint(tmp_path / "m.npz", model.state_arrays())
    other = build_unet(SMALL, 99).eval()
    other.load_state_arrays(load_checkpoint(tmp_path / "m.npz"))
    assert forward(model, x).logits.data.tobytes() == forward(other, x).logits.data.tobytes()


def test_load_state_rejects_mismatch():
    model = build_unet(SMALL, 0)
    arrays = model.state_arrays()
    arrays.pop("segb.bias")
    with pytest.raises(ValidationError, match="segb.bias"):
        model.load_state_arrays(arrays)


def test_spec_json_round_trip():
    spec = NetworkSpec.from_dict(SMALL.to_dict())
    assert spec == SMALL
