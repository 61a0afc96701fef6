import numpy as np
import pytest

from ergoseg import ops
from ergoseg.gradcheck import grad_check
from ergoseg.graph import AdjacencySet, canonical_topology
from ergoseg.layers import CausalConv1d, EdTcn, EdTcnConfig, GcnLayer
from ergoseg.losses import LossWeights
from ergoseg.model import (AbsentOutput, AssessmentModel, ModelConfig, Variant, frame_mask,
                           load_checkpoint, save_checkpoint, small_config)
from ergoseg.tensor import Tensor, no_grad

VARIANTS = list(Variant)


def joints(rng, B=2, T=12):
    return rng.standard_normal((B, 3, 15, T))


def test_gcn_layer_matches_dense_partition_sum(rng):
    adj = AdjacencySet.from_topology(canonical_topology())
    layer = GcnLayer(3, 5, adj, rng)
    layer.importance.data = rng.uniform(0.5, 1.5, size=(3, 15, 15))
    x = rng.standard_normal((15, 7, 3))
    out = layer(Tensor(x)).data
    ref = np.zeros((15, 7, 5))
    for a in range(3):
        eff = layer.importance.data[a] * adj.normalized[a]
        for m in range(7):
            ref[:, m] += eff @ x[:, m] @ layer.weight.data[a]
    ref = np.maximum(ref + layer.bias.data, 0)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_gcn_layer_rejects_wrong_shapes(rng):
    layer = GcnLayer(3, 4, AdjacencySet.from_topology(canonical_topology()), rng)
    with pytest.raises(ValueError, match="joints"):
        layer(Tensor(np.zeros((14, 2, 3))))
    with pytest.raises(ValueError, match="channels"):
        layer(Tensor(np.zeros((15, 2, 4))))


def test_gcn_layer_gradient_including_importance(rng):
    adj = AdjacencySet.from_topology(canonical_topology())
    layer = GcnLayer(2, 3, adj, rng)
    x = Tensor(rng.standard_normal((15, 3, 2)), requires_grad=True)
    params = [x, layer.weight, layer.importance, layer.bias]
    assert grad_check(lambda *_: layer(x), params) < 1e-6


def test_full_size_shapes():
    cfg = ModelConfig(variant=Variant.MTL_EMB, num_classes=17)
    model = AssessmentModel(cfg)
    assert model.backbone.flat_width == 256 * 15 == 3840
    assert model.backbone.pool_width == 2048
    assert model.regressor_input_width == 2048 + 17 == 2065
    base = AssessmentModel(ModelConfig(variant=Variant.MTL_BASE, num_classes=17))
    assert base.regressor_input_width == 2048


@pytest.mark.parametrize("variant", VARIANTS)
def test_variant_heads(rng, variant):
    model = AssessmentModel(small_config(variant, num_classes=4))
    out = model(joints(rng, T=10))
    if variant.has_segmentation:
        assert out.require_logits().shape == (2, 10, 4)
    else:
        with pytest.raises(AbsentOutput):
            out.require_logits()
    if variant.has_risk:
        assert out.require_risk().shape == (2, 10)
    else:
        with pytest.raises(AbsentOutput):
            out.require_risk()


@pytest.mark.parametrize("T", [1, 5, 8, 13])
def test_edtcn_keeps_length(rng, T):
    tcn = EdTcn(6, 3, EdTcnConfig(hidden=(4, 5), kernel=3, dropout=0.0, fc_hidden=4), rng)
    assert tcn(Tensor(rng.standard_normal((2, T, 6)))).shape == (2, T, 3)


def test_single_sequence_is_promoted(rng):
    model = AssessmentModel(small_config("mtl-base"))
    out = model(joints(rng, B=1, T=6)[0])
    assert out.logits.shape == (1, 6, 4)


def test_frame_mask_detects_padding(rng):
    x = joints(rng, B=1, T=5)
    x[..., 3:] = -1.0
    np.testing.assert_array_equal(frame_mask(x), [[True, True, True, False, False]])


@pytest.mark.parametrize("variant", VARIANTS)
def test_outputs_on_real_frames_ignore_extra_padding(rng, variant):
    model = AssessmentModel(small_config(variant)).eval()
    x = joints(rng, B=1, T=9)
    padded = np.concatenate([x, np.full((1, 3, 15, 7), -1.0)], axis=-1)
    with no_grad():
        a, b = model(x), model(padded)
    for name in ("logits", "risk"):
        ta, tb = getattr(a, name), getattr(b, name)
        if ta is not None:
            np.testing.assert_allclose(tb.data[:, :9], ta.data, atol=1e-12)


def test_causal_conv_layer_is_causal(rng):
    conv = CausalConv1d(2, 3, kernel=4, dilation=2, rng=rng)
    assert conv.left_pad == 6
    x = rng.standard_normal((1, 16, 2))
    base = conv(Tensor(x)).data
    for t in range(16):
        moved = x.copy()
        moved[0, t] += 1.0
        diff = conv(Tensor(moved)).data - base
        assert not diff[0, :t].any()


@pytest.mark.parametrize("variant", VARIANTS)
def test_small_variant_gradients(rng, variant):
    from ergoseg.training import batch_loss
    from ergoseg.data import SkeletonSequence, pad_and_mask

    model = AssessmentModel(small_config(variant, num_classes=3), seed=2)
    seqs = [SkeletonSequence(f"v{i}", rng.standard_normal((T, 15, 3)), rng.integers(0, 3, T),
                             rng.integers(1, 16, T), rng.uniform(1, 15, T))
            for i, T in enumerate((6, 9))]
    batch = pad_and_mask(seqs, ignore_label=3)
    weights = LossWeights()
    params = model.parameters() + [weights.alpha, weights.beta, weights.gamma]
    err = grad_check(lambda *_: batch_loss(model, weights, batch)[0], params, max_coords=20)
    assert err < 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    model = AssessmentModel(small_config("mtl-emb"), seed=3)
    weights = LossWeights(0.5, 0.25, 2.0)
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, weights.named_parameters(), {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.model.config == model.config
    assert ck.metadata == {"note": "x"}
    for (k, p), (k2, q) in zip(model.named_parameters().items(), ck.model.named_parameters().items()):
        assert k == k2
        np.testing.assert_array_equal(p.data, q.data)
    assert float(ck.loss_params["gamma"]) == 2.0
    x = joints(rng, B=1, T=7)
    with no_grad():
        np.testing.assert_array_equal(model.eval()(x).risk.data, ck.model.eval()(x).risk.data)


def test_checkpoint_rejects_tampered_topology(tmp_path):
    import json
    model = AssessmentModel(small_config("stl-as"))
    path = tmp_path / "m.npz"
    save_checkpoint(path, model)
    with np.load(path) as z:
        arrays = dict(z)
    header = json.loads(str(arrays["header"]))
    header["topology_hash"] = "0" * 16
    arrays["header"] = np.array(json.dumps(header))
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="topology"):
        load_checkpoint(path)


def test_adaptive_pool_is_plain_average_of_flattened_features(rng):
    model = AssessmentModel(small_config("stl-as"))
    x = Tensor(rng.standard_normal((1, 4, 3, 15)))
    flat = model.backbone.flatten(x).data
    pooled = model.backbone(x).data
    m = ops.adaptive_avg_pool_matrix(model.backbone.flat_width, model.backbone.pool_width)
    np.testing.assert_allclose(pooled, flat @ m.toarray())
