import math

import numpy as np
import pytest

from bke import tensor as T
from bke.models import (
    CHECKPOINT_MAGIC,
    BundleSpecs,
    CheckpointError,
    EncoderSpec,
    MlpSpec,
    ModelBundle,
    attach_classifier,
    classify,
    encode,
    init_bundle,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
)

TINY = BundleSpecs(
    encoder=EncoderSpec(input_side=8, conv_stages=((2, 2), (3, 2))),
    projector=MlpSpec(3, 4, 3),
    predictor=MlpSpec(3, 3, 3),
)


def bundles_equal(a: ModelBundle, b: ModelBundle) -> bool:
    for group in ("online_encoder", "online_projector", "predictor",
                  "target_encoder", "target_projector"):
        pa, pb = getattr(a, group), getattr(b, group)
        if pa.keys() != pb.keys():
            return False
        if any(not np.array_equal(pa[k], pb[k]) for k in pa):
            return False
    return True


def test_init_is_deterministic():
    assert bundles_equal(init_bundle(TINY, 42), init_bundle(TINY, 42))
    assert not bundles_equal(init_bundle(TINY, 42), init_bundle(TINY, 43))


def test_target_starts_as_independent_copy():
    bundle = init_bundle(TINY, 1)
    for name in bundle.online_encoder:
        np.testing.assert_array_equal(bundle.online_encoder[name], bundle.target_encoder[name])
    bundle.online_encoder["stage0.w"] = bundle.online_encoder["stage0.w"] + 1.0
    assert not np.array_equal(bundle.online_encoder["stage0.w"], bundle.target_encoder["stage0.w"])


def test_init_respects_fan_in_bounds():
    bundle = init_bundle(BundleSpecs.default(16), 0)
    w0 = bundle.online_encoder["stage0.w"]  # fan_in = 1 * 3 * 3
    assert np.all(np.abs(w0) <= math.sqrt(1.0 / 9.0))
    w1 = bundle.online_encoder["stage1.w"]  # fan_in = 16 * 9
    assert np.all(np.abs(w1) <= math.sqrt(1.0 / 144.0))
    fc1 = bundle.online_projector["fc1.w"]  # fan_in = 64
    assert np.all(np.abs(fc1) <= math.sqrt(1.0 / 64.0))
    # bounds are actually explored, not collapsed toward zero
    assert np.abs(w0).max() > 0.5 * math.sqrt(1.0 / 9.0)


def test_encode_shapes():
    bundle = init_bundle(TINY, 3)
    for side in (8, 16):
        out = encode(bundle.online_encoder, TINY.encoder, np.zeros((5, 1, side, side)))
        assert out.shape == (5, 3)


def test_encode_rejects_bad_shapes():
    bundle = init_bundle(TINY, 3)
    with pytest.raises(ValueError, match="expected"):
        encode(bundle.online_encoder, TINY.encoder, np.zeros((5, 2, 8, 8)))
    with pytest.raises(ValueError, match="square"):
        encode(bundle.online_encoder, TINY.encoder, np.zeros((5, 1, 8, 10)))


def test_mlp_forward_matches_manual():
    bundle = init_bundle(TINY, 9)
    p = bundle.online_projector
    x = np.random.default_rng(0).normal(size=(4, 3))
    got = mlp_forward(p, x).data
    want = np.maximum(x @ p["fc1.w"] + p["fc1.b"], 0.0) @ p["fc2.w"] + p["fc2.b"]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_attach_classifier_and_classify():
    bundle = init_bundle(TINY, 5)
    attach_classifier(bundle, n_classes=4, seed=77)
    logits = classify(bundle.classifier, np.zeros((2, 3)))
    assert logits.shape == (2, 4)
    again = init_bundle(TINY, 5)
    attach_classifier(again, n_classes=4, seed=77)
    for k in bundle.classifier:
        np.testing.assert_array_equal(bundle.classifier[k], again.classifier[k])
    with pytest.raises(ValueError, match="2 classes"):
        attach_classifier(bundle, n_classes=1)


def test_spec_validation():
    with pytest.raises(ValueError, match="stride"):
        EncoderSpec(conv_stages=((4, 3),)).validate()
    with pytest.raises(ValueError, match="input_side"):
        EncoderSpec(input_side=4).validate()
    with pytest.raises(ValueError, match="feature_dim"):
        BundleSpecs(
            encoder=EncoderSpec(),
            projector=MlpSpec(10, 4, 3),
            predictor=MlpSpec(3, 3, 3),
        ).validate()
    with pytest.raises(ValueError, match="projector out_dim"):
        BundleSpecs(
            encoder=EncoderSpec(),
            projector=MlpSpec(64, 4, 3),
            predictor=MlpSpec(5, 3, 3),
        ).validate()


# --- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    bundle = init_bundle(TINY, 123)
    path = tmp_path / "model.bkec"
    save_checkpoint(bundle, path)
    loaded = load_checkpoint(path)
    assert bundles_equal(bundle, loaded)
    assert loaded.init_seed == 123
    assert loaded.specs.encoder == TINY.encoder
    assert loaded.specs.projector == TINY.projector
    assert loaded.specs.predictor == TINY.predictor
    assert loaded.classifier is None


def test_checkpoint_round_trip_with_classifier(tmp_path):
    bundle = init_bundle(TINY, 5)
    attach_classifier(bundle, n_classes=3, seed=6)
    path = tmp_path / "model.bkec"
    save_checkpoint(bundle, path)
    loaded = load_checkpoint(path)
    assert loaded.specs.classifier == bundle.specs.classifier
    for k in bundle.classifier:
        np.testing.assert_array_equal(bundle.classifier[k], loaded.classifier[k])


def test_checkpoint_save_is_byte_stable(tmp_path):
    bundle = init_bundle(TINY, 8)
    p1, p2 = tmp_path / "a.bkec", tmp_path / "b.bkec"
    save_checkpoint(bundle, p1)
    save_checkpoint(bundle, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes()[:4] == CHECKPOINT_MAGIC


def test_checkpoint_truncation_detected(tmp_path):
    bundle = init_bundle(TINY, 8)
    path = tmp_path / "model.bkec"
    save_checkpoint(bundle, path)
    blob = path.read_bytes()
    for cut in (len(blob) - 3, len(blob) // 2, 10):
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError, match="payload length mismatch"):
            load_checkpoint(path)


def test_checkpoint_trailing_garbage_detected(tmp_path):
    bundle = init_bundle(TINY, 8)
    path = tmp_path / "model.bkec"
    save_checkpoint(bundle, path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(CheckpointError, match="payload length mismatch"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.bkec"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_save_load_save_identical_bytes(tmp_path):
    bundle = init_bundle(TINY, 21)
    attach_classifier(bundle, n_classes=2, seed=21)
    p1, p2 = tmp_path / "a.bkec", tmp_path / "b.bkec"
    save_checkpoint(bundle, p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_taped_forward_uses_leaf_values():
    bundle = init_bundle(TINY, 2)
    x = np.random.default_rng(1).normal(size=(2, 1, 8, 8))
    plain = encode(bundle.online_encoder, TINY.encoder, x).data
    with T.Tape() as tape:
        leaves = {k: tape.leaf(v) for k, v in bundle.online_encoder.items()}
        taped = encode(leaves, TINY.encoder, x)
        grads = tape.backward(T.mean_all(taped))
    np.testing.assert_array_equal(plain, taped.data)
    assert any(np.any(grads[leaf.node_id].data != 0.0) for leaf in leaves.values())
