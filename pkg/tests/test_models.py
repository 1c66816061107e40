import struct

import numpy as np
import pytest

from vitbackdoor.datasets import LabeledDataset, gen_synthetic, split
from vitbackdoor.errors import ConfigurationError, DimensionError, FormatError, IncompatibleVersionError, TrainingError
from vitbackdoor.models import (TinyCNNConfig, TinyViTConfig, TrainConfig, build_tiny_cnn, build_tiny_vit,
                                load_checkpoint, predict, save_checkpoint, train)
from vitbackdoor.models.checkpoint import decode_checkpoint, encode_checkpoint
from vitbackdoor.tensorcore import check_model_gradients


def small_vit(**kw):
    cfg = dict(image_shape=(3, 8, 8), patch_size=4, embed_dim=8, depth=2, heads=2, num_classes=4, seed=0)
    cfg.update(kw)
    return build_tiny_vit(TinyViTConfig(**cfg))


def small_cnn(**kw):
    cfg = dict(image_shape=(3, 8, 8), channels=(4, 6), num_classes=4, seed=0)
    cfg.update(kw)
    return build_tiny_cnn(TinyCNNConfig(**cfg))


def probe(n=5, shape=(3, 8, 8), seed=0):
    return np.random.default_rng(seed).uniform(size=(n,) + shape).astype(np.float32)


# ----------------------------------------------------------------------------
# architecture
# ----------------------------------------------------------------------------

def test_vit_sequence_length_32px():
    cfg = TinyViTConfig(image_shape=(3, 32, 32), patch_size=4)
    assert cfg.num_patches == 64 and cfg.seq_len == 65
    model = build_tiny_vit(TinyViTConfig(image_shape=(3, 32, 32), patch_size=4, embed_dim=16, depth=1, heads=2))
    assert model.params["pos"].value.shape == (65, 16)
    assert model.logits(probe(2, (3, 32, 32))).shape == (2, 10)


def test_vit_logits_shape():
    assert small_vit().logits(probe(7)).shape == (7, 4)


def test_vit_config_invariants():
    with pytest.raises(ConfigurationError):
        TinyViTConfig(image_shape=(3, 10, 10), patch_size=4)
    with pytest.raises(ConfigurationError):
        TinyViTConfig(embed_dim=10, heads=4)


def test_vit_parameter_count_deterministic():
    assert small_vit().num_parameters() == small_vit().num_parameters()


def test_forward_bitwise_reproducible():
    x = probe()
    assert small_vit().logits(x).tobytes() == small_vit().logits(x).tobytes()
    assert small_cnn().logits(x).tobytes() == small_cnn().logits(x).tobytes()


def test_cnn_default_forward_shape():
    model = build_tiny_cnn(TinyCNNConfig(image_shape=(3, 16, 16), num_classes=4))
    assert model.logits(probe(2, (3, 16, 16))).shape == (2, 4)


def test_cnn_parameter_count_by_hand():
    # conv0 4*3*3*3 + 4, conv1 6*4*3*3 + 6, head 6*4 + 4
    assert small_cnn().num_parameters() == (4 * 3 * 9 + 4) + (6 * 4 * 9 + 6) + (6 * 4 + 4)


def test_cnn_pooling_schedule_checked():
    with pytest.raises(ConfigurationError):
        TinyCNNConfig(image_shape=(1, 4, 4), channels=(2, 2, 2))


def test_input_shape_checked():
    with pytest.raises(DimensionError):
        small_vit().logits(probe(2, (3, 16, 16)))


# ----------------------------------------------------------------------------
# prediction
# ----------------------------------------------------------------------------

@pytest.mark.parametrize("build", [small_vit, small_cnn])
def test_predict_argmax_and_batching(build):
    model = build()
    x = probe(9, seed=3)
    labels, logits = predict(model, x)
    assert np.all(logits[np.arange(9), labels] == logits.max(axis=1))
    for i in range(9):
        np.testing.assert_allclose(predict(model, x[i:i + 1])[1][0], logits[i], rtol=1e-5, atol=1e-6)
        assert predict(model, x[i:i + 1])[0][0] == labels[i]
    perm = np.random.default_rng(0).permutation(9)
    np.testing.assert_array_equal(predict(model, x[perm])[0], labels[perm])
    np.testing.assert_array_equal(predict(model, x, batch_size=2)[0], labels)


# ----------------------------------------------------------------------------
# gradients
# ----------------------------------------------------------------------------

@pytest.mark.parametrize("build", [small_vit, small_cnn])
def test_end_to_end_gradient_subset(build):
    model = build()
    x = probe(3, seed=1).astype(np.float64)
    report = check_model_gradients(model, x, np.array([0, 2, 3]), entries=10, seed=4)
    assert report.passed, str(report)


def test_end_to_end_gradient_detects_broken_backward():
    model = small_vit()
    original = model._backward

    def broken(dlogits, cache):
        original(dlogits, cache)
        for p in model.parameters():
            p.grad *= -1

    model._backward = broken
    report = check_model_gradients(model, probe(3, seed=1).astype(np.float64), np.array([0, 1, 2]), seed=4)
    assert not report.passed


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

def tiny_data(n_per_class=20, seed=0):
    return gen_synthetic(4, n_per_class, image_size=8, seed=seed)


def test_zero_epochs_leaves_model_unchanged():
    model = small_vit()
    before = model.state_dict()
    result = train(model, tiny_data(), TrainConfig(epochs=0))
    assert result.history == []
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_seed_deterministic():
    states = []
    for _ in range(2):
        model = small_vit()
        train(model, tiny_data(), TrainConfig(epochs=2, batch_size=16, seed=3))
        states.append(model.state_dict())
    for k in states[0]:
        assert states[0][k].tobytes() == states[1][k].tobytes()


def test_training_reports_metrics():
    data = tiny_data()
    model = small_vit()
    result = train(model, data, TrainConfig(epochs=2, batch_size=16), val=data,
                   asr_view=(data.images[:5], 0))
    assert [m.epoch for m in result.history] == [1, 2]
    assert all(0 <= m.val_accuracy <= 1 and 0 <= m.asr <= 1 for m in result.history)


def test_training_divergence_names_epoch_and_batch():
    data = tiny_data()
    data.images[3] = np.nan
    with pytest.raises(TrainingError, match="epoch 0, batch"):
        train(small_vit(), data, TrainConfig(epochs=1, batch_size=16))


def test_training_class_mismatch():
    data = LabeledDataset(np.zeros((4, 3, 8, 8)), [0, 1, 2, 1], 3)
    with pytest.raises(DimensionError):
        train(small_vit(), data, TrainConfig(epochs=1))


def test_cnn_reaches_95_percent_on_synthetic():
    tr, _, te = split(gen_synthetic(4, 1000, 16, seed=1), seed=0)
    mean, std = tr.channel_stats()
    model = build_tiny_cnn(TinyCNNConfig(image_shape=tr.image_shape, channels=(16, 32), num_classes=4,
                                         input_mean=mean, input_std=std))
    train(model, tr, TrainConfig(epochs=10))
    assert (predict(model, te.images)[0] == te.labels).mean() >= 0.95


def test_vit_reaches_95_percent_on_synthetic(desk):
    model = desk.model("benign")
    assert (predict(model, desk.test.images)[0] == desk.test.labels).mean() >= 0.95


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

@pytest.mark.parametrize("build", [small_vit, small_cnn])
def test_checkpoint_round_trip(tmp_path, build):
    model = build()
    train(model, tiny_data(), TrainConfig(epochs=1, batch_size=32))
    x = probe(6, seed=2)
    path = save_checkpoint(model, tmp_path / "m.ckpt", meta={"epochs": 1, "seed": 0, "dataset_sha256": "x"})
    back, ckpt = load_checkpoint(path)
    assert back.logits(x).tobytes() == model.logits(x).tobytes()
    assert ckpt.meta["epochs"] == 1 and ckpt.kind == model.kind


def test_checkpoint_corrupted_magic():
    buf = bytearray(encode_checkpoint(small_vit()))
    buf[0] ^= 0xFF
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(bytes(buf))


def test_checkpoint_version_mismatch():
    buf = bytearray(encode_checkpoint(small_vit()))
    buf[8:12] = struct.pack("<I", 99)
    with pytest.raises(IncompatibleVersionError):
        decode_checkpoint(bytes(buf))


def test_checkpoint_truncated():
    buf = encode_checkpoint(small_cnn())
    with pytest.raises(FormatError, match="truncated"):
        decode_checkpoint(buf[:-5])
    with pytest.raises(FormatError, match="trailing"):
        decode_checkpoint(buf + b"\x00")
