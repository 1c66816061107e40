import math

import numpy as np
import pytest

from vitbackdoor.datasets import LabeledDataset, gen_synthetic
from vitbackdoor.errors import ConfigurationError, DimensionError
from vitbackdoor.poison import (TriggerSpec, apply_trigger, load_records, load_trigger, make_blend_trigger,
                                make_patch_trigger, make_single_pixel_trigger, make_sinusoid_trigger,
                                poison_dataset, random_pattern, save_records, save_trigger)


def superimpose_loop(x, delta, m):
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                out[c, i, j] = x[c, i, j] * (1.0 - m[c, i, j]) + delta[c, i, j] * m[c, i, j]
    return out


# ----------------------------------------------------------------------------
# trigger construction
# ----------------------------------------------------------------------------

def test_patch_bottom_right_geometry():
    t = make_patch_trigger((1, 32, 32), 3)
    assert t.mask.sum() == 9
    rows, cols = np.nonzero(t.mask[0])
    assert set(rows) == set(cols) == {29, 30, 31}
    assert np.all(t.pattern[t.mask == 1] == 1.0)


def test_patch_full_image():
    assert np.all(make_patch_trigger((3, 8, 8), 8).mask == 1)


def test_patch_size_one_equals_single_pixel():
    a = make_patch_trigger((3, 8, 8), 1, corner="top_left")
    b = make_single_pixel_trigger((3, 8, 8), (0, 0))
    np.testing.assert_array_equal(a.mask, b.mask)
    np.testing.assert_array_equal(a.pattern, b.pattern)


def test_patch_too_large():
    with pytest.raises(ConfigurationError):
        make_patch_trigger((1, 4, 4), 5)


@pytest.mark.parametrize("corner,row,col", [("top_left", 0, 0), ("top_right", 0, 7), ("bottom_left", 7, 0)])
def test_patch_corners(corner, row, col):
    t = make_patch_trigger((1, 8, 8), 2, corner=corner)
    assert t.mask[0, row, col] == 1 and t.mask.sum() == 4


def test_single_pixel_origin_and_bounds():
    t = make_single_pixel_trigger((3, 8, 8), (0, 0))
    assert t.mask[0].sum() == 1 and t.mask[0, 0, 0] == 1
    with pytest.raises(ConfigurationError):
        make_single_pixel_trigger((3, 8, 8), (8, 0))


def test_single_pixel_changes_at_most_c_values():
    t = make_single_pixel_trigger((3, 8, 8), (2, 5), value=0.3)
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert np.count_nonzero(apply_trigger(x, t) != x) <= 3


def test_blend_rejects_degenerate_alpha():
    for alpha in (0.0, 1.0, -0.1):
        with pytest.raises(ConfigurationError):
            make_blend_trigger(np.ones((1, 4, 4)), alpha)


def test_blend_arithmetic():
    t = make_blend_trigger(np.ones((1, 4, 4)), 0.2)
    np.testing.assert_allclose(apply_trigger(np.zeros((1, 4, 4)), t), 0.2)
    t = make_blend_trigger(np.ones((1, 4, 4)), 0.5)
    np.testing.assert_allclose(apply_trigger(np.full((1, 4, 4), 0.5), t), 0.75)


def test_sinusoid_bound_columns_and_zero_column():
    t = make_sinusoid_trigger((3, 16, 16), 0.08, 6)
    x = np.random.default_rng(1).uniform(size=(3, 16, 16))
    out = apply_trigger(x, t)
    assert np.abs(out - x).max() <= 0.08 + 1e-12
    np.testing.assert_array_equal(out[:, :, 0], x[:, :, 0])
    mid = np.full((3, 16, 16), 0.5)
    diff = apply_trigger(mid, t) - mid
    assert np.all(diff == diff[:, :1, :])
    np.testing.assert_allclose(diff[0, 0], 0.08 * np.sin(2 * np.pi * np.arange(16) * 6 / 16), atol=1e-15)


def test_sinusoid_parameter_checks():
    with pytest.raises(ConfigurationError):
        make_sinusoid_trigger((1, 8, 8), 0.3, 2)
    with pytest.raises(ConfigurationError):
        make_sinusoid_trigger((1, 8, 8), 0.1, 0.5)


# ----------------------------------------------------------------------------
# superimposition
# ----------------------------------------------------------------------------

def test_apply_zero_mask_identity():
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    t = TriggerSpec(np.zeros_like(x), np.ones_like(x), "patch", 0)
    np.testing.assert_array_equal(apply_trigger(x, t), x)


def test_apply_full_mask_returns_pattern():
    rng = np.random.default_rng(1)
    x, delta = rng.uniform(size=(3, 8, 8)), rng.uniform(size=(3, 8, 8))
    t = TriggerSpec(np.ones_like(x), delta, "patch", 0)
    np.testing.assert_array_equal(apply_trigger(x, t), delta)


def test_apply_matches_loop_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x, delta, m = (rng.uniform(size=(3, 8, 8)) for _ in range(3))
        t = TriggerSpec(m, delta, "blend", 0)
        np.testing.assert_array_equal(apply_trigger(x, t), np.clip(superimpose_loop(x, delta, m), 0, 1))


def test_apply_does_not_mutate_and_checks_shape():
    x = np.full((3, 8, 8), 0.25)
    before = x.copy()
    apply_trigger(x, make_patch_trigger((3, 8, 8)))
    np.testing.assert_array_equal(x, before)
    with pytest.raises(DimensionError):
        apply_trigger(np.zeros((3, 4, 4)), make_patch_trigger((3, 8, 8)))


def test_patch_changes_only_mask_support():
    t = make_patch_trigger((3, 16, 16), 3)
    x = np.random.default_rng(2).uniform(0, 0.9, size=(3, 16, 16))
    changed = apply_trigger(x, t) != x
    assert not np.any(changed & (t.mask == 0))


def test_blend_linf_bound():
    rng = np.random.default_rng(3)
    t = make_blend_trigger(random_pattern((3, 8, 8), 1), 0.15)
    x = rng.uniform(size=(3, 8, 8))
    assert np.abs(apply_trigger(x, t) - x).max() <= 0.15 + 1e-12


# ----------------------------------------------------------------------------
# poisoning a dataset
# ----------------------------------------------------------------------------

def _four_class(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.uniform(size=(n, 1, 8, 8)), np.arange(n) % 4, 4)


def test_poison_count_and_labels():
    ds = _four_class()
    poisoned, records = poison_dataset(ds, make_patch_trigger((1, 8, 8), target=2), 0.05, seed=1)
    assert len(records) == 50 and poisoned.poison_flags.sum() == 50
    assert np.all(poisoned.labels[poisoned.poison_flags] == 2)
    assert all(r.poisoned and r.original_label != 2 for r in records)
    assert {r.sample_id for r in records} == set(poisoned.ids[poisoned.poison_flags])


def test_poison_leaves_others_bitwise():
    ds = _four_class()
    poisoned, _ = poison_dataset(ds, make_patch_trigger((1, 8, 8)), 0.07, seed=4)
    keep = ~poisoned.poison_flags
    assert poisoned.images[keep].tobytes() == ds.images[keep].tobytes()
    np.testing.assert_array_equal(poisoned.labels[keep], ds.labels[keep])
    assert poisoned.poison_flags.sum() == math.floor(0.07 * 1000)


def test_poison_seed_determinism():
    ds = _four_class()
    t = make_patch_trigger((1, 8, 8))
    a = {r.sample_id for r in poison_dataset(ds, t, 0.05, seed=9)[1]}
    b = {r.sample_id for r in poison_dataset(ds, t, 0.05, seed=9)[1]}
    c = {r.sample_id for r in poison_dataset(ds, t, 0.05, seed=10)[1]}
    assert a == b and a != c


def test_poison_rate_rounding_to_zero_warns(caplog):
    ds = _four_class(10)
    poisoned, records = poison_dataset(ds, make_patch_trigger((1, 8, 8)), 0.05)
    assert records == [] and poisoned.images.tobytes() == ds.images.tobytes()
    assert "no samples" in caplog.text


def test_poison_rate_checks():
    ds = _four_class(20)
    t = make_patch_trigger((1, 8, 8))
    with pytest.raises(ConfigurationError):
        poison_dataset(ds, t, 0.0)
    with pytest.raises(ConfigurationError):
        poison_dataset(ds, t, 0.2)
    poison_dataset(ds, t, 0.2, max_rate=None)


def test_trigger_and_records_round_trip(tmp_path):
    ds = gen_synthetic(4, 20, image_size=8)
    for t in (make_patch_trigger((3, 8, 8), 2, target=1), make_single_pixel_trigger((3, 8, 8), (1, 2)),
              make_blend_trigger(random_pattern((3, 8, 8), 3), 0.2), make_sinusoid_trigger((3, 8, 8), 0.1, 2)):
        save_trigger(t, tmp_path / "t.json")
        back = load_trigger(tmp_path / "t.json")
        assert back.family == t.family and back.target_label == t.target_label
        np.testing.assert_array_equal(apply_trigger(ds.images, back), apply_trigger(ds.images, t))
    _, records = poison_dataset(ds, make_patch_trigger((3, 8, 8), target=1), 0.1)
    save_records(records, tmp_path / "r.json")
    assert load_records(tmp_path / "r.json") == records
