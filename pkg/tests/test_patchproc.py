import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitbackdoor.errors import ConfigurationError, DimensionError
from vitbackdoor.patchproc import (DROP, SHUFFLE, PatchGrid, TransformSpec, apply_descriptors, apply_trials,
                                   draw_descriptors, drop_patches, patch_drop, patch_shuffle, replay,
                                   shuffle_patches)


def patch_bytes(x, l):
    c, h, w = x.shape
    ph, pw = h // l, w // l
    return sorted(x[:, i * ph:(i + 1) * ph, j * pw:(j + 1) * pw].tobytes() for i in range(l) for j in range(l))


class IdentityRng:
    def permutation(self, n):
        return np.arange(n)


# ----------------------------------------------------------------------------
# PatchDrop
# ----------------------------------------------------------------------------

def test_drop_zero_is_identity():
    x = np.random.default_rng(0).uniform(size=(3, 16, 16))
    out = patch_drop(x, PatchGrid(8), 0, np.random.default_rng(1))
    np.testing.assert_array_equal(out.image, x)
    assert out.indices.size == 0


def test_drop_all_is_fill():
    x = np.random.default_rng(0).uniform(size=(3, 16, 16))
    out = patch_drop(x, PatchGrid(4), 16, np.random.default_rng(1))
    assert np.all(out.image == 0.0)


def test_drop_six_of_sixty_four_pixel_count():
    x = np.random.default_rng(0).uniform(0.1, 1.0, size=(3, 32, 32))
    out = patch_drop(x, PatchGrid(8), 6, np.random.default_rng(2))
    for c in range(3):
        changed = out.image[c] != x[c]
        assert changed.sum() == 6 * 4 * 4
        assert np.all(out.image[c][changed] == 0.0)
    assert len(set(out.indices.tolist())) == 6


def test_drop_too_many():
    with pytest.raises(ConfigurationError):
        patch_drop(np.zeros((1, 8, 8)), PatchGrid(2), 5, np.random.default_rng(0))


def test_drop_needs_single_image():
    with pytest.raises(DimensionError):
        patch_drop(np.zeros((2, 1, 8, 8)), PatchGrid(2), 1, np.random.default_rng(0))


def test_drop_custom_fill():
    x = np.zeros((1, 4, 4))
    out = drop_patches(x, PatchGrid(2), [3], fill=0.5)
    assert out[0, 2:, 2:].tolist() == [[0.5, 0.5], [0.5, 0.5]]
    assert out.sum() == 2.0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 3), st.integers(0, 2 ** 31 - 1), st.data())
def test_drop_exact_change_count(l, ps, seed, data):
    h = w = l * ps
    m = data.draw(st.integers(0, l * l))
    x = np.random.default_rng(seed).uniform(0.01, 1.0, size=(2, h, w))
    out = patch_drop(x, PatchGrid(l), m, np.random.default_rng(seed + 1))
    for c in range(2):
        assert np.count_nonzero(out.image[c] != x[c]) == m * ps * ps
    assert np.count_nonzero(out.image == 0.0) == 2 * m * ps * ps


# ----------------------------------------------------------------------------
# PatchShuffle
# ----------------------------------------------------------------------------

def test_shuffle_identity_permutation():
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    out = patch_shuffle(x, PatchGrid(4), IdentityRng())
    np.testing.assert_array_equal(out.image, x)


def test_shuffle_histogram_preserved():
    x = np.random.default_rng(1).integers(0, 256, size=(3, 16, 16)) / 255.0
    out = patch_shuffle(x, PatchGrid(4), np.random.default_rng(2))
    for c in range(3):
        np.testing.assert_array_equal(np.histogram(x[c], 256, (0, 1))[0], np.histogram(out.image[c], 256, (0, 1))[0])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_shuffle_patch_multiset(l, ps, seed):
    x = np.random.default_rng(seed).uniform(size=(3, l * ps, l * ps))
    out = patch_shuffle(x, PatchGrid(l), np.random.default_rng(seed + 7))
    assert patch_bytes(out.image, l) == patch_bytes(x, l)


def test_shuffle_permutation_semantics():
    x = np.arange(4, dtype=float).reshape(1, 2, 2)
    out = shuffle_patches(x, PatchGrid(2), [3, 2, 1, 0])
    np.testing.assert_array_equal(out[0], [[3, 2], [1, 0]])


def test_non_dividing_grid_pads_and_crops():
    x = np.random.default_rng(3).uniform(size=(2, 10, 10))
    out = patch_shuffle(x, PatchGrid(3), np.random.default_rng(4))
    assert out.image.shape == x.shape
    same = patch_shuffle(x, PatchGrid(3), IdentityRng())
    np.testing.assert_array_equal(same.image, x)
    dropped = patch_drop(x, PatchGrid(3), 9, np.random.default_rng(0))
    assert np.all(dropped.image == 0)


# ----------------------------------------------------------------------------
# trials, replay, equivariance
# ----------------------------------------------------------------------------

def test_single_trial():
    out = apply_trials(np.zeros((1, 8, 8)), TransformSpec(SHUFFLE, grid=2), 1)
    assert len(out) == 1


def test_trials_seed_deterministic():
    x = np.random.default_rng(0).uniform(size=(3, 16, 16))
    spec = TransformSpec(DROP, grid=8, drop_count=6)
    a = apply_trials(x, spec, 32, master_seed=5, sample_key=11)
    b = apply_trials(x, spec, 32, master_seed=5, sample_key=11)
    c = apply_trials(x, spec, 32, master_seed=5, sample_key=12)
    assert all(np.array_equal(p.indices, q.indices) and np.array_equal(p.image, q.image) for p, q in zip(a, b))
    assert any(not np.array_equal(p.indices, q.indices) for p, q in zip(a, c))


def test_trials_rejects_zero():
    with pytest.raises(ConfigurationError):
        draw_descriptors(TransformSpec(DROP), 0, 0)


def test_drop_trials_overlap_matches_hypergeometric():
    L, M, runs = 64, 6, 1000
    overlaps = []
    for run in range(runs):
        desc = draw_descriptors(TransformSpec(DROP, grid=8, drop_count=M), 32, master_seed=run)
        assert desc.shape == (32, M)
        assert all(len(set(row)) == M for row in desc)
        overlaps.append(len(set(desc[0]) & set(desc[1])))
    mean = M * M / L
    var = M * M * (L - M) * (L - M) / (L * L * (L - 1))
    assert abs(np.mean(overlaps) - mean) <= 3 * np.sqrt(var / runs)


@pytest.mark.parametrize("spec", [TransformSpec(DROP, grid=4, drop_count=5), TransformSpec(SHUFFLE, grid=4)])
def test_replay_reproduces_outcome(spec):
    x = np.random.default_rng(6).uniform(size=(3, 16, 16))
    for outcome in apply_trials(x, spec, 8, master_seed=2):
        assert replay(x, spec, outcome.indices).tobytes() == outcome.image.tobytes()


@pytest.mark.parametrize("spec", [TransformSpec(DROP, grid=4, drop_count=5), TransformSpec(SHUFFLE, grid=8)])
def test_channel_permutation_equivariance(spec):
    x = np.random.default_rng(7).uniform(size=(3, 16, 16))
    desc = draw_descriptors(spec, 6, master_seed=1)
    perm = [2, 0, 1]
    np.testing.assert_array_equal(apply_descriptors(x[perm], spec, desc), apply_descriptors(x, spec, desc)[:, perm])


def test_batched_descriptors_match_single():
    x = np.random.default_rng(8).uniform(size=(3, 16, 16))
    spec = TransformSpec(SHUFFLE, grid=2)
    desc = draw_descriptors(spec, 5, master_seed=3)
    batch = apply_descriptors(x, spec, desc)
    for row, img in zip(desc, batch):
        np.testing.assert_array_equal(img, shuffle_patches(x, PatchGrid(2), row))


def test_spec_round_trip_and_validation():
    spec = TransformSpec(DROP, grid=8, drop_count=3, fill=0.25)
    assert TransformSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigurationError):
        TransformSpec("translate")
    with pytest.raises(ConfigurationError):
        TransformSpec(DROP, grid=2, drop_count=5)
