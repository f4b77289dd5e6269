#!/usr/bin/env python3
"""Tests for preprocessing, augmentation, the synthetic generator and shard I/O"""

import json
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from data_pipeline import (
    MANIFEST_NAME,
    Augmentation,
    Dataset,
    ModalityPair,
    SynthSpec,
    apply_augmentation,
    augment,
    batch_for_step,
    crop_side_bounds,
    preprocess_ct,
    preprocess_pet,
    read_dataset,
    read_manifest,
    render_sample,
    sample_augmentation,
    split_indices,
    stack_pairs,
    synth_generate,
    synth_pair,
    tumor_size_stats,
    write_dataset,
)
from errors import ContractError, LoadError, ValidationError

SMALL_SPEC = SynthSpec(seed=3, count=5, resolution=32, radius=(2.0, 5.0))


@pytest.fixture(scope="module")
def small_dataset():
    return synth_generate(SMALL_SPEC)


def random_pair(rng, size=32):
    return ModalityPair(
        pet=rng.uniform(0, 255, size=(size, size)),
        ct=rng.uniform(0, 255, size=(size, size)),
        mask=(rng.random((size, size)) < 0.2).astype(np.uint8),
        id="random",
    )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("hu, expected", [(-1200, 0.0), (-200, 255.0), (-700, 127.5), (40, 255.0), (-3000, 0.0)])
def test_ct_window(hu, expected):
    assert preprocess_ct(np.array([[hu]], dtype=np.float64))[0, 0] == pytest.approx(expected)


def test_pet_min_max_scaling():
    out = preprocess_pet(np.array([[0.0, 5.0], [10.0, 20.0]]))
    np.testing.assert_allclose(out, [[0.0, 63.75], [127.5, 255.0]])
    np.testing.assert_array_equal(preprocess_pet(np.full((3, 3), 2.5)), 0.0)
    with pytest.raises(ContractError):
        preprocess_pet(np.array([[-1.0, 2.0]]))


@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_pet_scaling_is_invariant_to_positive_factors(factor, seed):
    suv = np.random.default_rng(seed).uniform(0.0, 20.0, size=(6, 6))
    np.testing.assert_allclose(preprocess_pet(suv * factor), preprocess_pet(suv), atol=1e-3)


def test_pair_contracts():
    with pytest.raises(ContractError):
        ModalityPair(pet=np.zeros((4, 4)), ct=np.zeros((4, 5)))
    with pytest.raises(ContractError):
        ModalityPair(pet=np.zeros((4, 4)), ct=np.zeros((4, 4)), mask=np.full((4, 4), 2))
    with pytest.raises(ContractError):
        ModalityPair(pet=np.full((4, 4), 300.0), ct=np.zeros((4, 4))).check_preprocessed()
    with pytest.raises(ContractError):
        stack_pairs([])


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def test_seeded_augmentation_is_reproducible(rng):
    pair = random_pair(rng)
    first = augment(pair, np.random.default_rng(9))
    second = augment(pair, np.random.default_rng(9))
    np.testing.assert_array_equal(first.pet, second.pet)
    np.testing.assert_array_equal(first.mask, second.mask)


def test_double_horizontal_flip_is_identity(rng):
    pair = random_pair(rng)
    flip = Augmentation(hflip=True, vflip=False, top=0, left=0, side=32)
    twice = apply_augmentation(apply_augmentation(pair, flip), flip)
    for plane in ("pet", "ct", "mask"):
        np.testing.assert_array_equal(getattr(twice, plane), getattr(pair, plane))


def test_single_flip_reverses_columns(rng):
    pair = random_pair(rng)
    flipped = apply_augmentation(pair, Augmentation(True, True, 0, 0, 32))
    np.testing.assert_array_equal(flipped.ct, pair.ct[::-1, ::-1])


@given(st.integers(0, 10_000), st.sampled_from([32, 64, 512]))
def test_crop_side_stays_within_scale_bounds(seed, extent):
    aug = sample_augmentation(np.random.default_rng(seed), (extent, extent))
    assert 0.7 * extent <= aug.side <= 0.9 * extent
    assert 0 <= aug.top <= extent - aug.side and 0 <= aug.left <= extent - aug.side


def test_crop_side_bounds():
    assert crop_side_bounds(64) == (45, 57)
    assert crop_side_bounds(512) == (359, 460)


def test_augmented_masks_stay_binary_and_registered(rng):
    pair = random_pair(rng)
    out = augment(pair, rng)
    assert out.shape == pair.shape
    assert set(np.unique(out.mask)) <= {0, 1}
    assert out.pet.min() >= 0 and out.pet.max() <= 255


def test_augmentation_requires_a_mask(rng):
    pair = ModalityPair(pet=np.zeros((8, 8)), ct=np.zeros((8, 8)))
    with pytest.raises(ContractError):
        augment(pair, rng)


def test_batches_depend_only_on_seed_and_step(small_dataset):
    pairs = small_dataset.splits["train"]
    a = batch_for_step(pairs, 7, 3, 2)
    b = batch_for_step(pairs, 7, 3, 2)
    c = batch_for_step(pairs, 7, 4, 2)
    assert a.pet.shape == (2, 32, 32) and a.mask.shape == (2, 32, 32)
    assert a.ids == b.ids
    np.testing.assert_array_equal(a.pet, b.pet)
    assert not np.array_equal(a.pet, c.pet)
    assert len(batch_for_step(pairs[:1], 7, 0, 3).ids) == 3


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def test_generation_is_pure_in_seed_and_index():
    first, second = render_sample(SMALL_SPEC, 2), render_sample(SMALL_SPEC, 2)
    np.testing.assert_array_equal(first.ct_hu, second.ct_hu)
    np.testing.assert_array_equal(first.pet_suv, second.pet_suv)
    np.testing.assert_array_equal(first.mask, second.mask)
    other = render_sample(replace(SMALL_SPEC, seed=4), 2)
    assert not np.array_equal(first.pet_suv, other.pet_suv)


@pytest.mark.parametrize("index", range(8))
def test_generator_properties(index):
    spec = SynthSpec(seed=11, resolution=64)
    sample = render_sample(spec, index)
    mask = sample.mask.astype(bool)
    low, high = spec.mask_bounds()
    assert low <= mask.sum() <= high
    assert spec.tumors[0] <= len(sample.tumor_areas) <= spec.tumors[1]
    np.testing.assert_array_equal(sample.clean_pet > 1.5, mask)
    pair, _ = synth_pair(spec, index)
    assert pair.pet[mask].mean() > pair.pet[~mask].mean()
    pair.check_preprocessed()


def test_split_by_stream():
    assert split_indices(10, 0.8) == {"train": list(range(8)), "test": [8, 9]}
    assert split_indices(1, 0.8) == {"train": [0], "test": []}


def test_tumor_size_thresholds_scale_with_resolution():
    stats = tumor_size_stats([4, 10, 20, 30], resolution=64)
    assert stats["small_threshold_px"] == pytest.approx(500 / 64)
    assert stats["large_threshold_px"] == pytest.approx(1000 / 64)
    assert stats["fraction_small"] == pytest.approx(0.25)
    assert stats["fraction_large"] == pytest.approx(0.5)
    assert sum(stats["histogram"]["counts"]) == 4


def test_synth_spec_validation():
    with pytest.raises(ValidationError):
        SynthSpec(resolution=48).validate()
    with pytest.raises(ValidationError):
        SynthSpec(pet_contrast=(1.0, 2.0)).validate()
    with pytest.raises(ValidationError):
        SynthSpec(radius=(2.0, 20.0), resolution=32).validate()
    with pytest.raises(ValidationError):
        SynthSpec.from_dict({"colour": "blue"})
    assert SynthSpec.from_dict(SMALL_SPEC.to_dict()) == SMALL_SPEC


def test_synth_generate_splits_and_stats(small_dataset):
    assert small_dataset.ids("train") == ["synth-00000", "synth-00001", "synth-00002", "synth-00003"]
    assert small_dataset.ids("test") == ["synth-00004"]
    assert small_dataset.resolution == 32
    assert small_dataset.stats["tumors"] >= 5


# ---------------------------------------------------------------------------
# Shards
# ---------------------------------------------------------------------------

def test_shard_round_trip_is_bit_identical(tmp_path, small_dataset):
    manifest = write_dataset(tmp_path, small_dataset, workers=2)
    assert manifest.name == MANIFEST_NAME
    loaded = read_dataset(tmp_path)
    assert loaded.ids("train") == small_dataset.ids("train")
    for written, read in zip(small_dataset.splits["test"], loaded.splits["test"]):
        np.testing.assert_array_equal(written.pet, read.pet)
        np.testing.assert_array_equal(written.ct, read.ct)
        np.testing.assert_array_equal(written.mask, read.mask)
    assert read_dataset(tmp_path, ["test"]).ids("test") == ["synth-00004"]


def test_missing_listed_file_is_a_load_error(tmp_path, small_dataset):
    write_dataset(tmp_path, small_dataset)
    (tmp_path / "train" / "synth-00001.ct.tsr").unlink()
    with pytest.raises(LoadError, match="synth-00001.ct.tsr"):
        read_dataset(tmp_path)


def test_overlapping_splits_are_rejected(tmp_path, small_dataset):
    write_dataset(tmp_path, small_dataset)
    path = tmp_path / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    manifest["splits"]["test"].append("synth-00000")
    path.write_text(json.dumps(manifest))
    with pytest.raises(LoadError, match="synth-00000"):
        read_manifest(tmp_path)


def test_malformed_manifest(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text("{not json")
    with pytest.raises(LoadError):
        read_manifest(tmp_path)
    (tmp_path / MANIFEST_NAME).write_text(json.dumps({"schema_version": 1}))
    with pytest.raises(LoadError, match="resolution"):
        read_manifest(tmp_path)


def test_write_rejects_duplicate_ids(tmp_path, rng):
    pair = random_pair(rng)
    with pytest.raises(ContractError):
        write_dataset(tmp_path, Dataset({"train": [pair], "test": [pair]}, 32))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
