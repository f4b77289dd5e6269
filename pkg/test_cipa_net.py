#!/usr/bin/env python3
"""Tests for the assembled network, loss, optimizer, inference and checkpoints"""

import math
import sys
from dataclasses import replace

import numpy as np
import pytest

import tensor_core as tc
from cipa_net import (
    ABLATIONS,
    AdamW,
    CipaConfig,
    CipaNet,
    Checkpoint,
    OptimConfig,
    StepLog,
    TrainState,
    cosine_lr,
    infer,
    load_checkpoint,
    loss,
    loss_terms,
    parameter_summary,
    predict_mask,
    save_checkpoint,
    train_step,
)
from data_pipeline import PairBatch, SynthSpec, batch_for_step, synth_generate
from dcim import DCIM_VARIANTS
from errors import ContractError, LoadError, NumericFault, ValidationError
from metrics import evaluate_dataset
from tensor_core import Tensor

TINY = CipaConfig(resolution=32, widths=(4, 8, 16, 32), depths=(1, 1, 1, 1), decoder_depths=(1, 1, 1, 1),
                  state_size=2, crm_token_length=8, expand=1, mlp_ratio=1)
OPTIM = OptimConfig(lr=1e-3, batch_size=2, steps=10)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_generate(SynthSpec(seed=5, count=4, resolution=32, radius=(2.0, 5.0)))


@pytest.fixture(scope="module")
def tiny_model():
    return CipaNet(TINY, seed=1)


def planes(rng, batch=2, size=32):
    return rng.uniform(0, 255, size=(batch, size, size)), rng.uniform(0, 255, size=(batch, size, size))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_stage_extents_and_region_sides():
    assert TINY.stage_extents() == [8, 4, 2, 1]
    assert TINY.region_sides() == [4, 4, 2, 1]
    assert CipaConfig().stage_extents() == [16, 8, 4, 2]
    assert CipaConfig(region_side=(4, 4, 2, 1)).region_sides() == [4, 4, 2, 1]


def test_default_model_settings():
    cfg = CipaConfig().validate()
    assert cfg.widths == (32, 64, 128, 256)
    assert cfg.depths == (2, 2, 2, 2)
    assert cfg.decoder_depths == (2, 2, 2, 2)
    assert cfg.region_side == 4
    assert cfg.state_size == 16
    assert cfg.enable_crm and cfg.enable_dcim and cfg.dcim_variant == "dcim"
    optim = OptimConfig()
    assert (optim.lr, optim.weight_decay) == (6e-5, 0.01)


@pytest.mark.parametrize("changes", [
    {"resolution": 48},
    {"widths": (4, 8, 16, 64)},
    {"widths": (4, 8, 16)},
    {"num_classes": 3},
    {"dcim_variant": "region_mri"},
    {"region_side": 3},
    {"region_side": (4, 4, 4, 4)},
    {"depths": (1, 0, 1, 1)},
])
def test_invalid_model_settings(changes):
    with pytest.raises(ValidationError):
        replace(TINY, **changes).validate()


def test_config_dict_round_trip():
    assert CipaConfig.from_dict(TINY.to_dict()) == TINY
    assert OptimConfig.from_dict(OPTIM.to_dict()) == OPTIM
    with pytest.raises(ValidationError):
        CipaConfig.from_dict({"depth": 3})
    with pytest.raises(ValidationError):
        OptimConfig(betas=(0.9, 1.0)).validate()


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def test_logit_shapes(rng, tiny_model):
    pet, ct = planes(rng)
    assert tiny_model(pet, ct).shape == (2, 32, 32, 2)
    assert tiny_model(pet[0], ct[0]).shape == (32, 32, 2)
    assert tiny_model(pet[..., None], ct[..., None]).shape == (2, 32, 32, 2)


def test_forward_contracts(rng, tiny_model):
    pet, ct = planes(rng)
    with pytest.raises(ContractError):
        tiny_model(pet, ct[:1])
    with pytest.raises(ContractError):
        tiny_model(*planes(rng, size=64))
    with pytest.raises(ContractError):
        tiny_model(np.zeros(32), np.zeros(32))


def test_features_per_stage(rng, tiny_model):
    _, features = tiny_model(*planes(rng), return_features=True)
    assert [f.fused.shape for f in features] == [(2, 8, 8, 4), (2, 4, 4, 8), (2, 2, 2, 16), (2, 1, 1, 32)]
    assert features[0].region.shape == (2, 2, 2, 4)
    assert features[0].local.shape == (2, 8, 8, 4)


@pytest.mark.parametrize("changes", [{"crm_feeds_encoder": False}, {"enable_crm": False}])
def test_identical_modalities_give_identical_encoder_features(rng, changes):
    model = CipaNet(replace(TINY, **changes), seed=2)
    image = rng.uniform(0, 255, size=(1, 32, 32))
    _, features = model(image, image, return_features=True)
    for stage in features:
        np.testing.assert_allclose(stage.pet.data, stage.ct.data, rtol=1e-6, atol=1e-6)


def test_rectified_features_feed_the_next_stage(rng):
    model = CipaNet(TINY, seed=2)
    image = rng.uniform(0, 255, size=(1, 32, 32))
    _, features = model(image, image, return_features=True)
    np.testing.assert_allclose(features[0].pet.data, features[0].ct.data, rtol=1e-6, atol=1e-6)
    assert not np.allclose(features[1].pet.data, features[1].ct.data)


def test_fusion_is_the_mean_without_dcim(rng):
    model = CipaNet(replace(TINY, enable_dcim=False), seed=3)
    _, features = model(*planes(rng), return_features=True)
    for stage in features:
        np.testing.assert_allclose(stage.fused.data, (stage.pet_rectified.data + stage.ct_rectified.data) * 0.5)
        assert stage.region is None


def test_forward_pair(tiny_data, tiny_model):
    pairs = tiny_data.splits["train"][:2]
    logits = tiny_model.forward_pair(pairs)
    np.testing.assert_array_equal(logits.data, tiny_model(np.stack([p.pet for p in pairs]), np.stack([p.ct for p in pairs])).data)


def test_parameter_summary():
    summary = parameter_summary(TINY)
    assert set(summary["ablations"]) == {name for name, _, _ in ABLATIONS}
    assert set(summary["dcim_variants"]) == set(DCIM_VARIANTS)
    assert summary["configured"] == summary["ablations"]["crm_dcim"] == summary["dcim_variants"]["dcim"]
    ablations = summary["ablations"]
    assert ablations["baseline"] < ablations["crm"] < ablations["crm_dcim"]
    assert ablations["baseline"] < ablations["dcim"] < ablations["crm_dcim"]
    assert summary["dcim_variants"]["local_ct"] < summary["dcim_variants"]["dcim"]


# ---------------------------------------------------------------------------
# Loss and optimization
# ---------------------------------------------------------------------------

def test_uniform_logits():
    mask = np.zeros((1, 4, 4), dtype=np.uint8)
    mask[0, :2, :2] = 1
    total, ce, dice = loss_terms(Tensor(np.zeros((1, 4, 4, 2))), mask)
    assert ce.item() == pytest.approx(math.log(2))
    assert dice.item() == pytest.approx(1 - 5 / 13)
    assert total.item() == pytest.approx(math.log(2) + 1 - 5 / 13)


@pytest.mark.parametrize("fill", [0.0, 0.3])
def test_confident_correct_logits_have_near_zero_loss(rng, fill):
    mask = (rng.random((2, 6, 6)) < fill).astype(np.uint8)
    tumor = 20.0 * (2.0 * mask - 1.0)
    logits = Tensor(np.stack([-tumor, tumor], axis=-1))
    assert loss(logits, mask).item() < 0.01


def test_loss_accepts_single_images_and_checks_masks():
    logits = Tensor(np.zeros((4, 4, 2)))
    assert loss(logits, np.zeros((4, 4))).item() == pytest.approx(math.log(2))
    with pytest.raises(ContractError):
        loss(logits, np.full((4, 4), 2))
    with pytest.raises(ContractError):
        loss(Tensor(np.zeros((1, 4, 4, 2))), np.zeros((1, 4, 5)))
    with pytest.raises(ContractError):
        loss(Tensor(np.zeros((1, 4, 4, 3))), np.zeros((1, 4, 4)))


def test_loss_gradients():
    rng = np.random.default_rng(8)
    logits = Tensor(rng.normal(size=(2, 3, 3, 2)), requires_grad=True)
    mask = (rng.random((2, 3, 3)) < 0.5).astype(np.uint8)
    assert tc.gradient_check(lambda: loss(logits, mask), [logits]) < 1e-6


def test_cosine_schedule():
    assert cosine_lr(0, 500, 6e-5) == pytest.approx(6e-5)
    assert cosine_lr(499, 500, 6e-5) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(1000, 500, 6e-5) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(2, 5, 1.0) == pytest.approx(0.5)
    assert cosine_lr(0, 1, 1e-3) == 1e-3


def test_train_steps_are_deterministic(tiny_data):
    pairs = tiny_data.splits["train"]
    states = [TrainState.create(TINY, OPTIM, seed=4) for _ in range(2)]
    logs = [[], []]
    for step in range(2):
        batch = batch_for_step(pairs, 4, step, OPTIM.batch_size)
        for state, log in zip(states, logs):
            log.append(train_step(batch, state, OPTIM)[1])
    assert logs[0] == logs[1]
    assert [log.step for log in logs[0]] == [0, 1]
    assert states[0].step == 2
    for name, value in states[0].model.state_dict().items():
        np.testing.assert_array_equal(value, states[1].model.state_dict()[name])


def test_step_changes_parameters(tiny_data):
    state = TrainState.create(TINY, OPTIM, seed=4)
    before = state.model.state_dict()
    train_step(batch_for_step(tiny_data.splits["train"], 4, 0, 2), state, OPTIM)
    after = state.model.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_loss_decreases_over_fifty_steps_on_a_fixed_batch(tiny_data):
    # default AdamW betas, decay and cosine schedule; only the peak lr is raised for the tiny widths
    optim = OptimConfig(lr=1e-3, batch_size=2, steps=50)
    batch = batch_for_step(tiny_data.splits["train"], 0, 0, 2, augmented=False)
    state = TrainState.create(TINY, optim, seed=0)
    losses = [train_step(batch, state, optim)[1].loss for _ in range(50)]
    assert state.step == 50
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_adamw_decays_only_matrices():
    weight = Tensor(np.ones((2, 3)), requires_grad=True)
    bias = Tensor(np.ones(3), requires_grad=True)
    weight.grad, bias.grad = np.zeros((2, 3)), np.zeros(3)
    AdamW([("w", weight), ("b", bias)], weight_decay=0.01).step(0.1)
    np.testing.assert_allclose(weight.data, 0.999, rtol=1e-6)
    np.testing.assert_array_equal(bias.data, 1.0)


def test_step_log_row():
    row = StepLog(3, 1e-3, 0.5, 0.25, 0.25).as_row()
    assert row == [3, "0.001", "0.5", "0.25", "0.25"]


def test_non_finite_batch_is_a_numeric_fault():
    state = TrainState.create(TINY, OPTIM, seed=4)
    pet = np.zeros((1, 32, 32), dtype=np.float32)
    pet[0, 3, 3] = np.nan
    batch = PairBatch(pet=pet, ct=np.zeros_like(pet), mask=np.zeros((1, 32, 32), dtype=np.uint8), ids=["bad-slice"])
    with pytest.raises(NumericFault, match="bad-slice") as info:
        train_step(batch, state, OPTIM)
    assert info.value.batch_ids == ["bad-slice"]
    assert state.step == 0


# ---------------------------------------------------------------------------
# Inference and checkpoints
# ---------------------------------------------------------------------------

def test_predict_mask_ties_go_to_background():
    logits = np.array([[[0.5, 0.5], [1.0, 2.0]], [[2.0, 1.0], [-1.0, -1.0 + 1e-6]]])
    np.testing.assert_array_equal(predict_mask(logits), [[0, 1], [0, 1]])


def test_infer_returns_binary_masks(tiny_data, tiny_model):
    mask = infer(tiny_data.splits["test"][0], tiny_model)
    assert mask.shape == (32, 32) and mask.dtype == np.uint8
    assert set(np.unique(mask)) <= {0, 1}


def test_checkpoint_round_trip_is_bit_identical(tmp_path, tiny_data):
    state = TrainState.create(TINY, OPTIM, seed=6)
    train_step(batch_for_step(tiny_data.splits["train"], 6, 0, 2), state, OPTIM)
    config = {"model": TINY.to_dict(), "optim": OPTIM.to_dict(), "seed": 6}
    path = save_checkpoint(tmp_path / "ckpt" / "step.ckpt", Checkpoint.from_state(state, config))

    loaded = load_checkpoint(path)
    assert loaded.step == 1 and loaded.config == config
    assert loaded.model_config() == TINY
    for name, value in state.model.state_dict().items():
        np.testing.assert_array_equal(loaded.params[name], value)
    pair = tiny_data.splits["test"][0]
    np.testing.assert_array_equal(infer(pair, loaded), infer(pair, state.model))
    assert list(tmp_path.joinpath("ckpt").iterdir()) == [path]


def test_resumed_training_matches_uninterrupted(tmp_path, tiny_data):
    pairs = tiny_data.splits["train"]
    straight = TrainState.create(TINY, OPTIM, seed=7)
    for step in range(2):
        train_step(batch_for_step(pairs, 7, step, 2), straight, OPTIM)

    first = TrainState.create(TINY, OPTIM, seed=7)
    train_step(batch_for_step(pairs, 7, 0, 2), first, OPTIM)
    path = save_checkpoint(tmp_path / "a.ckpt", Checkpoint.from_state(first, {"model": TINY.to_dict()}))
    resumed = load_checkpoint(path).restore(OPTIM)
    assert resumed.step == 1 and resumed.optimizer.t == 1
    train_step(batch_for_step(pairs, 7, 1, 2), resumed, OPTIM)
    for name, value in straight.model.state_dict().items():
        np.testing.assert_array_equal(resumed.model.state_dict()[name], value)


def test_infer_rejects_mismatched_models(tmp_path, tiny_data, tiny_model):
    ckpt = Checkpoint(tiny_model.state_dict(), 0, {"model": TINY.to_dict()})
    pair = tiny_data.splits["test"][0]
    with pytest.raises(ContractError):
        infer(pair, ckpt, replace(TINY, enable_crm=False))
    wide = CipaNet(replace(TINY, resolution=64), seed=0)
    with pytest.raises(ContractError):
        infer(pair, wide)


def test_corrupt_checkpoints_are_load_errors(tmp_path, tiny_model):
    path = save_checkpoint(tmp_path / "m.ckpt", Checkpoint(tiny_model.state_dict(), 0, {"model": TINY.to_dict()}))
    data = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + data[8:])
    (tmp_path / "short.ckpt").write_bytes(data[: len(data) // 2])
    for name in ("magic.ckpt", "short.ckpt", "missing.ckpt"):
        with pytest.raises(LoadError):
            load_checkpoint(tmp_path / name)


# ---------------------------------------------------------------------------
# Training to convergence
# ---------------------------------------------------------------------------

OVERFIT_MODEL = CipaConfig(resolution=64, widths=(16, 32, 64, 128), depths=(1, 1, 1, 1),
                           decoder_depths=(1, 1, 1, 1), region_side=4)
# peak lr above the 6e-5 default; betas, decay and cosine schedule unchanged
OVERFIT_OPTIM = OptimConfig(lr=1e-3, batch_size=4, steps=500)


@pytest.fixture(scope="module")
def overfit_pairs():
    pairs = synth_generate(SynthSpec(seed=0, count=40, resolution=64)).splits["train"]
    assert len(pairs) == 32
    return pairs


@pytest.mark.slow
@pytest.mark.parametrize("changes, threshold", [
    ({}, 0.90),
    ({"enable_crm": False, "enable_dcim": False}, 0.80),
])
def test_small_model_overfits_the_train_split(overfit_pairs, changes, threshold):
    cfg = replace(OVERFIT_MODEL, **changes).validate()
    state = TrainState.create(cfg, OVERFIT_OPTIM, seed=0)
    for step in range(OVERFIT_OPTIM.steps):
        batch = batch_for_step(overfit_pairs, 0, step, OVERFIT_OPTIM.batch_size, augmented=False)
        train_step(batch, state, OVERFIT_OPTIM)
    preds = {p.id: infer(p, state.model) for p in overfit_pairs}
    gts = {p.id: p.mask for p in overfit_pairs}
    report = evaluate_dataset(preds, gts)
    assert report["count"] == 32
    assert report["mean"]["iou"] >= threshold


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
