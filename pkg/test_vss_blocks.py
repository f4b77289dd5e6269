#!/usr/bin/env python3
"""Tests for SS2D, the VSS / CVSS blocks and the resolution changers"""

import sys

import numpy as np
import pytest

import tensor_core as tc
from errors import ContractError
from layers import zero_parameters
from ssm_core import selective_scan
from tensor_core import Tensor
from vss_blocks import (
    DIRECTIONS,
    SS2D,
    CVSSBlock,
    Downsample,
    PatchEmbed,
    Upsample,
    VSSBlock,
    ss2d,
    ss2d_directions,
    vss_block,
)


@pytest.fixture
def module_rng():
    return np.random.default_rng(11)


def test_four_directions_are_folded_back_to_the_map(module_rng):
    mixer = SS2D(3, module_rng, state_size=2)
    parts = mixer.directions(Tensor(module_rng.normal(size=(2, 4, 5, 3))))
    assert len(parts) == len(DIRECTIONS)
    assert all(p.shape == (2, 4, 5, 3) for p in parts)


def test_single_row_maps_scan_rows_and_columns_identically(module_rng):
    mixer = SS2D(2, module_rng, state_size=3)
    row_fwd, row_rev, col_fwd, col_rev = ss2d_directions(Tensor(module_rng.normal(size=(1, 7, 2))), mixer)
    np.testing.assert_allclose(row_fwd.data, col_fwd.data, rtol=1e-6)
    np.testing.assert_allclose(row_rev.data, col_rev.data, rtol=1e-6)


def test_reverse_scan_of_rotated_map_is_rotated_forward_scan(module_rng):
    mixer = SS2D(2, module_rng, state_size=3)
    x = module_rng.normal(size=(4, 6, 2))
    forward = ss2d_directions(Tensor(x), mixer)
    rotated = ss2d_directions(Tensor(x[::-1, ::-1].copy()), mixer)
    np.testing.assert_allclose(rotated[1].data, forward[0].data[::-1, ::-1], rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(rotated[3].data, forward[2].data[::-1, ::-1], rtol=1e-5, atol=1e-6)


def test_row_forward_direction_only_sees_earlier_pixels(module_rng):
    mixer = SS2D(2, module_rng, state_size=2)
    x = module_rng.normal(size=(3, 3, 2))
    before = ss2d_directions(Tensor(x), mixer)[0].data
    x[2, 1:] += 1.0
    after = ss2d_directions(Tensor(x), mixer)[0].data
    np.testing.assert_allclose(before.reshape(9, 2)[:7], after.reshape(9, 2)[:7], rtol=0, atol=1e-12)


def test_ss2d_merges_by_summation(module_rng):
    mixer = SS2D(2, module_rng, state_size=2, per_direction=True)
    x = Tensor(module_rng.normal(size=(3, 4, 2)))
    parts = ss2d_directions(x, mixer)
    np.testing.assert_allclose(ss2d(x, mixer).data, sum(p.data for p in parts), rtol=1e-6)
    assert len(mixer.ssms) == 4


def test_block_shapes(module_rng):
    x = Tensor(module_rng.normal(size=(2, 4, 4, 8)))
    assert VSSBlock(8, module_rng, state_size=2)(x).shape == (2, 4, 4, 8)
    assert CVSSBlock(8, module_rng, state_size=2)(x).shape == (2, 4, 4, 8)
    assert VSSBlock(8, module_rng, state_size=2)(Tensor(np.zeros((4, 4, 8)))).shape == (4, 4, 8)


def test_channel_gate_is_a_probability(module_rng):
    block = CVSSBlock(8, module_rng, state_size=2)
    gate = block.channel_gate(Tensor(module_rng.normal(size=(3, 4, 4, 8)) * 10)).data
    assert gate.shape == (3, 1, 1, 8)
    assert np.all(gate > 0) and np.all(gate < 1)


def test_resolution_changers(module_rng):
    image = Tensor(module_rng.normal(size=(2, 16, 16, 1)))
    embedded = PatchEmbed(1, 8, module_rng)(image)
    assert embedded.shape == (2, 4, 4, 8)
    down = Downsample(8, module_rng)(embedded)
    assert down.shape == (2, 2, 2, 16)
    assert Upsample(16, module_rng)(down).shape == (2, 4, 4, 8)


@pytest.mark.parametrize("call", [
    lambda r: PatchEmbed(1, 4, r)(Tensor(np.zeros((1, 10, 8, 1)))),
    lambda r: Downsample(4, r)(Tensor(np.zeros((1, 3, 4, 4)))),
    lambda r: Upsample(5, r),
    lambda r: SS2D(2, r)(Tensor(np.zeros((4, 2)))),
])
def test_shape_contracts(module_rng, call):
    with pytest.raises(ContractError):
        call(module_rng)


def test_cvss_block_gradients(module_rng):
    block = CVSSBlock(4, module_rng, state_size=2, expand=1, mlp_ratio=1).astype(np.float64)
    x = Tensor(module_rng.normal(size=(1, 2, 3, 4)), requires_grad=True)
    probe = module_rng.normal(size=(1, 2, 3, 4))
    tensors = [x] + block.parameters()
    error = tc.gradient_check(lambda: (block(x) * probe).sum(), tensors, eps=1e-5, max_coords=6)
    assert error < 1e-5


def test_single_pixel_map_is_four_single_step_scans(module_rng):
    mixer = SS2D(3, module_rng, state_size=2)
    token = module_rng.normal(size=(1, 1, 3))
    expected = 4 * selective_scan(Tensor(token.reshape(1, 3)), mixer.ssm).data
    np.testing.assert_allclose(ss2d(Tensor(token), mixer).data.reshape(1, 3), expected, rtol=1e-6)
    np.testing.assert_array_equal(ss2d(Tensor(np.zeros((3, 3, 3))), mixer).data, 0.0)


def test_zeroed_residual_branches_give_identity(module_rng):
    block = VSSBlock(4, module_rng, state_size=2)
    for layer in (block.out_proj, block.fc2):
        zero_parameters(layer)
    x = module_rng.normal(size=(2, 3, 3, 4))
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_saturated_channel_gate_reduces_to_vss_block(module_rng):
    block = CVSSBlock(4, module_rng, state_size=2)
    zero_parameters(block.att_fc2)
    block.att_fc2.bias.data[:] = 60.0
    x = Tensor(module_rng.normal(size=(1, 3, 3, 4)))
    np.testing.assert_array_equal(block(x).data, vss_block(x, block.vss).data)


def test_stage_resolutions_for_a_64_pixel_input(module_rng):
    x = PatchEmbed(1, 4, module_rng)(Tensor(np.zeros((1, 64, 64, 1))))
    sides = [x.shape[1]]
    for width in (4, 8, 16):
        x = Downsample(width, module_rng)(x)
        sides.append(x.shape[1])
    assert sides == [16, 8, 4, 2]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
