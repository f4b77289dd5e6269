#!/usr/bin/env python3
"""Tests for channel-wise rectification"""

import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import tensor_core as tc
from crm import ChannelRectification, adaptive_pool_matrix, crm_forward
from errors import ContractError
from tensor_core import Tensor


def pair(rng, shape=(2, 8, 8, 4), scale=1.0):
    return Tensor(rng.normal(size=shape) * scale), Tensor(rng.normal(size=shape) * scale)


@given(st.integers(1, 300), st.integers(1, 64))
def test_adaptive_pool_columns_average(length, pooled):
    matrix = adaptive_pool_matrix(length, pooled)
    assert matrix.shape == (length, pooled)
    np.testing.assert_allclose(matrix.sum(axis=0), 1.0)
    assert (matrix.sum(axis=1) > 0).all()


def test_adaptive_pool_identity_when_lengths_match():
    np.testing.assert_array_equal(adaptive_pool_matrix(5, 5), np.eye(5))


def test_weights_are_probabilities_and_outputs_shrink(rng):
    module = ChannelRectification(4, rng, token_length=16, state_size=4)
    x_pet, x_ct = pair(rng, scale=3.0)
    weights = module.channel_weights(x_pet, x_ct).data
    assert weights.shape == (2, 8)
    assert np.all(weights > 0) and np.all(weights < 1)
    pet_rec, ct_rec = crm_forward(x_pet, x_ct, module)
    assert np.all(np.abs(pet_rec.data) <= np.abs(x_pet.data))
    assert np.all(np.abs(ct_rec.data) <= np.abs(x_ct.data))


def test_rectification_is_a_per_channel_rescale(rng):
    module = ChannelRectification(4, rng, token_length=8, state_size=2)
    x_pet, x_ct = pair(rng)
    weights = module.channel_weights(x_pet, x_ct).data
    pet_rec, ct_rec = module(x_pet, x_ct)
    np.testing.assert_allclose(pet_rec.data, x_pet.data * weights[:, None, None, :4], rtol=1e-12)
    np.testing.assert_allclose(ct_rec.data, x_ct.data * weights[:, None, None, 4:], rtol=1e-12)


def test_zero_pet_stays_zero(rng):
    module = ChannelRectification(3, rng, token_length=8, state_size=2)
    x_ct = Tensor(rng.normal(size=(1, 4, 4, 3)))
    pet_rec, _ = crm_forward(Tensor(np.zeros((1, 4, 4, 3))), x_ct, module)
    np.testing.assert_array_equal(pet_rec.data, 0.0)


def test_channel_order_matters(rng):
    module = ChannelRectification(4, rng, token_length=16, state_size=4)
    x_pet, x_ct = pair(rng)
    pet_rec, ct_rec = crm_forward(x_pet, x_ct, module)
    ct_swapped, pet_swapped = crm_forward(x_ct, x_pet, module)
    assert not np.allclose(pet_rec.data, pet_swapped.data)
    assert not np.allclose(ct_rec.data, ct_swapped.data)


def test_bidirectional_scan_changes_weights(rng):
    seed = int(rng.integers(1 << 31))
    forward_only = ChannelRectification(4, np.random.default_rng(seed), token_length=8, state_size=2)
    both = ChannelRectification(4, np.random.default_rng(seed), token_length=8, state_size=2, bidirectional=True)
    x_pet, x_ct = pair(rng)
    assert forward_only.num_parameters() == both.num_parameters()
    assert not np.allclose(forward_only.channel_weights(x_pet, x_ct).data, both.channel_weights(x_pet, x_ct).data)


def test_unbatched_inputs(rng):
    module = ChannelRectification(4, rng, token_length=8, state_size=2)
    pet_rec, ct_rec = crm_forward(*pair(rng, shape=(8, 8, 4)), module)
    assert pet_rec.shape == ct_rec.shape == (8, 8, 4)


def test_small_maps_pool_up_to_the_token_length(rng):
    module = ChannelRectification(4, rng, token_length=64, state_size=2)
    pet_rec, _ = crm_forward(*pair(rng, shape=(1, 2, 2, 4)), module)
    assert pet_rec.shape == (1, 2, 2, 4)


@pytest.mark.parametrize("pet_shape, ct_shape", [((1, 4, 4, 4), (1, 4, 4, 3)), ((1, 4, 4, 3), (1, 4, 4, 3))])
def test_shape_contracts(rng, pet_shape, ct_shape):
    module = ChannelRectification(4, rng, token_length=8, state_size=2)
    with pytest.raises(ContractError):
        crm_forward(Tensor(np.zeros(pet_shape)), Tensor(np.zeros(ct_shape)), module)


def test_gradients():
    rng = np.random.default_rng(5)
    module = ChannelRectification(2, rng, token_length=4, state_size=2).astype(np.float64)
    x_pet = Tensor(rng.normal(size=(1, 3, 3, 2)), requires_grad=True)
    x_ct = Tensor(rng.normal(size=(1, 3, 3, 2)), requires_grad=True)
    probe_pet, probe_ct = rng.normal(size=(2, 1, 3, 3, 2))

    def loss():
        pet_rec, ct_rec = crm_forward(x_pet, x_ct, module)
        return (pet_rec * probe_pet).sum() + (ct_rec * probe_ct).sum()

    tensors = [x_pet, x_ct] + module.parameters()
    assert tc.gradient_check(loss, tensors, eps=1e-5, max_coords=8) < 1e-5


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
