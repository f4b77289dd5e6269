"""
Channel-wise rectification between the PET and CT branches

Both feature maps are concatenated on channels and layer-normalized; every
channel becomes a token (its flattened pixels, pooled to a fixed length P), a
selective SSM scans the 2C channel tokens, and a linear head + sigmoid turns
each token into a weight in (0,1). The weights are split per modality and
rescale the original inputs channel by channel.
"""

from __future__ import annotations

import numpy as np

import tensor_core as tc
from errors import ContractError
from layers import LayerNorm, Linear, Module
from ssm_core import DEFAULT_STATE_SIZE, SelectiveSSM, selective_scan
from tensor_core import Tensor

DEFAULT_TOKEN_LENGTH = 64


def adaptive_pool_matrix(length: int, pooled: int) -> np.ndarray:
    """[length, pooled] averaging matrix with adaptive-average-pool window bounds"""
    matrix = np.zeros((length, pooled), dtype=np.float64)
    for i in range(pooled):
        start = (i * length) // pooled
        stop = -((-(i + 1) * length) // pooled)
        matrix[start:stop, i] = 1.0 / (stop - start)
    return matrix


class ChannelRectification(Module):
    """CRM parameters: token compressor P->P, channel SSM of width P, weight head P->1"""

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        token_length: int = DEFAULT_TOKEN_LENGTH,
        state_size: int = DEFAULT_STATE_SIZE,
        bidirectional: bool = False,
    ):
        self.norm = LayerNorm(2 * channels)
        self.compress = Linear(token_length, token_length, rng)
        self.ssm = SelectiveSSM(token_length, rng, state_size)
        self.head = Linear(token_length, 1, rng)
        self._channels = channels
        self._token_length = token_length
        self._bidirectional = bidirectional

    def channel_weights(self, x_pet: Tensor, x_ct: Tensor) -> Tensor:
        """W^C of shape [B, 2C]; PET channels first"""
        batch, height, width, channels = x_pet.shape
        features = self.norm(tc.concat([x_pet, x_ct], axis=-1))
        tokens = tc.transpose(features.reshape(batch, height * width, 2 * channels), (0, 2, 1))
        pool = Tensor(adaptive_pool_matrix(height * width, self._token_length).astype(tokens.dtype))
        tokens = self.compress(tokens @ pool)
        scanned = selective_scan(tokens, self.ssm)
        if self._bidirectional:
            scanned = scanned + tc.flip(selective_scan(tc.flip(tokens, 1), self.ssm), 1)
        return tc.sigmoid(self.head(scanned)).reshape(batch, 2 * channels)

    def forward(self, x_pet: Tensor, x_ct: Tensor) -> tuple[Tensor, Tensor]:
        return crm_forward(x_pet, x_ct, self)


def crm_forward(x_pet: Tensor, x_ct: Tensor, params: ChannelRectification) -> tuple[Tensor, Tensor]:
    """Rescale both modalities by learned cross-modal channel weights"""
    if x_pet.shape != x_ct.shape:
        raise ContractError(f"crm: PET {x_pet.shape} and CT {x_ct.shape} must share a shape")
    squeeze = x_pet.ndim == 3
    if squeeze:
        x_pet, x_ct = x_pet.reshape(1, *x_pet.shape), x_ct.reshape(1, *x_ct.shape)
    if x_pet.ndim != 4 or x_pet.shape[-1] != params._channels:
        raise ContractError(f"crm: expected [B,H,W,{params._channels}] inputs, got {x_pet.shape}")
    weights = params.channel_weights(x_pet, x_ct)
    batch, channels = x_pet.shape[0], x_pet.shape[-1]
    w_pet, w_ct = tc.split(weights, 2, axis=1)
    pet_rec = x_pet * w_pet.reshape(batch, 1, 1, channels)
    ct_rec = x_ct * w_ct.reshape(batch, 1, 1, channels)
    if squeeze:
        return pet_rec.reshape(pet_rec.shape[1:]), ct_rec.reshape(ct_rec.shape[1:])
    return pet_rec, ct_rec


CRMParams = ChannelRectification
