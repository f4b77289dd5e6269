"""
2D selective scanning and the encoder/decoder blocks built on it

SS2D unfolds a [H,W,C] map into four directed sequences (row-major forward and
reverse, column-major forward and reverse), scans each and sums the folded
results. VSSBlock wraps it as a gated mixer with an MLP; CVSSBlock adds
channel attention for the decoder. PatchEmbed/Downsample/Upsample change
resolution between stages.
"""

from __future__ import annotations

import numpy as np

import tensor_core as tc
from errors import ContractError
from layers import Conv2d, DepthwiseConv2d, LayerNorm, Linear, Module
from ssm_core import DEFAULT_STATE_SIZE, SelectiveSSM, selective_scan
from tensor_core import Tensor

DIRECTIONS = ("row_forward", "row_reverse", "col_forward", "col_reverse")


def _as_map(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim == 4:
        return x, False
    raise ContractError(f"{op}: expected [H,W,C] or [B,H,W,C], got {x.shape}")


def _restore(x: Tensor, squeeze: bool) -> Tensor:
    return x.reshape(x.shape[1:]) if squeeze else x


class SS2D(Module):
    """Four-direction selective scan; directions share one SSM unless per_direction"""

    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        state_size: int = DEFAULT_STATE_SIZE,
        per_direction: bool = False,
    ):
        if per_direction:
            self.ssms = [SelectiveSSM(width, rng, state_size) for _ in DIRECTIONS]
        else:
            self.ssm = SelectiveSSM(width, rng, state_size)
        self._per_direction = per_direction

    @property
    def per_direction(self) -> bool:
        return self._per_direction

    def directions(self, x: Tensor) -> list[Tensor]:
        """The four folded directional outputs, before the merge"""
        return ss2d_directions(x, self)

    def forward(self, x: Tensor) -> Tensor:
        return ss2d(x, self)


def ss2d_directions(x: Tensor, params: SS2D) -> list[Tensor]:
    batched, squeeze = _as_map(x, "ss2d")
    batch, height, width, channels = batched.shape
    length = height * width
    rows = batched.reshape(batch, length, channels)
    cols = tc.transpose(batched, (0, 2, 1, 3)).reshape(batch, length, channels)
    sequences = [rows, tc.flip(rows, 1), cols, tc.flip(cols, 1)]

    if params.per_direction:
        scanned = [selective_scan(seq, ssm) for seq, ssm in zip(sequences, params.ssms)]
    else:
        scanned = tc.split(selective_scan(tc.concat(sequences, axis=0), params.ssm), 4, axis=0)

    row_fwd, row_rev, col_fwd, col_rev = scanned
    folded = [
        row_fwd.reshape(batch, height, width, channels),
        tc.flip(row_rev, 1).reshape(batch, height, width, channels),
        tc.transpose(col_fwd.reshape(batch, width, height, channels), (0, 2, 1, 3)),
        tc.transpose(tc.flip(col_rev, 1).reshape(batch, width, height, channels), (0, 2, 1, 3)),
    ]
    return [_restore(f, squeeze) for f in folded]


def ss2d(x: Tensor, params: SS2D) -> Tensor:
    merged = None
    for part in ss2d_directions(x, params):
        merged = part if merged is None else merged + part
    return merged


class VSSBlock(Module):
    """x + out(SS2D(SiLU(dwconv(content))) * SiLU(gate)), then x + MLP(LN(x))"""

    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        state_size: int = DEFAULT_STATE_SIZE,
        expand: int = 2,
        mlp_ratio: int = 2,
        per_direction: bool = False,
    ):
        inner = expand * width
        self.norm1 = LayerNorm(width)
        self.in_proj = Linear(width, 2 * inner, rng)
        self.dwconv = DepthwiseConv2d(inner, 3, rng)
        self.ss2d = SS2D(inner, rng, state_size, per_direction)
        self.out_norm = LayerNorm(inner)
        self.out_proj = Linear(inner, width, rng)
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, mlp_ratio * width, rng)
        self.fc2 = Linear(mlp_ratio * width, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        return vss_block(x, self)


def vss_block(x: Tensor, params: VSSBlock) -> Tensor:
    batched, squeeze = _as_map(x, "vss_block")
    content, gate = tc.split(params.in_proj(params.norm1(batched)), 2, axis=-1)
    content = tc.silu(params.dwconv(content))
    mixed = params.out_norm(ss2d(content, params.ss2d)) * tc.silu(gate)
    h = batched + params.out_proj(mixed)
    h = h + params.fc2(tc.silu(params.fc1(params.norm2(h))))
    return _restore(h, squeeze)


class CVSSBlock(Module):
    """VSS block followed by a squeeze-style channel gate (reduction 4)"""

    def __init__(
        self,
        width: int,
        rng: np.random.Generator,
        state_size: int = DEFAULT_STATE_SIZE,
        expand: int = 2,
        mlp_ratio: int = 2,
        reduction: int = 4,
        per_direction: bool = False,
    ):
        hidden = max(1, width // reduction)
        self.vss = VSSBlock(width, rng, state_size, expand, mlp_ratio, per_direction)
        self.att_fc1 = Linear(width, hidden, rng)
        self.att_fc2 = Linear(hidden, width, rng)

    def channel_gate(self, y: Tensor) -> Tensor:
        """Per-channel weights in (0,1), shape [B,1,1,C]"""
        pooled = y.mean(axis=(1, 2), keepdims=True)
        return tc.sigmoid(self.att_fc2(tc.silu(self.att_fc1(pooled))))

    def forward(self, x: Tensor) -> Tensor:
        return cvss_block(x, self)


def cvss_block(x: Tensor, params: CVSSBlock) -> Tensor:
    batched, squeeze = _as_map(x, "cvss_block")
    y = vss_block(batched, params.vss)
    return _restore(y * params.channel_gate(y), squeeze)


class PatchEmbed(Module):
    """4x4 stride-4 convolution + LayerNorm: [H,W,in] -> [H/4,W/4,C1]"""

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator, patch: int = 4):
        self.proj = Conv2d(in_channels, width, patch, rng, stride=patch)
        self.norm = LayerNorm(width)
        self._patch = patch

    def forward(self, image: Tensor) -> Tensor:
        batched, squeeze = _as_map(image, "patch_embed")
        if batched.shape[1] % self._patch or batched.shape[2] % self._patch:
            raise ContractError(
                f"patch_embed: extents {batched.shape[1]}x{batched.shape[2]} not divisible by {self._patch}"
            )
        return _restore(self.norm(self.proj(batched)), squeeze)


class Downsample(Module):
    """2x2 stride-2 convolution doubling channels"""

    def __init__(self, width: int, rng: np.random.Generator):
        self.proj = Conv2d(width, 2 * width, 2, rng, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        batched, squeeze = _as_map(x, "downsample")
        if batched.shape[1] % 2 or batched.shape[2] % 2:
            raise ContractError(f"downsample: extents {batched.shape[1]}x{batched.shape[2]} must be even")
        return _restore(self.proj(batched), squeeze)


class Upsample(Module):
    """Bilinear 2x upsample followed by a pointwise convolution halving channels"""

    def __init__(self, width: int, rng: np.random.Generator):
        if width % 2:
            raise ContractError(f"upsample: channel count {width} must be even")
        self.proj = Conv2d(width, width // 2, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        batched, squeeze = _as_map(x, "upsample")
        _, height, width, _ = batched.shape
        return _restore(self.proj(tc.resize(batched, (2 * height, 2 * width), "bilinear")), squeeze)
