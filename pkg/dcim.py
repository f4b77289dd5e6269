"""
Dynamic cross-modality interaction

The region stream turns one modality into n regional tokens (a strided conv
stem, one token per r×r region) and lets a Mamba block scan them in row-major
region order. The local stream keeps full resolution, cuts the map into the
same r×r regions and scans the m = r² local tokens of every region with one
shared Mamba block. Fusion projects every regional token to the local width
and adds it to each local token of its region, then reassembles the map.

By default PET feeds the region stream and CT feeds the local stream; the
other rows of the operation ablation are available as DCIMVariant presets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from einops import rearrange

import tensor_core as tc
from errors import ContractError
from layers import Conv2d, LayerNorm, Linear, Module, parameter
from ssm_core import DEFAULT_STATE_SIZE, MambaBlock, mamba_block
from tensor_core import Tensor

MODALITIES = ("pet", "ct")


@dataclass(frozen=True)
class RegionGeometry:
    """Region layout of one stage: r×r regions over an H×W map"""

    side: int
    height: int
    width: int
    pet_width: int
    ct_width: int

    def __post_init__(self):
        if self.side < 1:
            raise ContractError(f"region geometry: side must be >= 1, got {self.side}")
        if self.height % self.side or self.width % self.side:
            raise ContractError(
                f"region geometry: {self.height}x{self.width} map not divisible into {self.side}x{self.side} regions"
            )
        if self.pet_width < 1 or self.ct_width < 1:
            raise ContractError("region geometry: token widths must be positive")

    @property
    def rows(self) -> int:
        return self.height // self.side

    @property
    def cols(self) -> int:
        return self.width // self.side

    @property
    def n(self) -> int:
        """Number of regions (regional tokens)"""
        return self.rows * self.cols

    @property
    def m(self) -> int:
        """Local tokens per region"""
        return self.side * self.side

    def index_map(self) -> np.ndarray:
        """[n, m] flat pixel index of every local token, row-major in both levels"""
        pixels = np.arange(self.height * self.width).reshape(self.height, self.width)
        return rearrange(pixels, "(a r1) (b r2) -> (a b) (r1 r2)", r1=self.side, r2=self.side)


def clip_region_side(side: int, height: int, width: int) -> int:
    """Largest power of two <= the requested side that tiles the map (maps shrink per stage)"""
    limit = max(1, min(side, height, width))
    side = 1 << (limit.bit_length() - 1)
    while height % side or width % side:
        side //= 2
    return side


@dataclass(frozen=True)
class DCIMVariant:
    """Which modality feeds which stream and which Mamba blocks are present"""

    name: str
    region_source: str = "pet"
    local_source: str = "ct"
    region_block: bool = True
    local_block: bool = True

    def __post_init__(self):
        for source in (self.region_source, self.local_source):
            if source not in MODALITIES:
                raise ContractError(f"dcim variant {self.name}: unknown modality {source!r}")


DCIM_VARIANTS: dict[str, DCIMVariant] = {
    variant.name: variant
    for variant in (
        DCIMVariant("region_pet_local_pet", region_source="pet", local_source="pet"),
        DCIMVariant("region_ct_local_ct", region_source="ct", local_source="ct"),
        DCIMVariant("region_ct_local_pet", region_source="ct", local_source="pet"),
        DCIMVariant("local_ct", region_block=False),
        DCIMVariant("region_pet", local_block=False),
        DCIMVariant("dcim"),
    )
}
DEFAULT_VARIANT = DCIM_VARIANTS["dcim"]


def get_variant(name: str | DCIMVariant) -> DCIMVariant:
    if isinstance(name, DCIMVariant):
        return name
    try:
        return DCIM_VARIANTS[name]
    except KeyError:
        raise ContractError(f"unknown dcim variant {name!r}; choose from {sorted(DCIM_VARIANTS)}") from None


# ---------------------------------------------------------------------------
# Stems
# ---------------------------------------------------------------------------

class ConvStem(Module):
    """Stacked 3×3 convolutions with LayerNorm + SiLU between them"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, strides: list[int]):
        widths = [in_channels] + [out_channels] * len(strides)
        self.convs = [
            Conv2d(widths[i], widths[i + 1], 3, rng, stride=stride, padding=1)
            for i, stride in enumerate(strides)
        ]
        self.norms = [LayerNorm(out_channels) for _ in strides[:-1]]

    def forward(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.norms):
                x = tc.silu(self.norms[i](x))
        return x


class PoolStem(Module):
    """Parameter-free stem: r×r average pooling (identity when r == 1)"""

    def __init__(self, side: int):
        self._side = side

    def forward(self, x: Tensor) -> Tensor:
        r = self._side
        if r == 1:
            return x
        batch, height, width, channels = x.shape
        blocks = x.reshape(batch, height // r, r, width // r, r, channels)
        return blocks.mean(axis=(2, 4))


def region_stem_strides(side: int) -> list[int]:
    if side == 1:
        return [1]
    steps = math.log2(side)
    if steps != int(steps):
        raise ContractError(f"dcim: region side {side} must be a power of two")
    return [2] * int(steps)


# ---------------------------------------------------------------------------
# Module parameters
# ---------------------------------------------------------------------------

class CrossModalityInteraction(Module):
    """Region/local Mamba streams, the two stems and the bridge projection D -> C"""

    def __init__(
        self,
        in_channels: int,
        rng: np.random.Generator,
        side: int = 4,
        pet_width: int | None = None,
        ct_width: int | None = None,
        variant: str | DCIMVariant = DEFAULT_VARIANT,
        state_size: int = DEFAULT_STATE_SIZE,
        identity_stems: bool = False,
    ):
        pet_width = pet_width or in_channels
        ct_width = ct_width or in_channels
        self._variant = get_variant(variant)
        self._side = side
        self._in_channels = in_channels
        self._pet_width = pet_width
        self._ct_width = ct_width

        if identity_stems:
            if pet_width != in_channels or ct_width != in_channels:
                raise ContractError("dcim: identity stems need token widths equal to the input width")
            self.region_stem = PoolStem(side)
            self.local_stem = PoolStem(1)
        else:
            self.region_stem = ConvStem(in_channels, pet_width, rng, region_stem_strides(side))
            self.local_stem = ConvStem(in_channels, ct_width, rng, [1, 1])

        if self._variant.region_block:
            self.region_norm = LayerNorm(pet_width)
            self.region_mamba = MambaBlock(pet_width, rng, state_size=state_size)
        if self._variant.local_block:
            self.local_norm = LayerNorm(ct_width)
            self.local_mamba = MambaBlock(ct_width, rng, state_size=state_size)

        self.bridge = Linear(pet_width, ct_width, rng)
        if pet_width == ct_width:
            self.bridge.weight = parameter(np.eye(pet_width))
            self.bridge.bias = parameter(np.zeros(ct_width))

    @property
    def variant(self) -> DCIMVariant:
        return self._variant

    @property
    def side(self) -> int:
        return self._side

    def geometry(self, height: int, width: int) -> RegionGeometry:
        return RegionGeometry(self._side, height, width, self._pet_width, self._ct_width)

    def forward(self, x_pet: Tensor, x_ct: Tensor) -> Tensor:
        return dcim_forward(x_pet, x_ct, self.geometry(*x_pet.shape[-3:-1]), self)


@dataclass
class InteractionMaps:
    """Stage outputs kept for inspection: regional map, local map, fused map"""

    region: Tensor
    local: Tensor
    fused: Tensor


# ---------------------------------------------------------------------------
# Token layout
# ---------------------------------------------------------------------------

def _batched(x: Tensor, ndim: int, op: str) -> tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return x.reshape(1, *x.shape), True
    if x.ndim == ndim:
        return x, False
    raise ContractError(f"{op}: expected rank {ndim - 1} or {ndim}, got shape {x.shape}")


def _check_map(x: Tensor, geom: RegionGeometry, op: str) -> None:
    if x.shape[1:3] != (geom.height, geom.width):
        raise ContractError(
            f"{op}: map {x.shape[1]}x{x.shape[2]} does not match geometry {geom.height}x{geom.width}"
        )


def partition_regions(x: Tensor, geom: RegionGeometry) -> Tensor:
    """[B,H,W,C] -> [B,n,m,C]: row-major regions, row-major pixels inside each"""
    _check_map(x, geom, "partition_regions")
    batch, channels, r = x.shape[0], x.shape[3], geom.side
    blocks = x.reshape(batch, geom.rows, r, geom.cols, r, channels)
    return tc.transpose(blocks, (0, 1, 3, 2, 4, 5)).reshape(batch, geom.n, geom.m, channels)


def assemble_regions(tokens: Tensor, geom: RegionGeometry) -> Tensor:
    """Inverse of partition_regions"""
    if tokens.ndim != 4 or tokens.shape[1:3] != (geom.n, geom.m):
        raise ContractError(f"assemble_regions: tokens {tokens.shape} do not match n={geom.n}, m={geom.m}")
    batch, channels, r = tokens.shape[0], tokens.shape[3], geom.side
    blocks = tokens.reshape(batch, geom.rows, geom.cols, r, r, channels)
    return tc.transpose(blocks, (0, 1, 3, 2, 4, 5)).reshape(batch, geom.height, geom.width, channels)


def detokenize(ct_tokens: Tensor, geom: RegionGeometry) -> Tensor:
    """[n,m,C] or [B,n,m,C] local tokens back to the [H,W,C] map"""
    tokens, squeeze = _batched(ct_tokens, 4, "detokenize")
    out = assemble_regions(tokens, geom)
    return out.reshape(out.shape[1:]) if squeeze else out


def _sources(x_pet: Tensor, x_ct: Tensor, variant: DCIMVariant) -> tuple[Tensor, Tensor]:
    by_name = {"pet": x_pet, "ct": x_ct}
    return by_name[variant.region_source], by_name[variant.local_source]


def tokenize(x_pet_rec: Tensor, x_ct_rec: Tensor, geom: RegionGeometry, params: CrossModalityInteraction):
    """Stems + region split: -> (regional tokens [n,D], local tokens [n,m,C])"""
    pet, squeeze = _batched(x_pet_rec, 4, "tokenize")
    ct, _ = _batched(x_ct_rec, 4, "tokenize")
    if pet.shape != ct.shape:
        raise ContractError(f"tokenize: PET {pet.shape} and CT {ct.shape} must share a shape")
    _check_map(pet, geom, "tokenize")
    if geom.side != params.side:
        raise ContractError(f"tokenize: geometry side {geom.side} != module side {params.side}")

    region_input, local_input = _sources(pet, ct, params.variant)
    regional = params.region_stem(region_input)
    if regional.shape[1:] != (geom.rows, geom.cols, geom.pet_width):
        raise ContractError(f"tokenize: region stem produced {regional.shape[1:]}, geometry wants "
                            f"{(geom.rows, geom.cols, geom.pet_width)}")
    pet_tokens = regional.reshape(regional.shape[0], geom.n, geom.pet_width)
    ct_tokens = partition_regions(params.local_stem(local_input), geom)
    if squeeze:
        return pet_tokens.reshape(pet_tokens.shape[1:]), ct_tokens.reshape(ct_tokens.shape[1:])
    return pet_tokens, ct_tokens


# ---------------------------------------------------------------------------
# Streams and fusion
# ---------------------------------------------------------------------------

def region_mamba(pet_tokens: Tensor, params: CrossModalityInteraction) -> Tensor:
    """X + Mamba(LN(X)) over the n regional tokens"""
    tokens, squeeze = _batched(pet_tokens, 3, "region_mamba")
    if tokens.shape[1] < 1:
        raise ContractError("region_mamba: no regional tokens")
    if not params.variant.region_block:
        return pet_tokens
    out = tokens + mamba_block(params.region_norm(tokens), params.region_mamba)
    return out.reshape(out.shape[1:]) if squeeze else out


def local_mamba(ct_tokens: Tensor, params: CrossModalityInteraction) -> Tensor:
    """X_i + Mamba(LN(X_i)) for every region i, one shared block"""
    tokens, squeeze = _batched(ct_tokens, 4, "local_mamba")
    batch, n, m, channels = tokens.shape
    if m < 1:
        raise ContractError("local_mamba: regions hold no local tokens")
    if not params.variant.local_block:
        return ct_tokens
    flat = tokens.reshape(batch * n, m, channels)
    out = (flat + mamba_block(params.local_norm(flat), params.local_mamba)).reshape(batch, n, m, channels)
    return out.reshape(out.shape[1:]) if squeeze else out


def fuse(pet_hat: Tensor, ct_hat: Tensor, geom: RegionGeometry, params: CrossModalityInteraction) -> Tensor:
    """Add bridge(regional token i) to all local tokens of region i, then reassemble"""
    regional, squeeze = _batched(pet_hat, 3, "fuse")
    local, _ = _batched(ct_hat, 4, "fuse")
    if regional.shape[:2] != local.shape[:2] or local.shape[1:3] != (geom.n, geom.m):
        raise ContractError(
            f"fuse: regional {regional.shape} and local {local.shape} disagree with n={geom.n}, m={geom.m}"
        )
    projected = params.bridge(regional)
    fused = local + projected.reshape(projected.shape[0], geom.n, 1, projected.shape[-1])
    out = assemble_regions(fused, geom)
    return out.reshape(out.shape[1:]) if squeeze else out


def dcim_maps(x_pet_rec: Tensor, x_ct_rec: Tensor, geom: RegionGeometry,
              params: CrossModalityInteraction) -> InteractionMaps:
    pet_tokens, ct_tokens = tokenize(x_pet_rec, x_ct_rec, geom, params)
    pet_hat = region_mamba(pet_tokens, params)
    ct_hat = local_mamba(ct_tokens, params)
    fused = fuse(pet_hat, ct_hat, geom, params)
    lead = pet_hat.shape[:-2]
    region_map = pet_hat.reshape(*lead, geom.rows, geom.cols, geom.pet_width)
    return InteractionMaps(region=region_map, local=detokenize(ct_hat, geom), fused=fused)


def dcim_forward(x_pet_rec: Tensor, x_ct_rec: Tensor, geom: RegionGeometry,
                 params: CrossModalityInteraction) -> Tensor:
    return dcim_maps(x_pet_rec, x_ct_rec, geom, params).fused


DCIMParams = CrossModalityInteraction
