"""
CIPA network assembly, loss, optimizer and checkpoints

The network runs PET and CT through one shared VSS encoder (the two planes
travel as separate batch items), rectifies the pair per stage with CRM, fuses
it with DCIM, and decodes the four fused maps with CVSS blocks
(upsample + add skip merges) into two-class logits.

Components:
- CipaConfig / OptimConfig: model and optimizer settings
- CipaNet: the model; forward(..., return_features=True) also returns the
  per-stage intermediate maps
- loss / loss_terms: cross-entropy + soft Dice on the tumor class
- AdamW + cosine_lr + train_step: one deterministic optimization step
- infer / predict_mask: binary masks, ties go to background
- Checkpoint + save_checkpoint / load_checkpoint: single-file container of
  TSR1 tensors behind a JSON index
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

import tensor_core as tc
from crm import DEFAULT_TOKEN_LENGTH, ChannelRectification, crm_forward
from data_pipeline import ModalityPair, PairBatch, stack_pairs
from dcim import DCIM_VARIANTS, CrossModalityInteraction, clip_region_side, dcim_maps
from errors import ContractError, LoadError, NumericFault, ValidationError
from layers import Conv2d, Module
from ssm_core import DEFAULT_STATE_SIZE
from tensor_core import Tensor
from vss_blocks import CVSSBlock, Downsample, PatchEmbed, Upsample, VSSBlock

CHECKPOINT_MAGIC = b"CIPACKPT"
CHECKPOINT_FORMAT = 1
INPUT_SCALE = 1.0 / 255.0
DICE_SMOOTH = 1.0

# (name, enable_crm, enable_dcim)
ABLATIONS = (
    ("baseline", False, False),
    ("crm", True, False),
    ("dcim", False, True),
    ("crm_dcim", True, True),
)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CipaConfig:
    resolution: int = 64
    in_channels: int = 1
    widths: tuple[int, ...] = (32, 64, 128, 256)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    decoder_depths: tuple[int, ...] = (2, 2, 2, 2)
    region_side: int | tuple[int, ...] = 4
    state_size: int = DEFAULT_STATE_SIZE
    num_classes: int = 2
    enable_crm: bool = True
    enable_dcim: bool = True
    dcim_variant: str = "dcim"
    crm_token_length: int = DEFAULT_TOKEN_LENGTH
    crm_bidirectional: bool = False
    crm_feeds_encoder: bool = True
    per_direction_ss2d: bool = False
    expand: int = 2
    mlp_ratio: int = 2

    def stage_extents(self) -> list[int]:
        return [self.resolution // (4 * 2 ** s) for s in range(len(self.widths))]

    def region_sides(self) -> list[int]:
        extents = self.stage_extents()
        if isinstance(self.region_side, int):
            return [clip_region_side(self.region_side, e, e) for e in extents]
        return list(self.region_side)

    def validate(self) -> "CipaConfig":
        if self.resolution < 32 or self.resolution % 32:
            raise ValidationError(f"model.resolution must be a positive multiple of 32, got {self.resolution}")
        if self.in_channels < 1:
            raise ValidationError("model.in_channels must be >= 1")
        for name in ("widths", "depths", "decoder_depths"):
            if len(getattr(self, name)) != 4:
                raise ValidationError(f"model.{name} must list four stages, got {getattr(self, name)}")
        if any(self.widths[s + 1] != 2 * self.widths[s] for s in range(3)) or self.widths[0] < 2:
            raise ValidationError(f"model.widths must double per stage, got {self.widths}")
        if min(self.depths) < 1 or min(self.decoder_depths) < 1:
            raise ValidationError("model depths must be >= 1")
        if self.num_classes != 2:
            raise ValidationError(f"model.num_classes must be 2 (background, tumor), got {self.num_classes}")
        if self.dcim_variant not in DCIM_VARIANTS:
            raise ValidationError(f"model.dcim_variant {self.dcim_variant!r} not in {sorted(DCIM_VARIANTS)}")
        if self.state_size < 1 or self.crm_token_length < 1 or self.expand < 1 or self.mlp_ratio < 1:
            raise ValidationError("model state_size, crm_token_length, expand and mlp_ratio must be >= 1")
        sides = [self.region_side] if isinstance(self.region_side, int) else list(self.region_side)
        if not isinstance(self.region_side, int) and len(sides) != 4:
            raise ValidationError(f"model.region_side must be one int or four, got {self.region_side}")
        for side in sides:
            if side < 1 or side & (side - 1):
                raise ValidationError(f"model.region_side entries must be powers of two, got {side}")
        for stage, (side, extent) in enumerate(zip(self.region_sides(), self.stage_extents()), 1):
            if extent % side:
                raise ValidationError(f"model.region_side {side} does not divide stage {stage} extent {extent}")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CipaConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown model settings: {unknown}")
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**values)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 6e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 4
    steps: int = 500
    checkpoint_every: int = 100

    def validate(self) -> "OptimConfig":
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValidationError("optim.lr and optim.eps must be positive, optim.weight_decay non-negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValidationError(f"optim.betas must be two values in [0, 1), got {self.betas}")
        if self.batch_size < 1 or self.steps < 1 or self.checkpoint_every < 1:
            raise ValidationError("optim.batch_size, optim.steps and optim.checkpoint_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "OptimConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown optim settings: {unknown}")
        values = dict(data)
        if "betas" in values:
            values["betas"] = tuple(values["betas"])
        return cls(**values)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class EncoderStage(Module):
    def __init__(self, cfg: CipaConfig, stage: int, rng: np.random.Generator):
        width = cfg.widths[stage]
        self.blocks = [
            VSSBlock(width, rng, cfg.state_size, cfg.expand, cfg.mlp_ratio, cfg.per_direction_ss2d)
            for _ in range(cfg.depths[stage])
        ]
        self.crm = None
        if cfg.enable_crm:
            self.crm = ChannelRectification(
                width, rng, cfg.crm_token_length, cfg.state_size, cfg.crm_bidirectional
            )
        self.dcim = None
        if cfg.enable_dcim:
            self.dcim = CrossModalityInteraction(
                width, rng, side=cfg.region_sides()[stage],
                variant=cfg.dcim_variant, state_size=cfg.state_size,
            )
        self.downsample = Downsample(width, rng) if stage < len(cfg.widths) - 1 else None


class DecoderStage(Module):
    def __init__(self, cfg: CipaConfig, stage: int, rng: np.random.Generator):
        width = cfg.widths[stage]
        self.upsample = Upsample(cfg.widths[stage + 1], rng) if stage < len(cfg.widths) - 1 else None
        self.blocks = [
            CVSSBlock(width, rng, cfg.state_size, cfg.expand, cfg.mlp_ratio,
                      per_direction=cfg.per_direction_ss2d)
            for _ in range(cfg.decoder_depths[stage])
        ]


@dataclass
class StageFeatures:
    """Intermediate maps of one encoder stage, [B,h,w,C] each"""

    pet: Tensor
    ct: Tensor
    pet_rectified: Tensor
    ct_rectified: Tensor
    fused: Tensor
    region: Tensor | None = None
    local: Tensor | None = None


def _as_planes(x, op: str) -> tuple[Tensor, bool]:
    """[H,W] / [B,H,W] / [B,H,W,1] images -> [B,H,W,1] tensor, plus whether to squeeze"""
    if isinstance(x, Tensor):
        if x.ndim == 4:
            return x, False
        x = x.data
    arr = np.asarray(x, dtype=tc.default_dtype())
    if arr.ndim == 2:
        return Tensor(arr[None, :, :, None]), True
    if arr.ndim == 3:
        return Tensor(arr[..., None]), False
    if arr.ndim == 4:
        return Tensor(arr), False
    raise ContractError(f"{op}: expected [H,W], [B,H,W] or [B,H,W,C] images, got {arr.shape}")


class CipaNet(Module):
    """Dual-branch shared-encoder segmentation network"""

    def __init__(self, cfg: CipaConfig, rng: np.random.Generator | None = None, seed: int = 0):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(seed)
        self._cfg = cfg
        self.patch_embed = PatchEmbed(cfg.in_channels, cfg.widths[0], rng)
        self.encoder = [EncoderStage(cfg, s, rng) for s in range(len(cfg.widths))]
        self.decoder = [DecoderStage(cfg, s, rng) for s in range(len(cfg.widths))]
        self.head = Conv2d(cfg.widths[0], cfg.num_classes, 1, rng)

    @property
    def config(self) -> CipaConfig:
        return self._cfg

    def forward(self, pet, ct, return_features: bool = False):
        """Logits [B,H,W,K] ([H,W,K] for single [H,W] images)"""
        cfg = self._cfg
        pet_t, squeeze = _as_planes(pet, "forward")
        ct_t, _ = _as_planes(ct, "forward")
        if pet_t.shape != ct_t.shape:
            raise ContractError(f"forward: PET {pet_t.shape} and CT {ct_t.shape} must share a shape")
        _, height, width, channels = pet_t.shape
        if (height, width) != (cfg.resolution, cfg.resolution) or channels != cfg.in_channels:
            raise ContractError(
                f"forward: inputs {height}x{width}x{channels} do not match configured "
                f"{cfg.resolution}x{cfg.resolution}x{cfg.in_channels}"
            )

        x = self.patch_embed(tc.concat([pet_t, ct_t], axis=0) * INPUT_SCALE)
        fused_maps: list[Tensor] = []
        features: list[StageFeatures] = []
        for stage in self.encoder:
            for block in stage.blocks:
                x = block(x)
            pet_f, ct_f = tc.split(x, 2, axis=0)
            pet_r, ct_r = crm_forward(pet_f, ct_f, stage.crm) if stage.crm is not None else (pet_f, ct_f)
            maps = None
            if stage.dcim is not None:
                maps = dcim_maps(pet_r, ct_r, stage.dcim.geometry(*pet_r.shape[1:3]), stage.dcim)
                fused = maps.fused
            else:
                fused = (pet_r + ct_r) * 0.5
            fused_maps.append(fused)
            if return_features:
                features.append(StageFeatures(
                    pet_f, ct_f, pet_r, ct_r, fused,
                    region=maps.region if maps else None, local=maps.local if maps else None,
                ))
            if stage.crm is not None and cfg.crm_feeds_encoder:
                x = tc.concat([pet_r, ct_r], axis=0)
            if stage.downsample is not None:
                x = stage.downsample(x)

        decoded = None
        for stage, skip in zip(reversed(self.decoder), reversed(fused_maps)):
            decoded = skip if decoded is None else stage.upsample(decoded) + skip
            for block in stage.blocks:
                decoded = block(decoded)
        logits = tc.resize(self.head(decoded), (height, width), "bilinear")
        if squeeze:
            logits = logits.reshape(logits.shape[1:])
        return (logits, features) if return_features else logits

    def forward_pair(self, pairs: ModalityPair | Sequence[ModalityPair], return_features: bool = False):
        batch = stack_pairs([pairs] if isinstance(pairs, ModalityPair) else list(pairs))
        return self.forward(batch.pet, batch.ct, return_features)


def parameter_summary(cfg: CipaConfig, seed: int = 0) -> dict:
    """Parameter counts of the configured model, each CRM/DCIM ablation and each DCIM variant"""
    def count(**changes) -> int:
        return CipaNet(replace(cfg, **changes), seed=seed).num_parameters()

    return {
        "configured": count(),
        "ablations": {name: count(enable_crm=crm, enable_dcim=dcim) for name, crm, dcim in ABLATIONS},
        "dcim_variants": {
            name: count(enable_crm=True, enable_dcim=True, dcim_variant=name) for name in DCIM_VARIANTS
        },
    }


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _binary_mask(mask, expected: tuple[int, ...], op: str) -> np.ndarray:
    arr = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if arr.shape != expected:
        raise ContractError(f"{op}: mask shape {arr.shape} does not match logits {expected}")
    if not np.isin(arr, (0, 1)).all():
        raise ContractError(f"{op}: mask values must be 0 or 1")
    return arr


def loss_terms(logits: Tensor, mask) -> tuple[Tensor, Tensor, Tensor]:
    """(total, cross-entropy, soft Dice) for [B,H,W,2] or [H,W,2] logits"""
    if logits.ndim == 3:
        logits = logits.reshape(1, *logits.shape)
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask)[None]
    if logits.ndim != 4 or logits.shape[-1] != 2:
        raise ContractError(f"loss: expected [B,H,W,2] logits, got {logits.shape}")
    y = _binary_mask(mask, logits.shape[:-1], "loss").astype(logits.dtype)

    log_probs = tc.log_softmax(logits, axis=-1)
    one_hot = np.stack([1.0 - y, y], axis=-1).astype(logits.dtype)
    ce = -(log_probs * one_hot).sum(axis=-1).mean()

    tumor = tc.slice_axis(log_probs, 1, 2, axis=-1).exp().reshape(y.shape)
    intersection = (tumor * y).sum(axis=(1, 2))
    denominator = tumor.sum(axis=(1, 2)) + y.sum(axis=(1, 2))
    dice = (1.0 - (intersection * 2.0 + DICE_SMOOTH) / (denominator + DICE_SMOOTH)).mean()
    return ce + dice, ce, dice


def loss(logits: Tensor, mask) -> Tensor:
    return loss_terms(logits, mask)[0]


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr at step 0 to 0 at step total_steps - 1"""
    if total_steps <= 1:
        return base_lr
    t = min(max(step, 0), total_steps - 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / (total_steps - 1)))


class AdamW:
    """Adam with decoupled weight decay

    Decay applies only to parameters with ndim >= 2 (projection matrices, conv
    kernels and A_log). Biases, norm gains, D_skip and delta_bias are 1-D and
    are never decayed.
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, Tensor]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = dict(named_params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        beta1, beta2 = self.betas
        self.t += 1
        correction1 = 1.0 - beta1 ** self.t
        correction2 = 1.0 - beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            if p.ndim >= 2 and self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            self.m[name] = beta1 * self.m[name] + (1.0 - beta1) * g
            self.v[name] = beta2 * self.v[name] + (1.0 - beta2) * g * g
            update = (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict[str, dict[str, np.ndarray]]:
        return {"m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, moments: dict[str, dict[str, np.ndarray]], t: int) -> None:
        for key, store in (("m", self.m), ("v", self.v)):
            given = moments.get(key, {})
            missing = sorted(set(store) - set(given))
            if missing:
                raise ContractError(f"optimizer state lacks {key} moments for {missing[:5]}")
            for name in store:
                if given[name].shape != store[name].shape:
                    raise ContractError(f"optimizer {key}/{name} has shape {given[name].shape}, expected {store[name].shape}")
                store[name] = np.asarray(given[name], dtype=store[name].dtype).copy()
        self.t = t


@dataclass
class TrainState:
    model: CipaNet
    optimizer: AdamW
    step: int = 0

    @classmethod
    def create(cls, cfg: CipaConfig, optim: OptimConfig, seed: int = 0) -> "TrainState":
        model = CipaNet(cfg, seed=seed)
        return cls(model, AdamW(model.named_parameters(), optim.betas, optim.eps, optim.weight_decay))


@dataclass(frozen=True)
class StepLog:
    step: int
    lr: float
    loss: float
    ce: float
    dice: float

    def as_row(self) -> list:
        return [self.step, repr(self.lr), repr(self.loss), repr(self.ce), repr(self.dice)]


def train_step(batch: PairBatch, state: TrainState, optim: OptimConfig) -> tuple[TrainState, StepLog]:
    """Forward, backward and one AdamW update at the cosine-annealed learning rate"""
    lr = cosine_lr(state.step, optim.steps, optim.lr)
    state.model.zero_grad()
    try:
        logits = state.model(batch.pet, batch.ct)
        total, ce, dice = loss_terms(logits, batch.mask)
        tc.backward(total)
    except NumericFault as e:
        raise NumericFault(
            f"step {state.step}: {e} (batch {', '.join(batch.ids)})", op=e.op, batch_ids=batch.ids
        ) from e
    for name, p in state.model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericFault(
                f"step {state.step}: non-finite gradient for {name} (batch {', '.join(batch.ids)})",
                op="backward", batch_ids=batch.ids,
            )
    state.optimizer.step(lr)
    log = StepLog(state.step, lr, total.item(), ce.item(), dice.item())
    state.step += 1
    return state, log


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict_mask(logits) -> np.ndarray:
    """Tumor wherever the tumor logit is strictly larger; ties go to background"""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (arr[..., 1] > arr[..., 0]).astype(np.uint8)


def infer(pair: ModalityPair, checkpoint: "Checkpoint | CipaNet", cfg: CipaConfig | None = None) -> np.ndarray:
    """Binary [H,W] mask for one pair"""
    if isinstance(checkpoint, Checkpoint):
        stored = checkpoint.model_config()
        if cfg is not None and cfg != stored:
            raise ContractError("infer: checkpoint was written for a different model configuration")
        model = checkpoint.build_model()
    else:
        model = checkpoint
    if pair.pet.shape != (model.config.resolution, model.config.resolution):
        raise ContractError(
            f"infer: pair {pair.id} is {pair.pet.shape}, model expects {model.config.resolution}^2"
        )
    with tc.no_grad():
        logits = model(pair.pet, pair.ct)
    return predict_mask(logits)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int
    config: dict
    moments: dict[str, dict[str, np.ndarray]] = field(default_factory=lambda: {"m": {}, "v": {}})

    @classmethod
    def from_state(cls, state: TrainState, config: dict) -> "Checkpoint":
        return cls(state.model.state_dict(), state.step, config, state.optimizer.state_dict())

    def model_config(self) -> CipaConfig:
        return CipaConfig.from_dict(self.config.get("model", self.config))

    def build_model(self) -> CipaNet:
        model = CipaNet(self.model_config())
        model.load_state_dict(self.params)
        return model

    def restore(self, optim: OptimConfig) -> TrainState:
        model = self.build_model()
        optimizer = AdamW(model.named_parameters(), optim.betas, optim.eps, optim.weight_decay)
        if self.moments.get("m"):
            optimizer.load_state_dict(self.moments, self.step)
        return TrainState(model, optimizer, self.step)


def _tensor_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    entries = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    for key in ("m", "v"):
        entries += [(f"adam.{key}/{k}", v) for k, v in ckpt.moments.get(key, {}).items()]
    return sorted(entries)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    """Atomically write magic | u64 index length | JSON index | TSR1 blobs"""
    path = Path(path)
    blobs, index, offset = [], {}, 0
    for name, array in _tensor_entries(ckpt):
        blob = tc.encode_tsr1(array)
        index[name] = {"offset": offset, "shape": list(np.shape(array))}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format": CHECKPOINT_FORMAT, "step": ckpt.step, "config": ckpt.config, "tensors": index},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC + struct.pack("<Q", len(header)) + header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as e:
        raise LoadError(f"{path}: {e}") from e
    if buffer[:8] != CHECKPOINT_MAGIC or len(buffer) < 16:
        raise LoadError(f"{path}: not a checkpoint (bad magic)")
    (index_len,) = struct.unpack_from("<Q", buffer, 8)
    blob_start = 16 + index_len
    try:
        index = json.loads(buffer[16:blob_start].decode("utf-8"))
        tensors = index["tensors"]
        step, config = int(index["step"]), index["config"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise LoadError(f"{path}: malformed checkpoint index ({e})") from e
    if index.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{path}: unsupported checkpoint format {index.get('format')!r}")

    ckpt = Checkpoint({}, step, config)
    for name, entry in tensors.items():
        array, _ = tc.decode_tsr1(buffer, blob_start + int(entry["offset"]), f"{path}:{name}")
        if list(array.shape) != list(entry["shape"]):
            raise LoadError(f"{path}: tensor {name} has shape {array.shape}, index says {entry['shape']}")
        kind, _, key = name.partition("/")
        if kind == "param":
            ckpt.params[key] = array
        elif kind in ("adam.m", "adam.v"):
            ckpt.moments[kind[-1]][key] = array
        else:
            raise LoadError(f"{path}: unknown tensor group {kind!r}")
    return ckpt
