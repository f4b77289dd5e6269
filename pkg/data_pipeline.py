"""
PET-CT data pipeline

This module provides:
1. ModalityPair - one co-registered PET/CT slice with its tumor mask
2. preprocess_ct / preprocess_pet - lung windowing and SUV min-max scaling to [0, 255]
3. augment - random flips and a [0.7, 0.9] square crop resized back
4. synth_generate - procedural PET-CT slices with irregular tumors, a pure
   function of (seed, index)
5. write_dataset / read_dataset - TSR1 shards plus a JSON manifest
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

import tensor_core as tc
from errors import ContractError, LoadError, ValidationError

CT_WINDOW = (-1200.0, -200.0)
CT_AIR_HU = -1000.0
CT_LUNG_HU = -850.0
CT_SOFT_TISSUE_HU = 40.0
PET_BACKGROUND_RANGE = (0.2, 1.5)
CROP_SCALE = (0.7, 0.9)
MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1
# tumor-area thresholds quoted for 512x512 slices, rescaled to the synthetic resolution
REFERENCE_RESOLUTION = 512
SMALL_TUMOR_AREA = 500
LARGE_TUMOR_AREA = 1000
PLANES = ("pet", "ct", "mask")


@dataclass
class ModalityPair:
    """Co-registered PET (SUV) and CT (HU) planes; [0, 255] once preprocessed"""

    pet: np.ndarray
    ct: np.ndarray
    mask: np.ndarray | None = None
    spacing: tuple[float, float] = (1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.pet = np.asarray(self.pet, dtype=np.float32)
        self.ct = np.asarray(self.ct, dtype=np.float32)
        if self.pet.ndim != 2 or self.pet.shape != self.ct.shape:
            raise ContractError(f"pair {self.id}: PET {self.pet.shape} and CT {self.ct.shape} must be equal 2D planes")
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != self.pet.shape:
                raise ContractError(f"pair {self.id}: mask {mask.shape} does not match planes {self.pet.shape}")
            if not np.isin(mask, (0, 1)).all():
                raise ContractError(f"pair {self.id}: mask must be binary")
            self.mask = mask.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pet.shape

    def check_preprocessed(self) -> None:
        for name in ("pet", "ct"):
            plane = getattr(self, name)
            if plane.min() < 0.0 or plane.max() > 255.0:
                raise ContractError(f"pair {self.id}: {name} values outside [0, 255]")


@dataclass
class PairBatch:
    pet: np.ndarray
    ct: np.ndarray
    mask: np.ndarray | None
    ids: list[str]


def stack_pairs(pairs: Sequence[ModalityPair]) -> PairBatch:
    if not pairs:
        raise ContractError("stack_pairs: empty batch")
    masks = [p.mask for p in pairs]
    return PairBatch(
        pet=np.stack([p.pet for p in pairs]),
        ct=np.stack([p.ct for p in pairs]),
        mask=None if any(m is None for m in masks) else np.stack(masks),
        ids=[p.id for p in pairs],
    )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def preprocess_ct(raw_hu) -> np.ndarray:
    """Clip to the lung window [-1200, -200] HU and map linearly onto [0, 255]"""
    raw = np.asarray(raw_hu, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ContractError("preprocess_ct: HU values must be finite")
    low, high = CT_WINDOW
    return ((np.clip(raw, low, high) - low) / (high - low) * 255.0).astype(np.float32)


def preprocess_pet(raw_suv) -> np.ndarray:
    """Per-slice min-max scaling of SUV values to [0, 255]; a constant slice maps to zeros"""
    raw = np.asarray(raw_suv, dtype=np.float64)
    if not np.all(np.isfinite(raw)) or raw.min() < 0:
        raise ContractError("preprocess_pet: SUV values must be finite and non-negative")
    low, high = raw.min(), raw.max()
    if high == low:
        return np.zeros(raw.shape, dtype=np.float32)
    return ((raw - low) / (high - low) * 255.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Augmentation:
    hflip: bool
    vflip: bool
    top: int
    left: int
    side: int


def crop_side_bounds(extent: int) -> tuple[int, int]:
    low, high = math.ceil(CROP_SCALE[0] * extent), math.floor(CROP_SCALE[1] * extent)
    return low, max(low, high)


def sample_augmentation(rng: np.random.Generator, shape: tuple[int, int]) -> Augmentation:
    height, width = shape
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    low, high = crop_side_bounds(min(height, width))
    side = int(rng.integers(low, high + 1))
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    return Augmentation(hflip, vflip, top, left, side)


def apply_augmentation(pair: ModalityPair, aug: Augmentation) -> ModalityPair:
    """Apply the same flips and crop to all three planes, then resize back"""
    if pair.mask is None:
        raise ContractError(f"augment: pair {pair.id} has no mask")
    shape = pair.shape
    window = (slice(aug.top, aug.top + aug.side), slice(aug.left, aug.left + aug.side))

    def transform(plane: np.ndarray, mode: str) -> np.ndarray:
        if aug.hflip:
            plane = plane[:, ::-1]
        if aug.vflip:
            plane = plane[::-1, :]
        return tc.resize_array(np.ascontiguousarray(plane[window]), shape, mode)

    return ModalityPair(
        pet=transform(pair.pet, "bilinear"),
        ct=transform(pair.ct, "bilinear"),
        mask=transform(pair.mask, "nearest"),
        spacing=pair.spacing,
        id=pair.id,
    )


def augment(pair: ModalityPair, rng: np.random.Generator) -> ModalityPair:
    return apply_augmentation(pair, sample_augmentation(rng, pair.shape))


def batch_for_step(pairs: Sequence[ModalityPair], seed: int, step: int, batch_size: int,
                   augmented: bool = True) -> PairBatch:
    """The training batch of a given step; depends only on (seed, step)"""
    if not pairs:
        raise ContractError("batch_for_step: no training pairs")
    rng = np.random.default_rng([seed, step])
    picks = rng.choice(len(pairs), size=batch_size, replace=len(pairs) < batch_size)
    chosen = [pairs[i] for i in picks]
    if augmented:
        chosen = [augment(p, rng) for p in chosen]
    return stack_pairs(chosen)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    count: int = 40
    resolution: int = 64
    tumors: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (2.0, 8.0)
    pet_contrast: tuple[float, float] = (3.0, 8.0)
    ct_tumor_offset: tuple[float, float] = (300.0, 600.0)
    ct_texture: float = 30.0
    ct_noise: float = 20.0
    pet_noise: float = 0.1
    irregularity: float = 0.25
    spacing: tuple[float, float] = (1.0, 1.0)
    train_fraction: float = 0.8

    def validate(self) -> "SynthSpec":
        if self.count < 1:
            raise ValidationError(f"synth.count must be >= 1, got {self.count}")
        if self.resolution < 32 or self.resolution % 32:
            raise ValidationError(f"synth.resolution must be a positive multiple of 32, got {self.resolution}")
        for name in ("tumors", "radius", "pet_contrast", "ct_tumor_offset"):
            low, high = getattr(self, name)
            if low > high:
                raise ValidationError(f"synth.{name} range is empty: {getattr(self, name)}")
        if self.tumors[0] < 1:
            raise ValidationError("synth.tumors must place at least one tumor per image")
        if self.radius[0] < 2:
            raise ValidationError(f"synth.radius must be >= 2 px, got {self.radius}")
        if self.radius[1] * (1 + self.irregularity) > self.resolution / 4:
            raise ValidationError("synth.radius too large for the resolution")
        if not 0 <= self.irregularity < 0.5:
            raise ValidationError(f"synth.irregularity must be in [0, 0.5), got {self.irregularity}")
        if self.pet_contrast[0] <= PET_BACKGROUND_RANGE[1]:
            raise ValidationError(f"synth.pet_contrast must exceed the background ceiling {PET_BACKGROUND_RANGE[1]}")
        if min(self.ct_texture, self.ct_noise, self.pet_noise) < 0:
            raise ValidationError("synth noise and texture amplitudes must be non-negative")
        if not 0 < self.train_fraction <= 1:
            raise ValidationError(f"synth.train_fraction must be in (0, 1], got {self.train_fraction}")
        return self

    def margin(self) -> int:
        return math.ceil(self.radius[1] * (1 + self.irregularity)) + 1

    def mask_bounds(self) -> tuple[int, int]:
        """Pixel-count bounds every synthetic mask satisfies"""
        inner = self.radius[0] * (1 - self.irregularity) - math.sqrt(0.5)
        low = max(1, math.floor(math.pi * inner * inner)) if inner > 0 else 1
        outer = self.radius[1] * (1 + self.irregularity) + 1
        return low, self.tumors[1] * math.ceil(math.pi * outer * outer)

    def to_dict(self) -> dict:
        data = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in data.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValidationError(f"unknown synth settings: {unknown}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass
class SynthSample:
    """Raw planes of one synthetic slice before preprocessing"""

    ct_hu: np.ndarray
    pet_suv: np.ndarray
    clean_pet: np.ndarray
    mask: np.ndarray
    tumor_areas: list[int]


def _ellipse(shape, center, axes) -> np.ndarray:
    rows, cols = np.indices(shape, dtype=np.float64)
    return ((rows - center[0]) / axes[0]) ** 2 + ((cols - center[1]) / axes[1]) ** 2 <= 1.0


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    field_ = gaussian_filter(rng.normal(size=shape), sigma)
    return field_ / max(field_.std(), 1e-12)


def _tumor(rng: np.random.Generator, spec: SynthSpec, shape, center) -> np.ndarray:
    """Star-shaped blob: polar radius r * (1 + irregularity * low harmonics)"""
    low, high = spec.radius
    radius = low + (high - low) * rng.random() ** 2
    harmonics = np.arange(2, 5)
    weights = rng.uniform(-1.0, 1.0, size=harmonics.size)
    weights /= max(np.abs(weights).sum(), 1.0)
    phases = rng.uniform(0.0, 2 * np.pi, size=harmonics.size)
    rows, cols = np.indices(shape, dtype=np.float64)
    dy, dx = rows - center[0], cols - center[1]
    theta = np.arctan2(dy, dx)
    wobble = (weights[:, None, None] * np.cos(harmonics[:, None, None] * theta + phases[:, None, None])).sum(axis=0)
    return np.hypot(dy, dx) <= radius * (1.0 + spec.irregularity * wobble)


def render_sample(spec: SynthSpec, index: int) -> SynthSample:
    """Raw CT (HU), PET (SUV) and mask of sample `index`; pure in (seed, index)"""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.resolution
    shape = (size, size)

    body = _ellipse(shape, (size * rng.uniform(0.48, 0.52), size / 2), (size * 0.42, size * 0.47))
    lungs = np.zeros(shape, dtype=bool)
    for side in (0.3, 0.7):
        center = (size * rng.uniform(0.45, 0.55), size * (side + rng.uniform(-0.02, 0.02)))
        lungs |= _ellipse(shape, center, (size * rng.uniform(0.26, 0.32), size * rng.uniform(0.13, 0.17)))
    lungs &= body

    margin = spec.margin()
    candidates = np.argwhere(lungs[margin:size - margin, margin:size - margin]) + margin
    if len(candidates) == 0:
        candidates = np.argwhere(np.ones((size - 2 * margin, size - 2 * margin), dtype=bool)) + margin

    ct = np.where(body, CT_SOFT_TISSUE_HU, CT_AIR_HU)
    ct = np.where(lungs, CT_LUNG_HU, ct) + spec.ct_texture * _smooth_field(rng, shape, size / 8) * body

    mask = np.zeros(shape, dtype=bool)
    uptake = np.zeros(shape)
    areas = []
    for _ in range(int(rng.integers(spec.tumors[0], spec.tumors[1] + 1))):
        center = candidates[rng.integers(len(candidates))] + rng.uniform(-0.5, 0.5, size=2)
        blob = _tumor(rng, spec, shape, center)
        areas.append(int(blob.sum()))
        ct = np.where(blob, CT_LUNG_HU + rng.uniform(*spec.ct_tumor_offset), ct)
        uptake = np.where(blob, np.maximum(uptake, rng.uniform(*spec.pet_contrast)), uptake)
        mask |= blob
    ct = ct + spec.ct_noise * rng.normal(size=shape)

    coarse = rng.uniform(0.0, 1.0, size=(size // 8, size // 8))
    background = gaussian_filter(zoom(coarse, 8, order=1), 2.0)
    low, high = PET_BACKGROUND_RANGE
    background = low + (high - low) * np.clip(background, 0.0, 1.0) * np.where(body, 1.0, 0.3)
    clean_pet = background + uptake
    pet = np.clip(clean_pet + spec.pet_noise * rng.normal(size=shape), 0.0, None)

    return SynthSample(ct_hu=ct, pet_suv=pet, clean_pet=clean_pet, mask=mask.astype(np.uint8), tumor_areas=areas)


def sample_id(index: int) -> str:
    return f"synth-{index:05d}"


def synth_pair(spec: SynthSpec, index: int) -> tuple[ModalityPair, list[int]]:
    sample = render_sample(spec, index)
    pair = ModalityPair(
        pet=preprocess_pet(sample.pet_suv),
        ct=preprocess_ct(sample.ct_hu),
        mask=sample.mask,
        spacing=spec.spacing,
        id=sample_id(index),
    )
    return pair, sample.tumor_areas


def split_indices(count: int, train_fraction: float) -> dict[str, list[int]]:
    """Split by generator stream (the synthetic 'patient'): the first share trains"""
    n_train = min(count, max(1, round(count * train_fraction)))
    return {"train": list(range(n_train)), "test": list(range(n_train, count))}


def tumor_size_stats(areas: Iterable[int], resolution: int) -> dict:
    areas = np.asarray(list(areas), dtype=np.int64)
    scale = (resolution / REFERENCE_RESOLUTION) ** 2
    small, large = SMALL_TUMOR_AREA * scale, LARGE_TUMOR_AREA * scale
    top = int(areas.max()) if areas.size else 1
    edges = np.unique(np.linspace(0, max(top, 1), 9).round().astype(np.int64))
    counts, _ = np.histogram(areas, bins=edges)
    return {
        "tumors": int(areas.size),
        "mean_area": float(areas.mean()) if areas.size else 0.0,
        "small_threshold_px": small,
        "large_threshold_px": large,
        "fraction_small": float((areas < small).mean()) if areas.size else 0.0,
        "fraction_large": float((areas > large).mean()) if areas.size else 0.0,
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }


@dataclass
class Dataset:
    splits: dict[str, list[ModalityPair]]
    resolution: int
    spacing: tuple[float, float] = (1.0, 1.0)
    generator: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def ids(self, split: str) -> list[str]:
        return [p.id for p in self.splits.get(split, [])]


def synth_generate(spec: SynthSpec, workers: int = 1) -> Dataset:
    spec.validate()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(lambda i: synth_pair(spec, i), range(spec.count)))
    pairs = [pair for pair, _ in results]
    splits = {name: [pairs[i] for i in idx] for name, idx in split_indices(spec.count, spec.train_fraction).items()}
    stats = tumor_size_stats((a for _, areas in results for a in areas), spec.resolution)
    return Dataset(splits, spec.resolution, spec.spacing, spec.to_dict(), stats)


# ---------------------------------------------------------------------------
# Shard I/O
# ---------------------------------------------------------------------------

def _plane_path(root: Path, split: str, pair_id: str, plane: str) -> Path:
    return root / split / f"{pair_id}.{plane}.tsr"


def write_dataset(root: str | Path, dataset: Dataset, workers: int = 1) -> Path:
    root = Path(root)
    seen: dict[str, str] = {}
    for split, pairs in dataset.splits.items():
        for pair in pairs:
            if pair.id in seen:
                raise ContractError(f"write_dataset: id {pair.id} appears in {seen[pair.id]} and {split}")
            if pair.mask is None:
                raise ContractError(f"write_dataset: pair {pair.id} has no mask")
            seen[pair.id] = split
        (root / split).mkdir(parents=True, exist_ok=True)

    def write(job: tuple[str, ModalityPair]) -> None:
        split, pair = job
        for plane in PLANES:
            tc.save_tsr1(_plane_path(root, split, pair.id, plane), getattr(pair, plane))

    jobs = [(split, pair) for split, pairs in dataset.splits.items() for pair in pairs]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(write, jobs))

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "resolution": dataset.resolution,
        "spacing": list(dataset.spacing),
        "splits": {split: [p.id for p in pairs] for split, pairs in dataset.splits.items()},
        "generator": dataset.generator,
        "stats": dataset.stats,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise LoadError(f"{path}: {e}") from e
    except json.JSONDecodeError as e:
        raise LoadError(f"{path}: invalid JSON ({e})") from e
    for key in ("schema_version", "resolution", "spacing", "splits"):
        if key not in manifest:
            raise LoadError(f"{path}: missing field {key!r}")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise LoadError(f"{path}: unsupported schema_version {manifest['schema_version']}")
    owner: dict[str, str] = {}
    for split, ids in manifest["splits"].items():
        for pair_id in ids:
            if pair_id in owner:
                raise LoadError(f"{path}: id {pair_id} listed in both {owner[pair_id]} and {split}")
            owner[pair_id] = split
    return manifest


def read_dataset(root: str | Path, splits: Sequence[str] | None = None) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root)
    resolution = int(manifest["resolution"])
    spacing = tuple(manifest["spacing"])
    wanted = list(manifest["splits"]) if splits is None else list(splits)
    loaded: dict[str, list[ModalityPair]] = {}
    for split in wanted:
        if split not in manifest["splits"]:
            raise LoadError(f"{root / MANIFEST_NAME}: no split named {split!r}")
        pairs = []
        for pair_id in manifest["splits"][split]:
            planes = {}
            for plane in PLANES:
                path = _plane_path(root, split, pair_id, plane)
                if not path.exists():
                    raise LoadError(f"{path}: listed in manifest but missing")
                planes[plane] = tc.load_tsr1(path)
                if planes[plane].shape != (resolution, resolution):
                    raise LoadError(f"{path}: shape {planes[plane].shape}, manifest says {resolution}^2")
            try:
                pair = ModalityPair(spacing=spacing, id=pair_id, **planes)
                pair.check_preprocessed()
            except ContractError as e:
                raise LoadError(f"{root / split}: {e}") from e
            pairs.append(pair)
        loaded[split] = pairs
    return Dataset(loaded, resolution, spacing, manifest.get("generator", {}), manifest.get("stats", {}))
