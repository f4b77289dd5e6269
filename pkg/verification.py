"""
Oracle suites behind `cipa.py verify` and the scan benchmark behind `cipa.py bench`

Each suite returns a SuiteResult with its worst observed error and the
tolerance it was held to. run_suites() runs a selection, optionally with a
deliberately injected kernel fault, so the harness can prove it notices.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

import tensor_core as tc
from cipa_net import CipaConfig, OptimConfig, TrainState, loss, train_step
from crm import ChannelRectification, crm_forward
from data_pipeline import SynthSpec, augment, render_sample, stack_pairs, synth_pair
from dcim import CrossModalityInteraction, RegionGeometry, assemble_regions, dcim_forward, fuse, partition_regions
from errors import ContractError
from layers import Module
from metrics import brute_force_distances, confusion, f1, hd95, hd95_bruteforce, iou, acc
from ssm_core import (
    MambaBlock,
    SelectiveSSM,
    causal_conv,
    chunked_scan,
    inject_fault,
    lti_kernel,
    mamba_block,
    selective_scan,
    selective_scan_op,
    zoh_factors,
)
from tensor_core import Tensor
from vss_blocks import SS2D, CVSSBlock, VSSBlock, cvss_block, ss2d, vss_block

LTI_TOLERANCE = 1e-4
GRADIENT_TOLERANCE = 1e-4
GRADIENT_EPS = 1e-3
HD95_TOLERANCE = 1e-9
CHUNKED_TOLERANCE = 1e-5
LINEARITY_SLACK = 1.3
FAULTS = ("scan",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# LTI equivalence
# ---------------------------------------------------------------------------

def lti_trial(rng: np.random.Generator) -> float:
    """Frozen-parameter selective scan vs causal convolution with the LTI kernel"""
    length = int(rng.integers(1, 65))
    state = int(rng.integers(1, 9))
    width = int(rng.integers(1, 9))
    a = -rng.uniform(0.1, 2.0, size=(width, state))
    step = rng.uniform(0.01, 0.5, size=width)
    b = rng.normal(size=state)
    c = rng.normal(size=state)
    skip = rng.normal(size=width)
    x = rng.normal(size=(length, width))

    u = Tensor(x[None])
    delta = Tensor(np.broadcast_to(step, (1, length, width)).copy())
    y = selective_scan_op(
        u, delta, Tensor(a),
        Tensor(np.broadcast_to(b, (1, length, state)).copy()),
        Tensor(np.broadcast_to(c, (1, length, state)).copy()),
        Tensor(skip),
    ).data[0]

    a_bar, phi = zoh_factors(a, step[:, None])
    kernel = lti_kernel(a_bar, phi * b, np.broadcast_to(c, (width, state)), length)
    expected = causal_conv(x, kernel) + skip * x
    return float(np.abs(y - expected).max())


def lti_suite(trials: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = max(lti_trial(rng) for _ in range(trials))
    return SuiteResult("lti", worst <= LTI_TOLERANCE, worst, LTI_TOLERANCE, f"{trials} frozen configurations")


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _leaf(rng: np.random.Generator, *shape, low: float | None = None) -> Tensor:
    values = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.0, size=shape)
    return Tensor(values.astype(np.float64), requires_grad=True)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def _module_check(module: Module, inputs: list[Tensor], forward: Callable[..., Tensor],
                  rng: np.random.Generator, max_coords: int = 4) -> float:
    module.astype(np.float64)
    weights = rng.normal(size=forward(*inputs).shape)
    tensors = inputs + module.parameters()
    return tc.gradient_check(lambda: _weighted(forward(*inputs), weights), tensors,
                             eps=GRADIENT_EPS, max_coords=max_coords)


def gradient_cases(seed: int = 0) -> dict[str, Callable[[], float]]:
    """name -> zero-argument callable returning the worst relative error"""
    rng = np.random.default_rng(seed)

    def primitive(fn: Callable[..., Tensor], *tensors: Tensor) -> Callable[[], float]:
        def check() -> float:
            weights = rng.normal(size=fn(*tensors).shape)
            return tc.gradient_check(lambda: _weighted(fn(*tensors), weights), list(tensors), eps=GRADIENT_EPS)
        return check

    def module(factory: Callable[[], Module], shapes: list[tuple[int, ...]], forward) -> Callable[[], float]:
        def check() -> float:
            built = factory()
            return _module_check(built, [_leaf(rng, *s) for s in shapes],
                                 lambda *xs: forward(*xs, built), rng)
        return check

    def scan_case() -> float:
        u, b, c = _leaf(rng, 1, 6, 3), _leaf(rng, 1, 6, 4), _leaf(rng, 1, 6, 4)
        delta = _leaf(rng, 1, 6, 3, low=0.1)
        a = Tensor(-rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        d = _leaf(rng, 3)
        tensors = [u, delta, a, b, c, d]
        weights = rng.normal(size=(1, 6, 3))
        return tc.gradient_check(lambda: _weighted(selective_scan_op(*tensors), weights), tensors, eps=GRADIENT_EPS)

    def loss_case() -> float:
        logits = _leaf(rng, 1, 8, 8, 2)
        mask = (rng.random((1, 8, 8)) < 0.4).astype(np.uint8)
        return tc.gradient_check(lambda: loss(logits, mask), [logits], eps=GRADIENT_EPS)

    def dcim_case() -> float:
        built = CrossModalityInteraction(4, rng, side=4, state_size=4)
        geom = built.geometry(8, 8)
        return _module_check(built, [_leaf(rng, 1, 8, 8, 4), _leaf(rng, 1, 8, 8, 4)],
                             lambda p, c: dcim_forward(p, c, geom, built), rng, max_coords=3)

    return {
        "matmul": primitive(lambda a, b: a @ b, _leaf(rng, 3, 4), _leaf(rng, 4, 2)),
        "conv2d": primitive(lambda x, w, b: tc.conv2d(x, w, b, stride=2, padding=1),
                            _leaf(rng, 1, 5, 5, 2), _leaf(rng, 3, 3, 2, 3), _leaf(rng, 3)),
        "depthwise_conv2d": primitive(lambda x, w: tc.depthwise_conv2d(x, w, padding=1),
                                      _leaf(rng, 1, 4, 4, 3), _leaf(rng, 3, 3, 3)),
        "causal_conv1d": primitive(tc.causal_conv1d, _leaf(rng, 1, 6, 3), _leaf(rng, 4, 3)),
        "layer_norm": primitive(tc.layer_norm, _leaf(rng, 2, 5), _leaf(rng, 5), _leaf(rng, 5)),
        "resize": primitive(lambda x: tc.resize(x, (6, 6)), _leaf(rng, 1, 3, 3, 2)),
        "log_softmax": primitive(lambda x: tc.log_softmax(x, axis=-1), _leaf(rng, 3, 4)),
        "selective_scan": scan_case,
        "mamba_block": module(lambda: MambaBlock(4, rng, state_size=4), [(1, 6, 4)], mamba_block),
        "ss2d": module(lambda: SS2D(4, rng, state_size=4), [(1, 3, 3, 4)], ss2d),
        "vss_block": module(lambda: VSSBlock(4, rng, state_size=4), [(1, 4, 4, 4)], vss_block),
        "cvss_block": module(lambda: CVSSBlock(4, rng, state_size=4), [(1, 4, 4, 4)], cvss_block),
        "crm": module(lambda: ChannelRectification(4, rng, token_length=8, state_size=4),
                      [(1, 4, 4, 4), (1, 4, 4, 4)],
                      lambda p, c, m: tc.concat(list(crm_forward(p, c, m)), axis=-1)),
        "dcim": dcim_case,
        "loss": loss_case,
    }


def gradients_suite(seed: int = 0) -> SuiteResult:
    errors = {name: check() for name, check in gradient_cases(seed).items()}
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    return SuiteResult("gradients", worst <= GRADIENT_TOLERANCE, worst, GRADIENT_TOLERANCE,
                       f"{len(errors)} blocks, worst {worst_name}")


# ---------------------------------------------------------------------------
# Token geometry
# ---------------------------------------------------------------------------

def geometry_suite(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = 0
    for height in (8, 16, 32):
        for width in (8, 16, 32):
            for side in (2, 4, 8):
                if height % side or width % side:
                    continue
                cases += 1
                geom = RegionGeometry(side, height, width, 4, 4)
                if geom.n * geom.m != height * width:
                    return SuiteResult("geometry", False, float("inf"), 0.0, f"token count off at {geom}")
                index = geom.index_map()
                if not np.array_equal(np.sort(index.ravel()), np.arange(height * width)):
                    return SuiteResult("geometry", False, float("inf"), 0.0, f"index map not a bijection at {geom}")

                x = Tensor(rng.normal(size=(1, height, width, 4)))
                tokens = partition_regions(x, geom)
                if not np.array_equal(tokens.data[0], x.data[0].reshape(-1, 4)[index]):
                    return SuiteResult("geometry", False, float("inf"), 0.0, f"partition disagrees with index map at {geom}")
                if not np.array_equal(assemble_regions(tokens, geom).data, x.data):
                    return SuiteResult("geometry", False, float("inf"), 0.0, f"round trip failed at {geom}")

                module = CrossModalityInteraction(4, rng, side=side, state_size=2, identity_stems=True)
                module.bridge.weight.data = rng.normal(size=(4, 4)).astype(np.float32)
                pet_hat = Tensor(rng.normal(size=(1, geom.n, 4)).astype(np.float32))
                fused = fuse(pet_hat, tokens, geom, module)
                offsets = partition_regions(fused, geom).data - tokens.data
                projected = module.bridge(pet_hat).data[:, :, None, :]
                worst = max(worst, float(np.abs(offsets - projected).max()))
    tolerance = 1e-5
    return SuiteResult("geometry", worst <= tolerance, worst, tolerance, f"{cases} geometries")


# ---------------------------------------------------------------------------
# Channel rectification
# ---------------------------------------------------------------------------

def crm_suite(samples: int = 1000, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    module = ChannelRectification(4, rng, token_length=8, state_size=4)
    pet = Tensor(rng.normal(scale=3.0, size=(samples, 4, 4, 4)).astype(np.float32))
    ct = Tensor(rng.normal(scale=3.0, size=(samples, 4, 4, 4)).astype(np.float32))
    with tc.no_grad():
        weights = module.channel_weights(pet, ct).data
        pet_rec, ct_rec = crm_forward(pet, ct, module)
        zero_rec, _ = crm_forward(Tensor(np.zeros_like(pet.data)), ct, module)
    problems = []
    if not (np.all(weights > 0) and np.all(weights < 1)):
        problems.append("weights outside (0,1)")
    excess = max(
        float((np.abs(pet_rec.data) - np.abs(pet.data)).max()),
        float((np.abs(ct_rec.data) - np.abs(ct.data)).max()),
    )
    if excess > 0:
        problems.append("rectified magnitude exceeds input")
    if np.any(zero_rec.data != 0):
        problems.append("zero modality not preserved")
    return SuiteResult("crm", not problems, max(excess, 0.0), 0.0,
                       "; ".join(problems) or f"{samples} random inputs")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def metrics_suite(trials: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    problems = []
    for _ in range(trials):
        density = rng.uniform(0.05, 0.6)
        pred = rng.random((16, 16)) < density
        gt = rng.random((16, 16)) < density
        counts = confusion(pred, gt)
        expected = (int((pred & gt).sum()), int((pred & ~gt).sum()), int((~pred & gt).sum()), int((~pred & ~gt).sum()))
        if (counts.tp, counts.fp, counts.fn, counts.tn) != expected:
            problems.append("confusion counts")
        union = (pred | gt).sum()
        if union and iou(counts) != (pred & gt).sum() / union:
            problems.append("iou")
        if acc(counts) != (pred == gt).sum() / pred.size:
            problems.append("acc")
        if abs(f1(counts) - 2 * iou(counts) / (1 + iou(counts))) > 1e-12:
            problems.append("f1 identity")
        if brute_force_distances(pred, gt) is not None:
            worst = max(worst, abs(hd95(pred, gt) - hd95_bruteforce(pred, gt)))
    a, b = np.zeros((5, 5), dtype=np.uint8), np.zeros((5, 5), dtype=np.uint8)
    a[0, 0], b[3, 4] = 1, 1
    if hd95(a, b) != 5.0:
        problems.append("3-4-5 case")
    passed = not problems and worst <= HD95_TOLERANCE
    return SuiteResult("metrics", passed, worst, HD95_TOLERANCE,
                       "; ".join(sorted(set(problems))) or f"{trials} random mask pairs")


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------

DETERMINISM_MODEL = CipaConfig(resolution=32, widths=(4, 8, 16, 32), depths=(1, 1, 1, 1),
                               decoder_depths=(1, 1, 1, 1), state_size=4, crm_token_length=8)


def determinism_suite(seed: int = 0, steps: int = 2) -> SuiteResult:
    spec = SynthSpec(seed=seed, count=2, resolution=32, radius=(2.0, 5.0))
    problems = []
    first, second = render_sample(spec, 1), render_sample(spec, 1)
    if not (np.array_equal(first.ct_hu, second.ct_hu) and np.array_equal(first.pet_suv, second.pet_suv)):
        problems.append("generator")
    pair, _ = synth_pair(spec, 0)
    if not np.array_equal(augment(pair, np.random.default_rng(seed)).pet,
                          augment(pair, np.random.default_rng(seed)).pet):
        problems.append("augmentation")

    optim = OptimConfig(lr=1e-3, steps=steps, batch_size=1)
    batch = stack_pairs([pair])
    traces, params = [], []
    for _ in range(2):
        state = TrainState.create(DETERMINISM_MODEL, optim, seed=seed)
        trace = []
        for _ in range(steps):
            state, log = train_step(batch, state, optim)
            trace.append(log)
        traces.append(trace)
        params.append(state.model.state_dict())
    if traces[0] != traces[1]:
        problems.append("loss trace")
    if any(not np.array_equal(params[0][k], params[1][k]) for k in params[0]):
        problems.append("parameters")
    return SuiteResult("determinism", not problems, float(len(problems)), 0.0,
                       "; ".join(problems) or f"{steps} training steps repeated")


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "lti": lti_suite,
    "gradients": gradients_suite,
    "geometry": geometry_suite,
    "crm": crm_suite,
    "metrics": metrics_suite,
    "determinism": determinism_suite,
}


def run_suites(names: list[str] | None = None, fault: str | None = None,
               on_result: Callable[[SuiteResult], None] | None = None) -> list[SuiteResult]:
    names = list(SUITES) if not names else names
    unknown = sorted(set(names) - set(SUITES))
    if unknown:
        raise ContractError(f"unknown suites {unknown}; choose from {sorted(SUITES)}")
    if fault is not None and fault not in FAULTS:
        raise ContractError(f"unknown fault {fault!r}; choose from {list(FAULTS)}")
    results = []
    with inject_fault(fault) if fault else contextlib.nullcontext():
        for name in names:
            start = time.perf_counter()
            try:
                result = SUITES[name]()
            except Exception as e:  # a crashing suite is a failing suite
                result = SuiteResult(name, False, float("inf"), 0.0, f"{type(e).__name__}: {e}")
            result.seconds = time.perf_counter() - start
            results.append(result)
            if on_result:
                on_result(result)
    return results


# ---------------------------------------------------------------------------
# Scan benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    width: int
    length: int
    scan_seconds: float
    chunked_seconds: float
    chunked_max_diff: float
    growth: float | None = None


def _best_of(repeats: int, fn: Callable[[], object]) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def scan_benchmark(lengths=(256, 1024, 4096), widths=(16, 64), repeats: int = 3,
                   chunk: int = 256, workers: int = 1, seed: int = 0) -> tuple[list[BenchRow], bool]:
    """Time selective_scan and chunked_scan; check growth per length step against linear scaling"""
    rng = np.random.default_rng(seed)
    rows, linear = [], True
    for width in widths:
        ssm = SelectiveSSM(width, rng)
        previous = None
        for length in lengths:
            x = Tensor(rng.normal(size=(1, length, width)).astype(np.float32))
            with tc.no_grad():
                reference = selective_scan(x, ssm)
                scan_seconds = _best_of(repeats, lambda: selective_scan(x, ssm))
            chunked = chunked_scan(x, ssm, chunk, workers)
            chunked_seconds = _best_of(repeats, lambda: chunked_scan(x, ssm, chunk, workers))
            row = BenchRow(width, length, scan_seconds, chunked_seconds,
                           float(np.abs(chunked.data - reference.data).max()))
            if previous is not None:
                row.growth = scan_seconds / previous.scan_seconds
                if row.growth > LINEARITY_SLACK * length / previous.length:
                    linear = False
            rows.append(row)
            previous = row
    return rows, linear
