#!/usr/bin/env python3
"""
CIPA command-line interface

Commands:
1. synth    - generate synthetic PET-CT shards
2. train    - train the network, writing checkpoints and a CSV loss log
3. eval     - score a checkpoint on a shard; JSON report + PNG overlays
4. infer    - predict the mask of one PET/CT pair
5. verify   - run the oracle suites (LTI, gradients, geometry, CRM, metrics, determinism)
6. bench    - time the selective scan across sequence lengths
7. summary  - parameter counts for the configured model and its ablations
8. features - dump the per-stage DCIM maps of one pair

Exit codes: 0 ok, 1 validation error, 2 suite failure, 3 numeric fault.
"""

import argparse
import contextlib
import csv
import json
import os
import sys
import traceback
from datetime import datetime
from pathlib import Path

import numpy as np
from PIL import Image
from tqdm import tqdm

import tensor_core as tc
from cipa_net import Checkpoint, TrainState, infer, load_checkpoint, parameter_summary, save_checkpoint, train_step
from config import CIPA_VERBOSE, RunConfig
from data_pipeline import ModalityPair, batch_for_step, preprocess_ct, preprocess_pet, read_dataset, synth_generate, write_dataset
from dcim import DCIM_VARIANTS
from errors import CipaError, NumericFault, SuiteFailure, ValidationError, exit_code_for
from metrics import evaluate_dataset, write_report
from verification import FAULTS, SUITES, run_suites, scan_benchmark

TP_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)
LOSS_LOG_HEADER = ["step", "lr", "loss", "ce", "dice"]

VERBOSE = CIPA_VERBOSE


def say(message: str = "") -> None:
    if VERBOSE:
        print(message)


def banner(title: str) -> None:
    say("=" * 70)
    say(title)
    say("=" * 70)


# ---------------------------------------------------------------------------
# Run directories and images
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def run_directory(path: Path, force: bool = False, allow_existing: bool = False):
    """Create (or reuse with --force) a run directory owned by this process"""
    path = Path(path)
    if path.exists() and any(p.name != ".lock" for p in path.iterdir()) and not (force or allow_existing):
        raise ValidationError(f"{path} exists and is not empty (use --force to reuse it)")
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(f"{path} is locked by another process ({lock})") from None
    with os.fdopen(fd, "w") as f:
        f.write(f"{os.getpid()}\n")
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def overlay_image(base: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Grayscale base with TP green, FP red, FN blue"""
    gray = np.clip(np.asarray(base, dtype=np.float64), 0, 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    rgb[pred & gt] = TP_COLOR
    rgb[pred & ~gt] = FP_COLOR
    rgb[~pred & gt] = FN_COLOR
    return rgb


def heatmap(feature: np.ndarray) -> np.ndarray:
    """Channel-mean of an [h,w,C] map, min-max scaled to uint8"""
    plane = np.asarray(feature, dtype=np.float64).mean(axis=-1)
    span = plane.max() - plane.min()
    scaled = (plane - plane.min()) / span if span > 0 else np.zeros_like(plane)
    return (scaled * 255).round().astype(np.uint8)


def save_png(path: Path, pixels: np.ndarray) -> Path:
    Image.fromarray(np.ascontiguousarray(pixels)).save(path)
    return path


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_run_config(args).with_overrides(
        data_dir=args.out, synth={"count": args.count, "resolution": args.resolution},
        model={"resolution": args.resolution},
    ).validate()
    banner("📦 Synthesizing PET-CT shards")
    with run_directory(Path(cfg.data_dir), args.force) as root:
        dataset = synth_generate(cfg.synth, workers=cfg.threads)
        manifest = write_dataset(root, dataset, workers=cfg.threads)
    stats = dataset.stats
    say(f"✅ {cfg.synth.count} pairs ({len(dataset.ids('train'))} train / {len(dataset.ids('test'))} test)")
    say(f"📊 {stats['tumors']} tumors, mean area {stats['mean_area']:.1f} px")
    say(f"   < {stats['small_threshold_px']:.1f} px: {stats['fraction_small']:.1%}   "
        f"> {stats['large_threshold_px']:.1f} px: {stats['fraction_large']:.1%}")
    edges, counts = stats["histogram"]["edges"], stats["histogram"]["counts"]
    top = max(counts) if counts else 1
    for low, high, count in zip(edges[:-1], edges[1:], counts):
        say(f"   {low:>5}-{high:<5} {'█' * round(30 * count / max(top, 1))} {count}")
    say(f"💾 {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    model_changes = {"dcim_variant": args.dcim_variant, "region_side": args.region_side}
    if args.ablate_crm:
        model_changes["enable_crm"] = False
    if args.ablate_dcim:
        model_changes["enable_dcim"] = False
    cfg = cfg.with_overrides(
        data_dir=args.data, model=model_changes,
        optim={"steps": args.steps, "batch_size": args.batch_size, "lr": args.lr,
               "checkpoint_every": args.checkpoint_every},
    ).validate()
    optim = cfg.optim
    run_dir = Path(args.out or Path(cfg.out_dir) / "train")

    dataset = read_dataset(cfg.data_dir)
    if dataset.resolution != cfg.model.resolution:
        raise ValidationError(f"dataset resolution {dataset.resolution} != model.resolution {cfg.model.resolution}")
    train_pairs = dataset.splits.get("train", [])
    if not train_pairs:
        raise ValidationError(f"{cfg.data_dir}: no training pairs")

    banner(f"🏋️ Training CIPA  (started {datetime.now().isoformat(timespec='seconds')})")
    with run_directory(run_dir, args.force, allow_existing=bool(args.resume)) as run_dir:
        cfg.echo(run_dir)
        ckpt_config = cfg.checkpoint_echo()
        log_path = run_dir / "loss.csv"
        rows: list[list[str]] = []
        if args.resume:
            ckpt = load_checkpoint(args.resume)
            if ckpt.model_config() != cfg.model:
                raise ValidationError(f"{args.resume}: checkpoint model config differs from the run config")
            state = ckpt.restore(optim)
            if log_path.exists():
                with open(log_path, newline="") as f:
                    rows = [row for row in list(csv.reader(f))[1:] if int(row[0]) < state.step]
            say(f"📥 Resumed from {args.resume} at step {state.step}")
        else:
            state = TrainState.create(cfg.model, optim, seed=cfg.seed)
        say(f"   parameters: {state.model.num_parameters():,}   lr(0) = {optim.lr:g}")

        with open(log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(LOSS_LOG_HEADER)
            writer.writerows(rows)
            progress = tqdm(range(state.step, optim.steps), disable=not VERBOSE, desc="train")
            for step in progress:
                batch = batch_for_step(train_pairs, cfg.seed, step, optim.batch_size)
                try:
                    state, log = train_step(batch, state, optim)
                except NumericFault as e:
                    fault = {"step": step, "op": e.op, "batch_ids": e.batch_ids, "message": str(e)}
                    (run_dir / "fault.json").write_text(json.dumps(fault, indent=2, sort_keys=True) + "\n")
                    raise
                writer.writerow(log.as_row())
                f.flush()
                progress.set_postfix(loss=f"{log.loss:.4f}", lr=f"{log.lr:.2e}")
                if state.step % optim.checkpoint_every == 0 or state.step == optim.steps:
                    save_checkpoint(run_dir / "checkpoints" / f"step_{state.step:06d}.ckpt",
                                    Checkpoint.from_state(state, ckpt_config))

        final = save_checkpoint(run_dir / "final.ckpt", Checkpoint.from_state(state, ckpt_config))
        say(f"💾 {final}")
        test_pairs = dataset.splits.get("test", [])
        if test_pairs:
            preds = {p.id: infer(p, state.model) for p in test_pairs}
            report = evaluate_dataset(preds, {p.id: p.mask for p in test_pairs}, dataset.spacing, cfg.threads)
            write_report(run_dir / "metrics.json", report)
            _print_means("held-out", report)
    return 0


def _print_means(label: str, report: dict) -> None:
    mean = report["mean"]
    say(f"📊 {label} ({report['count']} images): IoU {mean['iou']:.4f}  F1 {mean['f1']:.4f}  "
        f"Acc {mean['acc']:.4f}  HD95 {mean['hd95']:.2f}")


def cmd_eval(args) -> int:
    cfg = load_run_config(args).validate()
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    dataset = read_dataset(args.data or cfg.data_dir, [args.split])
    if dataset.resolution != model.config.resolution:
        raise ValidationError(
            f"shard resolution {dataset.resolution} != checkpoint resolution {model.config.resolution}"
        )
    pairs = dataset.splits[args.split]
    banner(f"📊 Evaluating {args.checkpoint} on {args.split} ({len(pairs)} pairs)")
    with run_directory(Path(args.out or Path(cfg.out_dir) / "eval"), args.force) as out_dir:
        overlays = out_dir / "overlays"
        overlays.mkdir(exist_ok=True)
        preds = {}
        for pair in tqdm(pairs, disable=not VERBOSE, desc="eval"):
            preds[pair.id] = infer(pair, model)
            save_png(overlays / f"{pair.id}.png", overlay_image(pair.ct, preds[pair.id], pair.mask))
        report = evaluate_dataset(preds, {p.id: p.mask for p in pairs}, dataset.spacing, cfg.threads)
        path = write_report(out_dir / "report.json", report)
    _print_means(args.split, report)
    say(f"💾 {path}")
    return 0


def cmd_infer(args) -> int:
    cfg = load_run_config(args).validate()
    ckpt = load_checkpoint(args.checkpoint)
    if args.pet and args.ct:
        pet, ct = tc.load_tsr1(args.pet), tc.load_tsr1(args.ct)
        if args.raw:
            pet, ct = preprocess_pet(pet), preprocess_ct(ct)
        pair = ModalityPair(pet=pet, ct=ct, id=Path(args.pet).name.split(".")[0])
    elif args.id:
        dataset = read_dataset(args.data or cfg.data_dir)
        matches = [p for pairs in dataset.splits.values() for p in pairs if p.id == args.id]
        if not matches:
            raise ValidationError(f"no pair with id {args.id!r} in {args.data or cfg.data_dir}")
        pair = matches[0]
    else:
        raise ValidationError("infer needs --pet and --ct, or --id")
    mask = infer(pair, ckpt)
    with run_directory(Path(args.out or Path(cfg.out_dir) / "infer"), args.force) as out_dir:
        tc.save_tsr1(out_dir / f"{pair.id}.mask.tsr", mask)
        save_png(out_dir / f"{pair.id}.mask.png", (mask * 255).astype(np.uint8))
    say(f"✅ {pair.id}: {int(mask.sum())} tumor pixels")
    say(f"💾 {out_dir}")
    return 0


def cmd_verify(args) -> int:
    banner(f"🧪 Verification suites{f'  (injected fault: {args.inject_fault})' if args.inject_fault else ''}")

    def report(result) -> None:
        mark = "✅" if result.passed else "❌"
        say(f"{mark} {result.name:<12} max error {result.max_error:.3e} (tol {result.tolerance:.0e})  "
            f"{result.seconds:6.1f}s  {result.detail}")

    results = run_suites(args.suite, args.inject_fault, report)
    failed = [r.name for r in results if not r.passed]
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    if failed:
        raise SuiteFailure(f"suites failed: {', '.join(failed)}", failed)
    say(f"✅ all {len(results)} suites passed")
    return 0


def cmd_bench(args) -> int:
    cfg = load_run_config(args).validate()
    banner("⏱️ Selective scan benchmark")
    rows, linear = scan_benchmark(args.lengths, args.widths, args.repeats, args.chunk, cfg.threads, cfg.seed)
    say(f"{'D':>4} {'L':>6} {'scan s':>10} {'growth':>7} {'chunked s':>10} {'max diff':>10}")
    for row in rows:
        growth = f"{row.growth:.2f}x" if row.growth is not None else "-"
        say(f"{row.width:>4} {row.length:>6} {row.scan_seconds:>10.4f} {growth:>7} "
            f"{row.chunked_seconds:>10.4f} {row.chunked_max_diff:>10.2e}")
    payload = {"rows": [vars(r) for r in rows], "linear": linear}
    out = Path(args.out or Path(cfg.out_dir) / "bench")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench.json"
    path.write_text(json.dumps(payload, indent=2) + "\n")
    say(f"💾 {path}")
    worst_diff = max(r.chunked_max_diff for r in rows)
    if not linear or worst_diff > 1e-5:
        raise SuiteFailure(f"bench: linear={linear}, chunked max diff {worst_diff:.2e}", ["bench"])
    say("✅ scan time grows linearly and chunked output matches")
    return 0


def cmd_summary(args) -> int:
    cfg = load_run_config(args).validate()
    banner("📊 Parameter summary")
    summary = parameter_summary(cfg.model, cfg.seed)
    say(f"configured model: {summary['configured']:,}")
    for name, count in summary["ablations"].items():
        say(f"   {name:<22} {count:>12,}")
    say("DCIM variants:")
    for name, count in summary["dcim_variants"].items():
        say(f"   {name:<22} {count:>12,}")
    if args.json:
        Path(args.json).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        say(f"💾 {args.json}")
    return 0


def cmd_features(args) -> int:
    cfg = load_run_config(args).validate()
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    dataset = read_dataset(args.data or cfg.data_dir)
    pairs = [p for split in ("test", "train") for p in dataset.splits.get(split, [])]
    pair = next((p for p in pairs if p.id == args.id), None) if args.id else (pairs[0] if pairs else None)
    if pair is None:
        raise ValidationError(f"no pair {args.id or ''} found in {args.data or cfg.data_dir}")
    with tc.no_grad():
        _, features = model.forward_pair(pair, return_features=True)
    banner(f"📸 Stage features of {pair.id}")
    with run_directory(Path(args.out or Path(cfg.out_dir) / "features"), args.force) as out_dir:
        for stage, feats in enumerate(features, 1):
            maps = {"pet": feats.pet_rectified, "ct": feats.ct_rectified, "fused": feats.fused,
                    "region": feats.region, "local": feats.local}
            for name, tensor in maps.items():
                if tensor is None:
                    continue
                array = tensor.data[0]
                tc.save_tsr1(out_dir / f"stage{stage}.{name}.tsr", array)
                save_png(out_dir / f"stage{stage}.{name}.png", heatmap(array))
            say(f"✅ stage {stage}: {feats.fused.shape[1]}x{feats.fused.shape[2]}x{feats.fused.shape[3]}")
    say(f"💾 {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _region_side(value: str):
    parts = [int(v) for v in value.split(",")]
    return parts[0] if len(parts) == 1 else tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
    common.add_argument("--quiet", action="store_true", help="only report errors")

    parser = argparse.ArgumentParser(prog="cipa", description="Cross-modal PET-CT tumor segmentation")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", parents=[common], help="generate synthetic shards")
    p.add_argument("--count", type=int)
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="shard directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--ablate-crm", action="store_true")
    p.add_argument("--ablate-dcim", action="store_true")
    p.add_argument("--dcim-variant", choices=sorted(DCIM_VARIANTS))
    p.add_argument("--region-side", type=_region_side, help="one side or four comma-separated")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="shard directory")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("infer", parents=[common], help="predict one mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pet", help="PET plane (TSR1)")
    p.add_argument("--ct", help="CT plane (TSR1)")
    p.add_argument("--raw", action="store_true", help="planes hold SUV / HU values")
    p.add_argument("--data", help="shard directory (with --id)")
    p.add_argument("--id", help="pair id inside the shard")
    p.set_defaults(func=cmd_infer)

    p = commands.add_parser("verify", aliases=["gradcheck"], parents=[common], help="run the oracle suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES))
    p.add_argument("--inject-fault", choices=FAULTS)
    p.add_argument("--json", help="write suite results here")
    p.set_defaults(func=cmd_verify)

    p = commands.add_parser("bench", parents=[common], help="time the selective scan")
    p.add_argument("--lengths", type=int, nargs="+", default=[256, 1024, 4096])
    p.add_argument("--widths", type=int, nargs="+", default=[16, 64])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--chunk", type=int, default=256)
    p.set_defaults(func=cmd_bench)

    p = commands.add_parser("summary", parents=[common], help="parameter counts")
    p.add_argument("--json", help="write the summary here")
    p.set_defaults(func=cmd_summary)

    p = commands.add_parser("features", parents=[common], help="dump DCIM stage maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="shard directory")
    p.add_argument("--id", help="pair id (default: first test pair)")
    p.set_defaults(func=cmd_features)
    return parser


def main(argv: list[str] | None = None) -> int:
    global VERBOSE
    args = build_parser().parse_args(argv)
    VERBOSE = CIPA_VERBOSE and not args.quiet
    try:
        return args.func(args)
    except CipaError as e:
        print(f"\n❌ {e}", file=sys.stderr)
        return exit_code_for(e)
    except OSError as e:
        print(f"\n❌ {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"\n❌ Unexpected error: {e}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
