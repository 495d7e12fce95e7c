"""
Command-line entry point.

Subcommands:
- reorganize: annotations -> class split -> split manifest
- train: episodic training -> checkpoint + JSONL log
- infer: one held-out episode -> predictions document
- eval: held-out episodes -> result document + plots
- sweep: eval at N = 1..k supports on the same episodes
- gradcheck / selftest: numerical verification suites
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import torch

from .annotations import AnnotationFormat, class_labels, ingest_annotations
from .circuit_breaker import TrainingDiverged
from .config import LOG_LEVEL, NUM_THREADS, OUTPUT_DIR, RunConfig, config_to_dict, full_schedule, load_config
from .engine import CHECKPOINT_FILE, Checkpoint, infer_long, load_checkpoint, run_episodes, train
from .episodes import build_source
from .evaluation import EvalResult, evaluate, report
from .models import Phase
from .selftest import GRADCHECK_TOLERANCE, all_passed, run_gradchecks, run_selftest
from .splits import reorganize_common_instance, reorganize_multi_instance, split_classes, write_manifest

MANIFEST_FILE = "manifest.json"
PREDICTIONS_FILE = "predictions.json"

log = logging.getLogger("commonloc")


def setup_logging(level: str = LOG_LEVEL) -> None:
    log.setLevel(level)
    if not log.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(
            "%(asctime)s [%(levelname)s] %(message)s",
            datefmt="%H:%M:%S",
        ))
        log.addHandler(handler)


def _overrides(args: argparse.Namespace) -> list[str]:
    """Translate convenience flags into config overrides (applied after --set)."""
    pairs = list(args.set or [])
    flag_keys = {
        "iters": "train.iterations",
        "supports": "train.num_supports",
        "noisy_count": "eval.noisy_count",
        "episodes": "eval.episodes",
        "annotations": "data.annotations",
        "format": "data.annotation_format",
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            pairs.append(f"{key}={value}")
    if getattr(args, "synthetic", False):
        pairs.append("data.source=synthetic")
    for attr, key in (
        ("noisy_same_class", "eval.noisy_same_class"),
        ("image_support", "eval.image_support"),
        ("micro_map", "eval.micro"),
    ):
        if getattr(args, attr, False):
            pairs.append(f"{key}=true")
    return pairs


def _checkpoint(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> Checkpoint:
    path = Path(args.checkpoint) if args.checkpoint else out_dir / CHECKPOINT_FILE
    if not path.exists():
        raise FileNotFoundError(f"No checkpoint at {path}; run `commonloc train` first or pass --checkpoint")
    ckpt = load_checkpoint(path, cfg)
    log.info(f"Loaded checkpoint {path} (id {ckpt.checkpoint_id}, iteration {ckpt.iteration})")
    return ckpt


def _metadata(cfg: RunConfig, ckpt: Checkpoint) -> dict[str, Any]:
    return {
        "config": config_to_dict(cfg),
        "seed": cfg.train.seed,
        "eval_seed": cfg.synthetic.eval_seed,
        "checkpoint_id": ckpt.checkpoint_id,
        "checkpoint_iteration": ckpt.iteration,
    }


def _evaluate(ckpt: Checkpoint, num_supports: int) -> EvalResult:
    cfg = ckpt.cfg
    source = build_source(cfg, Phase.TEST, num_supports)
    results = run_episodes(ckpt.net, cfg, source, cfg.eval.episodes)
    return evaluate(results, cfg.eval.thresholds, micro=cfg.eval.micro)


def cmd_reorganize(cfg: RunConfig, out_dir: Path) -> int:
    d = cfg.data
    if not d.annotations:
        raise ValueError("reorganize needs --annotations (or data.annotations)")
    videos = ingest_annotations(d.annotations, AnnotationFormat(d.annotation_format), d.default_fps or None)
    split = split_classes(class_labels(videos), d.split_mode, d.split_seed)
    if d.variant == "multi":
        data = reorganize_multi_instance(videos, split)
    else:
        data = reorganize_common_instance(videos, split, d.max_frames)
    path = write_manifest(data, out_dir / MANIFEST_FILE)
    for phase in Phase:
        print(f"{phase.value}: {len(split.classes(phase))} classes, {len(data.phase_videos(phase))} videos")
    print(f"Manifest: {path}")
    return 0


def cmd_train(cfg: RunConfig, out_dir: Path) -> int:
    log.info("=" * 60)
    log.info("COMMONLOC TRAINING")
    log.info("=" * 60)
    log.info(f"Source: {cfg.data.source}")
    log.info(f"Supports: {cfg.train.num_supports}, iterations: {cfg.train.iterations}, seed: {cfg.train.seed}")
    log.info(f"Output: {out_dir}")
    log.info("=" * 60)
    result = train(cfg, build_source(cfg, Phase.TRAIN), out_dir)
    log.info("=" * 60)
    log.info(f"TRAINING COMPLETE - final loss {result.losses[-1]:.4f}" if result.losses else "TRAINING COMPLETE")
    log.info("=" * 60)
    print(f"Checkpoint: {result.checkpoint}")
    print(f"Log: {result.log_file}")
    return 0


def cmd_infer(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    ckpt = _checkpoint(args, cfg, out_dir)
    data = build_source(ckpt.cfg, Phase.TEST).get(args.episode)
    predictions = infer_long(ckpt.net, ckpt.cfg, data)
    doc = {
        "schema_version": 1,
        "episode_id": data.episode.episode_id,
        **predictions.to_dict(),
        "metadata": _metadata(ckpt.cfg, ckpt),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / PREDICTIONS_FILE
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    for p in predictions.top(5):
        print(f"  [{p.segment.start:8.1f}, {p.segment.end:8.1f}]  {p.score:.4f}")
    print(f"Predictions: {path}")
    return 0


def _print_result(result: EvalResult) -> None:
    for t in result.thresholds:
        print(f"  mAP@{t:g}: {result.map[t]:.4f}")
    print(f"  mean: {result.mean_map:.4f} ({result.num_episodes} episodes)")


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    ckpt = _checkpoint(args, cfg, out_dir)
    result = _evaluate(ckpt, ckpt.cfg.train.num_supports)
    path = report(result, _metadata(ckpt.cfg, ckpt), out_dir / "eval")
    _print_result(result)
    print(f"Result: {path}")
    return 0


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig, out_dir: Path) -> int:
    ckpt = _checkpoint(args, cfg, out_dir)
    sweep: dict[int, EvalResult] = {}
    for n in range(1, args.max_supports + 1):
        log.info(f"Sweep: {n} support(s)")
        sweep[n] = _evaluate(ckpt, n)
    main_n = min(args.max_supports, ckpt.cfg.train.num_supports)
    path = report(sweep[main_n], _metadata(ckpt.cfg, ckpt), out_dir / "sweep", sweep=sweep)
    for n, result in sweep.items():
        print(f"N={n}: mAP@{result.thresholds[0]:g} {result.map[result.thresholds[0]]:.4f}, mean {result.mean_map:.4f}")
    print(f"Result: {path}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    errors = run_gradchecks(args.seed)
    for name, err in errors.items():
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAILED"
        print(f"  {name:<24} {err:.3e}  {status}")
    return 0 if all(err < GRADCHECK_TOLERANCE for err in errors.values()) else 1


def cmd_selftest(args: argparse.Namespace) -> int:
    checks = run_selftest(args.seed, args.instances)
    for check in checks:
        print(f"  {check.name:<24} {'ok' if check.passed else 'FAILED'}  {check.detail}")
    return 0 if all_passed(checks) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="commonloc - few-shot common action localization",
        prog="commonloc",
    )
    parser.add_argument("--log-level", default=LOG_LEVEL, help=f"Logging level (default: {LOG_LEVEL})")
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", "-c", help="JSON config document")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Config override (repeatable)")
        p.add_argument("--out", "-o", help=f"Output directory (default: {OUTPUT_DIR})")
        return p

    reorg = with_config(subparsers.add_parser("reorganize", help="Build a split manifest from annotations"))
    reorg.add_argument("--annotations", "-a", help="ActivityNet JSON file or Thumos annotation directory")
    reorg.add_argument("--format", "-f", choices=[f.value for f in AnnotationFormat], help="Annotation format")

    def with_data(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--synthetic", action="store_true", help="Use synthetic episodes")
        p.add_argument("--supports", "-n", type=int, help="Support videos per episode")
        return p

    train_parser = with_data(with_config(subparsers.add_parser("train", help="Train on episodes")))
    train_parser.add_argument("--iters", type=int, help="Training iterations")
    train_parser.add_argument(
        "--full-schedule", action="store_true", help="lr 1e-5 decayed to 1e-6 at 25k, 40k iterations"
    )

    def with_eval(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        with_data(with_config(p))
        p.add_argument("--checkpoint", help=f"Checkpoint file (default: <out>/{CHECKPOINT_FILE})")
        p.add_argument("--noisy-count", type=int, help="Supports replaced by other-class clips")
        p.add_argument("--noisy-same-class", action="store_true", help="Noisy supports share one wrong class")
        p.add_argument("--image-support", action="store_true", help="Single-frame supports")
        return p

    infer_parser = with_eval(subparsers.add_parser("infer", help="Localize the common action in one episode"))
    infer_parser.add_argument("--episode", type=int, default=0, help="Held-out episode index (default: 0)")

    eval_parser = with_eval(subparsers.add_parser("eval", help="mAP over held-out episodes"))
    eval_parser.add_argument("--episodes", type=int, help="Number of held-out episodes")
    eval_parser.add_argument("--micro-map", action="store_true", help="Pool predictions across episodes")

    sweep_parser = with_eval(subparsers.add_parser("sweep", help="mAP against the number of supports"))
    sweep_parser.add_argument("--episodes", type=int, help="Number of held-out episodes")
    sweep_parser.add_argument("--micro-map", action="store_true", help="Pool predictions across episodes")
    sweep_parser.add_argument("--max-supports", type=int, default=6, help="Largest N (default: 6)")

    grad_parser = subparsers.add_parser("gradcheck", help="Finite-difference gradient checks")
    grad_parser.add_argument("--seed", type=int, default=0)

    self_parser = subparsers.add_parser("selftest", help="Brute-force oracle suites")
    self_parser.add_argument("--seed", type=int, default=0)
    self_parser.add_argument("--instances", type=int, default=1000, help="Random instances per suite")
    return parser


def run_command(argv: list[str] | None = None) -> int:
    """Parse `argv`, run the subcommand and return its exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level.upper())
    if NUM_THREADS:
        torch.set_num_threads(NUM_THREADS)

    if args.command is None:
        parser.print_help()
        return 1
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "selftest":
            return cmd_selftest(args)

        if getattr(args, "full_schedule", False) and getattr(args, "iters", None) is not None:
            print("Error: --full-schedule sets the iteration count; drop --iters")
            return 1
        cfg = load_config(args.config, _overrides(args))
        if getattr(args, "full_schedule", False):
            cfg = full_schedule(cfg)
        out_dir = Path(args.out) if args.out else OUTPUT_DIR
        if args.command == "reorganize":
            return cmd_reorganize(cfg, out_dir)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "infer":
            return cmd_infer(args, cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(args, cfg, out_dir)
        if args.command == "sweep":
            return cmd_sweep(args, cfg, out_dir)
    except TrainingDiverged as e:
        print(f"Error: {e}")
        print(f"Snapshot: {json.dumps(e.snapshot)}")
        return 1
    except (ValueError, OSError, RuntimeError, ArithmeticError) as e:
        print(f"Error: {e}")
        return 1
    parser.print_help()
    return 1


def main() -> None:
    """CLI entry point."""
    sys.exit(run_command())


if __name__ == "__main__":
    main()
