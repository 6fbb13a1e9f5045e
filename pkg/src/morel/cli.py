"""
Command-line entry point: collect, pretrain, train, eval, viz and plot.

Every command writes into a fresh output location and refuses to touch an
existing one. Exit codes: 0 success, 1 runtime failure, 2 configuration or
argument error.
"""

import argparse
import logging
import statistics
import sys
from pathlib import Path
from typing import List, Optional, Sequence, get_args

from pydantic import ValidationError

from .agent import evaluate, load_agent
from .baselines import compare_variants, merge_runs, pretrain_autoencoder, run_variant
from .checkpoint import Checkpoint, load
from .config import ConfigurationError, RuntimeSettings, load_run_config, write_run_config
from .dataset import FramePairDataset, collect_random
from .schemas import FULL_SCALE_DATASET_FRAMES, PretrainConfig, RunConfig, VariantName, VariantSpec
from .segtrain import load_segnet, pretrain
from .viz import evaluate_iou, export_episode, plot_learning_curves

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _fresh(path: Path) -> Path:
    if path.exists():
        raise ConfigurationError(f"refusing to overwrite existing output {path}")
    return path


def _run_config(path: Optional[str]) -> RunConfig:
    return load_run_config(path) if path else RunConfig()


def _parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigurationError(f"--seeds must be a comma-separated list of integers: {text}") from e
    if not seeds:
        raise ConfigurationError("--seeds is empty")
    return seeds


def _checkpoint(path: Optional[str]) -> Optional[Checkpoint]:
    if path is None:
        return None
    if not Path(path).is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return load(path)


def cmd_collect(args: argparse.Namespace) -> int:
    config = _run_config(args.config)
    n_frames = args.frames or (FULL_SCALE_DATASET_FRAMES if args.full_scale else config.collect.n_frames)
    seed = config.collect.seed if args.seed is None else args.seed
    out = _fresh(Path(args.out))
    dataset = collect_random(config.env, seed, n_frames, out)
    summary = dataset.summary()
    print(f"frames={summary['frames']} pairs={summary['pairs']} checksum={summary['checksum']}")
    return 0


def _pretrain_config(config: RunConfig, args: argparse.Namespace) -> PretrainConfig:
    base = config.pretrain
    if args.full_scale:
        base = PretrainConfig.full_scale(
            **base.model_dump(exclude={"learning_rate", "batch_size", "total_steps", "warmup_steps"})
        )
    if args.steps is not None:
        # keep the configured warmup ratio
        warmup = base.warmup_steps
        if args.steps > 0 and base.total_steps > 0:
            warmup = max(1, round(args.steps * base.warmup_steps / base.total_steps))
        elif args.steps > 0:
            warmup = min(warmup, args.steps)
        base = PretrainConfig(**{**base.model_dump(), "total_steps": args.steps, "warmup_steps": warmup})
    return base


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = _run_config(args.config)
    pretrain_config = _pretrain_config(config, args)
    out = _fresh(Path(args.out))
    dataset = FramePairDataset(args.dataset)
    resume = _checkpoint(args.resume)
    if pretrain_config.total_steps > 0 and len(dataset) < pretrain_config.batch_size:
        raise ConfigurationError(
            f"{args.dataset} holds {len(dataset)} pairs, fewer than batch size {pretrain_config.batch_size}"
        )
    print(
        f"lr={pretrain_config.learning_rate} batch={pretrain_config.batch_size} "
        f"steps={pretrain_config.total_steps} warmup={pretrain_config.warmup_steps}"
    )
    out.mkdir(parents=True)
    write_run_config(config.model_copy(update={"pretrain": pretrain_config}), out)
    if args.autoencoder:
        checkpoint = pretrain_autoencoder(dataset, pretrain_config, out, resume=resume)
    else:
        checkpoint = pretrain(dataset, pretrain_config, out, resume=resume)
    print(f"checkpoint={out / 'final.ckpt'} step={checkpoint.step}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args.config)
    spec = VariantSpec(name=args.variant)
    train_update = {"algo": args.algo}
    if args.steps is not None:
        train_update["total_env_steps"] = args.steps
    config = config.model_copy(
        update={"variant": spec, "train": config.train.model_copy(update=train_update)}
    )
    seeds = _parse_seeds(args.seeds)
    if args.seg_checkpoint and spec.init_source != "segnet":
        logger.warning(f"--seg-checkpoint is ignored for variant {spec.name}")
        args.seg_checkpoint = None
    results = run_variant(
        config,
        seeds,
        Path(args.out),
        seg_checkpoint=_checkpoint(args.seg_checkpoint),
        ae_checkpoint=_checkpoint(args.ae_checkpoint),
    )
    for result in results:
        print(f"run={result.run_dir} env_steps={result.env_steps} mean_return={result.final_mean_return:.3f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _run_config(args.config)
    if args.episodes < 1:
        raise ConfigurationError(f"--episodes must be >= 1, got {args.episodes}")
    model = load_agent(_checkpoint(args.checkpoint))
    returns = evaluate(model, config.env, args.episodes, args.seed, greedy=args.greedy)
    spread = statistics.stdev(returns) if len(returns) > 1 else 0.0
    print(f"episodes={len(returns)} mean_return={statistics.mean(returns):.3f} sd={spread:.3f}")
    if args.iou_frames and getattr(model, "has_segmentation", False):
        report = evaluate_iou(model.motion, config.env, args.iou_frames, args.seed, args.threshold)
        print(f"mean_iou={report.mean:.3f} frames={len(report.per_frame)}")
    return 0


def _segnet_from(checkpoint: Checkpoint):
    if checkpoint.meta.get("kind") == "agent":
        model = load_agent(checkpoint)
        if not getattr(model, "has_segmentation", False):
            raise ConfigurationError("this agent has no segmentation branch to visualize")
        return model.motion
    return load_segnet(checkpoint)


def cmd_viz(args: argparse.Namespace) -> int:
    config = _run_config(args.config)
    model = _segnet_from(_checkpoint(args.checkpoint))
    out = _fresh(Path(args.out))
    written = export_episode(model, config.env, out, args.steps, args.seed, args.threshold)
    if args.iou_frames:
        report = evaluate_iou(
            model, config.env, args.iou_frames, args.seed, args.threshold, out / "iou.csv"
        )
        print(f"mean_iou={report.mean:.3f}")
    print(f"images={len(written)} manifest={out / 'manifest.jsonl'}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    out = _fresh(Path(args.out))
    run_dirs = sorted(
        p for root in args.runs for p in Path(root).iterdir() if (p / "metrics.csv").is_file()
    )
    if not run_dirs:
        raise ConfigurationError(f"no run directories with metrics.csv under {args.runs}")
    merged = merge_runs(run_dirs)
    summary = out.with_suffix(".csv")
    merged.to_csv(summary, index=False)
    plot_learning_curves(merged, out, title=args.title)
    print(f"plot={out} summary={summary} runs={len(run_dirs)}")

    if args.reference not in set(merged["variant"]):
        logger.info(f"No {args.reference} runs; skipping the steps-to-threshold table")
        return 0
    table = compare_variants(merged, args.reference, args.fraction)
    table.to_csv(out.with_name(f"{out.stem}_thresholds.csv"), index=False)
    for row in table.itertuples():
        print(
            f"algo={row.algo} variant={row.variant} runs={row.runs} threshold={row.threshold:.3f} "
            f"steps_to_threshold={row.median_steps_to_threshold:g} final_return={row.median_final_return:.3f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morel", description="Motion-oriented RL experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="Record random-policy frames")
    p.add_argument("--config", help="Run config TOML")
    p.add_argument("--out", required=True, help="Dataset file to create")
    p.add_argument("--frames", type=int, help="Number of frames (overrides config)")
    p.add_argument("--seed", type=int, help="Collection seed (overrides config)")
    p.add_argument("--paper-scale", "--full-scale", dest="full_scale", action="store_true", help="Collect 100k frames")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("pretrain", help="Pretrain the segmentation network or the autoencoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="Run directory to create")
    p.add_argument("--autoencoder", action="store_true")
    p.add_argument("--steps", type=int, help="Total optimization steps (overrides config)")
    p.add_argument("--resume", help="Periodic checkpoint of an interrupted run to continue from")
    p.add_argument(
        "--paper-scale", "--full-scale", dest="full_scale", action="store_true",
        help="lr 1e-4, batch 16, 250k steps with 100k warmup",
    )
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="Train one variant over several seeds")
    p.add_argument("--config")
    p.add_argument("--algo", choices=["a2c", "ppo"], default="a2c")
    p.add_argument("--variant", default="morel_joint", choices=get_args(VariantName))
    p.add_argument("--seg-checkpoint")
    p.add_argument("--ae-checkpoint")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--steps", type=int, help="Total env steps per seed (overrides config)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a trained agent")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--iou-frames", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="Export frame | overlay | flow images")
    p.add_argument("--checkpoint", required=True, help="Segnet or agent checkpoint")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iou-frames", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("plot", help="Merge run metrics into learning curves")
    p.add_argument("--runs", nargs="+", required=True, help="Directories holding run directories")
    p.add_argument("--out", required=True, help="PNG to create; the merged CSV sits next to it")
    p.add_argument("--title", default="")
    p.add_argument("--reference", default="baseline_standard", help="Variant that sets the return threshold")
    p.add_argument("--fraction", type=float, default=0.8, help="Threshold as a fraction of the reference's final return")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = RuntimeSettings()
    logging.basicConfig(level=settings.log_level, format=LOG_FORMAT)
    settings.apply()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception(f"{args.command} failed")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
