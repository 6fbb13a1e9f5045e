"""
Ablation grid: the standard single-path agent, the randomly initialized
dual-path agent, the autoencoder-pretrained agent and the transfer-only
ablation, plus run merging for comparison curves.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from .agent import MorelActorCritic, StandardActorCritic, TrainResult, train, transfer_weights
from .checkpoint import Checkpoint, IncompatibleCheckpointError, load_state
from .config import ConfigurationError, load_run_config, write_run_config
from .dataset import FramePairDataset
from .env import NUM_ACTIONS
from .schemas import PretrainConfig, RunConfig, VariantSpec
from .segnet import Encoder, MaskDecoder, seeded_init
from .segtrain import run_pretraining

logger = logging.getLogger(__name__)

DEFAULT_NUM_MASKS = 20


class FrameAutoencoder(nn.Module):
    """Segnet encoder with a single-channel decoder head and no translation branch."""

    def __init__(self, frame_size: int = 84, seed: Optional[int] = None):
        super().__init__()
        self.frame_size = frame_size
        self.encoder = Encoder(in_channels=2, frame_size=frame_size)
        self.decoder = MaskDecoder(1, frame_size=frame_size)
        if seed is not None:
            seeded_init(self, seed)

    def reset_parameters(self) -> None:
        self.encoder.reset_parameters()
        self.decoder.reset_parameters()

    def forward(self, pair: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(pair))

    def architecture(self) -> dict:
        return {"kind": "autoencoder", "frame_size": self.frame_size}


def pretrain_autoencoder(
    dataset: FramePairDataset,
    config: PretrainConfig,
    out_dir: Path | str,
    model: Optional[FrameAutoencoder] = None,
    resume: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Train the autoencoder to reconstruct the current frame x1 under MSE.

    Shares the optimizer, batch stream and step budget of segnet pretraining;
    there is no regularizer, so ``lambda_reg`` and ``loss_reg`` log as 0.
    """
    if model is None and resume is not None:
        model = FrameAutoencoder(frame_size=resume.meta["architecture"]["frame_size"])
    if model is None:
        model = FrameAutoencoder(frame_size=dataset.frame_size, seed=config.seed)

    def loss_fn(net: nn.Module, batch: torch.Tensor, step: int):
        loss = F.mse_loss(net(batch), batch[:, 1:2])
        value = float(loss.detach())
        return loss, {
            "lambda_reg": 0.0,
            "loss_total": value,
            "loss_reconstruct": value,
            "loss_reg": 0.0,
        }

    logger.info(f"Pretraining autoencoder for {config.total_steps} steps on {len(dataset)} pairs")
    meta = {"kind": "autoencoder", "architecture": model.architecture()}
    return run_pretraining(model, loss_fn, dataset, config, out_dir, meta, resume)


@dataclass
class BuiltVariant:
    spec: VariantSpec
    model: nn.Module
    joint_seg: bool
    pretrain_frames: int = 0


def _require(checkpoint: Optional[Checkpoint], what: str, spec: VariantSpec) -> Checkpoint:
    if checkpoint is None:
        raise ConfigurationError(f"variant '{spec.name}' requires a {what} checkpoint")
    return checkpoint


def build_variant(
    spec: VariantSpec,
    seed: int,
    num_actions: int = NUM_ACTIONS,
    frame_size: int = 84,
    seg_checkpoint: Optional[Checkpoint] = None,
    ae_checkpoint: Optional[Checkpoint] = None,
) -> BuiltVariant:
    """Instantiate the agent of one ablation variant.

    Raises:
        ConfigurationError: If a required checkpoint is missing or was
            trained on another frame size
        IncompatibleCheckpointError: If a checkpoint does not fit
    """
    if spec.init_source == "segnet":
        checkpoint = _require(seg_checkpoint, "segnet", spec)
        trained_size = checkpoint.meta.get("architecture", {}).get("frame_size")
        if trained_size != frame_size:
            raise ConfigurationError(
                f"segnet checkpoint was trained on {trained_size}px frames, env renders {frame_size}px"
            )
        model: nn.Module = transfer_weights(checkpoint, seed, num_actions)
        frames = int(checkpoint.meta.get("dataset_frames", 0))
        return BuiltVariant(spec, model, spec.joint_seg, frames)

    num_masks = DEFAULT_NUM_MASKS
    if seg_checkpoint is not None:
        num_masks = seg_checkpoint.meta["architecture"]["num_masks"]

    if spec.name == "baseline_standard":
        return BuiltVariant(spec, StandardActorCritic(num_actions, frame_size, seed), False)

    model = MorelActorCritic(num_actions, num_masks, frame_size, seed)
    if spec.init_source == "autoencoder":
        checkpoint = _require(ae_checkpoint, "autoencoder", spec)
        if checkpoint.meta.get("architecture", {}).get("kind") != "autoencoder":
            raise IncompatibleCheckpointError("baseline_autoencoder needs an autoencoder checkpoint")
        load_state(model.motion.encoder, checkpoint.model_state("encoder."), what="motion encoder")
        frames = int(checkpoint.meta.get("dataset_frames", 0))
        return BuiltVariant(spec, model, False, frames)
    return BuiltVariant(spec, model, False)


def run_dir_name(spec: VariantSpec, algo: str, seed: int) -> str:
    return f"{spec.name}_{algo}_seed{seed}"


def run_variant(
    config: RunConfig,
    seeds: Sequence[int],
    out_dir: Path | str,
    seg_checkpoint: Optional[Checkpoint] = None,
    ae_checkpoint: Optional[Checkpoint] = None,
) -> List[TrainResult]:
    """Train one variant once per seed, each into its own fresh run directory.

    Raises:
        ConfigurationError: If a run directory already exists or a checkpoint
            is missing (checked before any environment step)
    """
    out_dir = Path(out_dir)
    spec = config.variant
    algo = config.train.algo
    run_dirs = [out_dir / run_dir_name(spec, algo, seed) for seed in seeds]
    for run_dir in run_dirs:
        if run_dir.exists():
            raise ConfigurationError(f"run directory {run_dir} already exists")
    frame_size = config.env.frame_size

    results = []
    for seed, run_dir in zip(seeds, run_dirs):
        built = build_variant(
            spec, seed, NUM_ACTIONS, frame_size, seg_checkpoint, ae_checkpoint
        )
        train_config = config.train.model_copy(update={"pretrain_frames": built.pretrain_frames})
        run_config = config.model_copy(
            update={"seed": seed, "out_dir": str(out_dir), "train": train_config}
        )
        run_dir.mkdir(parents=True)
        write_run_config(run_config, run_dir)
        results.append(
            train(
                built.model,
                config.env,
                config.update,
                train_config,
                built.joint_seg,
                seed,
                run_dir,
            )
        )
    return results


def merge_runs(run_dirs: Iterable[Path | str]) -> pd.DataFrame:
    """Stack every run's metrics with its variant, algorithm and seed.

    ``plotted_env_steps`` adds the pretraining frame budget for pretrained
    variants so their curves start offset to the right.
    """
    frames = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        config = load_run_config(run_dir / "config.toml")
        metrics = pd.read_csv(run_dir / "metrics.csv")
        offset = config.train.pretrain_frames if config.variant.pretrained else 0
        frames.append(
            pd.DataFrame(
                {
                    "variant": config.variant.name,
                    "algo": config.train.algo,
                    "seed": config.seed,
                    "env_steps": metrics["env_steps"],
                    "mean_return": metrics["mean_return"],
                    "plotted_env_steps": metrics["env_steps"] + offset,
                }
            )
        )
    if not frames:
        raise ValueError("no run directories to merge")
    return pd.concat(frames, ignore_index=True)


def steps_to_threshold(
    run: pd.DataFrame, threshold: float, column: str = "plotted_env_steps"
) -> Optional[int]:
    """First step count at which a single run's mean return reaches ``threshold``."""
    reached = run[run["mean_return"] >= threshold]
    if reached.empty:
        return None
    return int(reached[column].min())


def compare_variants(
    merged: pd.DataFrame, reference: str = "baseline_standard", fraction: float = 0.8
) -> pd.DataFrame:
    """Median steps-to-threshold and final return of every variant, per algorithm.

    The threshold is ``fraction`` of the reference variant's median final
    return and is fixed before any other variant is looked at. Runs that never
    reach it count as ``inf`` steps.

    Raises:
        ValueError: If an algorithm has no runs of the reference variant
    """
    rows = []
    for algo, runs in merged.groupby("algo"):
        finals = runs.sort_values("env_steps").groupby(["variant", "seed"])["mean_return"].last()
        if reference not in finals.index.get_level_values("variant"):
            raise ValueError(f"no {reference} runs for {algo} to set the threshold from")
        threshold = fraction * float(finals.loc[reference].median())

        for variant, variant_runs in runs.groupby("variant"):
            steps = []
            for _, run in variant_runs.groupby("seed"):
                reached = steps_to_threshold(run, threshold)
                steps.append(float("inf") if reached is None else float(reached))
            rows.append(
                {
                    "algo": algo,
                    "variant": variant,
                    "runs": len(steps),
                    "threshold": threshold,
                    "median_steps_to_threshold": float(pd.Series(steps).median()),
                    "median_final_return": float(finals.loc[variant].median()),
                }
            )
    logger.info(f"Compared {len(rows)} variant/algorithm groups against {reference}")
    return pd.DataFrame(rows)
