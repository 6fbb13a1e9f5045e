"""
Unsupervised pretraining of the segmentation network on random-policy
frame pairs, with the regularization curriculum, per-step metrics and
checkpoints.
"""

import csv
import logging
import tempfile
import time
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

import torch
import torch.nn as nn
from torch.utils.data import DataLoader

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint, load_state
from .config import ConfigurationError, config_fingerprint
from .dataset import FramePairDataset
from .motionops import dssim, seg_loss
from .schemas import PretrainConfig
from .segnet import SegNet

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lambda_reg", "loss_total", "loss_reconstruct", "loss_reg", "wall_time_s")

# (model, batch, step) -> (loss to minimize, metric values)
LossFn = Callable[[nn.Module, torch.Tensor, int], Tuple[torch.Tensor, Dict[str, float]]]


class NonFiniteLossError(FloatingPointError):
    """Raised when a training loss becomes NaN or infinite."""

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.dump_path = dump_path


def dump_batch(batch: Mapping[str, Any], out_dir: Path, step: int) -> Path:
    """Save the offending batch for post-mortem inspection."""
    path = Path(out_dir) / f"nonfinite_step_{step:07d}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(dict(batch), path)
    return path


def check_finite(
    loss: torch.Tensor, batch: Mapping[str, Any], out_dir: Optional[Path], step: int
) -> None:
    """Dump ``batch`` and raise when ``loss`` is NaN or infinite.

    Without ``out_dir`` the dump goes to a fresh temporary directory.
    """
    if torch.isfinite(loss).all():
        return
    if out_dir is None:
        out_dir = Path(tempfile.mkdtemp(prefix="morel-nonfinite-"))
    dump = dump_batch(batch, out_dir, step)
    logger.error(f"Non-finite loss {loss.item()} at step {step}; batch dumped to {dump}")
    raise NonFiniteLossError(f"non-finite loss at step {step} (batch dumped to {dump})", dump)


class MetricsWriter:
    """Append-as-you-go CSV with a fixed column order."""

    def __init__(self, path: Path, columns: Tuple[str, ...]):
        self.path = Path(path)
        self.columns = columns
        self._file = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._file, fieldnames=list(columns))
        self._writer.writeheader()

    def write(self, row: Mapping[str, Any]) -> None:
        self._writer.writerow({k: row.get(k, "") for k in self.columns})
        self._file.flush()

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def save_checkpoint(
    model: nn.Module,
    path: Path | str,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    fingerprint: str = "",
    meta: Optional[Mapping[str, Any]] = None,
) -> Checkpoint:
    checkpoint = Checkpoint.from_modules(model, optimizer, step, fingerprint, meta)
    ckpt_io.save(checkpoint, path)
    return checkpoint


def load_checkpoint(path: Path | str) -> Checkpoint:
    return ckpt_io.load(path)


def load_segnet(checkpoint: Checkpoint) -> SegNet:
    """Rebuild a SegNet from a pretraining checkpoint."""
    arch = checkpoint.meta.get("architecture", {})
    if arch.get("kind") != "segnet":
        raise ckpt_io.IncompatibleCheckpointError(
            f"checkpoint holds a '{arch.get('kind')}' model, expected 'segnet'"
        )
    model = SegNet(num_masks=arch["num_masks"], frame_size=arch["frame_size"])
    load_state(model, checkpoint.model_state())
    return model


def identity_baseline(
    dataset: FramePairDataset, window_size: int = 11, batch_size: int = 64
) -> float:
    """Mean DSSIM(x0, x1) over the dataset: the zero-flow reconstruction error."""
    if len(dataset) == 0:
        raise ValueError("dataset has no frame pairs")
    total = 0.0
    with torch.no_grad():
        for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            values = dssim(batch[:, 0:1], batch[:, 1:2], window_size=window_size, reduction="none")
            total += float(values.double().sum())
    return total / len(dataset)


def run_pretraining(
    model: nn.Module,
    loss_fn: LossFn,
    dataset: FramePairDataset,
    config: PretrainConfig,
    out_dir: Path | str,
    meta: Mapping[str, Any],
    resume: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Adam loop shared by every pretraining objective.

    Writes ``metrics.csv`` (one row per step), periodic checkpoints under
    ``checkpoints/`` and ``final.ckpt``. ``step`` counts updates applied, so
    rows run 1..total_steps and ``loss_fn`` sees the same counter; the
    untouched initialization is step 0 and has no row.

    With ``resume``, model and Adam state come from that checkpoint and the
    loop continues at its step, skipping the batches already consumed, so the
    result matches an uninterrupted run.
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=config.adam_betas,
        eps=config.adam_eps,
    )
    fingerprint = config_fingerprint(config)
    meta = {**meta, "dataset_frames": dataset.n_frames}

    first = 1
    if resume is not None:
        if resume.step > config.total_steps:
            raise ConfigurationError(
                f"checkpoint is at step {resume.step}, past the {config.total_steps}-step budget"
            )
        optimizer_state = resume.optimizer_state()
        if optimizer_state is None:
            raise ckpt_io.IncompatibleCheckpointError("checkpoint holds no optimizer state to resume from")
        load_state(model, resume.model_state())
        optimizer.load_state_dict(optimizer_state)
        first = resume.step + 1
        logger.info(f"Resuming at step {first} of {config.total_steps}")

    batches = None
    if config.total_steps >= first:
        batches = dataset.batches(config.batch_size, config.seed, config.num_workers)
        for _ in range(first - 1):
            next(batches)

    start = time.perf_counter()
    with MetricsWriter(out_dir / "metrics.csv", METRIC_COLUMNS) as metrics:
        for step in range(first, config.total_steps + 1):
            batch = next(batches)
            loss, values = loss_fn(model, batch, step)
            check_finite(loss, {"pair": batch, "step": step}, out_dir, step)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            metrics.write({"step": step, **values, "wall_time_s": time.perf_counter() - start})
            if step % config.log_every == 0:
                logger.info(f"step {step}/{config.total_steps}: " + ", ".join(
                    f"{k}={v:.4f}" for k, v in values.items()
                ))
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(
                    model,
                    out_dir / "checkpoints" / f"step_{step:07d}.ckpt",
                    step,
                    optimizer,
                    fingerprint,
                    meta,
                )

    return save_checkpoint(
        model, out_dir / "final.ckpt", config.total_steps, optimizer, fingerprint, meta
    )


def pretrain(
    dataset: FramePairDataset,
    config: PretrainConfig,
    out_dir: Path | str,
    model: Optional[SegNet] = None,
    resume: Optional[Checkpoint] = None,
) -> Checkpoint:
    """Train a SegNet on ``dataset`` under the curriculum and return the final checkpoint.

    Args:
        dataset: Frame pairs from the random policy
        config: Optimizer, schedule and checkpoint settings
        out_dir: Run directory for metrics and checkpoints
        model: Network to train; a fresh one seeded from ``config.seed`` by default
        resume: Periodic checkpoint of an interrupted run to continue from

    Raises:
        ValueError: If the dataset holds fewer pairs than one batch
        NonFiniteLossError: On a NaN/inf loss, after dumping the batch
    """
    if model is None and resume is not None:
        model = load_segnet(resume)
    if model is None:
        model = SegNet(config.num_masks, frame_size=dataset.frame_size, seed=config.seed)
    schedule = config.schedule

    def loss_fn(net: nn.Module, batch: torch.Tensor, step: int):
        breakdown = seg_loss(
            batch,
            net(batch),
            step,
            schedule,
            window_size=config.window_size,
            reg_reduction=config.reg_reduction,
        )
        return breakdown.total, breakdown.as_floats()

    logger.info(
        f"Pretraining segnet for {config.total_steps} steps on {len(dataset)} pairs "
        f"(K={model.num_masks}, warmup {config.warmup_steps})"
    )
    meta = {"kind": "segnet", "architecture": model.architecture()}
    return run_pretraining(model, loss_fn, dataset, config, out_dir, meta, resume)
