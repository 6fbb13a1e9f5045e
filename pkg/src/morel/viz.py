"""
Mask and flow visualization, plus segmentation quality against the
environment's ground-truth sprite masks.
"""

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from matplotlib.colors import hsv_to_rgb
from matplotlib.figure import Figure
from PIL import Image

from .dataset import episode_seed
from .env import NUM_ACTIONS, SpriteWorld
from .motionops import compose_flow
from .schemas import EnvConfig
from .segnet import SegNet, SegOutput

logger = logging.getLogger(__name__)

GREEN = np.array([0.0, 1.0, 0.0])
SEPARATOR_PX = 2


def _sample(out: SegOutput, index: int) -> Tuple[np.ndarray, np.ndarray]:
    masks = out.masks[index].detach().cpu().double().numpy()
    translations = out.object_translations[index].detach().cpu().double().numpy()
    return masks, translations


def saliency(out: SegOutput, index: int = 0) -> np.ndarray:
    """Per-mask ||M^(k) x t_k||_1 for one batch element, shape (K,)."""
    masks, translations = _sample(out, index)
    return masks.sum(axis=(1, 2)) * np.abs(translations).sum(axis=1)


def most_salient_mask(out: SegOutput, index: int = 0) -> int:
    """Index of the mask with the largest regularization contribution; lowest index wins ties."""
    return int(np.argmax(saliency(out, index)))


def confidence_map(out: SegOutput, index: int = 0) -> np.ndarray:
    masks, translations = _sample(out, index)
    weighted = np.einsum("khw,k->hw", masks, np.abs(translations).sum(axis=1))
    peak = weighted.max()
    if peak <= 0:
        return np.zeros_like(weighted)
    return np.clip(weighted / peak, 0.0, 1.0)


def weighted_mask_overlay(frame: np.ndarray, out: SegOutput, index: int = 0) -> np.ndarray:
    """Grayscale frame with translation-weighted mask confidence blended in green.

    Returns:
        (H, W, 3) float image in [0, 1]
    """
    gray = np.repeat(np.asarray(frame, dtype=np.float64)[:, :, None], 3, axis=2)
    conf = confidence_map(out, index)[:, :, None]
    return np.clip(gray * (1.0 - conf) + conf * GREEN, 0.0, 1.0)


def flow_hue_value(flow: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Hue in degrees [0, 360) from atan2(dy, dx) and per-image normalized magnitude."""
    flow = np.asarray(flow, dtype=np.float64)
    dx, dy = flow[0], flow[1]
    hue = np.degrees(np.arctan2(dy, dx)) % 360.0
    magnitude = np.hypot(dx, dy)
    peak = magnitude.max()
    value = magnitude / peak if peak > 0 else np.zeros_like(magnitude)
    return hue, value


def flow_to_color(flow: np.ndarray | torch.Tensor) -> np.ndarray:
    """(2, H, W) flow -> (H, W, 3) RGB with direction as hue and magnitude as value."""
    if torch.is_tensor(flow):
        flow = flow.detach().cpu().numpy()
    hue, value = flow_hue_value(flow)
    hsv = np.stack([hue / 360.0, np.ones_like(hue), value], axis=-1)
    return hsv_to_rgb(hsv)


def mask_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union of two boolean masks; two empty masks score 1."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)


def best_match_iou(pred: np.ndarray, truth_masks: np.ndarray) -> float:
    """Max IoU of ``pred`` over the ground-truth sprite masks."""
    if len(truth_masks) == 0:
        return 0.0
    return max(mask_iou(pred, truth) for truth in truth_masks)


@dataclass
class IouReport:
    per_frame: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_frame)) if self.per_frame else float("nan")


def _salient_binary(model: SegNet, obs: np.ndarray, threshold: float) -> Tuple[np.ndarray, SegOutput]:
    with torch.no_grad():
        out = model(torch.from_numpy(obs).unsqueeze(0))
    k = most_salient_mask(out)
    return out.masks[0, k].numpy() >= threshold, out


def evaluate_iou(
    model: SegNet,
    env_config: EnvConfig,
    n_frames: int,
    seed: int = 0,
    threshold: float = 0.5,
    csv_path: Optional[Path | str] = None,
) -> IouReport:
    """Best-match IoU of the binarized most salient mask on random-policy frames.

    Frames in which no sprite is visible are skipped.
    """
    env = SpriteWorld(env_config)
    rng = np.random.default_rng(seed)
    episode = 0
    env.reset(seed=episode_seed(seed, episode))
    scores: List[float] = []
    steps: List[int] = []
    model.eval()
    for step in range(n_frames):
        if env.t >= env_config.episode_len:
            episode += 1
            env.reset(seed=episode_seed(seed, episode))
        transition = env.step(int(rng.integers(NUM_ACTIONS)))
        truth = env.ground_truth()
        visible = truth.masks[truth.visible]
        if len(visible) == 0:
            continue
        pred, _ = _salient_binary(model, transition.obs, threshold)
        scores.append(best_match_iou(pred, visible))
        steps.append(step)

    report = IouReport(scores)
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["frame", "iou"])
            writer.writerows(zip(steps, scores))
    logger.info(f"Mean best-match IoU {report.mean:.3f} over {len(scores)} frames")
    return report


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def triptych(frame: np.ndarray, out: SegOutput) -> np.ndarray:
    """frame | overlay | flow, separated by white bars, as uint8 RGB."""
    h, w = frame.shape
    gray = np.repeat(np.asarray(frame, dtype=np.float64)[:, :, None], 3, axis=2)
    flow = compose_flow(out.masks, out.object_translations, out.camera_translation)[0]
    panels = [gray, weighted_mask_overlay(frame, out), flow_to_color(flow)]
    bar = np.ones((h, SEPARATOR_PX, 3))
    return _to_uint8(np.concatenate([panels[0], bar, panels[1], bar, panels[2]], axis=1))


def export_episode(
    model: SegNet,
    env_config: EnvConfig,
    path: Path | str,
    n_steps: int,
    seed: int = 0,
    threshold: float = 0.5,
) -> List[Path]:
    """Write one PNG triptych per step of a random-policy episode plus ``manifest.jsonl``.

    Raises:
        ValueError: If n_steps < 1 or exceeds the episode length
    """
    if not 1 <= n_steps <= env_config.episode_len:
        raise ValueError(f"n_steps must lie in [1, {env_config.episode_len}], got {n_steps}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    env = SpriteWorld(env_config)
    env.reset(seed=episode_seed(seed, 0))
    rng = np.random.default_rng(seed)
    model.eval()

    written = []
    with open(path / "manifest.jsonl", "w", encoding="utf-8") as manifest:
        for step in range(n_steps):
            transition = env.step(int(rng.integers(NUM_ACTIONS)))
            pred, out = _salient_binary(model, transition.obs, threshold)
            truth = env.ground_truth()
            visible = truth.masks[truth.visible]
            iou = best_match_iou(pred, visible) if len(visible) else None
            filename = f"step_{step:05d}.png"
            Image.fromarray(triptych(transition.obs[1], out)).save(path / filename)
            manifest.write(
                json.dumps(
                    {
                        "step": step,
                        "filename": filename,
                        "salient_index": most_salient_mask(out),
                        "iou": iou,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            written.append(path / filename)
    logger.info(f"Exported {n_steps} frames to {path}")
    return written


def plot_learning_curves(
    merged: pd.DataFrame, path: Path | str, x: str = "plotted_env_steps", title: str = ""
) -> Path:
    """Median return over seeds with a min-max band, one line per variant."""
    path = Path(path)
    fig = Figure(figsize=(7, 4.5))
    ax = fig.subplots()
    for variant, group in merged.groupby("variant", sort=True):
        curves = group.pivot_table(index=x, columns="seed", values="mean_return")
        ax.plot(curves.index, curves.median(axis=1), label=variant)
        ax.fill_between(curves.index, curves.min(axis=1), curves.max(axis=1), alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean episode return")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    logger.info(f"Saved learning curves to {path}")
    return path
