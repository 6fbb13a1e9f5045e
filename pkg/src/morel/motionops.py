"""
Differentiable motion machinery for the segmentation objective.

Conventions: flow is (B, 2, H, W) with channel 0 = dx (columns, rightward)
and channel 1 = dy (rows, downward). Warping is backward: the estimate of
x0 at pixel p samples x1 at p + F(p) bilinearly, clamped to the border.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Literal, Optional

import torch
import torch.nn.functional as F

from .schemas import CurriculumSchedule
from .segnet import SegOutput

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

Reduction = Literal["sum", "mean"]


def _as_batch(x: torch.Tensor, image_dims: int = 2) -> tuple[torch.Tensor, int]:
    """Promote an unbatched image tensor to (B, C, H, W); return added dims."""
    added = 0
    while x.dim() < image_dims + 2:
        x = x.unsqueeze(0)
        added += 1
    return x, added


def compose_flow(
    masks: torch.Tensor,
    object_translations: torch.Tensor,
    camera_translation: torch.Tensor,
) -> torch.Tensor:
    """F_ij = sum_k M_ij^(k) t_k + c.

    Args:
        masks: (B, K, H, W)
        object_translations: (B, K, 2)
        camera_translation: (B, 2)

    Returns:
        Flow (B, 2, H, W)
    """
    if masks.dim() != 4:
        raise ValueError(f"masks must be (B, K, H, W), got {tuple(masks.shape)}")
    b, k = masks.shape[:2]
    if object_translations.shape != (b, k, 2):
        raise ValueError(
            f"object_translations must be {(b, k, 2)}, got {tuple(object_translations.shape)}"
        )
    if camera_translation.shape != (b, 2):
        raise ValueError(
            f"camera_translation must be {(b, 2)}, got {tuple(camera_translation.shape)}"
        )
    flow = torch.einsum("bkhw,bkc->bchw", masks, object_translations)
    return flow + camera_translation[:, :, None, None]


def warp(source: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``source`` at p + flow(p), clamping to the border.

    Args:
        source: (B, C, H, W), or (H, W) / (C, H, W) for a single image
        flow: (B, 2, H, W), or (2, H, W) for a single image

    Returns:
        Warped tensor with the shape of ``source``

    Raises:
        FloatingPointError: If the flow has non-finite entries
        ValueError: On shape mismatch
    """
    single = source.dim() < 4
    original_shape = source.shape
    src, _ = _as_batch(source)
    flo = flow.unsqueeze(0) if flow.dim() == 3 else flow
    b, c, h, w = src.shape
    if flo.shape != (b, 2, h, w):
        raise ValueError(f"flow must be {(b, 2, h, w)}, got {tuple(flo.shape)}")
    if not torch.isfinite(flo).all():
        raise FloatingPointError("non-finite flow passed to warp")

    rows = torch.arange(h, dtype=flo.dtype, device=flo.device).view(1, h, 1)
    cols = torch.arange(w, dtype=flo.dtype, device=flo.device).view(1, 1, w)
    x = (cols + flo[:, 0]).clamp(0, w - 1)
    y = (rows + flo[:, 1]).clamp(0, h - 1)
    x0 = x.floor()
    y0 = y.floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=w - 1)
    y1i = (y0i + 1).clamp(max=h - 1)

    flat = src.reshape(b, c, h * w)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        index = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, index).view(b, c, h, w)

    out = (
        (1 - wx) * (1 - wy) * gather(y0i, x0i)
        + wx * (1 - wy) * gather(y0i, x1i)
        + (1 - wx) * wy * gather(y1i, x0i)
        + wx * wy * gather(y1i, x1i)
    )
    return out.view(original_shape) if single else out


def gaussian_window(
    window_size: int = 11,
    sigma: float = 1.5,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> torch.Tensor:
    """Normalized 2-D Gaussian window of shape (1, 1, window_size, window_size)."""
    coords = torch.arange(window_size, dtype=dtype, device=device) - window_size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).view(1, 1, window_size, window_size)


def ssim_map(
    a: torch.Tensor, b: torch.Tensor, window_size: int = 11, sigma: float = 1.5
) -> torch.Tensor:
    """Per-window SSIM over fully interior (valid) windows only."""
    a, _ = _as_batch(a)
    b, _ = _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    channels, h, w = a.shape[1:]
    if h < window_size or w < window_size:
        raise ValueError(f"images {h}x{w} are smaller than the {window_size}x{window_size} window")
    window = gaussian_window(window_size, sigma, a.dtype, a.device).expand(channels, 1, -1, -1)

    def filt(x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, window, groups=channels)

    mu_a = filt(a)
    mu_b = filt(b)
    mu_ab = mu_a * mu_b
    mu_a_sq = mu_a * mu_a
    mu_b_sq = mu_b * mu_b
    sigma_a = filt(a * a) - mu_a_sq
    sigma_b = filt(b * b) - mu_b_sq
    sigma_ab = filt(a * b) - mu_ab

    numerator = (2 * mu_ab + SSIM_C1) * (2 * sigma_ab + SSIM_C2)
    denominator = (mu_a_sq + mu_b_sq + SSIM_C1) * (sigma_a + sigma_b + SSIM_C2)
    return numerator / denominator


def dssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    reduction: Literal["mean", "none"] = "mean",
) -> torch.Tensor:
    """Structural dissimilarity (1 - mean SSIM) / 2, in [0, 1].

    With ``reduction="none"`` returns one value per batch element.
    """
    s = ssim_map(a, b, window_size, sigma)
    if reduction == "none":
        return (1 - s.flatten(1).mean(dim=1)) / 2
    return (1 - s.mean()) / 2


def _check_mask_translation_shapes(masks: torch.Tensor, translations: torch.Tensor) -> None:
    if masks.dim() != 4 or translations.shape != (masks.shape[0], masks.shape[1], 2):
        raise ValueError(
            f"masks (B, K, H, W) and translations (B, K, 2) disagree: "
            f"{tuple(masks.shape)} vs {tuple(translations.shape)}"
        )


def reg_loss(
    masks: torch.Tensor, object_translations: torch.Tensor, reduction: Reduction = "sum"
) -> torch.Tensor:
    """sum_k ||M^(k) x t_k||_1 via the closed form sum_k (sum_ij M_ij^(k)) ||t_k||_1.

    The camera translation is not regularized. ``reduction="mean"`` divides
    the per-sample value by H * W; the batch is always averaged.
    """
    _check_mask_translation_shapes(masks, object_translations)
    mass = masks.sum(dim=(2, 3))
    per_sample = (mass * object_translations.abs().sum(dim=-1)).sum(dim=-1)
    if reduction == "mean":
        per_sample = per_sample / (masks.shape[2] * masks.shape[3])
    return per_sample.mean()


def reg_loss_direct(
    masks: torch.Tensor, object_translations: torch.Tensor, reduction: Reduction = "sum"
) -> torch.Tensor:
    """Elementwise L1 of the (B, K, 2, H, W) mask-translation product."""
    _check_mask_translation_shapes(masks, object_translations)
    product = masks.unsqueeze(2) * object_translations[:, :, :, None, None]
    per_sample = product.abs().sum(dim=(1, 2, 3, 4))
    if reduction == "mean":
        per_sample = per_sample / (masks.shape[2] * masks.shape[3])
    return per_sample.mean()


def mask_l1(masks: torch.Tensor) -> torch.Tensor:
    """Plain mask sparsity penalty sum_k ||M^(k)||_1, batch-averaged."""
    return masks.abs().sum(dim=(1, 2, 3)).mean()


def lambda_schedule(step: int, schedule: CurriculumSchedule) -> float:
    """Linear ramp of the regularization weight: min(step / warmup, 1)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return min(step / schedule.warmup_steps, 1.0)


@dataclass
class LossBreakdown:
    reconstruction: torch.Tensor
    regularization: torch.Tensor
    lambda_reg: float
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "loss_total": float(self.total.detach()),
            "loss_reconstruct": float(self.reconstruction.detach()),
            "loss_reg": float(self.regularization.detach()),
            "lambda_reg": self.lambda_reg,
        }


def reconstruct(pair: torch.Tensor, out: SegOutput) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp x1 into an estimate of x0; returns (estimate, flow)."""
    flow = compose_flow(out.masks, out.object_translations, out.camera_translation)
    return warp(pair[:, 1:2], flow), flow


def seg_loss(
    pair: torch.Tensor,
    out: SegOutput,
    step: int = 0,
    schedule: Optional[CurriculumSchedule] = None,
    window_size: int = 11,
    reg_reduction: Reduction = "sum",
) -> LossBreakdown:
    """L_seg = DSSIM(x0, warp(x1, F)) + lambda_reg * L_reg.

    Args:
        pair: (B, 2, H, W) frame pairs, channel 0 = x0 (older)
        out: Network output for ``pair``
        step: Optimization step driving the curriculum
        schedule: Curriculum; ``None`` holds lambda_reg at 1
        window_size: DSSIM window side
        reg_reduction: Reduction of the regularizer over pixels
    """
    if pair.dim() != 4 or pair.shape[1] != 2:
        raise ValueError(f"pair must be (B, 2, H, W), got {tuple(pair.shape)}")
    estimate, _ = reconstruct(pair, out)
    reconstruction = dssim(pair[:, 0:1], estimate, window_size=window_size)
    regularization = reg_loss(out.masks, out.object_translations, reduction=reg_reduction)
    lam = 1.0 if schedule is None else lambda_schedule(step, schedule)
    total = reconstruction + lam * regularization
    return LossBreakdown(reconstruction, regularization, lam, total)
