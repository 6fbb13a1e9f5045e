"""
Unsupervised moving-object segmentation network.

Two stacked frames are compressed into a 512-d embedding by a three-layer
conv stack; masks are decoded from the embedding alone (no skip connections)
and a single linear layer predicts per-object and camera translations.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

# (out_channels, kernel, stride); valid padding
ENCODER_LAYERS: Tuple[Tuple[int, int, int], ...] = ((32, 8, 4), (64, 4, 2), (64, 3, 1))
EMBEDDING_DIM = 512
DECODER_CHANNELS = 24
RELU_GAIN = math.sqrt(2.0)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def encoder_output_size(frame_size: int) -> int:
    size = frame_size
    for _, kernel, stride in ENCODER_LAYERS:
        size = conv_output_size(size, kernel, stride)
    return size


def orthogonal_(layer: nn.Module, gain: float) -> None:
    nn.init.orthogonal_(layer.weight, gain=gain)
    nn.init.zeros_(layer.bias)


def seeded_init(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialize ``module`` from ``seed`` without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module.reset_parameters()
    return module


def _check_shape(x: torch.Tensor, expected: Iterable[Optional[int]], what: str) -> None:
    expected = tuple(expected)
    ok = x.dim() == len(expected) and all(
        e is None or e == s for e, s in zip(expected, x.shape)
    )
    if not ok:
        shown = tuple("B" if e is None else e for e in expected)
        raise ValueError(f"{what} must have shape {shown}, got {tuple(x.shape)}")


@dataclass
class SegOutput:
    masks: torch.Tensor  # (B, K, H, W) in (0, 1)
    object_translations: torch.Tensor  # (B, K, 2) as (dx, dy) pixels
    camera_translation: torch.Tensor  # (B, 2)
    embedding: torch.Tensor  # (B, 512)

    @property
    def num_masks(self) -> int:
        return self.masks.shape[1]

    def detach(self) -> "SegOutput":
        return SegOutput(
            masks=self.masks.detach(),
            object_translations=self.object_translations.detach(),
            camera_translation=self.camera_translation.detach(),
            embedding=self.embedding.detach(),
        )


class Encoder(nn.Module):
    """conv 8x8x32/4 -> conv 4x4x64/2 -> conv 3x3x64/1 -> fc 512, ReLU after each."""

    def __init__(self, in_channels: int = 2, frame_size: int = 84, seed: Optional[int] = None):
        super().__init__()
        self.in_channels = in_channels
        self.frame_size = frame_size
        spatial = encoder_output_size(frame_size)
        if spatial < 1:
            raise ValueError(f"frame_size {frame_size} is too small for the encoder")
        convs = []
        channels = in_channels
        for out_channels, kernel, stride in ENCODER_LAYERS:
            convs.append(nn.Conv2d(channels, out_channels, kernel, stride=stride))
            channels = out_channels
        self.convs = nn.ModuleList(convs)
        self.fc = nn.Linear(channels * spatial * spatial, EMBEDDING_DIM)
        if seed is not None:
            seeded_init(self, seed)

    def reset_parameters(self) -> None:
        for conv in self.convs:
            orthogonal_(conv, RELU_GAIN)
        orthogonal_(self.fc, RELU_GAIN)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_shape(x, (None, self.in_channels, self.frame_size, self.frame_size), "encoder input")
        for conv in self.convs:
            x = F.relu(conv(x))
        return F.relu(self.fc(x.flatten(1)))


class MaskDecoder(nn.Module):
    """fc -> reshape (24, g, g) -> 2x[bilinear x2, conv 3x3x24, ReLU] -> conv 1x1 -> sigmoid."""

    def __init__(self, num_outputs: int, frame_size: int = 84, seed: Optional[int] = None):
        super().__init__()
        if frame_size % 4:
            raise ValueError(f"frame_size must be a multiple of 4, got {frame_size}")
        self.num_outputs = num_outputs
        self.frame_size = frame_size
        self.grid = frame_size // 4
        self.fc = nn.Linear(EMBEDDING_DIM, DECODER_CHANNELS * self.grid * self.grid)
        self.up1 = nn.Conv2d(DECODER_CHANNELS, DECODER_CHANNELS, 3, padding=1)
        self.up2 = nn.Conv2d(DECODER_CHANNELS, DECODER_CHANNELS, 3, padding=1)
        self.head = nn.Conv2d(DECODER_CHANNELS, num_outputs, 1)
        if seed is not None:
            seeded_init(self, seed)

    def reset_parameters(self) -> None:
        orthogonal_(self.fc, RELU_GAIN)
        orthogonal_(self.up1, RELU_GAIN)
        orthogonal_(self.up2, RELU_GAIN)
        orthogonal_(self.head, 1.0)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        _check_shape(embedding, (None, EMBEDDING_DIM), "embedding")
        x = F.relu(self.fc(embedding))
        x = x.view(-1, DECODER_CHANNELS, self.grid, self.grid)
        x = F.interpolate(x, size=(2 * self.grid,) * 2, mode="bilinear", align_corners=False)
        x = F.relu(self.up1(x))
        x = F.interpolate(x, size=(self.frame_size,) * 2, mode="bilinear", align_corners=False)
        x = F.relu(self.up2(x))
        return torch.sigmoid(self.head(x))


class TranslationHead(nn.Module):
    """Single linear layer to (K + 1) x 2; the last row is the camera translation."""

    def __init__(self, num_masks: int, seed: Optional[int] = None):
        super().__init__()
        self.num_masks = num_masks
        self.fc = nn.Linear(EMBEDDING_DIM, (num_masks + 1) * 2)
        if seed is not None:
            seeded_init(self, seed)

    def reset_parameters(self) -> None:
        orthogonal_(self.fc, 1.0)

    def forward(self, embedding: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        _check_shape(embedding, (None, EMBEDDING_DIM), "embedding")
        out = self.fc(embedding).view(-1, self.num_masks + 1, 2)
        return out[:, : self.num_masks], out[:, self.num_masks]


class SegNet(nn.Module):
    """Encoder, mask decoder and translation head joined at the embedding."""

    def __init__(self, num_masks: int = 20, frame_size: int = 84, seed: Optional[int] = None):
        super().__init__()
        if num_masks < 1:
            raise ValueError(f"num_masks must be >= 1, got {num_masks}")
        self.num_masks = num_masks
        self.frame_size = frame_size
        self.encoder = Encoder(in_channels=2, frame_size=frame_size)
        self.decoder = MaskDecoder(num_masks, frame_size=frame_size)
        self.translation = TranslationHead(num_masks)
        if seed is not None:
            seeded_init(self, seed)

    def reset_parameters(self) -> None:
        self.encoder.reset_parameters()
        self.decoder.reset_parameters()
        self.translation.reset_parameters()

    def encode(self, pair: torch.Tensor) -> torch.Tensor:
        return self.encoder(pair)

    def decode_masks(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.decoder(embedding)

    def predict_translations(self, embedding: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        return self.translation(embedding)

    def decode(self, embedding: torch.Tensor) -> SegOutput:
        masks = self.decode_masks(embedding)
        object_translations, camera_translation = self.predict_translations(embedding)
        return SegOutput(masks, object_translations, camera_translation, embedding)

    def forward(self, pair: torch.Tensor) -> SegOutput:
        return self.decode(self.encode(pair))

    def architecture(self) -> dict:
        return {"kind": "segnet", "num_masks": self.num_masks, "frame_size": self.frame_size}
