"""
Random-policy frame collection and the seekable frame-pair dataset file.

File layout (little-endian):
    magic b"SPRT1" | uint32 header length | UTF-8 JSON header | frames
where every frame is a raw float32 frame_size x frame_size block. The header
echoes the environment config, the frame count, the collection seed and the
frame indices at which a new episode starts.
"""

import hashlib
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Iterator, List

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .env import NUM_ACTIONS, SpriteWorld
from .schemas import EnvConfig

logger = logging.getLogger(__name__)

MAGIC = b"SPRT1"
_HEADER_LEN = struct.Struct("<I")
_FRAME_DTYPE = np.dtype("<f4")


class DatasetFormatError(ValueError):
    """Raised when a dataset file is malformed or truncated."""

    pass


def episode_seed(*entropy: int) -> int:
    """Derive a reset seed from (base seed, stream ids...)."""
    return int(np.random.SeedSequence([int(e) for e in entropy]).generate_state(1)[0])


def episode_starts(n_frames: int, episode_len: int) -> List[int]:
    """Frame indices produced by a reset after the first one.

    Each episode contributes its reset frame plus ``episode_len`` step frames.
    """
    period = episode_len + 1
    return list(range(period, n_frames, period))


def collect_random(
    config: EnvConfig, seed: int, n_frames: int, path: Path | str
) -> "FramePairDataset":
    """Record frames from a uniform-random policy.

    Args:
        config: Environment configuration
        seed: Seed for the action stream and the episode reset seeds
        n_frames: Number of frames to record (>= 2)
        path: Output file, written atomically

    Returns:
        The dataset opened for reading

    Raises:
        ValueError: If n_frames < 2
        OSError: On write failure
    """
    if n_frames < 2:
        raise ValueError(f"n_frames must be >= 2, got {n_frames}")
    path = Path(path)
    env = SpriteWorld(config)
    rng = np.random.default_rng(seed)
    starts = episode_starts(n_frames, config.episode_len)
    header = {
        "config": config.model_dump(mode="json"),
        "episode_starts": starts,
        "frame_size": env.frame_size,
        "n_frames": n_frames,
        "seed": seed,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    episode = 0
    try:
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(_HEADER_LEN.pack(len(header_bytes)))
            f.write(header_bytes)
            frame = env.reset(seed=episode_seed(seed, episode))
            f.write(frame.astype(_FRAME_DTYPE).tobytes())
            for _ in range(n_frames - 1):
                if env.t >= config.episode_len:
                    episode += 1
                    frame = env.reset(seed=episode_seed(seed, episode))
                else:
                    frame = env.step(int(rng.integers(NUM_ACTIONS))).obs[1]
                f.write(frame.astype(_FRAME_DTYPE).tobytes())
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError:
        logger.exception(f"Failed writing dataset to {path}")
        tmp.unlink(missing_ok=True)
        raise

    logger.info(f"Collected {n_frames} frames ({episode + 1} episodes) into {path}")
    return FramePairDataset(path)


class FramePairDataset(Dataset):
    """Consecutive-frame pairs (stride 1) backed by a memory-mapped file."""

    def __init__(self, path: Path | str) -> None:
        self.path = Path(path)
        with open(self.path, "rb") as f:
            magic = f.read(len(MAGIC))
            if magic != MAGIC:
                raise DatasetFormatError(f"{self.path} is not a frame dataset (bad magic)")
            raw_len = f.read(_HEADER_LEN.size)
            if len(raw_len) != _HEADER_LEN.size:
                raise DatasetFormatError(f"{self.path} is truncated inside the header")
            (header_len,) = _HEADER_LEN.unpack(raw_len)
            try:
                self.header: Dict[str, Any] = json.loads(f.read(header_len))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise DatasetFormatError(f"{self.path} has an unreadable header") from e

        self.n_frames = int(self.header["n_frames"])
        self.frame_size = int(self.header["frame_size"])
        offset = len(MAGIC) + _HEADER_LEN.size + header_len
        expected = offset + self.n_frames * self.frame_size**2 * _FRAME_DTYPE.itemsize
        actual = self.path.stat().st_size
        if actual != expected:
            raise DatasetFormatError(
                f"{self.path} holds {actual} bytes, header implies {expected}"
            )
        self.frames = np.memmap(
            self.path,
            dtype=_FRAME_DTYPE,
            mode="r",
            offset=offset,
            shape=(self.n_frames, self.frame_size, self.frame_size),
        )
        starts = set(self.header.get("episode_starts", []))
        self._pair_start = np.array(
            [i for i in range(self.n_frames - 1) if i + 1 not in starts], dtype=np.int64
        )

    @property
    def env_config(self) -> EnvConfig:
        return EnvConfig.model_validate(self.header["config"])

    def __len__(self) -> int:
        return len(self._pair_start)

    def __getitem__(self, index: int) -> torch.Tensor:
        i = int(self._pair_start[index])
        pair = np.array(self.frames[i : i + 2], dtype=np.float32)
        return torch.from_numpy(pair)

    def loader(self, batch_size: int, seed: int, num_workers: int = 0) -> DataLoader:
        """Shuffled loader; each pass over it is a freshly reshuffled epoch."""
        generator = torch.Generator().manual_seed(seed)
        return DataLoader(
            self,
            batch_size=batch_size,
            shuffle=True,
            drop_last=True,
            generator=generator,
            num_workers=num_workers,
        )

    def batches(
        self, batch_size: int, seed: int, num_workers: int = 0
    ) -> Iterator[torch.Tensor]:
        """Endless stream of (B, 2, H, W) batches, reshuffled every epoch."""
        if len(self) < batch_size:
            raise ValueError(
                f"dataset has {len(self)} pairs, fewer than batch size {batch_size}"
            )
        loader = self.loader(batch_size, seed, num_workers)
        while True:
            yield from loader

    def checksum(self) -> str:
        digest = hashlib.sha256()
        with open(self.path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
        return digest.hexdigest()

    def summary(self) -> Dict[str, Any]:
        return {
            "frames": self.n_frames,
            "pairs": len(self),
            "checksum": self.checksum(),
            "path": str(self.path),
        }
