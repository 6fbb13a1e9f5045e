"""Tests for random-policy collection and the frame-pair dataset."""

import hashlib

import numpy as np
import pytest
import torch

from morel.dataset import (
    MAGIC,
    DatasetFormatError,
    FramePairDataset,
    collect_random,
    episode_seed,
    episode_starts,
)
from morel.env import SpriteWorld
from morel.env import collect_random as env_collect_random
from morel.schemas import EnvConfig


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_two_frames_give_one_pair(tmp_path):
    """Test that n_frames=2 yields exactly one pair."""
    dataset = collect_random(EnvConfig(), seed=0, n_frames=2, path=tmp_path / "d.bin")
    assert len(dataset) == 1
    pair = dataset[0]
    assert pair.shape == (2, 84, 84)
    assert pair.dtype == torch.float32


def test_too_few_frames(tmp_path):
    """Test that fewer than two frames is an argument error."""
    with pytest.raises(ValueError, match="n_frames"):
        collect_random(EnvConfig(), seed=0, n_frames=1, path=tmp_path / "d.bin")


def test_recollection_is_byte_identical(tmp_path):
    """Test that the same seeds write byte-identical files."""
    a = collect_random(EnvConfig(), 5, 50, tmp_path / "a.bin")
    b = collect_random(EnvConfig(), 5, 50, tmp_path / "b.bin")
    assert _sha(a.path) == _sha(b.path)
    assert a.checksum() == _sha(a.path)
    c = collect_random(EnvConfig(), 6, 50, tmp_path / "c.bin")
    assert _sha(c.path) != _sha(a.path)


def test_env_module_exposes_collection(tmp_path):
    """Test the collection entry point on the environment module."""
    dataset = env_collect_random(EnvConfig(), 0, 3, tmp_path / "d.bin")
    assert len(dataset) == 2


def test_pairs_are_consecutive_frames(tmp_path):
    """Test stride-1 pairing and replay of the random policy."""
    config = EnvConfig(seed=0)
    dataset = collect_random(config, 3, 10, tmp_path / "d.bin")
    assert len(dataset) == 9
    for i in range(len(dataset) - 1):
        assert torch.equal(dataset[i][1], dataset[i + 1][0])

    env = SpriteWorld(config)
    first = env.reset(seed=episode_seed(3, 0))
    assert np.array_equal(dataset.frames[0], first)
    rng = np.random.default_rng(3)
    second = env.step(int(rng.integers(5))).obs[1]
    assert np.array_equal(dataset.frames[1], second)


def test_pairs_skip_episode_boundaries(tmp_path):
    """Test that no pair straddles an episode reset."""
    config = EnvConfig(episode_len=4)
    dataset = collect_random(config, 0, 12, tmp_path / "d.bin")
    starts = episode_starts(12, 4)
    assert starts == [5, 10]
    assert dataset.header["episode_starts"] == starts
    assert len(dataset) == 12 - 1 - len(starts)


def test_header_echoes_config(tmp_path):
    """Test that the header carries config, frame count and seed."""
    config = EnvConfig(num_sprites=2, seed=4)
    dataset = collect_random(config, 9, 4, tmp_path / "d.bin")
    assert dataset.env_config == config
    assert dataset.header["n_frames"] == 4
    assert dataset.header["seed"] == 9
    assert dataset.path.read_bytes()[: len(MAGIC)] == MAGIC


def test_bad_magic(tmp_path):
    """Test that foreign files are rejected."""
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTADATASET" * 10)
    with pytest.raises(DatasetFormatError, match="bad magic"):
        FramePairDataset(path)


def test_truncated_file(tmp_path):
    """Test that a truncated dataset is rejected."""
    dataset = collect_random(EnvConfig(), 0, 4, tmp_path / "d.bin")
    data = dataset.path.read_bytes()
    broken = tmp_path / "broken.bin"
    broken.write_bytes(data[:-10])
    with pytest.raises(DatasetFormatError, match="bytes"):
        FramePairDataset(broken)


def test_batches_reshuffle_and_cycle(tmp_path):
    """Test the endless seeded batch stream."""
    dataset = collect_random(EnvConfig(), 0, 9, tmp_path / "d.bin")
    stream = dataset.batches(batch_size=4, seed=1)
    batches = [next(stream) for _ in range(5)]
    assert all(b.shape == (4, 2, 84, 84) for b in batches)

    again = dataset.batches(batch_size=4, seed=1)
    assert all(torch.equal(b, next(again)) for b in batches)


def test_batches_need_enough_pairs(tmp_path):
    """Test that a dataset smaller than a batch is rejected."""
    dataset = collect_random(EnvConfig(), 0, 3, tmp_path / "d.bin")
    with pytest.raises(ValueError, match="fewer than batch size"):
        next(dataset.batches(batch_size=16, seed=0))


def test_summary(tmp_path):
    """Test the dataset summary."""
    dataset = collect_random(EnvConfig(), 0, 5, tmp_path / "d.bin")
    summary = dataset.summary()
    assert summary["frames"] == 5
    assert summary["pairs"] == 4
    assert len(summary["checksum"]) == 64
