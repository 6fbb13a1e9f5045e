"""Tests for checkpoint files."""

import struct

import pytest
import torch

from morel.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    CheckpointIntegrityError,
    CheckpointVersionError,
    IncompatibleCheckpointError,
    load,
    load_state,
    module_digest,
    save,
    tensor_digest,
)
from morel.segnet import SegNet


@pytest.fixture
def model():
    return SegNet(num_masks=3, frame_size=36, seed=0)


def test_round_trip_is_bitwise(tmp_path, model):
    """Test that a saved model reloads bit for bit with its metadata."""
    path = save(Checkpoint.from_modules(model, step=12, fingerprint="abc", meta={"kind": "segnet"}), tmp_path / "m.ckpt")
    loaded = load(path)
    assert loaded.step == 12
    assert loaded.fingerprint == "abc"
    assert loaded.meta["kind"] == "segnet"

    restored = SegNet(num_masks=3, frame_size=36, seed=1)
    load_state(restored, loaded.model_state())
    assert module_digest(restored) == module_digest(model)

    x = torch.rand(2, 2, 36, 36)
    assert torch.equal(model(x).masks, restored(x).masks)


def test_optimizer_state_survives(tmp_path, model):
    """Test that Adam moments and step counters are restored."""
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    model(torch.rand(1, 2, 36, 36)).masks.sum().backward()
    optimizer.step()

    loaded = load(save(Checkpoint.from_modules(model, optimizer, step=1), tmp_path / "m.ckpt"))
    fresh = SegNet(num_masks=3, frame_size=36, seed=0)
    load_state(fresh, loaded.model_state())
    restored = torch.optim.Adam(fresh.parameters(), lr=1e-3)
    restored.load_state_dict(loaded.optimizer_state())

    original = optimizer.state_dict()["state"]
    again = restored.state_dict()["state"]
    assert original.keys() == again.keys()
    for index in original:
        assert torch.equal(original[index]["exp_avg"], again[index]["exp_avg"])
        assert torch.equal(original[index]["exp_avg_sq"], again[index]["exp_avg_sq"])


def test_no_optimizer_gives_none(tmp_path, model):
    """Test that a model-only checkpoint reports no optimizer state."""
    loaded = load(save(Checkpoint.from_modules(model), tmp_path / "m.ckpt"))
    assert loaded.optimizer_state() is None
    assert all(name.startswith("model/") for name in loaded.tensors)


def test_model_state_prefix(model):
    """Test selecting a submodule's tensors by prefix."""
    ckpt = Checkpoint.from_modules(model)
    encoder = ckpt.model_state("encoder.")
    assert set(encoder) == set(model.encoder.state_dict())


def test_truncated_file(tmp_path, model):
    """Test that truncation is an integrity error."""
    path = save(Checkpoint.from_modules(model), tmp_path / "m.ckpt")
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(CheckpointIntegrityError, match="truncated"):
        load(path)
    path.write_bytes(data[:10])
    with pytest.raises(CheckpointIntegrityError, match="truncated"):
        load(path)


def test_corrupted_tensor(tmp_path, model):
    """Test that a flipped byte fails the tensor checksum."""
    path = save(Checkpoint.from_modules(model), tmp_path / "m.ckpt")
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointIntegrityError, match="checksum"):
        load(path)


def test_bad_magic(tmp_path):
    """Test that foreign files are rejected."""
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"X" * 100)
    with pytest.raises(CheckpointIntegrityError, match="bad magic"):
        load(path)


def test_unknown_version(tmp_path, model):
    """Test that another format version is a version error."""
    path = save(Checkpoint.from_modules(model), tmp_path / "m.ckpt")
    data = bytearray(path.read_bytes())
    struct.pack_into("<I", data, len(MAGIC), FORMAT_VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointVersionError, match=str(FORMAT_VERSION + 1)):
        load(path)


def test_mask_count_mismatch_names_tensor(model):
    """Test that loading into a different mask count names the tensor."""
    ckpt = Checkpoint.from_modules(model)
    other = SegNet(num_masks=5, frame_size=36, seed=0)
    with pytest.raises(IncompatibleCheckpointError, match="decoder.head") as excinfo:
        load_state(other, ckpt.model_state())
    assert "model expects" in str(excinfo.value)


def test_missing_and_unexpected_tensors(model):
    """Test that missing and extra tensors are reported by name."""
    state = dict(Checkpoint.from_modules(model).model_state())
    name = sorted(state)[0]
    partial = {k: v for k, v in state.items() if k != name}
    with pytest.raises(IncompatibleCheckpointError, match="missing"):
        load_state(model, partial)
    with pytest.raises(IncompatibleCheckpointError, match="unexpected tensor 'extra'"):
        load_state(model, {**state, "extra": torch.zeros(1)})


def test_save_is_atomic(tmp_path, model):
    """Test that no temporary file remains after saving."""
    save(Checkpoint.from_modules(model), tmp_path / "m.ckpt")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt"]


def test_tensor_digest_depends_on_names_and_values():
    """Test that the digest changes with either name or value."""
    base = tensor_digest({"a": torch.zeros(3)})
    assert tensor_digest({"a": torch.zeros(3)}) == base
    assert tensor_digest({"b": torch.zeros(3)}) != base
    assert tensor_digest({"a": torch.ones(3)}) != base
