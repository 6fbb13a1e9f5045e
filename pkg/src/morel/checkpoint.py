"""
Portable checkpoint files.

Layout (little-endian):
    magic b"MORELCK" | uint32 format version | uint64 manifest length |
    32-byte SHA-256 of the manifest | UTF-8 JSON manifest | tensor blobs

The manifest lists every tensor (name, dtype, shape, offset into the blob
section, byte count, SHA-256) plus the step counter, the config fingerprint
and free-form metadata. Model parameters are stored under ``model/`` and
flattened optimizer state under ``optim/``.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

MAGIC = b"MORELCK"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct(f"<{len(MAGIC)}sIQ32s")

MODEL_PREFIX = "model/"
OPTIM_PREFIX = "optim/"

_DTYPES: Dict[str, torch.dtype] = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    """Base class for checkpoint failures."""

    pass


class CheckpointIntegrityError(CheckpointError):
    """Raised when a checkpoint is truncated or fails its checksums."""

    pass


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint was written by an unsupported format version."""

    pass


class IncompatibleCheckpointError(CheckpointError):
    """Raised when checkpoint tensors do not fit the target module."""

    pass


@dataclass
class Checkpoint:
    tensors: Dict[str, torch.Tensor]
    step: int = 0
    fingerprint: str = ""
    meta: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_modules(
        cls,
        model: nn.Module,
        optimizer: Optional[torch.optim.Optimizer] = None,
        step: int = 0,
        fingerprint: str = "",
        meta: Optional[Mapping[str, Any]] = None,
    ) -> "Checkpoint":
        tensors = {
            MODEL_PREFIX + name: t.detach().clone() for name, t in model.state_dict().items()
        }
        meta = dict(meta or {})
        if optimizer is not None:
            state = optimizer.state_dict()
            scalars: Dict[str, Any] = {}
            for index, entry in state["state"].items():
                for key, value in entry.items():
                    name = f"{OPTIM_PREFIX}{index}/{key}"
                    if torch.is_tensor(value):
                        tensors[name] = value.detach().clone()
                    else:
                        scalars[name] = value
            meta["optimizer"] = {"param_groups": state["param_groups"], "scalars": scalars}
        return cls(tensors=tensors, step=step, fingerprint=fingerprint, meta=meta)

    def model_state(self, prefix: str = "") -> Dict[str, torch.Tensor]:
        """Model tensors whose name starts with ``prefix``, with the prefix removed."""
        full = MODEL_PREFIX + prefix
        return {
            name[len(full) :]: t for name, t in self.tensors.items() if name.startswith(full)
        }

    def optimizer_state(self) -> Optional[Dict[str, Any]]:
        saved = self.meta.get("optimizer")
        if saved is None:
            return None
        state: Dict[int, Dict[str, Any]] = {}
        for name, t in self.tensors.items():
            if name.startswith(OPTIM_PREFIX):
                index, key = name[len(OPTIM_PREFIX) :].split("/", 1)
                state.setdefault(int(index), {})[key] = t
        for name, value in saved.get("scalars", {}).items():
            index, key = name[len(OPTIM_PREFIX) :].split("/", 1)
            state.setdefault(int(index), {})[key] = value
        return {"state": state, "param_groups": saved["param_groups"]}


def _to_bytes(t: torch.Tensor) -> bytes:
    array = t.detach().cpu().contiguous().numpy()
    if array.dtype.byteorder == ">":
        array = array.astype(array.dtype.newbyteorder("<"))
    return array.tobytes()


def save(checkpoint: Checkpoint, path: Path | str) -> Path:
    """Write ``checkpoint`` atomically (temp file, fsync, rename)."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(checkpoint.tensors):
        t = checkpoint.tensors[name]
        if t.dtype not in _DTYPE_NAMES:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {t.dtype}")
        raw = _to_bytes(t)
        entries.append(
            {
                "name": name,
                "dtype": _DTYPE_NAMES[t.dtype],
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "version": FORMAT_VERSION,
        "step": int(checkpoint.step),
        "fingerprint": checkpoint.fingerprint,
        "meta": checkpoint.meta,
        "tensors": entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    preamble = _PREAMBLE.pack(
        MAGIC, FORMAT_VERSION, len(manifest_bytes), hashlib.sha256(manifest_bytes).digest()
    )

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(preamble)
            f.write(manifest_bytes)
            for raw in blobs:
                f.write(raw)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError:
        logger.exception(f"Failed writing checkpoint {path}")
        tmp.unlink(missing_ok=True)
        raise
    logger.info(f"Saved checkpoint {path} (step {checkpoint.step}, {len(entries)} tensors)")
    return path


def load(path: Path | str) -> Checkpoint:
    """Read and fully verify a checkpoint.

    Raises:
        CheckpointIntegrityError: Bad magic, truncation or checksum mismatch
        CheckpointVersionError: Unsupported format version
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _PREAMBLE.size:
        raise CheckpointIntegrityError(f"{path} is truncated (no complete header)")
    magic, version, manifest_len, manifest_digest = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointIntegrityError(f"{path} is not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}, this build reads version {FORMAT_VERSION}"
        )
    start = _PREAMBLE.size
    manifest_bytes = data[start : start + manifest_len]
    if len(manifest_bytes) != manifest_len:
        raise CheckpointIntegrityError(f"{path} is truncated inside the manifest")
    if hashlib.sha256(manifest_bytes).digest() != manifest_digest:
        raise CheckpointIntegrityError(f"{path} manifest checksum mismatch")
    manifest = json.loads(manifest_bytes)

    blob_start = start + manifest_len
    tensors: Dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        begin = blob_start + entry["offset"]
        raw = data[begin : begin + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointIntegrityError(f"{path} is truncated in tensor '{entry['name']}'")
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointIntegrityError(f"{path} checksum mismatch in tensor '{entry['name']}'")
        dtype = _DTYPES[entry["dtype"]]
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype.newbyteorder("<")
        array = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(array.copy())
    return Checkpoint(
        tensors=tensors,
        step=int(manifest["step"]),
        fingerprint=manifest["fingerprint"],
        meta=manifest["meta"],
    )


def load_state(module: nn.Module, state: Mapping[str, torch.Tensor], what: str = "model") -> None:
    """Copy ``state`` into ``module`` after checking names and shapes.

    Raises:
        IncompatibleCheckpointError: Naming the first missing, unexpected or
            mis-shaped tensor
    """
    expected = module.state_dict()
    missing = sorted(set(expected) - set(state))
    if missing:
        raise IncompatibleCheckpointError(f"{what}: tensor '{missing[0]}' missing from checkpoint")
    unexpected = sorted(set(state) - set(expected))
    if unexpected:
        raise IncompatibleCheckpointError(f"{what}: unexpected tensor '{unexpected[0]}'")
    for name, target in expected.items():
        if tuple(state[name].shape) != tuple(target.shape):
            raise IncompatibleCheckpointError(
                f"{what}: tensor '{name}' has shape {tuple(state[name].shape)}, "
                f"model expects {tuple(target.shape)}"
            )
    module.load_state_dict(dict(state), strict=True)


def tensor_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over sorted tensor names and their raw bytes."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode("utf-8"))
        digest.update(_to_bytes(tensors[name]))
    return digest.hexdigest()


def module_digest(module: nn.Module) -> str:
    return tensor_digest(module.state_dict())
