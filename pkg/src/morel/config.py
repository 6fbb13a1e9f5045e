"""Runtime settings and experiment-config loading."""

import hashlib
import json
import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Mapping, Optional, Type, TypeVar

import tomli_w
import torch
from pydantic import BaseModel, ValidationError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


class ConfigurationError(ValueError):
    """Raised for invalid, missing or conflicting configuration."""

    pass


class RuntimeSettings:
    """Process-level settings read from the environment."""

    def __init__(self):
        self.device = os.environ.get("MOREL_DEVICE", "cpu")
        self.log_level = os.environ.get("MOREL_LOG_LEVEL", "INFO").upper()
        threads = os.environ.get("MOREL_NUM_THREADS", "")
        self.num_threads: Optional[int] = int(threads) if threads else None
        self.deterministic = (
            os.environ.get("MOREL_DETERMINISTIC", "true").lower() == "true"
        )

    def apply(self) -> None:
        """Push the settings into torch."""
        if self.num_threads:
            torch.set_num_threads(self.num_threads)
        torch.use_deterministic_algorithms(self.deterministic, warn_only=True)


def validate_model(
    model_cls: Type[ModelT], data: Any, prefix: str = ""
) -> ModelT:
    """Validate ``data`` into ``model_cls``.

    Args:
        model_cls: Pydantic model to build
        data: Mapping (or an instance of ``model_cls``, returned unchanged)
        prefix: Dotted path prepended to field names in error messages

    Returns:
        Validated model instance

    Raises:
        ConfigurationError: Naming the first offending field
    """
    if isinstance(data, model_cls):
        return data
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first.get("loc", ()))
        if prefix:
            field = f"{prefix}.{field}" if field else prefix
        raise ConfigurationError(
            f"invalid config field '{field}': {first.get('msg', 'invalid value')}"
        ) from e


def load_run_config(path: Path | str):
    """Read a TOML run configuration.

    Raises:
        ConfigurationError: If the file is missing, unparsable or invalid
    """
    from .schemas import RunConfig

    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid TOML: {e}") from e
    config = validate_model(RunConfig, data)
    logger.info(f"Loaded run config from {path}")
    return config


def dump_run_config(config: BaseModel) -> str:
    """Serialize a config model to TOML text."""
    return tomli_w.dumps(config.model_dump(mode="json", exclude_none=True))


def write_run_config(config: BaseModel, run_dir: Path) -> Path:
    """Snapshot the config that produced a run into ``run_dir/config.toml``."""
    path = Path(run_dir) / "config.toml"
    path.write_text(dump_run_config(config), encoding="utf-8")
    return path


def config_fingerprint(config: BaseModel | Mapping[str, Any]) -> str:
    """SHA-256 over the canonical JSON form of a config."""
    data = config.model_dump(mode="json") if isinstance(config, BaseModel) else config
    text = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
