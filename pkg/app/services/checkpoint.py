"""Versioned checkpoint container shared by classifiers and seq2seq models.

A checkpoint is a single `torch.save` archive holding a dict with a `format`
tag naming the artifact type, an integer `version`, and the payload."""

import hashlib
from pathlib import Path
from typing import Union

import structlog
import torch

from app.errors import (
    CheckpointFormatError,
    CheckpointNotFoundError,
    CheckpointVersionError,
    CorruptCheckpointError,
)

logger = structlog.get_logger(__name__)

FORMAT_CLASSIFIER = "stylehelper.classifier"
FORMAT_SEQ2SEQ = "stylehelper.seq2seq"
CHECKPOINT_VERSION = 1


def write_container(path: Union[str, Path], fmt: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": fmt, "version": CHECKPOINT_VERSION, **payload}, path)
    logger.info("checkpoint_saved", path=str(path), format=fmt)
    return path


def read_container(path: Union[str, Path], fmt: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(path)
    try:
        data = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CorruptCheckpointError(f"{path}: unreadable checkpoint ({e.__class__.__name__})") from e
    if not isinstance(data, dict) or "format" not in data:
        raise CorruptCheckpointError(f"{path}: not a checkpoint container")
    if data["format"] != fmt:
        raise CheckpointFormatError(f"{path}: expected a {fmt} checkpoint, found {data['format']}")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {data.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    logger.info("checkpoint_loaded", path=str(path), format=fmt)
    return data


def parameter_fingerprint(module: torch.nn.Module) -> str:
    """SHA-256 over every named parameter and persistent buffer."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
