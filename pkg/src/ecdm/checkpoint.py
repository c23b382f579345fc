"""Versioned single-file checkpoints (``torch.save`` archive tagged ``ECDM-CKPT-1``)."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any

import torch

MAGIC = "ECDM-CKPT-1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(payload: dict[str, Any], path: str | os.PathLike) -> Path:
    """Atomically write ``payload`` (plus the magic tag) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        torch.save({"magic": MAGIC, **payload}, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: str | os.PathLike) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        raise CheckpointError(f"{path}: not an {MAGIC} checkpoint")
    return payload
