"""Self-describing checkpoint archives."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import torch

from .model import ModelConfig, TANNTM

FORMAT_ID = "tan-ntm-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: TANNTM, vocab_sha256: Optional[str] = None, **extra) -> Path:
    """Write config, parameters, normalization statistics and ``extra`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_ID,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "dtype": str(next(model.parameters()).dtype),
        "vocab_sha256": vocab_sha256,
        **extra,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_ID:
        raise CheckpointError(f"{path} is not a {FORMAT_ID} archive")
    return payload


def load_model(path, vocab_sha256: Optional[str] = None) -> tuple[TANNTM, dict]:
    """Rebuild a model from a checkpoint, optionally checking the vocabulary hash."""
    payload = load_checkpoint(path)
    if vocab_sha256 is not None and payload.get("vocab_sha256") not in (None, vocab_sha256):
        raise CheckpointError("checkpoint was trained against a different vocabulary")
    model = TANNTM(ModelConfig(**payload["config"]))
    if payload.get("dtype") == "torch.float64":
        model = model.double()
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
