"""Checkpoint serialization: model/optimizer/rng state plus enough
hyperparameters to rebuild the model.  load(save(x)) reproduces forward
outputs bitwise; hashes are computed over tensor bytes, not file bytes."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError

FORMAT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def state_hash(model_state: dict, step: int = 0) -> str:
    h = hashlib.sha256()
    h.update(str(int(step)).encode())
    for name in sorted(model_state):
        t = model_state[name]
        h.update(name.encode())
        arr = t.detach().cpu().contiguous().numpy() if torch.is_tensor(t) else np.asarray(t)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, *, model, model_kind: str, model_kwargs: dict,
                    optimizer=None, step: int = 0, config: dict | None = None,
                    batch_rng: np.random.Generator | None = None) -> str:
    config = config or {}
    ckpt = {
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
        "model_kwargs": model_kwargs,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "torch_rng": torch.get_rng_state(),
        "batch_rng": batch_rng.bit_generator.state if batch_rng is not None else None,
        "config": config,
        "config_hash": config_hash(config),
        "state_hash": state_hash(model.state_dict(), step),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    os.close(fd)
    try:
        torch.save(ckpt, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return ckpt["state_hash"]


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{path}: format_version {ckpt.get('format_version')} != {FORMAT_VERSION}")
    return ckpt


def restore_rng(ckpt: dict) -> np.random.Generator | None:
    torch.set_rng_state(ckpt["torch_rng"])
    if ckpt.get("batch_rng") is None:
        return None
    rng = np.random.default_rng(0)
    rng.bit_generator.state = ckpt["batch_rng"]
    return rng
