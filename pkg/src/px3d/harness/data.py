"""Manifest-backed in-memory sample store for the trainers."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import TrainingError
from . import io as hio


class SampleStore:
    """Loads px / unfolded / labels for one split into memory."""

    def __init__(self, manifest_path, split: str | None = None,
                 require_mask: bool = False):
        manifest_path = Path(manifest_path)
        base = manifest_path.parent
        records = hio.read_manifest(manifest_path)
        if split is not None:
            records = [r for r in records if r["split"] == split]
        if require_mask:
            records = [r for r in records if r.get("lesion_mask")]
        if not records:
            raise TrainingError(
                f"no samples in {manifest_path} for split={split!r}"
                + (" with lesion masks" if require_mask else ""))
        self.records = records
        self.ids = [r["id"] for r in records]
        self.px = [hio.read_png16(base / r["px"]) for r in records]
        self.unfolded = [hio.read_volume(base / r["unfolded"]).values for r in records]
        self.class_ids = np.array([r["class_id"] for r in records], dtype=np.int64)
        self.binary_labels = np.array([r["binary_label"] for r in records], dtype=np.int64)
        self.masks = [
            (hio.read_png16(base / r["lesion_mask"]) > 0.5) if r.get("lesion_mask") else None
            for r in records
        ]

    def __len__(self) -> int:
        return len(self.records)

    @property
    def px_hw(self) -> tuple[int, int]:
        return self.px[0].shape

    @property
    def vol_dhw(self) -> tuple[int, int, int]:
        return self.unfolded[0].shape


def batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    """Per-step batch: without replacement when the pool is large enough."""
    return rng.choice(n, size=batch_size, replace=n < batch_size)
