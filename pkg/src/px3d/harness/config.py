"""Dims presets and sample-dataset generation.

The "full" preset mirrors the source protocol (0.2 mm sampling, 40 mm depth,
100 mm height, 128x256 images, 128x256x128 unfolded volumes); "desk" divides
the output dims by 4 and scales the physical window to the small phantoms so
the whole pipeline runs in seconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..geometry import ProjectionConfig, build_samples
from ..phantom import PhantomConfig, generate_phantom
from . import io as hio


@dataclass(frozen=True)
class DimsPreset:
    name: str
    phantom: PhantomConfig
    projection: ProjectionConfig


def _desk_preset() -> DimsPreset:
    return DimsPreset(
        name="desk",
        phantom=PhantomConfig(grid_dims=(64, 64, 64), spacing_mm=0.5, tooth_count=8,
                              lesion_radius_range_mm=(1.5, 3.0)),
        projection=ProjectionConfig.desk(),
    )


def _full_preset() -> DimsPreset:
    return DimsPreset(
        name="full",
        phantom=PhantomConfig(grid_dims=(128, 128, 128), spacing_mm=1.5, tooth_count=14,
                              lesion_radius_range_mm=(4.0, 8.0)),
        projection=ProjectionConfig(),
    )


def resolve_preset(name: str) -> DimsPreset:
    presets = {"desk": _desk_preset, "full": _full_preset}
    if name not in presets:
        raise ConfigError(f"dims: unknown preset {name!r}, expected one of {sorted(presets)}")
    return presets[name]()


def _split_counts(count: int, splits) -> list[str]:
    """Per-phantom split tags: explicit counts or train/val/test fractions."""
    if splits is None:
        splits = (0.7, 0.1, 0.2)
    if all(isinstance(s, float) and s <= 1.0 for s in splits):
        n_train = int(round(splits[0] * count))
        n_val = int(round(splits[1] * count))
        n_train = min(n_train, count)
        n_val = min(n_val, count - n_train)
    else:
        n_train, n_val, n_test = (int(s) for s in splits)
        if n_train + n_val + n_test != count:
            raise ConfigError(
                f"splits: counts {splits} do not sum to phantom count {count}")
    tags = (["train"] * n_train + ["val"] * n_val)
    tags += ["test"] * (count - len(tags))
    return tags


def generate_sample_dataset(out_dir, count: int, base_seed: int,
                            dims: str = "desk", lesion_probability: float = 0.5,
                            tooth_count: int | None = None,
                            splits=None) -> Path:
    """Generate `count` phantoms, expand each into its 7 misalignment
    samples, and write px/volume/mask files plus manifest.jsonl.  Reruns
    with identical arguments reproduce identical bytes."""
    if count < 1:
        raise ConfigError(f"count: must be >= 1, got {count}")
    preset = resolve_preset(dims)
    ph_cfg = replace(preset.phantom, lesion_probability=lesion_probability)
    if tooth_count is not None:
        ph_cfg = replace(ph_cfg, tooth_count=tooth_count)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tags = _split_counts(count, splits)
    records = []
    for i in range(count):
        phantom = generate_phantom(replace(ph_cfg, seed=int(base_seed) + i))
        pid = f"p{i:05d}"
        phantom.metadata["id"] = pid
        for j, sample in enumerate(build_samples(phantom, preset.projection)):
            sid = f"{pid}_s{j}"
            px_rel = f"px/{sid}.png"
            vol_rel = f"vol/{sid}.rvol"
            hio.write_png16(sample.px, out / px_rel, kind="panoramic")
            hio.write_volume(sample.unfolded, out / vol_rel)
            mask_rel = None
            if sample.lesion_mask_2d is not None:
                mask_rel = f"mask/{sid}.png"
                hio.write_png16(sample.lesion_mask_2d.astype(np.float64),
                                out / mask_rel, kind="mask")
            records.append({
                "id": sid,
                "px": px_rel,
                "unfolded": vol_rel,
                "class_id": sample.class_id,
                "class_name": sample.class_name,
                "binary_label": sample.binary_label,
                "lesion_mask": mask_rel,
                "phantom_id": pid,
                "split": tags[i],
                "axis": sample.axis,
                "degrees": sample.degrees,
            })
    manifest_path = out / "manifest.jsonl"
    hio.write_manifest(records, manifest_path)
    resolved = {
        "kind": "gen-data", "count": count, "seed": int(base_seed), "dims": dims,
        "lesion_probability": lesion_probability,
        "tooth_count": ph_cfg.tooth_count,
        "splits": list(splits) if splits is not None else [0.7, 0.1, 0.2],
        "samples": len(records),
    }
    hio.atomic_write_bytes(out / "config.json",
                           json.dumps(resolved, indent=2, sort_keys=True).encode())
    return manifest_path
