"""Volume rendering helpers: maximum intensity projection and threshold
surface depth maps."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from ..metrics import high_density_mask

AXIS_INDEX = {"depth": 0, "height": 1, "width": 2}


def render_mip(vol, axis: str = "depth") -> np.ndarray:
    """Per-pixel max along the named axis; input is assumed [0,1] and the
    output is clipped to that range."""
    if axis not in AXIS_INDEX:
        raise ConfigError(f"axis: expected one of {sorted(AXIS_INDEX)}, got {axis!r}")
    values = vol.values if hasattr(vol, "values") else np.asarray(vol)
    return np.clip(values.max(axis=AXIS_INDEX[axis]), 0.0, 1.0).astype(np.float32)


def render_threshold(vol) -> np.ndarray:
    """Binarize at 1.5x mean density (the volume-DSC rule) and shade the
    front-most occupied depth per pixel: closer surfaces are brighter,
    empty rays are 0."""
    values = vol.values if hasattr(vol, "values") else np.asarray(vol)
    mask = high_density_mask(values)
    d = mask.shape[0]
    occupied = mask.any(axis=0)
    first = np.argmax(mask, axis=0)          # first True along depth
    shade = 1.0 - first.astype(np.float64) / d
    return np.where(occupied, shade, 0.0).astype(np.float32)
