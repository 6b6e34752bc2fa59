"""The 3D density grid shared by the generator, geometry and networks.

Array axis convention used everywhere in this package: volumes are numpy
arrays of shape (D, H, W), C-ordered with D slowest.  For unfolded volumes
D is the normal-offset (depth) axis, H the height axis and W the arc-length
axis; for source phantoms D runs front-to-back, H bottom-to-top and W
left-to-right.  World coordinates are in mm with voxel centers at
(index + 0.5) * spacing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Volume:
    values: np.ndarray                  # (D, H, W) float32
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.values.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.values.shape, self.spacing_mm))

    def copy(self) -> "Volume":
        return Volume(self.values.copy(), self.spacing_mm)
