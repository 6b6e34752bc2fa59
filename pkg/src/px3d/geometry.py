"""Panoramic projection along the dental arch, curved planar reformation,
and angular-misalignment augmentation.

World coordinates (mm): x runs left-right, y front-to-back, z bottom-to-top.
A volume array V[d, h, w] has its voxel center at world
(x, y, z) = ((w + .5) * s_w, (d + .5) * s_d, (h + .5) * s_h).

Sign conventions (the magnitudes are fixed, the signs are ours):
  * positive "lateral" degrees turn the head to the patient's left
    (rotation about the vertical z axis) -> label "rotation-left";
  * positive "vertical" degrees tilt the chin up (rotation about the
    left-right x axis) -> label "chin-up".
Curve normals are the in-plane +90 degree rotation of the tangent,
n = (-t_y, t_x, 0); the normal-offset (depth) axis of the unfolded volume
increases along +n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GeometryError
from .volume import Volume

MISALIGNMENT_CLASSES = ("regular", "rotation-left", "rotation-right", "chin-up", "chin-down")


# ---------------------------------------------------------------------------
# arch curve


@dataclass
class ArchCurve:
    """Arc-length-parameterized planar polyline with tangents and normals."""

    points_mm: np.ndarray      # (M, 3)
    tangents: np.ndarray       # (M, 3), unit
    normals: np.ndarray        # (M, 3), unit, in the axial plane
    arc_length_mm: np.ndarray  # (M,), cumulative, starts at 0

    @classmethod
    def from_points(cls, points_mm) -> "ArchCurve":
        """Build a curve from ordered points; drops zero-length segments,
        recomputes tangents by central differences."""
        pts = np.asarray(points_mm, dtype=np.float64).reshape(-1, 3)
        if len(pts) >= 2:
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            keep = np.concatenate([[True], seg > 1e-12])
            pts = pts[keep]
        if len(pts) < 2:
            raise GeometryError("curve needs at least 2 distinct points")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        tangents = np.empty_like(pts)
        tangents[1:-1] = pts[2:] - pts[:-2]
        tangents[0] = pts[1] - pts[0]
        tangents[-1] = pts[-1] - pts[-2]
        tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
        normals = np.stack(
            [-tangents[:, 1], tangents[:, 0], np.zeros(len(pts))], axis=1
        )
        nn = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(nn < 1e-12):
            raise GeometryError("vertical tangent: axial-plane normal undefined")
        normals /= nn
        return cls(pts, tangents, normals, arc)

    @property
    def total_length_mm(self) -> float:
        return float(self.arc_length_mm[-1])

    def __len__(self) -> int:
        return len(self.points_mm)


def resample_arch(curve: ArchCurve, step_mm: float) -> ArchCurve:
    """Resample to points spaced step_mm apart in arc length (the last
    segment may be shorter); tangents/normals recomputed."""
    if step_mm <= 0:
        raise GeometryError(f"step_mm must be positive, got {step_mm}")
    total = curve.total_length_mm
    if total <= 0:
        raise GeometryError("degenerate curve: zero total arc length")
    n_full = int(math.floor(total / step_mm + 1e-9))
    params = np.arange(n_full + 1, dtype=np.float64) * step_mm
    if total - params[-1] > 1e-9 * max(1.0, total):
        params = np.concatenate([params, [total]])
    pts = np.stack(
        [np.interp(params, curve.arc_length_mm, curve.points_mm[:, k]) for k in range(3)],
        axis=1,
    )
    return ArchCurve.from_points(pts)


# ---------------------------------------------------------------------------
# configuration types


@dataclass
class ProjectionConfig:
    unit_mm: float = 0.2
    depth_mm: float = 40.0
    height_mm: float = 100.0
    out_px_dims: tuple[int, int] = (128, 256)          # (H, W)
    out_vol_dims: tuple[int, int, int] = (128, 256, 128)  # (H, W, D)

    def validate(self) -> "ProjectionConfig":
        if self.unit_mm <= 0:
            raise ConfigError(f"unit_mm must be > 0, got {self.unit_mm}")
        if self.depth_mm <= 0:
            raise ConfigError(f"depth_mm must be > 0, got {self.depth_mm}")
        if self.height_mm <= 0:
            raise ConfigError(f"height_mm must be > 0, got {self.height_mm}")
        if any(int(n) <= 0 for n in self.out_px_dims) or len(self.out_px_dims) != 2:
            raise ConfigError(f"out_px_dims must be positive (H, W), got {self.out_px_dims}")
        if any(int(n) <= 0 for n in self.out_vol_dims) or len(self.out_vol_dims) != 3:
            raise ConfigError(f"out_vol_dims must be positive (H, W, D), got {self.out_vol_dims}")
        return self

    @property
    def n_depth(self) -> int:
        return int(round(self.depth_mm / self.unit_mm))

    @property
    def n_height(self) -> int:
        return int(round(self.height_mm / self.unit_mm))

    @classmethod
    def desk(cls) -> "ProjectionConfig":
        return cls(unit_mm=0.4, depth_mm=12.8, height_mm=19.2,
                   out_px_dims=(32, 64), out_vol_dims=(32, 64, 32))


@dataclass
class MisalignmentSpec:
    label: str                      # one of MISALIGNMENT_CLASSES
    axis: str                       # {lateral, vertical, none}
    degrees: float
    center_mm: tuple[float, float, float]

    def validate(self) -> "MisalignmentSpec":
        if self.label not in MISALIGNMENT_CLASSES:
            raise ConfigError(f"label: unknown misalignment label {self.label!r}")
        if self.axis not in ("lateral", "vertical", "none"):
            raise ConfigError(f"axis: unknown rotation axis {self.axis!r}")
        deg = float(self.degrees)
        if self.label == "regular":
            if deg != 0.0 or self.axis != "none":
                raise ConfigError("degrees: regular label requires 0 degrees and axis 'none'")
        elif self.label in ("rotation-left", "rotation-right"):
            if self.axis != "lateral" or abs(deg) not in (5.0, 10.0):
                raise ConfigError(
                    f"degrees: {self.label} requires lateral axis and |degrees| in {{5, 10}}, "
                    f"got axis={self.axis} degrees={deg}")
            if (deg > 0) != (self.label == "rotation-left"):
                raise ConfigError(f"degrees: sign of {deg} conflicts with label {self.label}")
        else:  # chin-up / chin-down
            if self.axis != "vertical" or abs(deg) != 5.0:
                raise ConfigError(
                    f"degrees: {self.label} requires vertical axis and |degrees| = 5, "
                    f"got axis={self.axis} degrees={deg}")
            if (deg > 0) != (self.label == "chin-up"):
                raise ConfigError(f"degrees: sign of {deg} conflicts with label {self.label}")
        return self

    @property
    def class_id(self) -> int:
        return MISALIGNMENT_CLASSES.index(self.label)


@dataclass
class Sample:
    px: np.ndarray                       # (H, W) float32 in [0,1]
    unfolded: Volume                     # (D, H, W)
    class_id: int
    class_name: str
    binary_label: int                    # 0 regular, 1 misaligned
    lesion_mask_2d: np.ndarray | None    # (H, W) bool, present iff phantom has lesion
    source_phantom_id: str
    axis: str = "none"
    degrees: float = 0.0


# ---------------------------------------------------------------------------
# sampling primitives


def sample_trilinear(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at continuous (d, h, w) indices; everything
    outside the grid reads as 0."""
    values = np.asarray(values)
    idx = np.asarray(idx, dtype=np.float64)
    i0 = np.floor(idx).astype(np.int64)
    frac = idx - i0
    out = np.zeros(idx.shape[:-1], dtype=np.float64)
    dims = values.shape
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        ci = i0 + off
        valid = np.all((ci >= 0) & (ci < np.array(dims)), axis=-1)
        w = np.ones(idx.shape[:-1], dtype=np.float64)
        for ax in range(3):
            f = frac[..., ax]
            w = w * (f if off[ax] else 1.0 - f)
        cc = np.where(valid[..., None], ci, 0)
        out += np.where(valid, w * values[cc[..., 0], cc[..., 1], cc[..., 2]], 0.0)
    return out


def area_resample_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) box-overlap weights; rows sum to 1, global mean is
    preserved exactly (each output cell averages its footprint and the
    output cells partition the domain uniformly)."""
    edges_in = np.arange(n_in + 1, dtype=np.float64) / n_in
    edges_out = np.arange(n_out + 1, dtype=np.float64) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    return np.clip(hi - lo, 0.0, None) * n_out


def area_resample(arr: np.ndarray, out_shape) -> np.ndarray:
    """Mean-preserving box resampling of every axis to out_shape."""
    out = np.asarray(arr, dtype=np.float64)
    for ax, n_out in enumerate(out_shape):
        if out.shape[ax] == n_out:
            continue
        w = area_resample_weights(out.shape[ax], n_out)
        out = np.moveaxis(np.tensordot(w, out, axes=([1], [ax])), 0, ax)
    return out


def minmax_normalize(arr: np.ndarray) -> np.ndarray:
    """Per-array min-max to [0,1]; a constant array maps to all zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        return np.zeros_like(arr, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def _world_to_index(pts_xyz: np.ndarray, spacing) -> np.ndarray:
    """World (x, y, z) mm -> continuous (d, h, w) indices."""
    sd, sh, sw = spacing
    idx = np.empty_like(pts_xyz)
    idx[..., 0] = pts_xyz[..., 1] / sd - 0.5
    idx[..., 1] = pts_xyz[..., 2] / sh - 0.5
    idx[..., 2] = pts_xyz[..., 0] / sw - 0.5
    return idx


def sample_curved_grid(volume: Volume, curve: ArchCurve, cfg: ProjectionConfig,
                       col_block: int = 256) -> np.ndarray:
    """Sample the (depth x height x arc-length) grid swept along the curve.

    Returns the raw float64 grid of shape (n_depth, n_height, n_cols) where
    n_cols is the number of unit_mm arc samples.  Row 0 is the top of the
    height window, depth index increases along +normal.
    """
    cfg.validate()
    if len(curve) < 2:
        raise GeometryError("empty or degenerate curve")
    c = resample_arch(curve, cfg.unit_mm)
    n_d, n_h, n_w = cfg.n_depth, cfg.n_height, len(c)
    offsets = (np.arange(n_d) + 0.5) * cfg.unit_mm - cfg.depth_mm / 2.0
    dz = cfg.height_mm / 2.0 - (np.arange(n_h) + 0.5) * cfg.unit_mm
    grid = np.empty((n_d, n_h, n_w), dtype=np.float64)
    for b0 in range(0, n_w, col_block):
        b1 = min(b0 + col_block, n_w)
        p = c.points_mm[b0:b1]               # (B, 3)
        n = c.normals[b0:b1]
        # (n_d, n_h, B, 3) world positions
        pos = (p[None, None, :, :]
               + offsets[:, None, None, None] * n[None, None, :, :])
        pos = np.broadcast_to(pos, (n_d, n_h, b1 - b0, 3)).copy()
        pos[..., 2] += dz[None, :, None]
        grid[:, :, b0:b1] = sample_trilinear(
            volume.values, _world_to_index(pos, volume.spacing_mm))
    return grid


def _project_pair(volume: Volume, curve: ArchCurve, cfg: ProjectionConfig):
    """Shared core: pre-normalization panoramic and unfolded grids at
    output dims, computed from one native sampling pass."""
    grid = sample_curved_grid(volume, curve, cfg)
    out_h, out_w = (int(n) for n in cfg.out_px_dims)
    vol_h, vol_w, vol_d = (int(n) for n in cfg.out_vol_dims)
    grid_hw = area_resample(grid, (grid.shape[0], out_h, out_w))
    px_pre = grid_hw.mean(axis=0)
    vol_pre = area_resample(grid_hw, (vol_d, vol_h, vol_w))
    return px_pre, vol_pre


def project_panoramic(volume: Volume, curve: ArchCurve, cfg: ProjectionConfig,
                      normalized: bool = True) -> np.ndarray:
    """Mean-of-ray-samples panoramic projection along the curve, resampled
    to cfg.out_px_dims; min-max normalized unless normalized=False."""
    grid = sample_curved_grid(volume, curve, cfg)
    out_h, out_w = (int(n) for n in cfg.out_px_dims)
    px_pre = area_resample(grid.mean(axis=0), (out_h, out_w))
    return minmax_normalize(px_pre) if normalized else px_pre


def reformat_unfolded(volume: Volume, curve: ArchCurve, cfg: ProjectionConfig,
                      normalized: bool = True) -> Volume:
    """Curved planar reformation: same samples as the panoramic projection
    with the depth axis retained, resampled to cfg.out_vol_dims."""
    _, vol_pre = _project_pair(volume, curve, cfg)
    vol_h, vol_w, vol_d = (int(n) for n in cfg.out_vol_dims)
    values = minmax_normalize(vol_pre) if normalized else vol_pre.astype(np.float32)
    spacing = (cfg.depth_mm / vol_d, cfg.height_mm / vol_h,
               curve.total_length_mm / vol_w)
    return Volume(values, spacing)


# ---------------------------------------------------------------------------
# rigid rotation


def _rotation_matrix_arr(axis: str, degrees: float) -> np.ndarray:
    """Rotation in array (d, h, w) index order for the named anatomy axis."""
    t = math.radians(degrees)
    ct, st = math.cos(t), math.sin(t)
    if axis == "lateral":      # about vertical z: mixes (x, y) = (w, d)
        return np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
    if axis == "vertical":     # about left-right x: mixes (y, z) = (d, h)
        return np.array([[ct, -st, 0.0], [st, ct, 0.0], [0.0, 0.0, 1.0]])
    raise ConfigError(f"axis: cannot rotate about {axis!r}")


def rotate_volume(volume: Volume, axis: str, degrees: float,
                  center_mm) -> Volume:
    """Rigid rotation about center_mm (world x, y, z), trilinear resample,
    out-of-bounds reads as 0."""
    if degrees == 0.0:
        return volume.copy()
    sd, sh, sw = volume.spacing_mm
    if not (abs(sd - sh) < 1e-9 and abs(sh - sw) < 1e-9):
        raise GeometryError("rotation requires isotropic spacing")
    cx, cy, cz = (float(v) for v in center_mm)
    c_idx = np.array([cy / sd - 0.5, cz / sh - 0.5, cx / sw - 0.5])
    m = _rotation_matrix_arr(axis, -degrees)   # pull transform
    offset = c_idx - m @ c_idx
    out = ndimage.affine_transform(
        volume.values.astype(np.float64), m, offset=offset,
        order=1, mode="constant", cval=0.0, prefilter=False)
    return Volume(out.astype(np.float32), volume.spacing_mm)


def simulate_misalignment(volume: Volume, spec: MisalignmentSpec) -> Volume:
    spec.validate()
    if spec.label == "regular":
        return volume.copy()
    return rotate_volume(volume, spec.axis, spec.degrees, spec.center_mm)


# ---------------------------------------------------------------------------
# sample construction

LESION_COVERAGE_THRESHOLD = 0.10


def misalignment_specs(phantom) -> list[MisalignmentSpec]:
    """The 7 acquisition specs per phantom: 1 regular, 4 lateral, 2 vertical."""
    meta = phantom.metadata
    ix, iy, _ = meta["incisor_midpoint_mm"]
    lateral_center = (ix, iy + 15.0, meta["crown_top_z_mm"] - 10.0)
    ext_d, ext_h, ext_w = phantom.volume.extent_mm
    vertical_center = (ext_w / 2.0, ext_d / 2.0, ext_h / 2.0)   # world (x, y, z)
    specs = [MisalignmentSpec("regular", "none", 0.0, lateral_center)]
    for deg in (5.0, 10.0):
        specs.append(MisalignmentSpec("rotation-left", "lateral", deg, lateral_center))
    for deg in (-5.0, -10.0):
        specs.append(MisalignmentSpec("rotation-right", "lateral", deg, lateral_center))
    specs.append(MisalignmentSpec("chin-up", "vertical", 5.0, vertical_center))
    specs.append(MisalignmentSpec("chin-down", "vertical", -5.0, vertical_center))
    return [s.validate() for s in specs]


def _project_lesion_mask(mask_vol: Volume, curve: ArchCurve, cfg: ProjectionConfig) -> np.ndarray:
    """Per-pixel fraction of ray samples inside the (interpolated) mask,
    resampled to output dims and thresholded at 10% coverage."""
    grid = sample_curved_grid(mask_vol, curve, cfg)
    coverage = (grid > 0.5).mean(axis=0)
    out_h, out_w = (int(n) for n in cfg.out_px_dims)
    coverage = area_resample(coverage, (out_h, out_w))
    return coverage > LESION_COVERAGE_THRESHOLD


def build_samples(phantom, cfg: ProjectionConfig) -> list[Sample]:
    """Emit the 7 samples for one phantom; the arch curve stays fixed while
    the volume rotates."""
    cfg.validate()
    samples = []
    lesion_present = bool(phantom.metadata["lesion_present"])
    for spec in misalignment_specs(phantom):
        vol_r = simulate_misalignment(phantom.volume, spec)
        px_pre, unf_pre = _project_pair(vol_r, phantom.arch_curve, cfg)
        vol_h, vol_w, vol_d = (int(n) for n in cfg.out_vol_dims)
        spacing = (cfg.depth_mm / vol_d, cfg.height_mm / vol_h,
                   phantom.arch_curve.total_length_mm / vol_w)
        mask2d = None
        if lesion_present:
            mask_r = simulate_misalignment(phantom.lesion_mask_3d, spec)
            mask2d = _project_lesion_mask(mask_r, phantom.arch_curve, cfg)
        samples.append(Sample(
            px=minmax_normalize(px_pre),
            unfolded=Volume(minmax_normalize(unf_pre), spacing),
            class_id=spec.class_id,
            class_name=spec.label,
            binary_label=0 if spec.label == "regular" else 1,
            lesion_mask_2d=mask2d,
            source_phantom_id=phantom.metadata.get("id", f"seed{phantom.metadata['seed']}"),
            axis=spec.axis,
            degrees=spec.degrees,
        ))
    return samples
