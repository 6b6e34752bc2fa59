"""Procedural oral-like phantoms: a parabolic jaw arch, ellipsoidal teeth
and an optional radiolucent lesion, with an analytically known arch curve.

All proportions are fractions of the physical extent so the same recipe
works at any grid size.  Everything is a pure function of the config
(including its seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigError
from .geometry import ArchCurve
from .harness import io as hio
from .volume import Volume

DEFAULT_DENSITIES = {
    "background": 0.0,
    "soft_tissue": 0.2,
    "bone": 0.6,
    "lesion": 0.3,
    "tooth": 0.95,
}

# region label codes in Phantom.region_labels
BG, SOFT, BONE, TOOTH, LESION = 0, 1, 2, 3, 4

TEXTURE_NOISE_SIGMA = 0.02
PARTIAL_VOLUME_SIGMA_VOX = 0.6   # edge blur, in voxels
NOISE_CORR_SIGMA_VOX = 1.0       # texture noise correlation length, in voxels


@dataclass
class PhantomConfig:
    grid_dims: tuple[int, int, int] = (64, 64, 64)     # (D, H, W) voxels
    spacing_mm: float = 0.5                            # isotropic
    tooth_count: int = 8
    lesion_probability: float = 0.5
    lesion_radius_range_mm: tuple[float, float] = (1.5, 3.0)
    density_levels: dict = field(default_factory=lambda: dict(DEFAULT_DENSITIES))
    seed: int = 0
    noise_sigma: float = TEXTURE_NOISE_SIGMA

    def validate(self) -> "PhantomConfig":
        if len(self.grid_dims) != 3 or any(int(n) <= 0 for n in self.grid_dims):
            raise ConfigError(f"grid_dims: must be 3 positive ints, got {self.grid_dims}")
        if self.spacing_mm <= 0:
            raise ConfigError(f"spacing_mm: must be > 0, got {self.spacing_mm}")
        if self.tooth_count < 1:
            raise ConfigError(f"tooth_count: must be >= 1, got {self.tooth_count}")
        if not 0.0 <= self.lesion_probability <= 1.0:
            raise ConfigError(
                f"lesion_probability: must be in [0,1], got {self.lesion_probability}")
        rmin, rmax = self.lesion_radius_range_mm
        if not (0 < rmin <= rmax):
            raise ConfigError(
                f"lesion_radius_range_mm: need 0 < min <= max, got {self.lesion_radius_range_mm}")
        lv = self.density_levels
        missing = set(DEFAULT_DENSITIES) - set(lv)
        if missing:
            raise ConfigError(f"density_levels: missing {sorted(missing)}")
        for name, v in lv.items():
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"density_levels[{name!r}]: {v} outside [0,1]")
        # lesions are radiolucent: darker than the bone they sit in
        if not (lv["tooth"] > lv["bone"] > lv["lesion"] >= lv["background"]):
            raise ConfigError(
                "density_levels: need tooth > bone > lesion >= background, got "
                f"{lv}")
        if not (lv["bone"] > lv["soft_tissue"] >= lv["background"]):
            raise ConfigError(
                "density_levels: need bone > soft_tissue >= background, got "
                f"{lv}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma: must be >= 0, got {self.noise_sigma}")
        return self


@dataclass
class Phantom:
    volume: Volume
    arch_curve: ArchCurve
    lesion_mask_3d: Volume          # 0/1 float, same dims as volume
    region_labels: np.ndarray       # (D, H, W) uint8, BG/SOFT/BONE/TOOTH/LESION
    metadata: dict


def _voxel_centers(dims, spacing):
    d, h, w = dims
    y = (np.arange(d) + 0.5) * spacing
    z = (np.arange(h) + 0.5) * spacing
    x = (np.arange(w) + 0.5) * spacing
    return x, y, z


def _arch_polyline(ext_x, ext_y, ext_z, n=257):
    """Parabolic arch y = a*x'^2 + b in the z0 plane, front apex at 0.25*Y."""
    xm = 0.35 * ext_x
    y_front, y_back = 0.25 * ext_y, 0.75 * ext_y
    z0 = 0.45 * ext_z
    xs = np.linspace(-xm, xm, n)
    ys = y_front + (y_back - y_front) * (xs / xm) ** 2
    pts = np.stack([xs + ext_x / 2.0, ys, np.full(n, z0)], axis=1)
    return pts


def generate_phantom(config: PhantomConfig) -> Phantom:
    """Deterministically rasterize one phantom from its config."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dims = tuple(int(n) for n in config.grid_dims)
    s = float(config.spacing_mm)
    ext_y, ext_z, ext_x = (n * s for n in dims)   # dims are (D, H, W)
    lv = config.density_levels

    poly = _arch_polyline(ext_x, ext_y, ext_z)
    curve = ArchCurve.from_points(poly)
    labels = np.zeros(dims, dtype=np.uint8)
    x, y, z = _voxel_centers(dims, s)
    # broadcastable world coordinates per array axis (d: y, h: z, w: x)
    yg = y[:, None, None]
    zg = z[None, :, None]
    xg = x[None, None, :]

    # soft tissue: elliptic cylinder (head outline)
    cx, cy = ext_x / 2.0, ext_y / 2.0
    in_soft = (((xg - cx) / (0.45 * ext_x)) ** 2 + ((yg - cy) / (0.45 * ext_y)) ** 2 <= 1.0)
    in_soft = in_soft & (zg >= 0.10 * ext_z) & (zg <= 0.90 * ext_z)
    labels[np.broadcast_to(in_soft, dims)] = SOFT

    # jaw slab: within r_jaw of the arch in the axial plane, over a z band
    r_jaw = 0.08 * min(ext_x, ext_y)
    gx, gy = np.meshgrid(x, y)                         # (D, W)
    tree = cKDTree(curve.points_mm[:, :2])
    dist2d, _ = tree.query(np.stack([gx.ravel(), gy.ravel()], axis=1))
    dist2d = dist2d.reshape(dims[0], dims[2])          # (D, W)
    in_jaw = (dist2d[:, None, :] <= r_jaw) & (zg >= 0.20 * ext_z) & (zg <= 0.50 * ext_z)
    labels[in_jaw] = BONE

    # teeth: vertically elongated ellipsoids at uniform arc-length spacing
    total = curve.total_length_mm
    margin = 0.06 * total
    count = int(config.tooth_count)
    if count == 1:
        arc_pos = np.array([total / 2.0])
    else:
        arc_pos = np.linspace(margin, total - margin, count)
    gap = (total - 2 * margin) / max(count - 1, 1)
    sa_xy = min(0.45 * gap, 1.25 * r_jaw)
    sa_z = max(0.10 * ext_z, 1.5 * sa_xy)
    tooth_cz = 0.52 * ext_z
    tooth_centers = []
    for sp in arc_pos:
        tx = np.interp(sp, curve.arc_length_mm, curve.points_mm[:, 0])
        ty = np.interp(sp, curve.arc_length_mm, curve.points_mm[:, 1])
        tooth_centers.append((float(tx), float(ty), float(tooth_cz)))
        inside = (((xg - tx) / sa_xy) ** 2 + ((yg - ty) / sa_xy) ** 2
                  + ((zg - tooth_cz) / sa_z) ** 2) <= 1.0
        labels[np.broadcast_to(inside, dims)] = TOOTH
    crown_top_z = tooth_cz + sa_z

    # optional radiolucent lesion near a tooth root
    lesion_present = bool(rng.random() < config.lesion_probability)
    lesion_center = None
    lesion_semiaxes = None
    lesion_mask = np.zeros(dims, dtype=bool)
    if lesion_present:
        rmin, rmax = config.lesion_radius_range_mm
        tooth_idx = int(rng.integers(0, count))
        semi = rng.uniform(rmin, rmax, size=3)
        tx, ty, _ = tooth_centers[tooth_idx]
        lz = 0.40 * ext_z
        jitter = rng.uniform(-0.5, 0.5, size=2) * r_jaw
        c = np.array([tx + jitter[0], ty + jitter[1], lz])
        # keep the full ellipsoid inside the grid so its voxel count stays analytic
        lo = semi + s
        hi = np.array([ext_x, ext_y, ext_z]) - semi - s
        c = np.minimum(np.maximum(c, lo), hi)
        inside = (((xg - c[0]) / semi[0]) ** 2 + ((yg - c[1]) / semi[1]) ** 2
                  + ((zg - c[2]) / semi[2]) ** 2) <= 1.0
        lesion_mask = np.broadcast_to(inside, dims).copy()
        labels[lesion_mask] = LESION
        lesion_center = [float(v) for v in c]
        lesion_semiaxes = [float(v) for v in semi]

    level_lut = np.array(
        [lv["background"], lv["soft_tissue"], lv["bone"], lv["tooth"], lv["lesion"]],
        dtype=np.float64)
    # partial-volume blur on edges; band-limited texture noise inside tissue
    values = ndimage.gaussian_filter(level_lut[labels], PARTIAL_VOLUME_SIGMA_VOX)
    if config.noise_sigma > 0:
        noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=dims), NOISE_CORR_SIGMA_VOX)
        noise *= config.noise_sigma / max(noise.std(), 1e-12)
        values = np.where(labels > BG, values + noise, values)
    values = np.clip(values, 0.0, 1.0).astype(np.float32)

    incisor_mid = poly[len(poly) // 2]
    metadata = {
        "seed": int(config.seed),
        "lesion_present": lesion_present,
        "lesion_center_mm": lesion_center,
        "lesion_semiaxes_mm": lesion_semiaxes,
        "crown_top_z_mm": float(crown_top_z),
        "incisor_midpoint_mm": [float(v) for v in incisor_mid],
        "tooth_centers_mm": tooth_centers,
    }
    return Phantom(
        volume=Volume(values, (s, s, s)),
        arch_curve=curve,
        lesion_mask_3d=Volume(lesion_mask.astype(np.float32), (s, s, s)),
        region_labels=labels,
        metadata=metadata,
    )


def _curve_to_json(curve: ArchCurve) -> dict:
    return {"points_mm": [[round(float(v), 9) for v in p] for p in curve.points_mm]}


def curve_from_json(obj: dict) -> ArchCurve:
    return ArchCurve.from_points(np.asarray(obj["points_mm"], dtype=np.float64))


def generate_dataset(config: PhantomConfig, count: int, base_seed: int, out_dir) -> list[dict]:
    """Write `count` phantoms (seeds base_seed..base_seed+count-1) plus a
    JSONL manifest; reruns with the same arguments reproduce identical bytes."""
    if count < 1:
        raise ConfigError(f"count: must be >= 1, got {count}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        cfg_i = PhantomConfig(**{**asdict(config), "seed": int(base_seed) + i})
        ph = generate_phantom(cfg_i)
        pid = f"p{i:05d}"
        ph.metadata["id"] = pid
        vol_rel = f"phantoms/{pid}.rvol"
        mask_rel = f"phantoms/{pid}_mask.rvol"
        curve_rel = f"phantoms/{pid}_curve.json"
        hio.write_volume(ph.volume, out / vol_rel)
        hio.write_volume(ph.lesion_mask_3d, out / mask_rel)
        hio.atomic_write_bytes(
            out / curve_rel,
            json.dumps(_curve_to_json(ph.arch_curve), sort_keys=True,
                       separators=(",", ":")).encode("ascii"))
        records.append({
            "id": pid, "volume": vol_rel, "lesion_mask": mask_rel,
            "curve": curve_rel, **{k: v for k, v in ph.metadata.items() if k != "id"},
        })
    hio.atomic_write_bytes(
        out / "phantoms.jsonl",
        ("\n".join(json.dumps(r, sort_keys=True, separators=(",", ":")) for r in records)
         + "\n").encode("utf-8"))
    return records
