import hashlib
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from px3d.errors import ConfigError
from px3d.phantom import (BG, BONE, LESION, SOFT, TOOTH, PhantomConfig,
                          generate_dataset, generate_phantom)


def test_determinism_voxel_identical():
    a = generate_phantom(PhantomConfig(seed=7))
    b = generate_phantom(PhantomConfig(seed=7))
    assert np.array_equal(a.volume.values, b.volume.values)
    assert np.array_equal(a.lesion_mask_3d.values, b.lesion_mask_3d.values)
    assert a.metadata == b.metadata


def test_no_lesion_when_probability_zero():
    ph = generate_phantom(PhantomConfig(seed=5, lesion_probability=0.0))
    assert not ph.metadata["lesion_present"]
    assert ph.lesion_mask_3d.values.sum() == 0


def _brute_force_ellipsoid_count(center, semi, dims, spacing):
    # independent per-voxel inside test over the full grid
    count = 0
    cx, cy, cz = center
    ax, ay, az = semi
    for d in range(dims[0]):
        y = (d + 0.5) * spacing
        for h in range(dims[1]):
            z = (h + 0.5) * spacing
            for w in range(dims[2]):
                x = (w + 0.5) * spacing
                if ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2 <= 1.0:
                    count += 1
    return count


def test_lesion_voxel_count_in_analytic_range():
    # radii 3-5 mm at 0.5 mm spacing = 6-10 voxels
    cfg = PhantomConfig(grid_dims=(64, 64, 64), spacing_mm=0.5,
                        lesion_radius_range_mm=(3.0, 5.0), lesion_probability=1.0,
                        seed=11)
    ph = generate_phantom(cfg)
    assert ph.metadata["lesion_present"]
    count = int(ph.lesion_mask_3d.values.sum())
    lo = 4.0 / 3.0 * math.pi * 6**3 * 0.9
    hi = 4.0 / 3.0 * math.pi * 10**3 * 1.1
    assert lo <= count <= hi
    oracle = _brute_force_ellipsoid_count(
        ph.metadata["lesion_center_mm"], ph.metadata["lesion_semiaxes_mm"],
        cfg.grid_dims, cfg.spacing_mm)
    assert count == oracle


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_density_ordering(seed):
    ph = generate_phantom(PhantomConfig(seed=seed, lesion_probability=1.0))
    v = ph.volume.values
    means = {code: v[ph.region_labels == code].mean()
             for code in (TOOTH, BONE, LESION)}
    assert means[TOOTH] > means[BONE] > means[LESION]


def test_arch_curve_within_bounds(desk_phantom):
    s = desk_phantom.volume.spacing_mm[0]
    dims = desk_phantom.volume.dims
    pts = desk_phantom.arch_curve.points_mm
    d = np.floor(pts[:, 1] / s).astype(int)
    h = np.floor(pts[:, 2] / s).astype(int)
    w = np.floor(pts[:, 0] / s).astype(int)
    assert (d >= 0).all() and (d < dims[0]).all()
    assert (h >= 0).all() and (h < dims[1]).all()
    assert (w >= 0).all() and (w < dims[2]).all()


def test_volume_in_unit_range(desk_phantom):
    v = desk_phantom.volume.values
    assert v.min() >= 0.0 and v.max() <= 1.0


@pytest.mark.parametrize("bad,field", [
    (dict(lesion_probability=1.5), "lesion_probability"),
    (dict(lesion_radius_range_mm=(5.0, 3.0)), "lesion_radius_range_mm"),
    (dict(grid_dims=(0, 64, 64)), "grid_dims"),
    (dict(spacing_mm=-1.0), "spacing_mm"),
    (dict(tooth_count=0), "tooth_count"),
    (dict(density_levels={**PhantomConfig().density_levels, "lesion": 0.7}),
     "density_levels"),
    (dict(density_levels={**PhantomConfig().density_levels, "tooth": 1.2}),
     "density_levels"),
])
def test_invalid_config_names_field(bad, field):
    with pytest.raises(ConfigError, match=field):
        generate_phantom(replace(PhantomConfig(), **bad))


def _dir_hash(path):
    h = hashlib.sha256()
    for f in sorted(Path(path).rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def test_generate_dataset_single_entry(tmp_path):
    records = generate_dataset(PhantomConfig(), count=1, base_seed=4, out_dir=tmp_path)
    assert len(records) == 1
    assert (tmp_path / "phantoms.jsonl").exists()
    assert (tmp_path / records[0]["volume"]).exists()


def test_generate_dataset_byte_identical(tmp_path):
    cfg = PhantomConfig(grid_dims=(32, 32, 32), tooth_count=4)
    generate_dataset(cfg, count=8, base_seed=0, out_dir=tmp_path / "a")
    generate_dataset(cfg, count=8, base_seed=0, out_dir=tmp_path / "b")
    assert _dir_hash(tmp_path / "a") == _dir_hash(tmp_path / "b")


def test_lesion_presence_binomial_interval():
    # 99% binomial interval for n=100, p=0.5 is well inside [30, 70]
    from scipy.stats import binom

    assert binom.cdf(29, 100, 0.5) + binom.sf(70, 100, 0.5) < 0.01
    cfg = PhantomConfig(grid_dims=(32, 32, 32), tooth_count=4, lesion_probability=0.5)
    hits = sum(
        generate_phantom(replace(cfg, seed=s)).metadata["lesion_present"]
        for s in range(100))
    assert 30 <= hits <= 70
