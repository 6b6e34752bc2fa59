"""On-disk formats: RVOL volumes, 16-bit PNG images, JSONL manifests.

RVOL is a minimal raw-volume container:

    bytes 0..4   magic "RVOL1"
    bytes 5..8   uint32 little-endian header length L
    bytes 9..9+L header JSON (ascii, sorted keys)
    rest         payload, D*H*W float32 little-endian, C-order, D slowest

The header carries dims (D, H, W), per-axis spacing_mm, a dtype tag, the
axis-order tag "DHW" and a value-range note.  All writes in this module are
atomic (write to a temp file in the same directory, then rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import FormatError
from ..volume import Volume

MAGIC = b"RVOL1"
DTYPE_TAG = "float32-le"
AXIS_ORDER = "DHW"
PNG_SCALE = 65535


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(vol: Volume, path) -> None:
    """Serialize a volume to RVOL. Exact round trip with read_volume."""
    d, h, w = vol.values.shape
    header = {
        "axis_order": AXIS_ORDER,
        "dims": [int(d), int(h), int(w)],
        "dtype": DTYPE_TAG,
        "spacing_mm": [float(s) for s in vol.spacing_mm],
        "value_range": "[0,1]",
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    payload = np.ascontiguousarray(vol.values, dtype="<f4").tobytes()
    atomic_write_bytes(path, MAGIC + struct.pack("<I", len(hjson)) + hjson + payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r}, expected {MAGIC!r}")
    if len(raw) < 9:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[5:9])
    try:
        header = json.loads(raw[9 : 9 + hlen].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header JSON: {e}") from e
    if header.get("dtype") != DTYPE_TAG:
        raise FormatError(f"{path}: bad dtype tag {header.get('dtype')!r}")
    if header.get("axis_order") != AXIS_ORDER:
        raise FormatError(f"{path}: bad axis_order tag {header.get('axis_order')!r}")
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(int(n) > 0 for n in dims)):
        raise FormatError(f"{path}: bad dims field {dims!r}")
    d, h, w = (int(n) for n in dims)
    payload = raw[9 + hlen :]
    if len(payload) != d * h * w * 4:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} require {d * h * w * 4}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    return Volume(values.copy(), tuple(header["spacing_mm"]))


def write_png16(img: np.ndarray, path, kind: str = "panoramic") -> None:
    """Store a [0,1] grayscale image as 16-bit PNG plus a JSON sidecar."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"png16 expects a 2D image, got shape {img.shape}")
    u16 = np.round(np.clip(img, 0.0, 1.0) * PNG_SCALE).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = Image.fromarray(u16)        # uint16 -> 16-bit grayscale ("I;16")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    os.close(fd)
    try:
        buf.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    sidecar = {"dims": list(u16.shape), "kind": kind, "scale": PNG_SCALE}
    atomic_write_bytes(
        path.with_suffix(path.suffix + ".json"),
        json.dumps(sidecar, sort_keys=True, separators=(",", ":")).encode("ascii"),
    )


def read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        u16 = np.asarray(im, dtype=np.uint16)
    return (u16.astype(np.float32) / PNG_SCALE).astype(np.float32)


MISALIGNMENT_CLASSES = ("regular", "rotation-left", "rotation-right", "chin-up", "chin-down")
SPLITS = ("train", "val", "test")


def write_manifest(records: list[dict], path) -> None:
    lines = [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in records]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path, check_paths: bool = True) -> list[dict]:
    """Load a JSONL sample manifest, validating ids, splits and file paths."""
    path = Path(path)
    base = path.parent
    records = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        cid = rec.get("class_id")
        if not (isinstance(cid, int) and 0 <= cid < len(MISALIGNMENT_CLASSES)):
            raise FormatError(f"{path}:{ln}: class_id {cid!r} outside [0,5)")
        if rec.get("split") not in SPLITS:
            raise FormatError(f"{path}:{ln}: bad split tag {rec.get('split')!r}")
        if check_paths:
            for key in ("px", "unfolded", "lesion_mask"):
                rel = rec.get(key)
                if rel is None:
                    continue
                if not (base / rel).exists():
                    raise FormatError(f"{path}:{ln}: {key} file missing: {rel}")
        records.append(rec)
    ids = [r["id"] for r in records]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate sample ids")
    return records
