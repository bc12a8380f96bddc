"""Volume file formats.

Primary format is a self-describing binary container: a 4-byte magic, a
version, a JSON header (dims, spacing, slope, intercept, dtype, unit), then
the little-endian voxel payload in C order with axes (x, y, z).

Fallback: a directory of 2D .npy slices (one per z index, sorted by name)
plus a meta.json holding the same header fields minus dims.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import VolumeError
from .volume import UNIT_RAW, VolumeGrid

MAGIC = b"VOLG"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int16": "<i2",
    "uint16": "<u2",
    "int32": "<i4",
}


def save_volume(volume: VolumeGrid, path) -> None:
    path = Path(path)
    dtype_name = _dtype_name(volume.data.dtype)
    header = {
        "dims": list(volume.data.shape),
        "spacing_mm": list(volume.spacing_mm),
        "rescale_slope": volume.rescale_slope,
        "rescale_intercept": volume.rescale_intercept,
        "dtype": dtype_name,
        "unit": volume.unit,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    payload = np.ascontiguousarray(volume.data).astype(_DTYPES[dtype_name]).tobytes()
    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        handle.write(header_bytes)
        handle.write(payload)


def _dtype_name(dtype) -> str:
    name = np.dtype(dtype).name
    if name not in _DTYPES:
        raise VolumeError(f"unsupported volume dtype {name!r}")
    return name


def load_volume(path) -> VolumeGrid:
    """Load either a container file or a slice-directory volume."""
    path = Path(path)
    if path.is_dir():
        return _load_slice_dir(path)
    with path.open("rb") as handle:
        magic = handle.read(4)
        if magic != MAGIC:
            raise VolumeError(f"{path}: not a volume container (bad magic {magic!r})")
        version, header_len = struct.unpack("<II", handle.read(8))
        if version != FORMAT_VERSION:
            raise VolumeError(f"{path}: unsupported container version {version}")
        header = json.loads(handle.read(header_len).decode("utf-8"))
        dims = tuple(header["dims"])
        dtype = _DTYPES.get(header["dtype"])
        if dtype is None:
            raise VolumeError(f"{path}: unsupported dtype {header['dtype']!r}")
        count = int(np.prod(dims))
        data = np.frombuffer(handle.read(), dtype=dtype, count=count).reshape(dims)
    return VolumeGrid(
        data=np.array(data),
        spacing_mm=tuple(header["spacing_mm"]),
        rescale_slope=float(header.get("rescale_slope", 1.0)),
        rescale_intercept=float(header.get("rescale_intercept", 0.0)),
        unit=header.get("unit", UNIT_RAW),
    )


def _load_slice_dir(path: Path) -> VolumeGrid:
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise VolumeError(f"{path}: slice directory is missing meta.json")
    meta = json.loads(meta_path.read_text())
    slice_paths = sorted(path.glob("slice_*.npy"))
    if not slice_paths:
        raise VolumeError(f"{path}: no slice_*.npy files found")
    slices = [np.load(p) for p in slice_paths]
    base = slices[0].shape
    for p, s in zip(slice_paths, slices):
        if s.ndim != 2 or s.shape != base:
            raise VolumeError(f"{p}: slice shape {s.shape} does not match {base}")
    data = np.stack(slices, axis=-1)  # (x, y, z)
    return VolumeGrid(
        data=data,
        spacing_mm=tuple(meta["spacing_mm"]),
        rescale_slope=float(meta.get("rescale_slope", 1.0)),
        rescale_intercept=float(meta.get("rescale_intercept", 0.0)),
        unit=meta.get("unit", UNIT_RAW),
    )


def save_slice_dir(volume: VolumeGrid, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "spacing_mm": list(volume.spacing_mm),
        "rescale_slope": volume.rescale_slope,
        "rescale_intercept": volume.rescale_intercept,
        "unit": volume.unit,
    }
    (path / "meta.json").write_text(json.dumps(meta))
    for z in range(volume.data.shape[2]):
        np.save(path / f"slice_{z:04d}.npy", volume.data[:, :, z])
