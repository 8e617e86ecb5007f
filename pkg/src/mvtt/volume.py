"""Volumes, per-slice mean normalization, multiview reslicing and file I/O.

File format: a JSON header ``<name>.vjson``::

    {"format_version": 1, "kind": "intensity" | "label", "dims": [Z, Y, X],
     "spacing_mm": [sz, sy, sx], "dtype": "f32le" | "u8", "blob": "<name>.vraw"}

next to a raw row-major (Z-major) blob. Intensities are float32 little-endian,
labels unsigned bytes restricted to {0, 1}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}
_KIND_DTYPE = {"intensity": "f32le", "label": "u8"}


class VolumeFormatError(ValueError):
    pass


@dataclass
class Volume:
    values: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"volume must be 3-d with every axis >= 1, got shape {self.values.shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        if self.kind == "label":
            if not np.isin(self.values, (0, 1)).all():
                raise ValueError("label volume may only contain 0 and 1")
            self.values = self.values.astype(np.uint8)
        elif self.kind != "intensity":
            raise ValueError(f"unknown volume kind {self.kind!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sz, sy, sx = self.spacing_mm
        return sz * sy * sx


@dataclass
class MultiviewSlices:
    """axial: (Z, Y, X); sagittal: (X, Y, Z); coronal: (Y, X, Z)."""
    axial: np.ndarray
    sagittal: np.ndarray
    coronal: np.ndarray


def reslice(values) -> MultiviewSlices:
    """Pure axis permutations of a (Z, Y, X) grid; no interpolation."""
    v = np.asarray(values.values if isinstance(values, Volume) else values)
    return MultiviewSlices(axial=v,
                           sagittal=np.ascontiguousarray(v.transpose(2, 1, 0)),
                           coronal=np.ascontiguousarray(v.transpose(1, 2, 0)))


def sagittal_to_axial(sag: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(sag.transpose(2, 1, 0))


def coronal_to_axial(cor: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(cor.transpose(2, 0, 1))


def normalize(volume: Volume) -> Volume:
    """(I - mean) / (max - min) applied to each axial slice on its own.

    A constant slice maps to zeros.
    """
    if volume.kind != "intensity":
        raise ValueError("normalize expects an intensity volume")
    v = volume.values.astype(np.float64)
    mean = v.mean(axis=(1, 2), keepdims=True)
    rng = v.max(axis=(1, 2), keepdims=True) - v.min(axis=(1, 2), keepdims=True)
    safe = np.where(rng > 0, rng, 1.0)
    out = np.where(rng > 0, (v - mean) / safe, 0.0)
    return Volume(out, volume.spacing_mm, "intensity")


# ----------------------------------------------------------------------- I/O

def _paths(path) -> tuple[Path, str]:
    p = Path(path)
    if p.suffix in (".vjson", ".vraw"):
        p = p.with_suffix("")
    return p.with_suffix(".vjson"), p.name + ".vraw"


def write_volume(volume: Volume, path) -> Path:
    """Write header + blob; returns the header path. Intensities are stored as float32."""
    header_path, blob_name = _paths(path)
    dtype = _KIND_DTYPE[volume.kind]
    header = {
        "format_version": FORMAT_VERSION,
        "kind": volume.kind,
        "dims": [int(d) for d in volume.dims],
        "spacing_mm": list(volume.spacing_mm),
        "dtype": dtype,
        "blob": blob_name,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    (header_path.parent / blob_name).write_bytes(
        np.ascontiguousarray(volume.values, dtype=_DTYPES[dtype]).tobytes())
    header_path.write_text(json.dumps(header, indent=1) + "\n")
    return header_path


def read_volume(path) -> Volume:
    header_path, _ = _paths(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: malformed header ({exc})") from None
    if not isinstance(header, dict):
        raise VolumeFormatError(f"{header_path}: header must be a JSON object")
    missing = {"format_version", "kind", "dims", "spacing_mm", "dtype", "blob"} - header.keys()
    if missing:
        raise VolumeFormatError(f"{header_path}: header missing fields {sorted(missing)}")
    if header["format_version"] != FORMAT_VERSION:
        raise VolumeFormatError(f"{header_path}: unknown format_version {header['format_version']!r}")
    kind, dtype = header["kind"], header["dtype"]
    if kind not in _KIND_DTYPE:
        raise VolumeFormatError(f"{header_path}: unknown kind {kind!r}")
    if dtype != _KIND_DTYPE[kind]:
        raise VolumeFormatError(f"{header_path}: dtype {dtype!r} invalid for kind {kind!r}")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(d, int) and d >= 1 for d in dims)):
        raise VolumeFormatError(f"{header_path}: dims must be three positive integers, got {dims!r}")
    spacing = header["spacing_mm"]
    if (not isinstance(spacing, list) or len(spacing) != 3
            or not all(isinstance(s, (int, float)) and s > 0 for s in spacing)):
        raise VolumeFormatError(f"{header_path}: spacing_mm must be three positive numbers, got {spacing!r}")

    blob_path = header_path.parent / header["blob"]
    if not blob_path.exists():
        raise VolumeFormatError(f"{header_path}: blob file {blob_path.name} not found")
    raw = blob_path.read_bytes()
    np_dtype = _DTYPES[dtype]
    expected = int(np.prod(dims)) * np_dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(f"{blob_path}: expected {expected} bytes for dims {dims} ({dtype}), "
                                f"found {len(raw)}")
    values = np.frombuffer(raw, dtype=np_dtype).reshape(dims)
    if kind == "label":
        bad = np.setdiff1d(np.unique(values), [0, 1])
        if bad.size:
            raise VolumeFormatError(f"{blob_path}: label volume contains values {bad.tolist()} outside {{0, 1}}")
        values = values.astype(np.uint8)
    else:
        values = values.astype(np.float32)
    return Volume(values, tuple(spacing), kind)
