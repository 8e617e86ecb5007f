"""Synthetic LGE-like atrium phantoms with exact anatomy and scar ground truth.

Geometry: an ellipsoidal blood pool plus capsule-shaped vein stubs. Scar
patches are cones (around random directions from the ellipsoid centre) cut out
of the outer wall band of the anatomy. Intensities: dark background,
mid-grey blood pool, bright scar, plus additive white noise. A thin frame of
bright surrounding tissue runs along the in-plane border of every axial slice,
standing in for the other enhancing structures a real field of view always
contains; it keeps each slice's intensity range comparable, which matters
because normalization is per slice.

All randomness comes from numpy's PCG64 bit generator seeded with the integer
seed, so a seed fully determines the output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .metrics_eval import wall_volume
from .volume import Volume


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (16, 32, 32)
    spacing_mm: tuple[float, float, float] = (2.0, 1.0, 1.0)
    semi_axes_mm: tuple[float, float, float] = (9.0, 9.0, 10.0)
    center_mm: tuple[float, float, float] | None = None  # grid centre when None
    pv_stub_count: int = 2
    pv_stub_radius_mm: float = 2.0
    pv_stub_length_mm: float = 5.0
    scar_patch_count: int = 3
    scar_angular_extent_deg: float = 25.0
    scar_thickness_mm: float = 2.0
    wall_band_mm: float = 2.0  # scar lives within this distance of the anatomy surface
    background_mean: float = 0.1
    background_sd: float = 0.03
    blood_mean: float = 0.5
    blood_sd: float = 0.03
    scar_mean: float = 1.0
    scar_sd: float = 0.03
    surround_mean: float = 1.2
    surround_sd: float = 0.03
    surround_width_vox: int = 1  # 0 disables the frame
    noise_sd: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.semi_axes_mm = tuple(float(a) for a in self.semi_axes_mm)
        if self.center_mm is not None:
            self.center_mm = tuple(float(c) for c in self.center_mm)

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.spacing_mm)

    @property
    def center(self) -> np.ndarray:
        return self.extent_mm / 2 if self.center_mm is None else np.asarray(self.center_mm)

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if min(self.spacing_mm) <= 0 or min(self.semi_axes_mm) <= 0:
            raise ValueError("spacing and semi-axes must be positive")
        lo = self.center - np.asarray(self.semi_axes_mm)
        hi = self.center + np.asarray(self.semi_axes_mm)
        if np.any(lo < 0) or np.any(hi > self.extent_mm):
            raise ValueError(f"ellipsoid (centre {self.center.tolist()} mm, semi-axes {list(self.semi_axes_mm)} mm) "
                             f"exceeds the grid extent {self.extent_mm.tolist()} mm")
        if self.scar_patch_count < 0 or self.pv_stub_count < 0 or self.surround_width_vox < 0:
            raise ValueError("counts must be nonnegative")
        if not 0 < self.scar_thickness_mm <= self.wall_band_mm:
            raise ValueError("scar thickness must be positive and no larger than the wall band")
        if not (self.scar_mean > self.blood_mean > self.background_mean):
            raise ValueError("intensity means must satisfy scar > blood > background")
        if min(self.noise_sd, self.background_sd, self.blood_sd, self.scar_sd, self.surround_sd) < 0:
            raise ValueError("standard deviations must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Phantom:
    intensity: Volume
    anatomy: Volume
    scar: Volume
    scar_fraction: float  # scar volume / wall-model volume

    @property
    def scar_burden_pct(self) -> float:
        return 100.0 * self.scar_fraction


def _voxel_centres(spec: PhantomSpec) -> np.ndarray:
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(spec.dims, spec.spacing_mm)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _capsule(points: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    nearest = a + t[..., None] * ab
    return np.linalg.norm(points - nearest, axis=-1) <= radius


def boundary_depth(anatomy: np.ndarray, spacing_mm) -> np.ndarray:
    """Distance (mm) from each anatomy voxel to the nearest non-anatomy voxel; 0 outside."""
    padded = np.pad(anatomy.astype(bool), 1)
    depth = ndimage.distance_transform_edt(padded, sampling=spacing_mm)
    return depth[1:-1, 1:-1, 1:-1]


def wall_band(anatomy: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    depth = boundary_depth(anatomy, spec.spacing_mm)
    return anatomy.astype(bool) & (depth <= spec.wall_band_mm)


def generate_phantom(spec: PhantomSpec) -> Phantom:
    spec.validate()
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    pts = _voxel_centres(spec)
    centre = spec.center
    semi = np.asarray(spec.semi_axes_mm)

    rel = pts - centre
    anatomy = (((rel / semi) ** 2).sum(axis=-1) <= 1.0)
    for _ in range(spec.pv_stub_count):
        u = _random_direction(rng)
        t_surf = 1.0 / np.sqrt(((u / semi) ** 2).sum())
        a = centre + 0.6 * t_surf * u
        b = centre + (t_surf + spec.pv_stub_length_mm) * u
        anatomy |= _capsule(pts, a, b, spec.pv_stub_radius_mm)

    if not anatomy.any():
        raise ValueError("phantom anatomy is empty; semi-axes are smaller than the voxel grid resolves")
    depth = boundary_depth(anatomy, spec.spacing_mm)
    shell = anatomy & (depth <= spec.scar_thickness_mm)
    band_idx = np.argwhere(shell)
    scar = np.zeros_like(anatomy)
    cos_extent = np.cos(np.deg2rad(spec.scar_angular_extent_deg))
    rel_norm = np.linalg.norm(rel, axis=-1)
    unit = rel / np.where(rel_norm > 0, rel_norm, 1.0)[..., None]
    for _ in range(spec.scar_patch_count):
        anchor = band_idx[rng.integers(len(band_idx))]
        d = unit[tuple(anchor)]
        scar |= shell & ((unit @ d) >= cos_extent)

    labels = np.zeros(spec.dims, dtype=np.int8)
    w = spec.surround_width_vox
    if w:
        frame = np.ones(spec.dims, dtype=bool)
        frame[:, w:-w, w:-w] = False
        labels[frame & ~anatomy] = 3
    labels[anatomy] = 1
    labels[scar] = 2
    means = np.array([spec.background_mean, spec.blood_mean, spec.scar_mean, spec.surround_mean])
    sds = np.array([spec.background_sd, spec.blood_sd, spec.scar_sd, spec.surround_sd])
    tissue = means[labels] + sds[labels] * rng.standard_normal(spec.dims)
    intensity = tissue + spec.noise_sd * rng.standard_normal(spec.dims)

    scar_vol = np.count_nonzero(scar) * float(np.prod(spec.spacing_mm))
    fraction = scar_vol / wall_volume(anatomy, spec.spacing_mm)
    return Phantom(intensity=Volume(intensity.astype(np.float32), spec.spacing_mm, "intensity"),
                   anatomy=Volume(anatomy.astype(np.uint8), spec.spacing_mm, "label"),
                   scar=Volume(scar.astype(np.uint8), spec.spacing_mm, "label"),
                   scar_fraction=fraction)


def phantom_series(count: int, base: PhantomSpec | None = None, seed: int = 0,
                   scar_patches: int | None = None, patch_range: tuple[int, int] = (1, 6)) -> list[PhantomSpec]:
    """Per-phantom specs with jittered geometry and scar load, all derived from ``seed``.

    ``scar_patches`` fixes the patch count; otherwise it is drawn from ``patch_range``.
    """
    base = base or PhantomSpec()
    rng = np.random.default_rng(np.random.PCG64(seed))
    specs = []
    for _ in range(count):
        semi = np.asarray(base.semi_axes_mm) * rng.uniform(0.85, 1.05, size=3)
        room = base.extent_mm / 2 - semi
        shift = rng.uniform(-1.0, 1.0, size=3) * np.clip(room, 0, 1.5)
        centre = base.extent_mm / 2 + shift
        patches = scar_patches if scar_patches is not None else int(rng.integers(patch_range[0], patch_range[1] + 1))
        specs.append(replace(
            base,
            semi_axes_mm=tuple(float(s) for s in semi),
            center_mm=tuple(float(c) for c in centre),
            scar_patch_count=patches,
            scar_angular_extent_deg=float(rng.uniform(15.0, 35.0)),
            seed=int(rng.integers(2**63 - 1)),
        ))
    return specs
