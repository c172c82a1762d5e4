"""Procedural voxel thorax phantoms and synthetic lung nodules.

Arrays are indexed ``[ix, iy, iz]`` (C order, z fastest in memory). The volume
is centred on the scanner isocentre: voxel ``i`` along x sits at
``(i - (nx - 1) / 2) * sx`` mm. +y points posterior, +z superior.

Lesions follow a two-phase synthesis: a single-density blob with a smoothly
perturbed radius, then (heterogeneous lesions only) Gaussian convolution of
that blob followed by quantisation to three density levels.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cohort import Demographics, LesionKind, LesionSpec, Sex
from .io import write_raw_volume
from .rng import derive_seed, generator

log = logging.getLogger(__name__)


class Material(IntEnum):
    AIR = 0
    LUNG = 1
    SOFT_TISSUE = 2
    BONE = 3
    WATER = 4
    LESION = 5


# Linear attenuation (1/cm) at a 70 keV effective energy.
DEFAULT_MU_PER_CM = {
    Material.AIR: 0.0,
    Material.LUNG: 0.048,
    Material.SOFT_TISSUE: 0.199,
    Material.BONE: 0.380,
    Material.WATER: 0.1929,
    Material.LESION: 0.196,
}


@dataclass(frozen=True)
class MaterialTable:
    mu_per_cm: dict = field(default_factory=lambda: dict(DEFAULT_MU_PER_CM))

    def __post_init__(self):
        mu = {Material(k): float(v) for k, v in self.mu_per_cm.items()}
        object.__setattr__(self, "mu_per_cm", mu)
        if any(v < 0 for v in mu.values()):
            raise ValueError("attenuation coefficients must be non-negative")
        order = [Material.AIR, Material.LUNG, Material.SOFT_TISSUE, Material.BONE]
        if all(m in mu for m in order):
            vals = [mu[m] for m in order]
            if not all(a < b for a, b in itertools.pairwise(vals)):
                raise ValueError("need mu(air) < mu(lung) < mu(soft tissue) < mu(bone)")
        if mu.get(Material.WATER, 0.0) <= 0:
            raise ValueError("mu(water) must be positive")

    @property
    def mu_water(self) -> float:
        return self.mu_per_cm[Material.WATER]

    def lookup_array(self) -> np.ndarray:
        """Dense lookup indexed by material id; NaN marks ids absent from the table."""
        lut = np.full(256, np.nan)
        for m, v in self.mu_per_cm.items():
            lut[int(m)] = v
        return lut

    def to_dict(self) -> dict:
        return {m.name.lower(): v for m, v in self.mu_per_cm.items()}

    @classmethod
    def from_dict(cls, d: dict) -> MaterialTable:
        return cls({Material[k.upper()]: v for k, v in d.items()})


@dataclass(frozen=True)
class InsertedLesion:
    lesion_id: str
    center_voxel: tuple[int, int, int]
    center_mm: tuple[float, float, float]
    bbox_lo: tuple[int, int, int]
    bbox_hi: tuple[int, int, int]  # exclusive
    size_mm: float
    kind: LesionKind


@dataclass(frozen=True, eq=False)
class VoxelPhantom:
    spacing_mm: tuple[float, float, float]
    materials: np.ndarray
    density_scale: np.ndarray
    body_mask: np.ndarray
    lung_mask: np.ndarray
    inserted_lesions: tuple[InsertedLesion, ...] = ()

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.materials.shape)

    def voxel_centers_mm(self, axis: int) -> np.ndarray:
        n, s = self.dims[axis], self.spacing_mm[axis]
        return (np.arange(n) - (n - 1) / 2.0) * s

    def index_to_mm(self, index) -> tuple[float, float, float]:
        return tuple(float((i - (n - 1) / 2.0) * s)
                     for i, n, s in zip(index, self.dims, self.spacing_mm))


@dataclass(frozen=True, eq=False)
class LesionVolume:
    grid: np.ndarray           # density multipliers, 0 outside support
    support_mask: np.ndarray
    size_mm: float
    kind: LesionKind
    voxel_mm: float
    center_vox: tuple[float, float, float]  # shape centre in grid index units

    @property
    def levels(self) -> np.ndarray:
        return np.unique(self.grid[self.support_mask])


class DegeneratePhantomError(ValueError):
    pass


class UnresolvableLesionError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


# --- thorax -----------------------------------------------------------------

BMI_REF = 27.17


def body_fraction(bmi: float) -> float:
    """Body half-width as a fraction of the field half-width (strictly increasing)."""
    return 0.78 + 0.17 * math.tanh((bmi - BMI_REF) / 10.0)


@dataclass(frozen=True)
class ThoraxShape:
    """Derived anatomical parameters in mm (all semi-axes)."""
    body: tuple[float, float]
    ribcage: tuple[float, float]
    lung_axes: tuple[float, float, float]
    lung_centers_x: tuple[float, float]
    lung_center_yz: tuple[float, float]
    heart_axes: tuple[float, float, float]
    heart_center: tuple[float, float, float]
    spine_center_y: float
    spine_radius: float
    rib_thickness: float
    rib_period: float
    rib_height: float
    rib_phase: float


def thorax_shape(demographics: Demographics, dims, spacing_mm, seed: int) -> ThoraxShape:
    rng = generator(seed, "thorax")
    hx, hy, hz = (n * s / 2.0 for n, s in zip(dims, spacing_mm))
    f = body_fraction(demographics.bmi)
    body = (hx * f, hy * f)
    # the chest frame does not grow with adiposity
    c = min(f, body_fraction(BMI_REF)) * (1.0 if demographics.sex == Sex.MALE else 0.96)
    jit = 1.0 + 0.05 * (rng.random(3) * 2 - 1)
    ax, ay = hx * c, hy * c
    ribcage = (0.88 * ax, 0.85 * ay)
    lung_axes = (0.36 * ax * jit[0], 0.62 * ay * jit[1], min(0.80 * hz * jit[2], 0.9 * hz))
    lung_cx = 0.45 * ax
    return ThoraxShape(
        body=body,
        ribcage=ribcage,
        lung_axes=lung_axes,
        lung_centers_x=(-lung_cx, lung_cx),
        lung_center_yz=(0.04 * ay, 0.0),
        heart_axes=(0.30 * ax, 0.34 * ay, 0.30 * hz),
        heart_center=(0.10 * ax, -0.30 * ay, -0.45 * hz),
        spine_center_y=0.62 * ay,
        spine_radius=0.15 * ay,
        rib_thickness=max(6.0, 1.5 * spacing_mm[0]),
        rib_period=28.0,
        rib_height=10.0,
        rib_phase=float(rng.random() * 28.0),
    )


def build_thorax(demographics: Demographics, seed: int,
                 dims=(160, 128, 96), spacing_mm=(2.0, 2.0, 2.0)) -> VoxelPhantom:
    """Procedural thorax: elliptic body, paired lungs, heart, spine and ribs."""
    dims = tuple(int(n) for n in dims)
    spacing_mm = tuple(float(s) for s in spacing_mm)
    if min(dims) <= 0 or min(spacing_mm) <= 0:
        raise DegeneratePhantomError("dims and spacing must be positive")
    shape = thorax_shape(demographics, dims, spacing_mm, seed)
    for semi, s in zip(shape.lung_axes, spacing_mm):
        if 2 * semi / s < 8:
            raise DegeneratePhantomError("fewer than 8 voxels across a lung axis")

    x = ((np.arange(dims[0]) - (dims[0] - 1) / 2) * spacing_mm[0])[:, None, None]
    y = ((np.arange(dims[1]) - (dims[1] - 1) / 2) * spacing_mm[1])[None, :, None]
    z = ((np.arange(dims[2]) - (dims[2] - 1) / 2) * spacing_mm[2])[None, None, :]

    body_r = (x / shape.body[0]) ** 2 + (y / shape.body[1]) ** 2
    body = np.broadcast_to(body_r <= 1.0, dims).copy()
    mats = np.where(body, Material.SOFT_TISSUE, Material.AIR).astype(np.uint8)

    cage_r = np.sqrt((x / shape.ribcage[0]) ** 2 + (y / shape.ribcage[1]) ** 2)
    la, lb, lc = shape.lung_axes
    ly, lz = shape.lung_center_yz
    lungs = np.zeros(dims, bool)
    for cx in shape.lung_centers_x:
        lungs |= ((x - cx) / la) ** 2 + ((y - ly) / lb) ** 2 + ((z - lz) / lc) ** 2 <= 1.0
    hxa, hya, hza = shape.heart_axes
    hcx, hcy, hcz = shape.heart_center
    heart = ((x - hcx) / hxa) ** 2 + ((y - hcy) / hya) ** 2 + ((z - hcz) / hza) ** 2 <= 1.0
    spine = np.broadcast_to(
        x ** 2 + (y - shape.spine_center_y) ** 2 <= shape.spine_radius ** 2, dims)
    lungs &= ~heart & ~spine & (cage_r < 1.0) & body
    mats[lungs] = Material.LUNG

    # ribs: oblique bands on an elliptic shell just outside the lungs
    shell = (cage_r >= 1.0) & (cage_r < 1.0 + shape.rib_thickness / min(shape.ribcage))
    band = np.mod(z + 0.35 * y - shape.rib_phase, shape.rib_period) < shape.rib_height
    anterior_gap = (y < 0) & (np.abs(x) < 0.18 * shape.ribcage[0])
    ribs = shell & band & ~anterior_gap & body
    sternum = (np.abs(x) < 12.0) & (np.abs(y + shape.ribcage[1] * 1.02) < 5.0) & (z < 0.8 * lc) & body
    bone = ribs | spine | sternum
    mats[bone & body] = Material.BONE

    lung_mask = mats == Material.LUNG
    return VoxelPhantom(spacing_mm, mats, np.ones(dims, np.float32), body, lung_mask)


def analytic_lung_fraction(demographics: Demographics, seed: int,
                           dims=(160, 128, 96), spacing_mm=(2.0, 2.0, 2.0)) -> float:
    """Volume of the two generating lung ellipsoids over the body elliptic cylinder."""
    sh = thorax_shape(demographics, dims, spacing_mm, seed)
    lungs = 2 * (4.0 / 3.0) * math.pi * math.prod(sh.lung_axes)
    body = math.pi * sh.body[0] * sh.body[1] * dims[2] * spacing_mm[2]
    return lungs / body


# --- lesions ----------------------------------------------------------------

PERTURBATION = 0.25
N_LEVELS = 3
SIGMA_FRACTION = 0.15


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], -1)


def _monomials(u: np.ndarray) -> np.ndarray:
    ux, uy, uz = u[..., 0], u[..., 1], u[..., 2]
    return np.stack([ux, uy, uz, ux * uy, uy * uz, ux * uz, ux * ux - uy * uy,
                     3 * uz * uz - 1, ux ** 3, uy ** 3, uz ** 3, ux * uy * uz], -1)


class _RadiusField:
    """Smooth angular radius multiplier bounded to 1 +/- PERTURBATION."""

    def __init__(self, seed: int):
        rng = generator(seed, "lesion-shape")
        self.coef = rng.normal(size=12) * np.repeat([1.0, 0.6, 0.35], [3, 5, 4])
        self.scale = np.abs(_monomials(_fibonacci_sphere(4000)) @ self.coef).max()

    def __call__(self, u: np.ndarray) -> np.ndarray:
        n = np.clip((_monomials(u) @ self.coef) / self.scale, -1.0, 1.0)
        return 1.0 + PERTURBATION * n


def _largest_axis(support: np.ndarray, voxel_mm: float) -> float:
    idx = np.nonzero(support)
    return max((a.max() - a.min() + 1) for a in idx) * voxel_mm


def measured_size_mm(support: np.ndarray, voxel_mm: float) -> float:
    """Largest axis-aligned extent of a support mask, counting whole voxels."""
    if not support.any():
        return 0.0
    return float(_largest_axis(support, voxel_mm))


def phase_one(spec: LesionSpec, voxel_mm: float) -> LesionVolume:
    """Single-density blob whose largest bounding-box side equals ``size_mm``."""
    radius = _RadiusField(derive_seed(spec.placement_seed, "shape"))
    dirs = _fibonacci_sphere(4000)
    pts = radius(dirs)[:, None] * dirs
    extent = (pts.max(0) - pts.min(0)).max()
    r0 = spec.size_mm / extent  # mm per unit radius

    half = math.ceil(0.75 * spec.size_mm / voxel_mm) + 2
    best = None
    for offset in (0.0, 0.5):
        ax = (np.arange(2 * half + 1) - half + offset) * voxel_mm
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
        P = np.stack([X, Y, Z], -1)
        rr = np.linalg.norm(P, axis=-1)
        u = P / np.where(rr > 0, rr, 1.0)[..., None]
        u[rr == 0] = (0.0, 0.0, 1.0)
        support = rr <= r0 * radius(u)
        err = abs(measured_size_mm(support, voxel_mm) - spec.size_mm)
        if best is None or err < best[0]:
            best = (err, support, offset)
    _, support, offset = best
    c = half - offset
    return LesionVolume(support.astype(np.float32), support, spec.size_mm,
                        LesionKind.HOMOGENEOUS, voxel_mm, (c, c, c))


def convolve_density(grid: np.ndarray, sigma_vox: float) -> np.ndarray:
    """Second phase: isotropic Gaussian convolution with zero padding."""
    if sigma_vox <= 0:
        return grid.astype(np.float64)
    return ndimage.gaussian_filter(grid.astype(np.float64), sigma_vox, mode="constant", cval=0.0)


def quantize_levels(conv: np.ndarray, support: np.ndarray, center_vox) -> np.ndarray:
    """Map convolved density over the support onto levels {1/3, 2/3, 1}.

    Bins are equal-width over the blurred values actually present on the
    support (margin, rim, core). Absolute thresholds would waste the lowest
    level: a blurred solid blob rarely drops below 1/3 inside its own support.
    If the support is too small for the blur to separate levels, the voxel
    nearest the shape centre is moved one level so at least two remain.
    """
    vals = conv[support]
    lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
    t = (conv - lo) / (hi - lo) if hi - lo > 1e-6 else np.ones_like(conv)
    level = np.clip(np.ceil(N_LEVELS * t - 1e-9), 1, N_LEVELS)
    level = np.where(support, level, 0)
    if support.sum() >= 2 and len(np.unique(level[support])) < 2:
        idx = np.argwhere(support)
        d = np.linalg.norm(idx - np.asarray(center_vox), axis=1)
        core = tuple(idx[np.lexsort((np.arange(len(d)), d))[0]])
        level[core] = level[core] - 1 if level[core] == N_LEVELS else level[core] + 1
    return (level / N_LEVELS).astype(np.float32)


def synthesize_lesion(spec: LesionSpec, voxel_mm: float) -> LesionVolume:
    if spec.size_mm < 2 * voxel_mm:
        raise UnresolvableLesionError("lesion unresolvable at this voxel size")
    base = phase_one(spec, voxel_mm)
    if spec.kind == LesionKind.HOMOGENEOUS:
        return base
    sigma_vox = SIGMA_FRACTION * spec.size_mm / voxel_mm
    conv = convolve_density(base.grid, sigma_vox)
    grid = quantize_levels(conv, base.support_mask, base.center_vox)
    return replace(base, grid=grid, kind=LesionKind.HETEROGENEOUS)


# --- insertion --------------------------------------------------------------

MAX_PLACEMENT_ATTEMPTS = 10_000
BOUNDARY_MARGIN_VOX = 2


def lung_core_mask(phantom: VoxelPhantom) -> np.ndarray:
    """Lung voxels more than BOUNDARY_MARGIN_VOX voxels from the lung boundary."""
    return ndimage.distance_transform_edt(phantom.lung_mask) > BOUNDARY_MARGIN_VOX


def insert_lesion(phantom: VoxelPhantom, lesion: LesionVolume, placement_seed: int,
                  lesion_id: str = "lesion", lung_core: np.ndarray | None = None) -> VoxelPhantom:
    """Place ``lesion`` at a random lung location; returns a new phantom.

    ``lung_core`` may be passed to reuse :func:`lung_core_mask` across
    insertions into the same thorax.
    """
    if any(abs(s - lesion.voxel_mm) > 1e-9 for s in phantom.spacing_mm):
        raise ValueError("lesion voxel size must match isotropic phantom spacing")
    sup = lesion.support_mask
    g = np.array(sup.shape)
    gc = np.floor(np.asarray(lesion.center_vox)).astype(int)
    lung_idx = np.flatnonzero(phantom.lung_mask)
    if lung_idx.size == 0:
        raise PlacementError("placement exhausted")
    lung_extent = np.ptp(np.argwhere(phantom.lung_mask), axis=0) + 1
    if np.any(np.ptp(np.argwhere(sup), axis=0) + 1 > lung_extent):
        raise PlacementError("lesion does not fit inside the lung bounding box")

    core = lung_core_mask(phantom) if lung_core is None else lung_core
    occupied = phantom.materials == Material.LESION
    rng = generator(placement_seed, "placement")
    radius = lesion.size_mm / 2.0
    dims = np.array(phantom.dims)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        center = np.array(np.unravel_index(lung_idx[rng.integers(lung_idx.size)], phantom.dims))
        lo = center - gc
        hi = lo + g
        if np.any(lo < 0) or np.any(hi > dims):
            continue
        win = tuple(slice(a, b) for a, b in zip(lo, hi))
        if not np.all(core[win][sup]) or np.any(occupied[win][sup]):
            continue
        c_mm = np.array(phantom.index_to_mm(lo)) + np.asarray(lesion.center_vox) * lesion.voxel_mm
        if any(np.linalg.norm(c_mm - np.array(o.center_mm)) < radius + o.size_mm / 2.0
               for o in phantom.inserted_lesions):
            continue
        mats = phantom.materials.copy()
        dens = phantom.density_scale.copy()
        mats[win][sup] = Material.LESION
        dens[win][sup] = lesion.grid[sup]
        rec = InsertedLesion(lesion_id, tuple(int(v) for v in center),
                             tuple(float(v) for v in c_mm), tuple(int(v) for v in lo),
                             tuple(int(v) for v in hi), lesion.size_mm, lesion.kind)
        return replace(phantom, materials=mats, density_scale=dens,
                       inserted_lesions=phantom.inserted_lesions + (rec,))
    raise PlacementError("placement exhausted")


def attenuation_volume(phantom: VoxelPhantom, table: MaterialTable) -> np.ndarray:
    """Voxelwise mu (1/cm) = table[material] * density_scale, as float32."""
    lut = table.lookup_array()
    mu = lut[phantom.materials]
    if np.isnan(mu).any():
        missing = sorted(set(np.unique(phantom.materials[np.isnan(mu)]).tolist()))
        raise KeyError(f"material ids {missing} not in material table")
    return (mu * phantom.density_scale).astype(np.float32)


def build_patient_phantom(patient, dims=(160, 128, 96), spacing_mm=(2.0, 2.0, 2.0)):
    """Thorax plus every prescribed lesion. Returns (phantom, skipped lesion ids)."""
    ph = build_thorax(patient.demographics, derive_seed(patient.patient_seed, "phantom"),
                      dims, spacing_mm)
    skipped = []
    core = lung_core_mask(ph) if patient.lesions else None
    for spec in patient.lesions:
        try:
            vol = synthesize_lesion(spec, spacing_mm[0])
            ph = insert_lesion(ph, vol, spec.placement_seed, spec.lesion_id, core)
        except (PlacementError, UnresolvableLesionError) as exc:
            log.warning("%s: lesion %s skipped (%s)", patient.patient_id, spec.lesion_id, exc)
            skipped.append(spec.lesion_id)
    return ph, skipped


# --- persistence ------------------------------------------------------------

def _header(phantom: VoxelPhantom, table: MaterialTable) -> dict:
    return {
        "format": "float32-le, x fastest",
        "dims": list(phantom.dims),
        "spacing_mm": list(phantom.spacing_mm),
        "units": "1/cm",
        "material_table": table.to_dict(),
        "lesions": [{"lesion_id": l.lesion_id, "center_voxel": list(l.center_voxel),
                     "center_mm": list(l.center_mm), "size_mm": l.size_mm,
                     "kind": l.kind.value} for l in phantom.inserted_lesions],
    }


def save_mu_volume(path: Path, phantom: VoxelPhantom, table: MaterialTable) -> None:
    write_raw_volume(path, attenuation_volume(phantom, table), _header(phantom, table))
