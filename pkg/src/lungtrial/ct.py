"""Fan-beam CT acquisition and weighted filtered backprojection.

Acquisition per axial slice: ray-traced line integrals -> Poisson counts ->
additive low-frequency scatter -> log -> equiangular fan-beam FBP (cosine
weighting, apodised ramp, 1/L^2 backprojection) -> Hounsfield units.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .phantom import MaterialTable, VoxelPhantom, attenuation_volume
from .projector import fan_backproject_stack, project_rays_stack
from .rng import poisson_counts


class Apodization(str, Enum):
    RAMP_ONLY = "ramp_only"
    HANN = "hann"
    HAMMING = "hamming"


class ImagingFailure(RuntimeError):
    """A scan could not be completed; the patient leaves the CT arm."""


FLUENCE_LEVELS = {1: 0.5, 2: 1.0, 3: 2.0}


@dataclass(frozen=True)
class CtScannerConfig:
    name: str
    source_to_iso_mm: float = 570.0
    source_to_detector_mm: float = 1040.0
    n_channels: int = 672
    channel_pitch_mm: float = 1.0
    n_views: int = 984
    fluence_n0: float = 2.0e5
    recon_fov_mm: float = 320.0
    recon_matrix: tuple[int, int] = (160, 128)
    apodization: Apodization = Apodization.HANN
    configuration_index: int = 2
    slice_thickness_mm: float = 3.0
    scatter_fraction: float = 0.05
    scatter_kernel_channels: int = 64

    def __post_init__(self):
        object.__setattr__(self, "apodization", Apodization(self.apodization))
        object.__setattr__(self, "recon_matrix", tuple(int(v) for v in self.recon_matrix))
        if not self.source_to_detector_mm > self.source_to_iso_mm > 0:
            raise ValueError("need source_to_detector > source_to_iso > 0")
        if self.n_channels < 2:
            raise ValueError("n_channels must be >= 2")
        if self.fluence_n0 <= 0:
            raise ValueError("fluence_n0 must be positive")
        if self.configuration_index not in FLUENCE_LEVELS:
            raise ValueError("configuration_index must be 1, 2 or 3")
        if not 0.0 <= self.scatter_fraction < 1.0:
            raise ValueError("scatter_fraction must lie in [0, 1)")
        if self.fov_radius_mm > self.source_to_iso_mm * math.sin(self.half_fan_angle):
            raise ValueError("detector arc does not cover the reconstruction field")

    @property
    def dgamma(self) -> float:
        return self.channel_pitch_mm / self.source_to_detector_mm

    @property
    def half_fan_angle(self) -> float:
        return 0.5 * (self.n_channels - 1) * self.dgamma

    @property
    def pixel_mm(self) -> float:
        return self.recon_fov_mm / self.recon_matrix[0]

    @property
    def fov_radius_mm(self) -> float:
        """Radius of the largest circle inscribed in the reconstruction field."""
        return 0.5 * self.pixel_mm * min(self.recon_matrix)

    @property
    def effective_n0(self) -> float:
        return self.fluence_n0 * FLUENCE_LEVELS[self.configuration_index]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["apodization"] = self.apodization.value
        d["recon_matrix"] = list(self.recon_matrix)
        return d


SCANNERS = ("legacy_w12", "legacy_w20")
_W12_N0 = 2.0e5


def scanner_config(name: str, configuration_index: int = 2, **overrides) -> CtScannerConfig:
    """Preset for one of the two generic third-generation fan-beam scanners.

    W12 and W20 share the geometry; W20 uses 2 mm slices and 1.5x the fluence
    of W12 (3 mm slices). ``overrides`` replace any field, e.g. a reduced
    ``n_views`` for desk-scale runs; ``fluence_n0`` overrides the W12 base and
    W20 keeps its 1.5x ratio.
    """
    if name not in SCANNERS:
        raise ValueError(f"unknown scanner {name!r}; expected one of {SCANNERS}")
    base_n0 = overrides.pop("fluence_n0", _W12_N0)
    if name == "legacy_w12":
        cfg = CtScannerConfig(name, fluence_n0=base_n0, slice_thickness_mm=3.0,
                              configuration_index=configuration_index)
    else:
        cfg = CtScannerConfig(name, fluence_n0=1.5 * base_n0, slice_thickness_mm=2.0,
                              configuration_index=configuration_index)
    return replace(cfg, **overrides)


@dataclass(frozen=True, eq=False)
class Sinogram:
    data: np.ndarray          # (n_views, n_channels) post-log line integrals
    geometry: CtScannerConfig
    slice_index: int = 0


@dataclass(frozen=True, eq=False)
class ReconVolume:
    data: np.ndarray          # HU, indexed [ix, iy, iz]
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]  # centre of voxel (0, 0, 0)


# --- geometry -----------------------------------------------------------------

@lru_cache(maxsize=16)
def _fan_rays(source_to_iso, source_to_detector, n_channels, dgamma, n_views):
    betas = 2.0 * np.pi * np.arange(n_views) / n_views
    gammas = (np.arange(n_channels) - 0.5 * (n_channels - 1)) * dgamma
    eb = np.stack([np.cos(betas), np.sin(betas)], -1)
    src = source_to_iso * eb
    # central ray is -eb; channel k is rotated counter-clockwise by gamma_k
    ang = np.arctan2(-eb[:, 1], -eb[:, 0])[:, None] + gammas[None, :]
    dirs = np.stack([np.cos(ang), np.sin(ang)], -1)
    dst = src[:, None, :] + source_to_detector * dirs
    src_all = np.broadcast_to(src[:, None, :], dst.shape)
    return betas, gammas, np.ascontiguousarray(src_all.reshape(-1, 2)), np.ascontiguousarray(dst.reshape(-1, 2))


def fan_geometry(config: CtScannerConfig):
    """(view angles, channel angles, ray sources, ray ends) for ``config``."""
    return _fan_rays(config.source_to_iso_mm, config.source_to_detector_mm,
                     config.n_channels, config.dgamma, config.n_views)


def _check_source_outside(config: CtScannerConfig, half_extent_mm: tuple[float, float]):
    if config.source_to_iso_mm <= math.hypot(*half_extent_mm):
        raise ValueError("degenerate geometry: source inside the reconstruction grid")


# --- operations -------------------------------------------------------------------

def project_stack(mu_xyz: np.ndarray, spacing_xy, config: CtScannerConfig) -> np.ndarray:
    """Line integrals for every slice: (n_views, n_channels, nz); mu per mm."""
    nx, ny = mu_xyz.shape[:2]
    _check_source_outside(config, (nx * spacing_xy[0] / 2, ny * spacing_xy[1] / 2))
    _, _, src, dst = fan_geometry(config)
    out = project_rays_stack(mu_xyz, src, dst, spacing_xy)
    return out.reshape(config.n_views, config.n_channels, -1)


def forward_project(mu_slice: np.ndarray, spacing_mm, config: CtScannerConfig,
                    slice_index: int = 0) -> Sinogram:
    """Exact ray-traced line integrals of one slice (mu in 1/mm)."""
    mu = np.asarray(mu_slice, dtype=np.float64)
    if not np.all(np.isfinite(mu)) or np.any(mu < 0):
        raise ValueError("mu must be finite and non-negative")
    data = project_stack(mu[:, :, None], spacing_mm, config)[:, :, 0]
    return Sinogram(data, config, slice_index)


def noisy_line_integrals(p: np.ndarray, fluence_n0: float, seed: int, *keys) -> np.ndarray:
    if fluence_n0 <= 0:
        raise ValueError("fluence_n0 must be positive")
    counts = poisson_counts(fluence_n0 * np.exp(-p), seed, *keys)
    return -np.log(np.maximum(counts, 1.0) / fluence_n0)


def apply_quantum_noise(sinogram: Sinogram, fluence_n0: float, seed: int) -> Sinogram:
    data = noisy_line_integrals(sinogram.data, fluence_n0, seed, "ct-noise", sinogram.slice_index)
    return replace(sinogram, data=data)


def scatter_line_integrals(p: np.ndarray, scatter_fraction: float, kernel_width_channels: int,
                           channel_axis: int = 1) -> np.ndarray:
    if not 0.0 <= scatter_fraction < 1.0:
        raise ValueError("scatter_fraction must lie in [0, 1)")
    if scatter_fraction == 0.0:
        return np.array(p, dtype=np.float64, copy=True)
    primary = np.exp(-np.asarray(p, dtype=np.float64))  # counts relative to n0
    smooth = ndimage.uniform_filter1d(primary, max(1, int(kernel_width_channels)),
                                      axis=channel_axis, mode="nearest")
    return -np.log(primary + scatter_fraction * smooth)


def estimate_scatter(sinogram: Sinogram, scatter_fraction: float,
                     kernel_width_channels: int) -> Sinogram:
    """Add boxcar-smoothed scatter (a fraction of primary) in the counts domain."""
    return replace(sinogram, data=scatter_line_integrals(
        sinogram.data, scatter_fraction, kernel_width_channels))


@lru_cache(maxsize=16)
def _filter_response(n_channels: int, dgamma: float, apodization: Apodization) -> np.ndarray:
    """Frequency response of the equiangular fan-beam ramp, apodised."""
    n = np.arange(-(n_channels - 1), n_channels)
    h = np.zeros(n.shape)
    h[n == 0] = 1.0 / (4.0 * dgamma ** 2)
    odd = (n % 2) != 0
    h[odd] = -1.0 / (np.pi ** 2 * (n[odd] * dgamma) ** 2)
    g = n * dgamma
    ratio = np.ones_like(g)
    nz = g != 0
    ratio[nz] = g[nz] / np.sin(g[nz])
    kern = 0.5 * ratio ** 2 * h
    size = 1 << math.ceil(math.log2(2 * n_channels - 1))
    circ = np.zeros(size)
    circ[: n_channels] = kern[n_channels - 1:]
    circ[size - (n_channels - 1):] = kern[: n_channels - 1]
    resp = np.fft.rfft(circ).real
    f = np.arange(resp.size) / (resp.size - 1)  # 0 .. Nyquist
    if apodization == Apodization.HANN:
        resp = resp * 0.5 * (1.0 + np.cos(np.pi * f))
    elif apodization == Apodization.HAMMING:
        resp = resp * (0.54 + 0.46 * np.cos(np.pi * f))
    return resp


RECON_SLAB = 16


def filter_projections(p: np.ndarray, config: CtScannerConfig) -> np.ndarray:
    """Cosine pre-weighting and ramp filtering along channels; p is (views, ch, nz)."""
    _, gammas, _, _ = fan_geometry(config)
    weighted = p * (config.source_to_iso_mm * np.cos(gammas))[None, :, None]
    resp = _filter_response(config.n_channels, config.dgamma, config.apodization)
    size = 2 * (resp.size - 1)
    spec = np.fft.rfft(weighted, n=size, axis=1) * resp[None, :, None]
    return config.dgamma * np.fft.irfft(spec, n=size, axis=1)[:, : config.n_channels, :]


def reconstruct_stack(p: np.ndarray, config: CtScannerConfig, mu_water_per_mm: float) -> np.ndarray:
    """HU volume (nx, ny, nz) from line integrals (n_views, n_channels, nz)."""
    if config.n_views < 2:
        raise ValueError("need at least 2 views")
    betas, _, _, _ = fan_geometry(config)
    nz = p.shape[2]
    hu = np.empty((*config.recon_matrix, nz))
    # slices are independent; a fixed slab size bounds the FFT buffers per worker
    for z0 in range(0, nz, RECON_SLAB):
        sl = slice(z0, z0 + RECON_SLAB)
        q = filter_projections(p[:, :, sl], config)
        mu = fan_backproject_stack(q, betas, config.source_to_iso_mm, config.dgamma,
                                   config.recon_matrix, config.pixel_mm)
        hu[:, :, sl] = 1000.0 * (mu - mu_water_per_mm) / mu_water_per_mm
    return hu


def reconstruct_wfbp(sinogram: Sinogram, config: CtScannerConfig,
                     table: MaterialTable | None = None) -> ReconVolume:
    """Single-slice weighted FBP; returns a (nx, ny, 1) HU volume."""
    if config.n_views < 2:
        raise ValueError("need at least 2 views")
    if sinogram.data.shape != (config.n_views, config.n_channels):
        raise ValueError("sinogram shape does not match the scanner geometry")
    mu_w = (table or MaterialTable()).mu_water / 10.0
    hu = reconstruct_stack(sinogram.data[:, :, None], config, mu_w)
    px = config.pixel_mm
    origin = (-(config.recon_matrix[0] - 1) / 2 * px, -(config.recon_matrix[1] - 1) / 2 * px, 0.0)
    return ReconVolume(hu.astype(np.float32), (px, px, config.slice_thickness_mm), origin)


def slice_profile_weights(thickness_mm: float, spacing_mm: float) -> np.ndarray:
    """Overlap of a boxcar slice profile with neighbouring voxel intervals."""
    half = thickness_mm / 2.0
    reach = math.ceil(half / spacing_mm - 0.5)
    w = []
    for k in range(-reach, reach + 1):
        lo, hi = (k - 0.5) * spacing_mm, (k + 0.5) * spacing_mm
        w.append(max(0.0, min(hi, half) - max(lo, -half)))
    w = np.array(w)
    return w / w.sum()


def scan_ct(phantom: VoxelPhantom, scanner: str, configuration_index: int, seed: int,
            table: MaterialTable | None = None, config: CtScannerConfig | None = None,
            **overrides) -> ReconVolume:
    """Acquire and reconstruct every axial slice of ``phantom``.

    ``config`` (if given) replaces the preset; otherwise
    ``scanner_config(scanner, configuration_index, **overrides)``. The
    reconstruction grid matches the phantom's in-plane grid.
    """
    table = table or MaterialTable()
    nx, ny, _ = phantom.dims
    sx, sy, sz = phantom.spacing_mm
    if abs(sx - sy) > 1e-9:
        raise ValueError("in-plane phantom spacing must be square")
    if config is None:
        config = scanner_config(scanner, configuration_index, **overrides)
    config = replace(config, recon_fov_mm=nx * sx, recon_matrix=(nx, ny))

    mu = attenuation_volume(phantom, table).astype(np.float64) / 10.0  # 1/mm
    prof = slice_profile_weights(config.slice_thickness_mm, sz)
    if prof.size > 1:
        mu = ndimage.correlate1d(mu, prof, axis=2, mode="nearest")
    p = project_stack(mu, (sx, sy), config)
    # same per-slice noise streams as apply_quantum_noise
    for k in range(p.shape[2]):
        p[:, :, k] = noisy_line_integrals(p[:, :, k], config.effective_n0, seed, "ct-noise", k)
    for z0 in range(0, p.shape[2], RECON_SLAB):
        sl = slice(z0, z0 + RECON_SLAB)
        p[:, :, sl] = scatter_line_integrals(p[:, :, sl], config.scatter_fraction,
                                             config.scatter_kernel_channels)
    if not np.all(np.isfinite(p)):
        raise ImagingFailure("non-finite projection data")
    hu = reconstruct_stack(p, config, table.mu_water / 10.0)
    if not np.all(np.isfinite(hu)):
        raise ImagingFailure("non-finite reconstruction")
    origin = tuple(-(n - 1) / 2 * s for n, s in zip(phantom.dims, phantom.spacing_mm))
    return ReconVolume(hu.astype(np.float32), (sx, sy, sz), origin)
