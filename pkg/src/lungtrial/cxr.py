"""Posterior-anterior chest radiograph simulation.

A point source behind the patient (+y) irradiates a flat detector in front
(-y). Detector pixel ``(iu, iv)`` sits at ``x = u``, ``z = v`` in the plane
``y = -detector_to_iso_mm``. Raw images hold (noisy) line integrals; the
display image adds film-era post-processing: percentile windowing, unsharp
masking and a gamma curve.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .projector import project_rays_3d
from .rng import poisson_counts

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostProcess:
    p_lo: float = 1.0
    p_hi: float = 99.0
    unsharp_gain: float = 0.8
    unsharp_radius_mm: float = 4.0
    gamma: float = 1.6
    attenuation_bright: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_lo < self.p_hi <= 100.0:
            raise ValueError("need 0 <= p_lo < p_hi <= 100")


@dataclass(frozen=True)
class CxrConfig:
    source_to_detector_mm: float = 1800.0
    detector_to_iso_mm: float = 150.0
    detector_size_mm: tuple[float, float] = (360.0, 220.0)
    detector_matrix: tuple[int, int] = (360, 220)
    fluence_n0: float = 5.0e4
    postprocess: PostProcess = field(default_factory=PostProcess)

    def __post_init__(self):
        if isinstance(self.postprocess, dict):
            object.__setattr__(self, "postprocess", PostProcess(**self.postprocess))
        object.__setattr__(self, "detector_size_mm", tuple(float(v) for v in self.detector_size_mm))
        object.__setattr__(self, "detector_matrix", tuple(int(v) for v in self.detector_matrix))
        if self.fluence_n0 <= 0:
            raise ValueError("fluence_n0 must be positive")
        if self.source_to_detector_mm <= self.detector_to_iso_mm:
            raise ValueError("source must lie behind the isocentre")

    @property
    def source_y_mm(self) -> float:
        return self.source_to_detector_mm - self.detector_to_iso_mm

    @property
    def detector_y_mm(self) -> float:
        return -self.detector_to_iso_mm

    @property
    def pixel_mm(self) -> tuple[float, float]:
        return tuple(s / n for s, n in zip(self.detector_size_mm, self.detector_matrix))

    def pixel_centers(self):
        (nu, nv), (pu, pv) = self.detector_matrix, self.pixel_mm
        return (np.arange(nu) - (nu - 1) / 2) * pu, (np.arange(nv) - (nv - 1) / 2) * pv

    def magnification(self, y_mm: float) -> float:
        return (self.detector_y_mm - self.source_y_mm) / (y_mm - self.source_y_mm)

    def project_point(self, point_mm) -> tuple[float, float]:
        """Detector (u, v) in mm of a 3-D point (x, y, z)."""
        x, y, z = point_mm
        m = self.magnification(y)
        return float(m * x), float(m * z)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Radiograph:
    raw: np.ndarray                  # (nu, nv) line integrals
    geometry: CxrConfig
    display: np.ndarray | None = None
    warning: str | None = None

    @property
    def spacing_mm(self) -> tuple[float, float]:
        return self.geometry.pixel_mm

    @property
    def origin_mm(self) -> tuple[float, float]:
        u, v = self.geometry.pixel_centers()
        return float(u[0]), float(v[0])


def detector_rays(config: CxrConfig):
    u, v = config.pixel_centers()
    U, V = np.meshgrid(u, v, indexing="ij")
    dst = np.stack([U, np.full_like(U, config.detector_y_mm), V], -1).reshape(-1, 3)
    src = np.array([[0.0, config.source_y_mm, 0.0]])
    return src, dst


def line_integrals(mu_xyz: np.ndarray, spacing_mm, config: CxrConfig) -> np.ndarray:
    """Noiseless (nu, nv) line integrals; mu in 1/mm."""
    half = np.array(mu_xyz.shape) * np.array(spacing_mm) / 2
    if config.source_y_mm <= half[1] or config.detector_y_mm >= -half[1]:
        raise ValueError("degenerate geometry: source or detector inside the volume")
    src, dst = detector_rays(config)
    return project_rays_3d(mu_xyz, src, dst, spacing_mm).reshape(config.detector_matrix)


def project_radiograph(mu_volume: np.ndarray, spacing_mm, config: CxrConfig, seed: int,
                       noiseless: bool = False) -> Radiograph:
    mu = np.asarray(mu_volume, dtype=np.float64)
    if not np.all(np.isfinite(mu)) or np.any(mu < 0):
        raise ValueError("mu must be finite and non-negative")
    p = line_integrals(mu, spacing_mm, config)
    if not noiseless:
        counts = poisson_counts(config.fluence_n0 * np.exp(-p), seed, "cxr-noise")
        # counts above n0 on open-field rays would give negative integrals
        p = np.maximum(-np.log(np.maximum(counts, 1.0) / config.fluence_n0), 0.0)
    return Radiograph(p, config)


def postprocess_radiograph(radiograph: Radiograph) -> Radiograph:
    pp = radiograph.geometry.postprocess
    s = radiograph.raw.astype(np.float64)
    if not pp.attenuation_bright:
        s = -s
    lo, hi = np.percentile(s, [pp.p_lo, pp.p_hi])
    if not hi > lo:
        log.warning("radiograph has zero dynamic range; returning flat display")
        return replace(radiograph, display=np.full(s.shape, 0.5), warning="zero dynamic range")
    d = (np.clip(s, lo, hi) - lo) / (hi - lo)
    if pp.unsharp_gain:
        sigma = [pp.unsharp_radius_mm / px for px in radiograph.geometry.pixel_mm]
        d = d + pp.unsharp_gain * (d - ndimage.gaussian_filter(d, sigma, mode="nearest"))
    d = np.clip(d, 0.0, 1.0) ** pp.gamma
    return replace(radiograph, display=d)


def projected_mask(mask_xyz: np.ndarray, spacing_mm, config: CxrConfig,
                   min_path_mm: float = 10.0) -> np.ndarray:
    """Detector pixels whose ray crosses at least ``min_path_mm`` of ``mask``."""
    return line_integrals(mask_xyz.astype(np.float64), spacing_mm, config) >= min_path_mm
