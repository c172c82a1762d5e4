"""Search-and-score virtual reader, identical for 2-D radiographs and 3-D CT.

Search: scale-normalised Laplacian-of-Gaussian at each target diameter ``s``
(sigma = s / (2 sqrt(d))), keeping points that are local maxima over space at their characteristic scale
(the response peaks across all scales) inside the search mask. Score: normalised
cross-correlation of the local patch with a solid ball of diameter ``s``,
mapped through a logistic calibration. Greedy non-maximum suppression on the
axis-aligned boxes, then truncation to ``max_detections``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .stats import ScoredSample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    center: tuple[float, ...]   # mm
    box: tuple[float, ...]      # full extent per axis, mm
    score: float
    scale_mm: float
    raw_score: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")
        if min(self.box) <= 0:
            raise ValueError("box extents must be positive")


@dataclass(frozen=True)
class ReaderConfig:
    scales_mm: tuple[float, ...] = (4.0, 6.0, 8.0, 12.0, 16.0, 24.0)
    nms_iou: float = 0.25
    max_detections_per_case: int = 20
    calibration_slope: float = 8.0
    calibration_intercept: float = -4.0
    search_mask: str = "lung_mask"
    max_candidates_per_scale: int = 64

    def __post_init__(self):
        object.__setattr__(self, "scales_mm", tuple(float(s) for s in self.scales_mm))
        if list(self.scales_mm) != sorted(self.scales_mm) or not self.scales_mm:
            raise ValueError("scales must be non-empty and sorted ascending")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must lie in (0, 1)")
        if self.max_detections_per_case < 1:
            raise ValueError("max_detections_per_case must be >= 1")
        if self.search_mask not in ("lung_mask", "full_image"):
            raise ValueError("search_mask must be 'lung_mask' or 'full_image'")

    def calibrate(self, raw: np.ndarray) -> np.ndarray:
        z = self.calibration_slope * np.asarray(raw, float) + self.calibration_intercept
        return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class Truth:
    lesion_id: str
    center: tuple[float, ...]   # mm, same frame as the detections
    size_mm: float              # physical largest-axis size; drives the size class
    kind: str = "none"
    match_size_mm: float | None = None   # apparent size in the image (CXR magnification)

    @property
    def apparent_size_mm(self) -> float:
        return self.size_mm if self.match_size_mm is None else self.match_size_mm


@dataclass
class MatchResult:
    lesions: list = field(default_factory=list)           # (lesion_id, hit, matched_score)
    false_positives: list = field(default_factory=list)   # Detection
    criterion: dict = field(default_factory=dict)


# --- search -----------------------------------------------------------------------

def _normalized_log(image: np.ndarray, sigma_mm: float, spacing) -> np.ndarray:
    """-sigma^2 * Laplacian of the Gaussian-smoothed image (bright blobs > 0)."""
    sig_vox = [sigma_mm / s for s in spacing]
    out = np.zeros(image.shape, np.float64)
    for ax, s in enumerate(spacing):
        order = [0] * image.ndim
        order[ax] = 2
        # the truncated kernel does not sum to zero; remove its DC gain so a
        # flat field gives exactly no response
        dc = ndimage.gaussian_filter(np.ones((1,) * image.ndim), sig_vox, order=order, mode="nearest").item()
        out += (ndimage.gaussian_filter(image, sig_vox, order=order, mode="nearest") - dc * image) / (s * s)
    return -(sigma_mm ** 2) * out


def _ball(diameter_mm: float, spacing) -> tuple[np.ndarray, tuple[int, ...]]:
    half = tuple(max(1, math.ceil(diameter_mm / s)) for s in spacing)
    axes = [np.arange(-h, h + 1) * s for h, s in zip(half, spacing)]
    grids = np.meshgrid(*axes, indexing="ij")
    r2 = sum(g * g for g in grids)
    return (r2 <= (diameter_mm / 2.0) ** 2).astype(np.float64), half


def _ncc(image: np.ndarray, index, template: np.ndarray, half) -> float:
    lo = [i - h for i, h in zip(index, half)]
    hi = [i + h + 1 for i, h in zip(index, half)]
    img_sl, tpl_sl = [], []
    for l, h, n in zip(lo, hi, image.shape):
        a, b = max(l, 0), min(h, n)
        img_sl.append(slice(a, b))
        tpl_sl.append(slice(a - l, b - l))
    p = image[tuple(img_sl)].ravel()
    t = template[tuple(tpl_sl)].ravel()
    p = p - p.mean()
    t = t - t.mean()
    den = math.sqrt(float((p * p).sum()) * float((t * t).sum()))
    if den <= 0.0:
        return 0.0
    return float((p * t).sum() / den)


def _box_iou(c1, b1, c2, b2) -> float:
    inter = 1.0
    for x1, w1, x2, w2 in zip(c1, b1, c2, b2):
        ov = min(x1 + w1 / 2, x2 + w2 / 2) - max(x1 - w1 / 2, x2 - w2 / 2)
        if ov <= 0:
            return 0.0
        inter *= ov
    union = float(np.prod(b1)) + float(np.prod(b2)) - inter
    return inter / union


def box_iou(d1: Detection, d2: Detection) -> float:
    return _box_iou(d1.center, d1.box, d2.center, d2.box)


def nms(detections: list[Detection], iou: float) -> list[Detection]:
    """Greedy score-ordered suppression (ties broken by position for determinism)."""
    order = sorted(detections, key=lambda d: (-d.score, -d.raw_score, d.scale_mm, d.center))
    kept: list[Detection] = []
    for d in order:
        if all(box_iou(d, k) <= iou for k in kept):
            kept.append(d)
    return kept


def detect(image: np.ndarray, mask: np.ndarray | None, config: ReaderConfig,
           spacing_mm=None, origin_mm=None) -> list[Detection]:
    """Multi-scale blob search over ``image`` restricted to ``mask``.

    Works for any dimensionality; ``origin_mm`` is the position of index 0.
    """
    img = np.asarray(image, dtype=np.float64)
    d = img.ndim
    spacing = tuple(float(s) for s in (spacing_mm or (1.0,) * d))
    origin = tuple(float(o) for o in (origin_mm or (0.0,) * d))
    if not np.all(np.isfinite(img)):
        raise ValueError("image must be finite")
    if mask is None or config.search_mask == "full_image":
        mask = np.ones(img.shape, bool)
    mask = np.asarray(mask, bool)
    if mask.shape != img.shape:
        raise ValueError("mask and image dimensions differ")
    if not mask.any():
        log.warning("empty search mask; no detections")
        return []

    stack = np.stack([_normalized_log(img, s / (2.0 * math.sqrt(d)), spacing)
                      for s in config.scales_mm])
    floor = 1e-7 * max(1.0, float(np.abs(img).max()))
    # spatial 3^d neighbourhood, whole scale axis: each point keeps only its
    # characteristic scale, so rim responses inside a big blob do not survive
    size = (1,) + (3,) * d
    peak = ndimage.maximum_filter(stack, size=size, mode="nearest").max(axis=0, keepdims=True)
    trough = ndimage.minimum_filter(stack, size=size, mode="nearest").min(axis=0, keepdims=True)
    is_max = (stack == peak) & (peak > trough) & (stack > floor) & mask[None]

    candidates = []
    for k, s in enumerate(config.scales_mm):
        idx = np.argwhere(is_max[k])
        if idx.size == 0:
            continue
        resp = stack[k][tuple(idx.T)]
        keep = np.lexsort((np.arange(len(resp)), -resp))[: config.max_candidates_per_scale]
        template, half = _ball(s, spacing)
        for j in keep:
            index = tuple(int(v) for v in idx[j])
            raw = _ncc(img, index, template, half)
            center = tuple(o + i * sp for o, i, sp in zip(origin, index, spacing))
            score = float(config.calibrate(raw))
            candidates.append(Detection(center, (s,) * d, score, s, raw))
    return nms(candidates, config.nms_iou)[: config.max_detections_per_case]


# --- truth matching -------------------------------------------------------------

def match_to_truth(detections: list[Detection], truths: list[Truth],
                   radius_rule: float = 1.0) -> MatchResult:
    """Greedy one-to-one assignment in descending score.

    A detection hits a lesion when its centre lies within
    ``radius_rule`` times the apparent lesion radius of the lesion centre; among the unassigned
    lesions it hits, it takes the nearest.
    """
    dets = sorted(detections, key=lambda d: (-d.score, d.center))
    assigned: dict[str, Detection] = {}
    fps = []
    for det in dets:
        best, best_dist = None, math.inf
        for t in truths:
            if t.lesion_id in assigned:
                continue
            dist = math.dist(det.center, t.center)
            if dist <= radius_rule * t.apparent_size_mm / 2.0 and dist < best_dist:
                best, best_dist = t, dist
        if best is None:
            fps.append(det)
        else:
            assigned[best.lesion_id] = det
    lesions = [(t.lesion_id, t.lesion_id in assigned,
                assigned[t.lesion_id].score if t.lesion_id in assigned else 0.0) for t in truths]
    return MatchResult(lesions, fps, {"rule": "center-within-radius", "radius_rule": radius_rule})


def patient_level_score(detections: list[Detection]) -> float:
    return max((d.score for d in detections), default=0.0)


# --- samples --------------------------------------------------------------------

@dataclass
class CaseReading:
    """Everything the sample builder needs about one patient in one modality."""
    patient_id: str
    modality: str
    has_nodule: bool
    truths: list
    detections: list
    match: MatchResult


def size_class(size_mm: float, threshold_mm: float = 8.0) -> str:
    return "lt8mm" if size_mm < threshold_mm else "ge8mm"


def lesion_level_samples(readings: list[CaseReading], top_k: int = 3,
                         size_threshold_mm: float = 8.0) -> list[ScoredSample]:
    """One positive per lesion; top-``top_k`` false positives per nodule-free patient."""
    out = []
    for r in readings:
        kinds = {t.lesion_id: t for t in r.truths}
        for lesion_id, _hit, score in r.match.lesions:
            t = kinds[lesion_id]
            out.append(ScoredSample(score, 1, lesion_id, r.modality, "lesion", t.kind,
                                    size_class(t.size_mm, size_threshold_mm)))
        if not r.has_nodule:
            fps = sorted(r.match.false_positives, key=lambda d: (-d.score, d.center))[:top_k]
            for k, d in enumerate(fps):
                out.append(ScoredSample(d.score, 0, f"{r.patient_id}-FP{k + 1}", r.modality, "lesion"))
    return out


def patient_level_samples(readings: list[CaseReading]) -> list[ScoredSample]:
    return [ScoredSample(patient_level_score(r.detections), int(r.has_nodule), r.patient_id,
                         r.modality, "patient") for r in readings]


# --- calibration ------------------------------------------------------------------

def fit_calibration(raw_scores, labels) -> tuple[float, float]:
    """Logistic regression of hit labels on raw NCC scores: (slope, intercept)."""
    x = np.asarray(raw_scores, float)
    y = np.asarray(labels, float)

    def nll(theta):
        z = theta[0] * x + theta[1]
        return float(np.sum(np.logaddexp(0.0, z) - y * z)) + 1e-3 * theta[0] ** 2

    res = optimize.minimize(nll, x0=np.array([1.0, 0.0]), method="BFGS")
    return float(res.x[0]), float(res.x[1])


# --- persistence --------------------------------------------------------------

DETECTION_COLUMNS = ("case_id", "modality", "rank", "center_mm", "box_mm", "scale_mm", "score", "raw_score")
MATCH_COLUMNS = ("lesion_id", "case_id", "modality", "hit", "matched_score")


def detections_rows(case_id: str, modality: str, detections: list[Detection]):
    for k, d in enumerate(detections):
        yield (case_id, modality, k + 1, ",".join(repr(float(c)) for c in d.center),
               ",".join(repr(float(b)) for b in d.box), repr(d.scale_mm), repr(d.score), repr(d.raw_score))


def detection_from_row(row: dict) -> Detection:
    return Detection(tuple(float(v) for v in row["center_mm"].split(",")),
                     tuple(float(v) for v in row["box_mm"].split(",")),
                     float(row["score"]), float(row["scale_mm"]), float(row["raw_score"]))
