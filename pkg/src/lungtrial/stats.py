"""ROC endpoints: Mann-Whitney AUC, DeLong and bootstrap intervals, paired
DeLong comparison, subgroup report and two-AUC sample sizing.

DeLong variance components follow DeLong, DeLong & Clarke-Pearson (1988)
with the midrank formulation of Sun & Xu (2014).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from .rng import derive_seed, generator

log = logging.getLogger(__name__)


class DegenerateROC(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSample:
    score: float
    label: int
    unit_id: str
    modality: str = "CT"          # CT | CXR
    level: str = "lesion"         # lesion | patient
    kind: str = "none"            # homogeneous | heterogeneous | none
    size_class: str = "none"      # lt8mm | ge8mm | none

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if not math.isfinite(self.score):
            raise ValueError("score must be finite")


class CiMethod(str, Enum):
    DELONG = "delong_analytic"
    BOOTSTRAP = "bootstrap_percentile"


@dataclass(frozen=True)
class RocSummary:
    auc: float
    ci_low: float
    ci_high: float
    ci_method: CiMethod
    n_pos: int
    n_neg: int
    n_boot: int = 0
    seed: int | None = None
    warning: str | None = None


@dataclass(frozen=True)
class ComparisonResult:
    auc_a: float
    auc_b: float
    delta: float
    p_value: float
    method: str  # delong_paired | delong_unpaired
    n_shared: int = 0


def _split(samples):
    y = np.array([s.label for s in samples], dtype=int)
    x = np.array([s.score for s in samples], dtype=float)
    return x[y == 1], x[y == 0]


def _as_arrays(samples_or_pos, neg=None):
    if neg is None:
        return _split(samples_or_pos)
    return np.asarray(samples_or_pos, float), np.asarray(neg, float)


# --- AUC ----------------------------------------------------------------------

def _midranks(x: np.ndarray) -> np.ndarray:
    return stats.rankdata(x, method="average")


def auc_scores(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney AUC via the rank-sum; ties count one half."""
    m, n = len(pos), len(neg)
    if m == 0 or n == 0:
        raise DegenerateROC("degenerate ROC: need at least one positive and one negative")
    r = _midranks(np.concatenate([pos, neg]))
    # rank sums are exact multiples of 1/2, so this is exact for n <= 1e7
    u = r[:m].sum() - m * (m + 1) / 2.0
    return float(u / (m * n))


def auc(samples) -> float:
    return auc_scores(*_split(samples))


def auc_bruteforce(pos, neg) -> float:
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    if len(pos) == 0 or len(neg) == 0:
        raise DegenerateROC("degenerate ROC: need at least one positive and one negative")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


# --- DeLong -------------------------------------------------------------------

def delong_components(pos: np.ndarray, neg: np.ndarray):
    """(auc, V10, V01): structural components per positive / per negative."""
    m, n = len(pos), len(neg)
    r_all = _midranks(np.concatenate([pos, neg]))
    r_pos, r_neg = _midranks(pos), _midranks(neg)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    return float(v10.mean()), v10, v01


def delong_variance(pos, neg) -> tuple[float, float]:
    a, v10, v01 = delong_components(np.asarray(pos, float), np.asarray(neg, float))
    var = np.var(v10, ddof=1) / len(v10) + np.var(v01, ddof=1) / len(v01)
    return a, max(float(var), 0.0)


def delong_ci(samples, alpha: float = 0.05) -> RocSummary:
    pos, neg = _split(samples)
    if len(pos) < 2 or len(neg) < 2:
        raise DegenerateROC("DeLong interval needs at least 2 positives and 2 negatives")
    a, var = delong_variance(pos, neg)
    warning = None
    if var == 0.0:
        log.warning("zero DeLong variance; interval collapses to the point estimate")
        warning = "zero variance"
    half = stats.norm.ppf(1 - alpha / 2) * math.sqrt(var)
    lo, hi = max(0.0, a - half), min(1.0, a + half)
    return RocSummary(a, lo, hi, CiMethod.DELONG, len(pos), len(neg), warning=warning)


# --- bootstrap ----------------------------------------------------------------

def _bootstrap_aucs(pos, neg, n_boot: int, seed: int) -> np.ndarray:
    m, n = len(pos), len(neg)
    out = np.empty(n_boot)
    for b in range(n_boot):
        # replicate b has its own stream, so results do not depend on scheduling
        rng = generator(seed, "bootstrap", b)
        out[b] = auc_scores(pos[rng.integers(0, m, m)], neg[rng.integers(0, n, n)])
    return out


def bootstrap_ci(samples, n_boot: int = 2000, alpha: float = 0.05, seed: int = 0) -> RocSummary:
    """Percentile interval over label-stratified resamples."""
    pos, neg = _split(samples)
    a = auc_scores(pos, neg)
    boots = _bootstrap_aucs(pos, neg, n_boot, seed)
    lo, hi = np.quantile(boots, [alpha / 2, 1 - alpha / 2])
    lo, hi = min(float(lo), a), max(float(hi), a)
    return RocSummary(a, lo, hi, CiMethod.BOOTSTRAP, len(pos), len(neg), n_boot, seed)


# --- paired comparison ----------------------------------------------------------

def _two_sided_p(z: float) -> float:
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


def paired_auc_test(samples_a, samples_b, min_overlap: float = 0.8,
                    allow_unpaired: bool = True) -> ComparisonResult:
    """DeLong test of AUC_a - AUC_b, paired on ``unit_id`` when possible.

    Pairing uses units present in both arms with agreeing labels. If those
    cover less than ``min_overlap`` of either arm the test falls back to the
    independent-samples form on the full arms.
    """
    a_map = {s.unit_id: s for s in samples_a}
    b_map = {s.unit_id: s for s in samples_b}
    shared = sorted(u for u in a_map.keys() & b_map.keys() if a_map[u].label == b_map[u].label)
    overlap = len(shared) / max(1, max(len(a_map), len(b_map)))
    if overlap >= min_overlap and shared:
        ya = np.array([a_map[u].label for u in shared])
        xa = np.array([a_map[u].score for u in shared])
        xb = np.array([b_map[u].score for u in shared])
        if ya.min() == ya.max():
            raise DegenerateROC("degenerate ROC: shared units contain a single class")
        auc_a, v10a, v01a = delong_components(xa[ya == 1], xa[ya == 0])
        auc_b, v10b, v01b = delong_components(xb[ya == 1], xb[ya == 0])
        m, n = len(v10a), len(v01a)
        s10 = np.cov(np.vstack([v10a, v10b]), ddof=1)
        s01 = np.cov(np.vstack([v01a, v01b]), ddof=1)
        var = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / m + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n
        method, n_shared = "delong_paired", len(shared)
    else:
        if not allow_unpaired:
            raise ValueError("too few shared units for a paired test and unpaired fallback disabled")
        auc_a, var_a = delong_variance(*_split(samples_a))
        auc_b, var_b = delong_variance(*_split(samples_b))
        var = var_a + var_b
        method, n_shared = "delong_unpaired", len(shared)
    delta = auc_a - auc_b
    if var <= 0.0:
        p = 1.0 if delta == 0.0 else 0.0
    else:
        p = _two_sided_p(delta / math.sqrt(var))
    return ComparisonResult(auc_a, auc_b, delta, p, method, n_shared)


# --- power -------------------------------------------------------------------

MAX_SAMPLE_SIZE = 10 ** 6


def hanley_mcneil_variance(a: float, n_pos: float, n_neg: float) -> float:
    q1 = a / (2 - a)
    q2 = 2 * a * a / (1 + a)
    return (a * (1 - a) + (n_pos - 1) * (q1 - a * a) + (n_neg - 1) * (q2 - a * a)) / (n_pos * n_neg)


def power_sample_size(auc_a: float, auc_b: float, alpha: float = 0.05, power: float = 0.9,
                      pos_neg_ratio: float = 1.0) -> int:
    """Smallest positives-per-arm count for a two-sided test of two independent AUCs.

    Uses the Hanley-McNeil variance under both the null (pooled AUC) and the
    alternative: ``z_a sqrt(V0) + z_b sqrt(V1) <= |auc_a - auc_b|``.
    ``n_neg = ceil(pos_neg_ratio * n_pos)``.
    """
    if not 0.5 <= auc_b < auc_a < 1.0:
        if auc_a <= auc_b:
            raise ValueError("auc_a must exceed auc_b")
        raise ValueError("need 0.5 <= auc_b < auc_a < 1")
    if not (0 < alpha < 1 and 0 < power < 1):
        raise ValueError("alpha and power must lie in (0, 1)")
    za = stats.norm.ppf(1 - alpha / 2)
    zb = stats.norm.ppf(power)
    pooled = 0.5 * (auc_a + auc_b)
    gap = auc_a - auc_b

    def ok(n_pos: int) -> bool:
        n_neg = max(1, math.ceil(pos_neg_ratio * n_pos))
        v0 = 2 * hanley_mcneil_variance(pooled, n_pos, n_neg)
        v1 = hanley_mcneil_variance(auc_a, n_pos, n_neg) + hanley_mcneil_variance(auc_b, n_pos, n_neg)
        return za * math.sqrt(max(v0, 0)) + zb * math.sqrt(max(v1, 0)) <= gap

    lo, hi = 2, 2
    while not ok(hi):
        hi *= 2
        if hi > MAX_SAMPLE_SIZE:
            raise ValueError(f"required sample size exceeds {MAX_SAMPLE_SIZE}")
    while lo < hi:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


# --- report ---------------------------------------------------------------------

# (row name, level, filter) in the published table order
REPORT_ROWS = (
    ("lesion-level", "lesion", None),
    ("patient-level", "patient", None),
    ("homogeneous", "lesion", ("kind", "homogeneous")),
    ("heterogeneous", "lesion", ("kind", "heterogeneous")),
    ("lt8mm", "lesion", ("size_class", "lt8mm")),
    ("ge8mm", "lesion", ("size_class", "ge8mm")),
)
MODALITIES = ("CT", "CXR")


def subgroup_samples(samples, modality: str, level: str, filt) -> list[ScoredSample]:
    """Positives matching the subgroup plus every negative of that level and modality."""
    out = []
    for s in samples:
        if s.modality != modality or s.level != level:
            continue
        if filt is not None and s.label == 1 and getattr(s, filt[0]) != filt[1]:
            continue
        out.append(s)
    return out


@dataclass
class ReportRow:
    name: str
    summaries: dict = field(default_factory=dict)   # modality -> RocSummary | None
    delong: dict = field(default_factory=dict)      # modality -> RocSummary | None
    comparison: ComparisonResult | None = None
    note: str = ""


def _summarise(sub, ci_method, n_boot, alpha, seed):
    pos, neg = _split(sub)
    if len(pos) < 2 or len(neg) < 2:
        return None, None
    dl = delong_ci(sub, alpha)
    if ci_method == CiMethod.BOOTSTRAP:
        return bootstrap_ci(sub, n_boot, alpha, seed), dl
    return dl, dl


def subgroup_report(samples, ci_method=CiMethod.BOOTSTRAP, n_boot: int = 2000,
                    alpha: float = 0.05, seed: int = 0) -> list[ReportRow]:
    ci_method = CiMethod(ci_method)
    rows = []
    for name, level, filt in REPORT_ROWS:
        row = ReportRow(name)
        subs = {}
        for mod in MODALITIES:
            sub = subgroup_samples(samples, mod, level, filt)
            subs[mod] = sub
            s, d = _summarise(sub, ci_method, n_boot, alpha, derive_seed(seed, name, mod))
            row.summaries[mod], row.delong[mod] = s, d
        if all(row.summaries[m] is not None for m in MODALITIES):
            row.comparison = paired_auc_test(subs["CT"], subs["CXR"])
        else:
            row.note = "insufficient data"
        rows.append(row)
    return rows


REPORT_COLUMNS = ("row", "modality_a", "auc_a", "ci_low_a", "ci_high_a", "delong_low_a",
                  "delong_high_a", "n_pos_a", "n_neg_a", "modality_b", "auc_b", "ci_low_b",
                  "ci_high_b", "delong_low_b", "delong_high_b", "n_pos_b", "n_neg_b",
                  "delta", "p_value", "test", "ci_method", "note")


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def report_to_tsv(rows: list[ReportRow], ci_method=CiMethod.BOOTSTRAP) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        cells = [r.name]
        for mod in MODALITIES:
            s, d = r.summaries.get(mod), r.delong.get(mod)
            cells += [mod, _fmt(s.auc if s else None), _fmt(s.ci_low if s else None),
                      _fmt(s.ci_high if s else None), _fmt(d.ci_low if d else None),
                      _fmt(d.ci_high if d else None), _fmt(s.n_pos if s else None),
                      _fmt(s.n_neg if s else None)]
        c = r.comparison
        cells += [_fmt(c.delta if c else None), _fmt(c.p_value if c else None),
                  c.method if c else "NA", CiMethod(ci_method).value, r.note]
        w.writerow(cells)
    return buf.getvalue()


def roc_points(samples) -> np.ndarray:
    """(FPR, TPR) operating points, one per distinct threshold, from (0,0) to (1,1)."""
    pos, neg = _split(samples)
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    pts = [(0.0, 0.0)] + [((neg >= t).mean(), (pos >= t).mean()) for t in thr]
    if pts[-1] != (1.0, 1.0):
        pts.append((1.0, 1.0))
    return np.array(pts, dtype=float)


def roc_points_tsv(samples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(("row", "modality", "fpr", "tpr"))
    for name, level, filt in REPORT_ROWS:
        for mod in MODALITIES:
            sub = subgroup_samples(samples, mod, level, filt)
            pos, neg = _split(sub)
            if len(pos) == 0 or len(neg) == 0:
                continue
            for f, t in roc_points(sub):
                w.writerow((name, mod, f"{f:.6g}", f"{t:.6g}"))
    return buf.getvalue()


SAMPLE_COLUMNS = ("unit_id", "modality", "level", "label", "score", "kind", "size_class")


def samples_to_tsv(samples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(SAMPLE_COLUMNS)
    for s in samples:
        w.writerow((s.unit_id, s.modality, s.level, s.label, repr(float(s.score)), s.kind, s.size_class))
    return buf.getvalue()


def samples_from_tsv(text: str) -> list[ScoredSample]:
    out = []
    for r in csv.DictReader(io.StringIO(text), delimiter="\t"):
        out.append(ScoredSample(float(r["score"]), int(r["label"]), r["unit_id"], r["modality"],
                                r["level"], r.get("kind") or "none", r.get("size_class") or "none"))
    return out
