import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from lungtrial import stats
from lungtrial.stats import ScoredSample


def make(pos, neg, modality="CT", level="lesion", prefix="u"):
    out = [ScoredSample(float(s), 1, f"{prefix}p{i}", modality, level) for i, s in enumerate(pos)]
    out += [ScoredSample(float(s), 0, f"{prefix}n{i}", modality, level) for i, s in enumerate(neg)]
    return out


def binormal(rng, auc, n_pos, n_neg):
    d = np.sqrt(2) * norm.ppf(auc)
    return rng.normal(d, 1, n_pos), rng.normal(0, 1, n_neg)


def oracle_bootstrap(pos, neg, n_boot, rng):
    """Vectorised stratified bootstrap with O(mn) pair counting."""
    out = np.empty(n_boot)
    for b in range(0, n_boot, 500):
        k = min(500, n_boot - b)
        p = pos[rng.integers(0, len(pos), (k, len(pos)))]
        q = neg[rng.integers(0, len(neg), (k, len(neg)))]
        d = p[:, :, None] - q[:, None, :]
        out[b:b + k] = ((d > 0) + 0.5 * (d == 0)).mean(axis=(1, 2))
    return out


# --- AUC ----------------------------------------------------------------------

def test_perfect_and_tied():
    assert stats.auc(make([1.0] * 4, [0.0] * 5)) == 1.0
    assert stats.auc(make([0.3] * 4, [0.3] * 5)) == 0.5


def test_degenerate_roc():
    with pytest.raises(stats.DegenerateROC, match="degenerate ROC"):
        stats.auc(make([0.2, 0.4], []))
    with pytest.raises(stats.DegenerateROC):
        stats.auc_bruteforce([], [0.1])


def test_ranksum_equals_bruteforce_exactly():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        m, n = rng.integers(1, 51, 2)
        # coarse grid forces plenty of ties
        pos = rng.integers(0, 12, m) / 4.0
        neg = rng.integers(0, 12, n) / 4.0
        assert stats.auc_scores(pos, neg) == stats.auc_bruteforce(pos, neg)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-40, 40), min_size=1, max_size=30),
       st.lists(st.integers(-40, 40), min_size=1, max_size=30))
def test_monotone_invariance_and_label_swap(pos, neg):
    # grid values keep exp() strictly increasing in floating point
    pos, neg = np.array(pos) / 8.0, np.array(neg) / 8.0
    a = stats.auc_scores(pos, neg)
    assert stats.auc_scores(np.exp(pos), np.exp(neg)) == a
    assert stats.auc_scores(-neg, -pos) == a
    assert stats.auc_scores(neg, pos) == pytest.approx(1 - a, abs=1e-12)


# --- intervals -----------------------------------------------------------------

def test_delong_clips_at_one():
    s = stats.delong_ci(make(np.linspace(5, 6, 10), np.linspace(0, 1, 10)))
    assert s.auc == 1.0 and s.ci_high == 1.0
    assert s.warning == "zero variance" and s.ci_low == 1.0


def test_delong_needs_two_per_class():
    with pytest.raises(stats.DegenerateROC):
        stats.delong_ci(make([1.0], [0.0, 0.5]))


def test_delong_label_swap_symmetry():
    rng = np.random.default_rng(3)
    pos, neg = binormal(rng, 0.75, 40, 55)
    a = stats.delong_ci(make(pos, neg))
    b = stats.delong_ci(make(-neg, -pos))
    assert (a.ci_high - a.ci_low) == pytest.approx(b.ci_high - b.ci_low, rel=1e-12)


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_delong_matches_bootstrap_oracle(seed):
    rng = np.random.default_rng(seed)
    pos, neg = binormal(rng, 0.78, 100, 100)
    dl = stats.delong_ci(make(pos, neg))
    boots = oracle_bootstrap(pos, neg, 10_000, rng)
    lo, hi = np.quantile(boots, [0.025, 0.975])
    assert abs(dl.ci_low - lo) < 0.02 and abs(dl.ci_high - hi) < 0.02


def test_bootstrap_reproducible_and_consistent():
    rng = np.random.default_rng(21)
    pos, neg = binormal(rng, 0.75, 100, 100)
    s = make(pos, neg)
    a = stats.bootstrap_ci(s, 2000, seed=5)
    b = stats.bootstrap_ci(s, 2000, seed=5)
    assert a == b
    assert a.ci_low <= a.auc <= a.ci_high
    d = stats.delong_ci(s)
    assert a.ci_low < d.ci_high and d.ci_low < a.ci_high
    assert abs((a.ci_low + a.ci_high) / 2 - (d.ci_low + d.ci_high) / 2) < 0.02


def test_bootstrap_perfect_separation():
    s = stats.bootstrap_ci(make([2, 3, 4], [0, 1]), 300, seed=1)
    assert (s.ci_low, s.ci_high) == (1.0, 1.0)


# --- paired test ------------------------------------------------------------------

def test_identical_arms():
    rng = np.random.default_rng(4)
    s = make(*binormal(rng, 0.7, 30, 30))
    r = stats.paired_auc_test(s, s)
    assert r.delta == 0.0 and r.p_value == 1.0 and r.method == "delong_paired"


def test_unpaired_fallback_and_refusal():
    rng = np.random.default_rng(5)
    a = make(*binormal(rng, 0.8, 30, 30), prefix="a")
    b = make(*binormal(rng, 0.6, 30, 30), prefix="b")
    r = stats.paired_auc_test(a, b)
    assert r.method == "delong_unpaired" and r.n_shared == 0
    assert r.delta == pytest.approx(r.auc_a - r.auc_b)
    with pytest.raises(ValueError):
        stats.paired_auc_test(a, b, allow_unpaired=False)


def test_paired_type_one_error():
    rng = np.random.default_rng(6)
    y = np.r_[np.ones(60), np.zeros(60)].astype(int)
    rejections = 0
    for _ in range(500):
        x = rng.normal(size=120) + 0.8 * y
        a = x + 0.7 * rng.normal(size=120)
        b = x + 0.7 * rng.normal(size=120)
        sa = [ScoredSample(float(a[k]), int(y[k]), f"u{k}") for k in range(120)]
        sb = [ScoredSample(float(b[k]), int(y[k]), f"u{k}") for k in range(120)]
        rejections += stats.paired_auc_test(sa, sb).p_value < 0.05
    assert 0.03 <= rejections / 500 <= 0.08


def test_paired_detects_real_difference():
    rng = np.random.default_rng(7)
    y = np.r_[np.ones(80), np.zeros(80)].astype(int)
    x = rng.normal(size=160)
    good, poor = x + 1.5 * y, x + 0.2 * y + rng.normal(size=160)
    sa = [ScoredSample(float(good[k]), int(y[k]), f"u{k}") for k in range(160)]
    sb = [ScoredSample(float(poor[k]), int(y[k]), f"u{k}") for k in range(160)]
    r = stats.paired_auc_test(sa, sb)
    assert r.delta > 0 and r.p_value < 1e-3


# --- power -------------------------------------------------------------------------

def test_power_monotone_in_gap():
    ns = [stats.power_sample_size(a, 0.6) for a in (0.7, 0.75, 0.8, 0.9)]
    assert all(x > y for x, y in itertools.pairwise(ns))


def test_power_errors():
    with pytest.raises(ValueError, match="exceed"):
        stats.power_sample_size(0.6, 0.7)
    with pytest.raises(ValueError, match="exceeds"):
        stats.power_sample_size(0.801, 0.8, power=0.999999)
    with pytest.raises(ValueError):
        stats.power_sample_size(0.9, 0.6, alpha=1.2)


def test_power_validated_by_simulation():
    n = stats.power_sample_size(0.85, 0.53, 0.05, 0.9, 1.0)
    rng = np.random.default_rng(8)
    hits = 0
    for _ in range(1000):
        a = make(*binormal(rng, 0.85, n, n), prefix="a")
        b = make(*binormal(rng, 0.53, n, n), prefix="b")
        hits += stats.paired_auc_test(a, b).p_value < 0.05
    assert 0.85 <= hits / 1000 <= 0.95


# --- report --------------------------------------------------------------------------

def synthetic_trial(seed=9):
    rng = np.random.default_rng(seed)
    out = []
    for mod, shift in (("CT", 2.0), ("CXR", 0.5)):
        for i in range(40):
            kind = "homogeneous" if i % 3 == 0 else "heterogeneous"
            size = "ge8mm" if i % 2 else "lt8mm"
            out.append(ScoredSample(float(rng.normal(shift)), 1, f"L{i}", mod, "lesion", kind, size))
        for i in range(30):
            out.append(ScoredSample(float(rng.normal()), 0, f"F{i}", mod, "lesion"))
        for i in range(25):
            out.append(ScoredSample(float(rng.normal(shift)), 1, f"P{i}", mod, "patient"))
        for i in range(25, 45):
            out.append(ScoredSample(float(rng.normal()), 0, f"P{i}", mod, "patient"))
    return out


def test_report_rows_and_recomputation():
    samples = synthetic_trial()
    rows = stats.subgroup_report(samples, n_boot=200, seed=1)
    assert [r.name for r in rows] == ["lesion-level", "patient-level", "homogeneous",
                                      "heterogeneous", "lt8mm", "ge8mm"]
    for row, (_, level, filt) in zip(rows, stats.REPORT_ROWS):
        for mod in stats.MODALITIES:
            sub = [s for s in samples if s.modality == mod and s.level == level
                   and (filt is None or s.label == 0 or getattr(s, filt[0]) == filt[1])]
            assert row.summaries[mod].auc == stats.auc(sub)
        assert row.comparison.method == "delong_paired"


def test_partitions_cover_positives():
    samples = synthetic_trial()
    for mod in stats.MODALITIES:
        pos = [s for s in samples if s.modality == mod and s.level == "lesion" and s.label]
        for a, b in (("lt8mm", "ge8mm"), ("homogeneous", "heterogeneous")):
            key = "size_class" if a == "lt8mm" else "kind"
            na = sum(1 for s in stats.subgroup_samples(samples, mod, "lesion", (key, a)) if s.label)
            nb = sum(1 for s in stats.subgroup_samples(samples, mod, "lesion", (key, b)) if s.label)
            assert na + nb == len(pos)


def test_insufficient_cells_are_flagged():
    samples = [s for s in synthetic_trial() if not (s.kind == "homogeneous" and s.modality == "CXR")]
    rows = {r.name: r for r in stats.subgroup_report(samples, n_boot=50)}
    assert rows["homogeneous"].note == "insufficient data"
    text = stats.report_to_tsv(list(rows.values()))
    assert "insufficient data" in text and text.count("\n") == 7


def test_roc_points_and_sample_roundtrip():
    s = make([0.9, 0.8, 0.4], [0.7, 0.4, 0.1, 0.0])
    pts = stats.roc_points(s)
    assert tuple(pts[0]) == (0, 0) and tuple(pts[-1]) == (1, 1)
    assert np.all(np.diff(pts, axis=0) >= 0)
    # trapezoid area under the operating points is the Mann-Whitney AUC
    assert np.trapezoid(pts[:, 1], pts[:, 0]) == pytest.approx(stats.auc(s))
    back = stats.samples_from_tsv(stats.samples_to_tsv(s))
    assert back == s


def test_sample_validation():
    with pytest.raises(ValueError):
        ScoredSample(0.5, 2, "x")
    with pytest.raises(ValueError):
        ScoredSample(float("nan"), 1, "x")
