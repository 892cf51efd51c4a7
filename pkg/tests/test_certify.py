from __future__ import annotations

import functools
import math
import random

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from certgraph.certify import (
    DEFAULT_K_MAX,
    INF,
    TIE_EPS,
    CalibrationPool,
    ConformalCalibrator,
    NodeFeatures,
    PoolExample,
    Scorer,
    ScorerVariant,
    append_pool,
    calibrate,
    conformal_rank,
    conformal_set,
    conformal_threshold,
    default_scorer,
    ensure_fresh,
    extend_pool,
    head_features,
    hinge_grad,
    hinge_loss,
    iou,
    levenshtein,
    load_pool,
    ranked_score,
    save_pool,
    score,
    tie_break,
    train_scorer_margin,
    value_sort_key,
)
from certgraph.dsl import NodeType
from certgraph.errors import DegenerateBox, EmptyPool, StaleCalibrator, TypeMismatch, WrongVariant
from certgraph.world import Detection

OCR = NodeType.OCR
CHART = NodeType.CHART
DET = NodeType.DET


def chart_pool(scores) -> CalibrationPool:
    """Numeric pool whose residual scores are exactly ``scores`` (mu = 0)."""
    ex = tuple(PoolExample(NodeFeatures(CHART, ((0.0, 1.0),)), float(s)) for s in scores)
    return CalibrationPool(CHART, ex, len(ex))


def fixed_calibrator(node_type: NodeType, tau: float, variant: ScorerVariant | None = None) -> ConformalCalibrator:
    variant = variant or default_scorer(node_type).variant
    return ConformalCalibrator(node_type, 0.1, tau, 1, 1, variant)


def ocr_features(probs) -> NodeFeatures:
    return NodeFeatures(OCR, tuple((f"C{i}", p) for i, p in enumerate(probs)))


def brute_threshold(scores, delta):
    n = len(scores)
    k = math.ceil(round((n + 1) * (1 - delta), 9))
    return INF if k > n else sorted(scores)[k - 1]


def brute_levenshtein(a: str, b: str) -> int:
    @functools.lru_cache(None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def reference_set(probs, tau, k_max):
    """Filter-then-sort-then-truncate over prob-complement scores computed from scratch."""
    total = sum(probs)
    feats = ocr_features(probs)
    items = [(f"C{i}", 1.0 - p / total + TIE_EPS * tie_break(feats, f"C{i}")) for i, p in enumerate(probs)]
    kept = sorted((it for it in items if it[1] <= tau), key=lambda it: (it[1], it[0]))
    return [z for z, _ in kept[:k_max]], len(kept) > k_max


class TestTieBreak:
    def test_range_and_determinism(self):
        f = ocr_features([3, 2, 1])
        draws = [tie_break(f, f"C{i}") for i in range(3)]
        assert all(0.0 <= u < 1.0 for u in draws)
        assert draws == [tie_break(ocr_features([3, 2, 1]), f"C{i}") for i in range(3)]
        assert len(set(draws)) == 3

    def test_numeric_kinds_agree(self):
        f = NodeFeatures(CHART, ((3.0, 1.0),))
        assert tie_break(f, 3) == tie_break(f, 3.0)

    def test_ranked_score_offset(self):
        f = ocr_features([3, 1])
        s = ranked_score(default_scorer(OCR), f, "C1")
        assert 0 <= s - score(default_scorer(OCR), f, "C1") < TIE_EPS

    def test_ties_do_not_inflate_coverage(self):
        # integer residuals tie in large blocks; ranked scores keep coverage at 1 - delta
        rng = np.random.default_rng(0)
        exs = []
        for i in range(6000):
            mu = float(i)
            exs.append((NodeFeatures(CHART, ((mu, 1.0),)), mu + float(rng.integers(-3, 4))))
        pool = CalibrationPool(CHART, tuple(PoolExample(f, z) for f, z in exs[:2000]))
        cal = calibrate(pool, 0.2)
        cov = np.mean([conformal_set(f, cal.scorer, cal).contains(z) for f, z in exs[2000:]])
        assert abs(cov - 0.8) < 0.02


class TestScore:
    def test_prob_complement_certain(self):
        f = NodeFeatures(OCR, (("ABC", 0.7),))
        assert score(default_scorer(OCR), f, "ABC") == 0.0

    def test_prob_complement_normalizes(self):
        f = ocr_features([0.3, 0.1])
        assert score(default_scorer(OCR), f, "C0") == pytest.approx(0.25)
        assert score(default_scorer(OCR), f, "ZZZ") == 1.0

    def test_box_iou_map(self):
        box = Detection((0.0, 0.0, 10.0, 10.0), "car")
        f = NodeFeatures(DET, ((box, 0.6), (Detection((5.0, 5.0, 15.0, 15.0), "car"), 0.4)))
        assert score(default_scorer(DET), f, box) == 0.0

    def test_box_label_penalty(self):
        f = NodeFeatures(DET, ((Detection((0.0, 0.0, 10.0, 10.0), "car"), 1.0),))
        assert score(default_scorer(DET), f, Detection((0.0, 0.0, 10.0, 10.0), "dog")) == 1.0

    def test_numeric_residual(self):
        f = NodeFeatures(CHART, ((10.0, 0.6), (11.0, 0.4)))
        assert score(default_scorer(CHART), f, 12.5) == 2.5

    def test_edit_distance(self):
        f = NodeFeatures(OCR, (("KITTEN", 1.0),))
        assert score(Scorer(OCR, ScorerVariant.EDIT_DISTANCE), f, "SITTING") == 3.0

    def test_type_mismatch(self):
        with pytest.raises(TypeMismatch):
            score(default_scorer(OCR), ocr_features([1.0]), 3.0)
        with pytest.raises(TypeMismatch):
            score(default_scorer(CHART), ocr_features([1.0]), "C0")

    def test_variant_compatibility(self):
        with pytest.raises(WrongVariant):
            Scorer(OCR, ScorerVariant.BOX_IOU)

    @given(st.lists(st.floats(0.001, 1.0), min_size=1, max_size=16), st.integers(0, 20))
    def test_prob_complement_range(self, probs, idx):
        f = ocr_features(probs)
        s = score(default_scorer(OCR), f, f"C{idx}")
        assert 0.0 <= s <= 1.0

    @given(st.lists(st.floats(0.001, 1.0), min_size=1, max_size=16), st.integers(0, 15))
    def test_learned_head_nonnegative(self, probs, idx):
        f = ocr_features(probs)
        assert score(Scorer(OCR, ScorerVariant.LEARNED_HEAD), f, f"C{idx}") >= 0.0


class TestGeometry:
    def test_identical(self):
        assert iou((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_touching(self):
        assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0

    def test_hand_computed(self):
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_degenerate(self):
        with pytest.raises(DegenerateBox):
            iou((0, 0, 0, 1), (0, 0, 1, 1))

    @given(
        st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10)),
        st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(1, 10), st.integers(1, 10)),
    )
    def test_iou_against_pixel_count(self, a, b):
        ba = (a[0], a[1], a[0] + a[2], a[1] + a[3])
        bb = (b[0], b[1], b[0] + b[2], b[1] + b[3])
        cells_a = {(x, y) for x in range(ba[0], ba[2]) for y in range(ba[1], ba[3])}
        cells_b = {(x, y) for x in range(bb[0], bb[2]) for y in range(bb[1], bb[3])}
        expected = len(cells_a & cells_b) / len(cells_a | cells_b)
        assert iou(ba, bb) == pytest.approx(expected)
        assert iou(ba, bb) == pytest.approx(iou(bb, ba))

    @given(st.text("ABC", max_size=7), st.text("ABC", max_size=7))
    def test_levenshtein_brute_force(self, a, b):
        assert levenshtein(a, b) == brute_levenshtein(a, b)


class TestCalibrate:
    def test_ten_scores(self):
        cal = calibrate(chart_pool([0.1 * i for i in range(1, 11)]), 0.1)
        assert cal.k == 10
        assert cal.threshold == pytest.approx(1.0)

    def test_single_example(self):
        cal = calibrate(chart_pool([0.42]), 0.5)
        assert cal.k == 1 and cal.threshold == pytest.approx(0.42)

    def test_small_pool_overflow(self):
        cal = calibrate(chart_pool([0.1, 0.2, 0.3, 0.4, 0.5]), 0.05)
        assert cal.k == 6
        assert cal.threshold == INF

    def test_empty(self):
        with pytest.raises(EmptyPool):
            calibrate(CalibrationPool(CHART), 0.1)

    def test_bad_delta(self):
        with pytest.raises(ValueError):
            conformal_rank(10, 1.0)

    @pytest.mark.parametrize("n,delta,k", [(10, 0.1, 10), (9, 0.1, 9), (99, 0.1, 90), (2000, 0.05, 1901), (2000, 0.2, 1601)])
    def test_rank_exact_products(self, n, delta, k):
        # (n+1)(1-delta) landing on an integer must not round up
        assert conformal_rank(n, delta) == k

    @given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=200), st.sampled_from([0.05, 0.1, 0.2, 0.5]))
    def test_threshold_brute_force(self, scores, delta):
        assert conformal_threshold(scores, delta)[0] == brute_threshold(scores, delta)

    @given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=100), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    def test_threshold_monotone_in_delta(self, scores, d1, d2):
        lo, hi = sorted((d1, d2))
        assert conformal_threshold(scores, lo)[0] >= conformal_threshold(scores, hi)[0]

    @given(st.lists(st.floats(0, 10, allow_nan=False), min_size=9, max_size=60), st.floats(0, 20))
    def test_append_high_score_never_lowers_tau(self, scores, extra):
        # below n = 9 the pool sits in the +inf overflow regime, where growth can only lower tau
        pool = chart_pool(scores)
        before = calibrate(pool, 0.1).threshold
        assume(math.isfinite(before))
        extra = max(extra, max(scores) + 1e-6)
        after = calibrate(append_pool(pool, (NodeFeatures(CHART, ((0.0, 1.0),)), extra)), 0.1).threshold
        assert after >= before

    def test_append_and_recalibrate(self):
        pool = chart_pool([0.1 * i for i in range(1, 11)])
        cal = calibrate(pool, 0.1)
        grown = append_pool(pool, (NodeFeatures(CHART, ((0.0, 1.0),)), 5.0), "selfplay")
        assert len(grown) == 11 and grown.count("selfplay") == 1
        with pytest.raises(StaleCalibrator):
            ensure_fresh(cal, grown)
        assert calibrate(grown, 0.1).k == 11
        ensure_fresh(calibrate(grown, 0.1), grown)

    def test_append_type_mismatch(self):
        with pytest.raises(TypeMismatch):
            append_pool(chart_pool([1.0]), (ocr_features([1.0]), "C0"))

    def test_extend_pool(self):
        pool = extend_pool(chart_pool([1.0]), [(NodeFeatures(CHART, ((0.0, 1.0),)), 2.0)] * 3)
        assert len(pool) == 4 and pool.version == 4

    def test_rank_of(self):
        cal = calibrate(chart_pool([1, 2, 3, 4]), 0.5)
        assert cal.rank_of(0.5) == 0.0
        assert cal.rank_of(3.0) == 0.5
        assert cal.rank_of(9.0) == 1.0

    def test_json_round_trip(self):
        cal = calibrate(chart_pool([0.5, 1.5, 2.5]), 0.05)
        back = ConformalCalibrator.from_json(cal.to_json())
        assert back == cal
        assert back.sorted_scores == cal.sorted_scores

    def test_pool_file_round_trip(self, tmp_path):
        pool = append_pool(chart_pool([1.0, 2.0]), (NodeFeatures(CHART, ((3.0, 0.5), (4.0, 0.5))), 3.5), "selfplay")
        save_pool(pool, tmp_path / "p.jsonl")
        back = load_pool(tmp_path / "p.jsonl")
        assert back.examples == pool.examples


class TestConformalSet:
    def test_infinite_tau_keeps_all(self):
        f = ocr_features([0.4, 0.3, 0.2, 0.1])
        cs = conformal_set(f, default_scorer(OCR), fixed_calibrator(OCR, INF), 5)
        assert sorted(cs.values) == ["C0", "C1", "C2", "C3"]
        assert not cs.truncated

    def test_threshold_filter(self):
        # residuals 0.1, 0.25, 0.31 around the MAP reading 10.0
        f = NodeFeatures(CHART, ((10.0, 0.4), (10.1, 0.3), (10.25, 0.2), (10.31, 0.1)))
        cs = conformal_set(f, default_scorer(CHART), fixed_calibrator(CHART, 0.3))
        assert cs.values == [10.0, 10.1, 10.25]

    def test_scores_ascending_and_truncation_flag(self):
        f = ocr_features([0.3, 0.25, 0.2, 0.15, 0.05, 0.05])
        cs = conformal_set(f, default_scorer(OCR), fixed_calibrator(OCR, INF), 3)
        assert [m[1] for m in cs.members] == sorted(m[1] for m in cs.members)
        assert len(cs.members) == 3 and cs.truncated

    def test_empty_set_is_legal(self):
        cs = conformal_set(ocr_features([0.5, 0.5]), default_scorer(OCR), fixed_calibrator(OCR, 0.1), 5)
        assert cs.is_empty and cs.set_size == 0
        assert not cs.contains("C0")

    def test_numeric_interval(self):
        f = NodeFeatures(CHART, ((10.0, 0.6), (11.0, 0.3), (14.0, 0.1)))
        cs = conformal_set(f, default_scorer(CHART), fixed_calibrator(CHART, 1.5))
        assert cs.interval == (8.5, 11.5)
        assert cs.contains(11.4) and not cs.contains(11.6)
        assert cs.values == [10.0, 11.0]

    def test_box_contains_by_score(self):
        anchor = Detection((0.0, 0.0, 10.0, 10.0), "car")
        f = NodeFeatures(DET, ((anchor, 1.0),))
        cs = conformal_set(f, default_scorer(DET), fixed_calibrator(DET, 0.5), DEFAULT_K_MAX[DET])
        assert cs.contains(Detection((0.0, 0.0, 10.0, 9.0), "car"))
        assert not cs.contains(Detection((0.0, 0.0, 10.0, 10.0), "dog"))

    def test_calibrator_type_mismatch(self):
        with pytest.raises(TypeMismatch):
            conformal_set(ocr_features([1.0]), default_scorer(OCR), fixed_calibrator(CHART, 1.0))

    def test_variant_mismatch(self):
        with pytest.raises(WrongVariant):
            conformal_set(ocr_features([1.0]), Scorer(OCR, ScorerVariant.EDIT_DISTANCE), fixed_calibrator(OCR, 1.0))

    @given(
        st.lists(st.integers(1, 20), min_size=1, max_size=16),
        st.one_of(st.floats(0.0, 1.0), st.just(INF)),
        st.integers(1, 8),
    )
    def test_matches_reference(self, weights, tau, k_max):
        cs = conformal_set(ocr_features(weights), default_scorer(OCR), fixed_calibrator(OCR, tau), k_max)
        values, truncated = reference_set(weights, tau, k_max)
        assert cs.values == values
        assert cs.truncated == truncated

    @given(st.lists(st.integers(1, 20), min_size=1, max_size=16), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_set_monotone_in_tau(self, weights, t1, t2):
        lo, hi = sorted((t1, t2))
        f = ocr_features(weights)
        small = conformal_set(f, default_scorer(OCR), fixed_calibrator(OCR, lo))
        big = conformal_set(f, default_scorer(OCR), fixed_calibrator(OCR, hi))
        assert set(small.values) <= set(big.values)

    def test_ties_broken_by_value(self):
        f = NodeFeatures(OCR, (("B", 0.5), ("A", 0.5)))
        cs = conformal_set(f, default_scorer(OCR), fixed_calibrator(OCR, INF), 5)
        assert cs.values == sorted(["A", "B"], key=value_sort_key)


class TestMarginTraining:
    def random_X(self, rng, n=40):
        return np.column_stack([rng.random(n), rng.random(n), rng.random(n) * 0.5, rng.random(n) * 2, np.ones(n)])

    def test_hinge_gradient_finite_differences(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            X = self.random_X(rng)
            psi = rng.normal(0, 1.5, 5)
            tau = float(np.median(np.logaddexp(0, X @ psi)))
            eps = 0.01
            g = hinge_grad(psi, X, tau, eps)
            h = 1e-6
            fd = np.array([
                (hinge_loss(psi + h * e, X, tau, eps) - hinge_loss(psi - h * e, X, tau, eps)) / (2 * h)
                for e in np.eye(5)
            ])
            worst = max(worst, float(np.max(np.abs(g - fd))))
        assert worst < 1e-5

    def _pool(self, n=60, seed=0):
        rng = random.Random(seed)
        ex = []
        for _ in range(n):
            probs = sorted((rng.random() + 0.01 for _ in range(rng.randint(1, 6))), reverse=True)
            f = ocr_features(probs)
            truth = f"C{rng.choice(range(len(probs)))}" if rng.random() < 0.8 else "MISSING"
            ex.append(PoolExample(f, truth))
        return CalibrationPool(OCR, tuple(ex), n)

    def test_losses_non_increasing(self):
        fit = train_scorer_margin(self._pool(), 0.1, 0.01, lr=1.0, epochs=30)
        diffs = np.diff(fit.losses)
        assert np.all(diffs <= 1e-9)

    def test_single_example_zero_loss(self):
        pool = CalibrationPool(OCR, (PoolExample(ocr_features([0.6, 0.4]), "C1"),), 1)
        fit = train_scorer_margin(pool, 0.5, 0.01, epochs=5)
        assert fit.losses[0] == 0.0
        assert fit.psi == tuple(Scorer(OCR, ScorerVariant.LEARNED_HEAD).psi)

    def test_zero_gradient_leaves_psi(self):
        # every true score sits below tau + eps when eps is large
        fit = train_scorer_margin(self._pool(), 0.1, eps=100.0, epochs=5)
        assert fit.losses == (0.0,) * 6
        assert fit.psi == tuple(Scorer(OCR, ScorerVariant.LEARNED_HEAD).psi)

    def test_wrong_variant(self):
        with pytest.raises(WrongVariant):
            train_scorer_margin(self._pool(), scorer=default_scorer(OCR))

    def test_empty_pool(self):
        with pytest.raises(EmptyPool):
            train_scorer_margin(CalibrationPool(OCR))

    def test_head_features_layout(self):
        f = ocr_features([3.0, 1.0])
        x = head_features(f, "C1")
        assert x[0] == pytest.approx(0.25)
        assert x[2] == pytest.approx(0.5)
        assert x[-1] == 1.0


class TestCoverage:
    def test_marginal_coverage_small(self):
        """Quick exchangeable check on a synthetic numeric distribution."""
        rng = np.random.default_rng(3)
        delta, n = 0.1, 500
        covs = []
        for _ in range(30):
            scores = np.abs(rng.standard_t(3, n + 2000))
            tau = conformal_threshold(scores[:n], delta)[0]
            covs.append(np.mean(scores[n:] <= tau))
        assert 1 - delta - 0.01 <= np.mean(covs) <= 1 - delta + 1 / (n + 1) + 0.01
