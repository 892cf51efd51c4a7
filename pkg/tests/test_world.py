from __future__ import annotations

import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from certgraph.certify import iou
from certgraph.dsl import NodeType, Region, fuse_node, tool_node
from certgraph.errors import RegionOutOfBounds, UnknownKind, Unresolvable
from certgraph.world import (
    DIFFICULTIES,
    MAX_CANDIDATES,
    Detection,
    ManifestEntry,
    NoiseConfig,
    PerturbationKind,
    WorldInstance,
    beam_top_k,
    generate_instance,
    ground_truth,
    load_manifest,
    materialize,
    perturb,
    tool_oracle,
    write_manifest,
)

ZERO = NoiseConfig.zero()


def field_hits(p: float, n: int) -> tuple[int, int]:
    """Truth-in-candidates count over ``n`` OCR calls at confusion prob ``p``."""
    noise = replace(ZERO, char_confusion_prob=p)
    hits = total = 0
    for seed in itertools.count():
        w = generate_instance(seed, "hard", noise=noise)
        for f in w.text_fields:
            cands = tool_oracle(NodeType.OCR, w, f.region, "read", 1, seed)
            hits += any(z == f.truth for z, _ in cands)
            total += 1
            if total == n:
                return hits, total
    raise AssertionError


def simulated_truth_rate(lengths: list[int], p: float, rng: np.random.Generator) -> float:
    """Brute-force replay of the documented per-character confusion process.

    Each character is corrupted with probability ``p``; a corrupted
    character keeps the truth as runner-up with probability 0.9 at top
    confidence U(0.5, 0.8); a clean one is read at confidence 1 - 2p*U(0,1).
    The truth survives if it is reachable and ranks within the top 16 of
    all 2^L per-position choices.
    """
    hits = 0
    for L in lengths:
        corrupt = rng.random(L) < p
        reachable = rng.random(L) < 0.9
        u_bad = rng.random(L)
        u_good = rng.random(L)
        if np.any(corrupt & ~reachable):
            continue
        conf = np.where(corrupt, 0.5 + 0.3 * u_bad, 1.0 - 2.0 * p * u_good)
        logp = np.stack([np.log(conf), np.log1p(-conf)], axis=1)
        choices = np.array(list(itertools.product((0, 1), repeat=L)))
        scores = logp[np.arange(L), choices].sum(axis=1)
        truth_choice = corrupt.astype(int)
        truth_score = logp[np.arange(L), truth_choice].sum()
        hits += int(np.sum(scores > truth_score) < MAX_CANDIDATES)
    return hits / len(lengths)


class TestGenerate:
    def test_deterministic(self):
        assert generate_instance(7, "easy") == generate_instance(7, "easy")

    def test_seed_matters(self):
        assert generate_instance(7, "easy") != generate_instance(8, "easy")

    @pytest.mark.parametrize("difficulty,lo,hi", [("easy", 3, 5), ("medium", 6, 10), ("hard", 11, 20)])
    def test_field_counts(self, difficulty, lo, hi):
        counts = {len(generate_instance(s, difficulty).text_fields) for s in range(200)}
        assert min(counts) >= lo and max(counts) <= hi
        assert len(counts) > 1

    def test_distractors_grow_with_difficulty(self):
        d = [generate_instance(1, diff).noise.distractor_count for diff in DIFFICULTIES]
        assert d == sorted(d) and d[0] < d[-1]

    def test_sum_gold(self):
        for seed in range(50):
            w = generate_instance(seed, "medium", kind="sum")
            a, b = w.query.targets
            assert w.gold_answer == pytest.approx(w.series_by_key(a).truth_value + w.series_by_key(b).truth_value)

    @pytest.mark.parametrize("kind", ["lookup", "compare", "count"])
    def test_gold_consistency(self, kind):
        for seed in range(30):
            w = generate_instance(seed, "hard", kind=kind)
            q = w.query
            if kind == "lookup":
                assert w.gold_answer == w.field_by_key(q.targets[0]).truth
            elif kind == "compare":
                va, vb = (w.series_by_key(k).truth_value for k in q.targets)
                assert w.gold_answer == (q.targets[0] if va >= vb else q.targets[1])
            else:
                assert w.gold_answer == sum(w.object_by_key(k).label == q.label for k in q.targets)

    def test_unknown_difficulty(self):
        with pytest.raises(UnknownKind):
            generate_instance(1, "brutal")

    def test_json_round_trip(self):
        for seed in range(20):
            w = generate_instance(seed, DIFFICULTIES[seed % 3])
            assert WorldInstance.from_dict(w.to_dict()) == w

    def test_noise_validation(self):
        with pytest.raises(ValueError):
            NoiseConfig(char_confusion_prob=1.5)
        with pytest.raises(ValueError):
            NoiseConfig(fidelity_gain=0.0)


class TestToolOracle:
    def test_zero_noise_ocr(self):
        w = generate_instance(3, "medium", noise=ZERO)
        for f in w.text_fields:
            cands = tool_oracle(NodeType.OCR, w, f.region, "read", 1, 0)
            assert cands[0][0] == f.truth
            assert cands[0][1] == max(p for _, p in cands)

    def test_zero_noise_det(self):
        w = generate_instance(3, "medium", noise=ZERO)
        for o in w.objects:
            top = tool_oracle(NodeType.DET, w, o.region, "detect", 1, 0)[0][0]
            assert top.box == tuple(o.truth_box)
            assert iou(top.box, o.truth_box) == 1.0
            assert top.label == o.label

    def test_zero_noise_chart(self):
        w = generate_instance(3, "medium", noise=ZERO)
        for s in w.chart_series:
            assert tool_oracle(NodeType.CHART, w, s.region, "value", 1, 0)[0][0] == s.truth_value

    def test_candidate_contract(self):
        for seed in range(40):
            w = generate_instance(seed, "hard")
            for t, items in ((NodeType.OCR, w.text_fields), (NodeType.DET, w.objects), (NodeType.CHART, w.chart_series)):
                for item in items:
                    for fid in (1, 2, 3):
                        cands = tool_oracle(t, w, item.region, "p", fid, seed)
                        assert len(cands) <= MAX_CANDIDATES
                        assert sum(p for _, p in cands) <= 1.0 + 1e-9
                        assert all(p > 0 for _, p in cands)
                        probs = [p for _, p in cands]
                        assert probs == sorted(probs, reverse=True)

    def test_deterministic(self):
        w = generate_instance(5, "hard")
        f = w.text_fields[0]
        assert tool_oracle(NodeType.OCR, w, f.region, "r", 1, 9) == tool_oracle(NodeType.OCR, w, f.region, "r", 1, 9)

    def test_empty_region(self):
        w = generate_instance(5, "easy")
        # a sliver on a grid line between cells holds no content
        assert tool_oracle(NodeType.OCR, w, Region(0, (0.0, 0.0, 2.0, 2.0)), "r", 1, 0) == []

    def test_out_of_bounds(self):
        w = generate_instance(5, "easy")
        with pytest.raises(RegionOutOfBounds):
            tool_oracle(NodeType.OCR, w, Region(0, (990.0, 0.0, 1010.0, 10.0)), "r", 1, 0)
        with pytest.raises(RegionOutOfBounds):
            tool_oracle(NodeType.OCR, w, Region(w.n_images, (0.0, 0.0, 10.0, 10.0)), "r", 1, 0)

    def test_ocr_truth_rate_matches_simulation(self):
        hits, n = field_hits(0.1, 10_000)
        lengths = []
        for seed in itertools.count():
            lengths.extend(len(f.truth) for f in generate_instance(seed, "hard", noise=ZERO).text_fields)
            if len(lengths) >= 10_000:
                break
        sim = simulated_truth_rate(lengths[:10_000] * 4, 0.1, np.random.default_rng(11))
        assert abs(hits / n - sim) < 0.01

    def test_truth_rate_increases_with_fidelity(self):
        noise = replace(NoiseConfig(), char_confusion_prob=0.2, miss_prob=0.0)
        rates = []
        for fid in (1, 2, 3):
            hits = total = 0
            for seed in range(300):
                w = generate_instance(seed, "hard", noise=noise)
                for f in w.text_fields[:3]:
                    cands = tool_oracle(NodeType.OCR, w, f.region, "r", fid, seed)
                    hits += any(z == f.truth for z, _ in cands)
                    total += 1
            rates.append(hits / total)
        assert rates[0] < rates[1] <= rates[2]

    def test_noise_monotone_in_confusion(self):
        n = 5000
        lo, _ = field_hits(0.05, n)
        hi, _ = field_hits(0.2, n)
        p_lo, p_hi = lo / n, hi / n
        sigma = math.sqrt((p_lo * (1 - p_lo) + p_hi * (1 - p_hi)) / n)
        assert p_hi <= p_lo + 3 * sigma

    def test_noise_monotone_in_jitter(self):
        def rate(sigma: float) -> float:
            noise = replace(ZERO, box_jitter_sigma=sigma)
            good = 0
            for seed in range(5000):
                w = generate_instance(seed, "easy", noise=noise)
                o = w.objects[0]
                top = tool_oracle(NodeType.DET, w, o.region, "d", 1, seed)[0][0]
                good += iou(top.box, o.truth_box) >= 0.8
            return good / 5000

        a, b = rate(2.0), rate(8.0)
        assert b <= a + 3 * math.sqrt(2 * 0.25 / 5000)


class TestPerturb:
    @pytest.fixture
    def world(self):
        return generate_instance(11, "medium")

    @pytest.mark.parametrize("kind", list(PerturbationKind))
    def test_magnitude_zero_identity(self, world, kind):
        assert perturb(world, kind, 0.0, 3) == world

    @pytest.mark.parametrize(
        "kind,mag", [("char-confusion-shift", 0.2), ("clutter", 0.5), ("affine-offset", 8.0), ("panel-shuffle", 0.3)]
    )
    def test_gold_unchanged(self, world, kind, mag):
        assert perturb(world, kind, mag, 3).gold_answer == world.gold_answer

    def test_panel_shuffle_inverse(self, world):
        shuffled = perturb(world, "panel-shuffle", 0.3, 42)
        assert [f.region for f in shuffled.text_fields] != [f.region for f in world.text_fields]
        back = perturb(shuffled, "panel-shuffle", 0.3, 42, invert=True)
        assert back == world

    def test_panel_shuffle_keeps_gold_recoverable(self, world):
        shuffled = perturb(world, "panel-shuffle", 0.3, 42)
        assert sorted(f.truth for f in shuffled.text_fields) == sorted(f.truth for f in world.text_fields)

    def test_clutter_count(self, world):
        out = perturb(world, "clutter", 0.1, 0)
        assert out.noise.distractor_count == world.noise.distractor_count + math.ceil(0.1 * len(world.text_fields))
        assert out.text_fields == world.text_fields and out.objects == world.objects

    def test_affine_keeps_boxes_in_scene(self, world):
        out = perturb(world, "affine-offset", 15.0, 0)
        for f in out.text_fields:
            x0, y0, x1, y1 = f.region.bbox
            assert 0 <= x0 < x1 <= 1000

    def test_unknown_kind(self, world):
        with pytest.raises(UnknownKind):
            perturb(world, "blur", 0.1, 0)

    def test_magnitude_range(self, world):
        with pytest.raises(ValueError):
            perturb(world, "clutter", 2.0, 0)

    @given(st.integers(0, 10**6), st.floats(0.0, 0.5))
    @settings(max_examples=40, deadline=None)
    def test_perturb_deterministic(self, seed, mag):
        w = generate_instance(seed % 97, "easy")
        assert perturb(w, "panel-shuffle", mag, seed) == perturb(w, "panel-shuffle", mag, seed)


class TestGroundTruth:
    @pytest.fixture
    def world(self):
        return generate_instance(21, "medium")

    def test_ocr(self, world):
        f = world.text_fields[1]
        assert ground_truth(world, tool_node(1, f.region, "read")) == f.truth

    def test_chart(self, world):
        s = world.series_by_key("A")
        assert ground_truth(world, tool_node(3, s.region, "value")) == s.truth_value

    def test_det(self, world):
        o = world.objects[0]
        assert ground_truth(world, tool_node(2, o.region, "d")) == Detection(tuple(o.truth_box), o.label)

    def test_answer(self, world):
        assert ground_truth(world, fuse_node(("v1",), "answer")) == world.gold_answer

    def test_unresolvable(self, world):
        with pytest.raises(Unresolvable):
            ground_truth(world, tool_node(1, Region(0, (0.0, 0.0, 2.0, 2.0)), "read"))


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [ManifestEntry(1, "easy"), ManifestEntry(2, "hard", ("clutter", 0.5))]
        write_manifest(tmp_path / "m.json", entries)
        loaded = load_manifest(tmp_path / "m.json")
        assert loaded == entries
        assert materialize(loaded[1]).noise.distractor_count > generate_instance(2, "hard").noise.distractor_count


def test_beam_top_k_exact():
    positions = [("A", "B", 0.7), ("C", "D", 0.6), ("E", "F", 0.9)]
    brute = []
    for picks in itertools.product((0, 1), repeat=3):
        s = "".join(p[k] for p, k in zip(positions, picks))
        prob = math.prod(p[2] if k == 0 else 1 - p[2] for p, k in zip(positions, picks))
        brute.append((s, prob))
    brute.sort(key=lambda t: -t[1])
    got = beam_top_k(positions, 4)
    assert [s for s, _ in got] == [s for s, _ in brute[:4]]
    assert [p for _, p in got] == pytest.approx([p for _, p in brute[:4]])
