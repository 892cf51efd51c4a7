"""Calibration pool construction from held-out synthetic worlds."""

from __future__ import annotations

import math
from typing import Iterable, Mapping

from .certify import (
    DEFAULT_VARIANT,
    CalibrationPool,
    ConformalCalibrator,
    NodeFeatures,
    PoolExample,
    calibrate_all,
)
from .controller import Action, ConstantPolicy
from .dsl import NodeType
from .engine import CPMode, EngineConfig, execute
from .planner import plan_graph
from .seeding import derive_seed
from .world import DIFFICULTIES, Detection, NoiseConfig, WorldInstance, default_noise, generate_instance, tool_oracle

_SEED_MASK = (1 << 63) - 1


def calibration_worlds(n: int, seed: int, noise: NoiseConfig | None = None) -> list[WorldInstance]:
    """Worlds from a seed namespace disjoint from evaluation suites."""
    out = []
    for i in range(n):
        difficulty = DIFFICULTIES[i % len(DIFFICULTIES)]
        wseed = derive_seed("calibration-world", seed, i) & _SEED_MASK
        out.append(generate_instance(wseed, difficulty, noise=default_noise(difficulty, noise) if noise else None))
    return out


def tool_examples(worlds: Iterable[WorldInstance], seed: int) -> dict[NodeType, list[PoolExample]]:
    """One base-fidelity read of every field, object and chart bar in each world."""
    out: dict[NodeType, list[PoolExample]] = {NodeType.OCR: [], NodeType.DET: [], NodeType.CHART: []}
    for w in worlds:
        items = (
            [(NodeType.OCR, f.key, f.region, f.truth) for f in w.text_fields]
            + [(NodeType.DET, o.key, o.region, _det_truth(o)) for o in w.objects]
            + [(NodeType.CHART, s.key, s.region, s.truth_value) for s in w.chart_series]
        )
        for t, key, region, truth in items:
            cands = tool_oracle(t, w, region, f"read {key}", 1, derive_seed("calibration-read", seed, w.seed, key))
            out[t].append(PoolExample(NodeFeatures(t, tuple(cands)), truth))
    return out


def _det_truth(obj) -> Detection:
    return Detection(tuple(obj.truth_box), obj.label)


def placeholder_calibrator(node_type: NodeType, delta: float = 0.1) -> ConformalCalibrator:
    """Calibrator with tau = +inf, as produced by an undersized pool."""
    return ConformalCalibrator(node_type, delta, math.inf, 1, 0, DEFAULT_VARIANT[node_type])


def answer_examples(
    worlds: Iterable[WorldInstance],
    calibrators: Mapping[NodeType, ConformalCalibrator],
    seed: int,
    cp_mode: CPMode = CPMode.NODE,
) -> list[PoolExample]:
    """Answer-node inputs under accept-always execution, labelled with gold.

    ``cp_mode=NODE`` feeds calibrated parent sets; any other mode feeds
    singleton MAP parents, which is what the answer node sees when only the
    final answer is calibrated.
    """
    mode = CPMode.NODE if cp_mode is CPMode.NODE else CPMode.NONE
    config = EngineConfig(cp_mode=mode)
    # the answer set itself is irrelevant here; an all-inclusive placeholder suffices
    calibrators = {**calibrators, NodeType.LOGIC: placeholder_calibrator(NodeType.LOGIC)}
    policy = ConstantPolicy(Action.ACCEPT)
    out = []
    for w in worlds:
        graph = plan_graph(w)
        _, trace = execute(graph, w, calibrators, policy, 1e6, derive_seed("calibration-episode", seed, w.seed), config)
        last = trace.outcomes[-1]
        out.append(PoolExample(last.features, w.gold_answer))
    return out


def build_pools(
    n_worlds: int = 2000,
    seed: int = 0,
    noise: NoiseConfig | None = None,
    cp_mode: CPMode = CPMode.NODE,
    max_per_type: int | None = None,
) -> dict[NodeType, CalibrationPool]:
    """Tool pools from every scene item, then a logic pool from answer nodes."""
    worlds = calibration_worlds(n_worlds, seed, noise)
    pools = {}
    for t, examples in tool_examples(worlds, seed).items():
        examples = examples[:max_per_type] if max_per_type else examples
        pools[t] = CalibrationPool(t, tuple(examples), len(examples))
    tool_cals = calibrate_all(pools)
    logic = answer_examples(worlds, tool_cals, seed, cp_mode)
    pools[NodeType.LOGIC] = CalibrationPool(NodeType.LOGIC, tuple(logic), len(logic))
    return pools
