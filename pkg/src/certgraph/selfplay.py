"""Adversary-vs-student counterexample mining feeding the calibration pools."""

from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .certify import (
    DEFAULT_DELTA,
    CalibrationPool,
    ConformalCalibrator,
    NodeFeatures,
    PoolExample,
    Scorer,
    calibrate_all,
    extend_pool,
    ranked_score,
)
from .controller import Action, ConstantPolicy, LearnedPolicy, PolicyParams, answers_match
from .dsl import NodeType
from .engine import CPMode, EngineConfig, execute
from .errors import CertGraphError, FrozenBundle, TypeMismatch
from .planner import plan_graph
from .seeding import derive_seed
from .world import PerturbationKind, Value, WorldInstance, ground_truth, perturb, value_from_json, value_to_json

MINING_CAP = 500
REFRESH_EVERY = 2

Perturbation = tuple[PerturbationKind, float]

# 4 kinds x 3 magnitudes
DEFAULT_GRID: tuple[Perturbation, ...] = (
    (PerturbationKind.CHAR_CONFUSION_SHIFT, 0.1),
    (PerturbationKind.CHAR_CONFUSION_SHIFT, 0.2),
    (PerturbationKind.CHAR_CONFUSION_SHIFT, 0.3),
    (PerturbationKind.CLUTTER, 0.25),
    (PerturbationKind.CLUTTER, 0.5),
    (PerturbationKind.CLUTTER, 1.0),
    (PerturbationKind.AFFINE_OFFSET, 3.0),
    (PerturbationKind.AFFINE_OFFSET, 6.0),
    (PerturbationKind.AFFINE_OFFSET, 10.0),
    (PerturbationKind.PANEL_SHUFFLE, 0.1),
    (PerturbationKind.PANEL_SHUFFLE, 0.2),
    (PerturbationKind.PANEL_SHUFFLE, 0.3),
)


# ---------------------------------------------------------------------------
# Agent bundles
# ---------------------------------------------------------------------------


class AgentBundle:
    """Scorer parameters, policy weights and calibrators of one agent.

    A frozen bundle refuses attribute assignment and holds read-only views,
    so an adversary cannot drift while the student keeps learning.
    """

    __slots__ = ("psi", "policy", "calibrators", "frozen")

    def __init__(
        self,
        calibrators: Mapping[NodeType, ConformalCalibrator],
        policy: PolicyParams | None = None,
        psi: Mapping[NodeType, tuple[float, ...] | None] | None = None,
        frozen: bool = False,
    ) -> None:
        cals = dict(calibrators)
        psi = dict(psi) if psi is not None else {t: c.psi for t, c in cals.items()}
        if frozen:
            cals = MappingProxyType(cals)
            psi = MappingProxyType(psi)
            if policy is not None:
                policy = policy.copy()
                policy.weights.setflags(write=False)
        object.__setattr__(self, "calibrators", cals)
        object.__setattr__(self, "policy", policy)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "frozen", frozen)

    def __setattr__(self, name, value) -> None:
        if self.frozen:
            raise FrozenBundle(f"cannot set {name!r} on a frozen bundle")
        object.__setattr__(self, name, value)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AgentBundle):
            return NotImplemented
        return self.to_json() == other.to_json()

    def __repr__(self) -> str:
        types = ",".join(sorted(t.value for t in self.calibrators))
        return f"AgentBundle(types={types}, policy={self.policy is not None}, frozen={self.frozen})"

    def scorers(self) -> dict[NodeType, Scorer]:
        return {t: Scorer(t, c.variant, self.psi.get(t, c.psi)) for t, c in self.calibrators.items()}

    def make_policy(self):
        if self.policy is None:
            return ConstantPolicy(Action.ACCEPT, "accept-always")
        return LearnedPolicy(self.policy, greedy=True)

    def with_calibrators(self, calibrators: Mapping[NodeType, ConformalCalibrator]) -> "AgentBundle":
        if self.frozen:
            raise FrozenBundle("frozen bundles are not updated; refresh a new adversary instead")
        return AgentBundle(calibrators, self.policy, {t: c.psi for t, c in calibrators.items()})

    def to_json(self) -> dict:
        return {
            "frozen": self.frozen,
            "psi": {t.value: list(p) if p is not None else None for t, p in sorted(self.psi.items())},
            "policy": self.policy.to_json() if self.policy is not None else None,
            "calibrators": {t.value: c.to_json() for t, c in sorted(self.calibrators.items())},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "AgentBundle":
        cals = {NodeType(t): ConformalCalibrator.from_json(c) for t, c in d["calibrators"].items()}
        psi = {NodeType(t): tuple(p) if p is not None else None for t, p in d["psi"].items()}
        policy = PolicyParams.from_json(d["policy"]) if d.get("policy") is not None else None
        return cls(cals, policy, psi, bool(d["frozen"]))


def refresh_adversary(student: AgentBundle) -> AgentBundle:
    """Deep, frozen clone of the student."""
    return AgentBundle(
        copy.deepcopy(dict(student.calibrators)),
        student.policy.copy() if student.policy is not None else None,
        copy.deepcopy(dict(student.psi)),
        frozen=True,
    )


# ---------------------------------------------------------------------------
# Counterexamples
# ---------------------------------------------------------------------------


class FailureKind(str, enum.Enum):
    WRONG_ANSWER = "wrong-answer"
    HIGH_NONCONFORMITY = "high-nonconformity"


@dataclass(frozen=True)
class NodeRecord:
    node_id: str
    node_type: NodeType
    features: NodeFeatures
    truth: Value
    score: float
    tau: float

    @property
    def nonconforming(self) -> bool:
        return self.score > self.tau

    def to_json(self) -> dict:
        return {
            "node": self.node_id,
            "type": self.node_type.value,
            "features": self.features.to_json(),
            "truth": value_to_json(self.truth),
            "score": None if math.isinf(self.score) else self.score,
            "tau": None if math.isinf(self.tau) else self.tau,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "NodeRecord":
        t = NodeType(d["type"])
        return cls(
            d["node"],
            t,
            NodeFeatures.from_json(t, d["features"]),
            value_from_json(d["truth"]),
            math.inf if d["score"] is None else float(d["score"]),
            math.inf if d["tau"] is None else float(d["tau"]),
        )


@dataclass(frozen=True)
class Counterexample:
    world: WorldInstance
    perturbation: Perturbation | None
    records: tuple[NodeRecord, ...]
    kinds: frozenset[FailureKind]
    hardness: float = 0.0
    origin: tuple[int, int] = field(default=(0, 0), compare=False)

    def __post_init__(self) -> None:
        if not self.kinds:
            raise ValueError("a counterexample needs at least one failure kind")

    def to_json(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "perturbation": [self.perturbation[0].value, self.perturbation[1]] if self.perturbation else None,
            "records": [r.to_json() for r in self.records],
            "kinds": sorted(k.value for k in self.kinds),
            "hardness": self.hardness,
            "origin": list(self.origin),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Counterexample":
        pert = d.get("perturbation")
        return cls(
            WorldInstance.from_dict(d["world"]),
            (PerturbationKind(pert[0]), float(pert[1])) if pert else None,
            tuple(NodeRecord.from_json(r) for r in d["records"]),
            frozenset(FailureKind(k) for k in d["kinds"]),
            float(d["hardness"]),
            tuple(d.get("origin", (0, 0))),
        )


def save_counterexamples(path: str | Path, items: Iterable[Counterexample]) -> None:
    with open(path, "w") as fh:
        for cx in items:
            fh.write(json.dumps(cx.to_json(), sort_keys=True) + "\n")


def load_counterexamples(path: str | Path) -> list[Counterexample]:
    return [Counterexample.from_json(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def parse_grid(entries: Iterable) -> list[Perturbation]:
    """``[[kind, magnitude], ...]`` (or ``{"kind", "magnitude"}`` dicts) to typed pairs."""
    out = []
    for e in entries:
        kind, mag = (e["kind"], e["magnitude"]) if isinstance(e, Mapping) else e
        out.append((PerturbationKind(kind), float(mag)))
    return out


def load_grid(path: str | Path | None) -> list[Perturbation]:
    """Grid from a JSON file, or ``DEFAULT_GRID`` when no path is given."""
    if path is None:
        return list(DEFAULT_GRID)
    return parse_grid(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Mining
# ---------------------------------------------------------------------------


def episode_failures(
    world: WorldInstance,
    record,
    trace,
    calibrators: Mapping[NodeType, ConformalCalibrator],
    scorers: Mapping[NodeType, Scorer],
) -> tuple[frozenset[FailureKind], tuple[NodeRecord, ...]]:
    """Both failure predicates over one executed episode.

    Node records cover accepted nodes with a resolvable truth whose score
    exceeds the type's tau; a wrong answer also contributes the answer
    node itself (truth = gold).
    """
    kinds = set()
    records = []
    wrong = not answers_match(record.point_answer, world.gold_answer)
    for o in trace.outcomes:
        if not o.accepted or o.certificate is None:
            continue
        t = o.node_type
        try:
            truth = world.gold_answer if o.is_answer else ground_truth(world, o.spec)
        except CertGraphError:
            continue
        s = ranked_score(scorers[t], o.features, truth)
        tau = calibrators[t].threshold
        rec = NodeRecord(o.node_id, t, o.features, truth, s, tau)
        if rec.nonconforming:
            kinds.add(FailureKind.HIGH_NONCONFORMITY)
            records.append(rec)
        elif wrong and o.is_answer:
            records.append(rec)
    if wrong:
        kinds.add(FailureKind.WRONG_ANSWER)
    return frozenset(kinds), tuple(records)


def _hardness(records: Sequence[NodeRecord], calibrators: Mapping[NodeType, ConformalCalibrator]) -> float:
    return max((calibrators[r.node_type].rank_of(r.score) for r in records), default=0.0)


def mine_counterexamples(
    adversary: AgentBundle,
    worlds: Sequence[WorldInstance],
    perturbation_grid: Sequence[Perturbation],
    budget: float = 16.0,
    seed: int = 0,
    *,
    cap: int = MINING_CAP,
    config: EngineConfig | None = None,
) -> list[Counterexample]:
    """Run the frozen adversary on every (world, perturbation) pair and keep failures.

    At most ``cap`` counterexamples survive, hardest first, where hardness
    is the largest calibration-score rank among the failing node records.
    """
    if not adversary.frozen:
        raise FrozenBundle("mining requires a frozen adversary; call refresh_adversary first")
    config = config or EngineConfig(cp_mode=CPMode.NODE)
    policy = adversary.make_policy()
    scorers = adversary.scorers()
    found = []
    for i, w in enumerate(worlds):
        for j, (kind, mag) in enumerate(perturbation_grid):
            kind = PerturbationKind(kind)
            pw = perturb(w, kind, mag, derive_seed("perturb", seed, i, j))
            ep_seed = derive_seed("mine", seed, i, j)
            record, trace = execute(plan_graph(pw), pw, adversary.calibrators, policy, budget, ep_seed, config)
            kinds, records = episode_failures(pw, record, trace, adversary.calibrators, scorers)
            if not kinds:
                continue
            found.append(
                Counterexample(pw, (kind, mag), records, kinds, _hardness(records, adversary.calibrators), (i, j))
            )
    found.sort(key=lambda cx: (-cx.hardness, cx.origin))
    return found[:cap]


def augment_pools(
    pools: Mapping[NodeType, CalibrationPool],
    counterexamples: Iterable[Counterexample],
) -> tuple[dict[NodeType, CalibrationPool], dict[NodeType, int]]:
    """Append every failing node record with ``selfplay`` provenance."""
    grouped: dict[NodeType, list[PoolExample]] = {}
    for cx in counterexamples:
        for r in cx.records:
            if r.features.node_type is not r.node_type:
                raise TypeMismatch(f"{r.node_id}: {r.features.node_type.value} features tagged {r.node_type.value}")
            grouped.setdefault(r.node_type, []).append(PoolExample(r.features, r.truth, "selfplay"))
    out = dict(pools)
    counts = {t: 0 for t in pools}
    for t, examples in grouped.items():
        base = out.get(t, CalibrationPool(t))
        out[t] = extend_pool(base, examples, "selfplay")
        counts[t] = len(examples)
    return out, counts


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------


@dataclass
class SelfPlayRound:
    index: int
    refreshed: bool
    mined: int
    appended: dict[NodeType, int]
    thresholds: dict[NodeType, float]

    def to_json(self) -> dict:
        return {
            "round": self.index,
            "refreshed": self.refreshed,
            "mined": self.mined,
            "appended": {t.value: n for t, n in sorted(self.appended.items())},
            "thresholds": {t.value: (None if math.isinf(v) else v) for t, v in sorted(self.thresholds.items())},
        }


def run_selfplay(
    student: AgentBundle,
    pools: Mapping[NodeType, CalibrationPool],
    worlds: Sequence[WorldInstance],
    perturbation_grid: Sequence[Perturbation],
    rounds: int = 2,
    *,
    budget: float = 16.0,
    seed: int = 0,
    delta: float = DEFAULT_DELTA,
    refresh_every: int = REFRESH_EVERY,
    cap: int = MINING_CAP,
) -> tuple[AgentBundle, dict[NodeType, CalibrationPool], list[SelfPlayRound]]:
    """Mine, augment and recalibrate; the adversary is re-cloned every ``refresh_every`` rounds.

    One round is one pass over ``worlds``.
    """
    pools = dict(pools)
    adversary = None
    history = []
    for r in range(rounds):
        refreshed = adversary is None or r % refresh_every == 0
        if refreshed:
            adversary = refresh_adversary(student)
        found = mine_counterexamples(adversary, worlds, perturbation_grid, budget, derive_seed("selfplay", seed, r), cap=cap)
        pools, counts = augment_pools(pools, found)
        calibrators = calibrate_all(pools, delta, student.scorers())
        student = student.with_calibrators(calibrators)
        history.append(
            SelfPlayRound(r, refreshed, len(found), counts, {t: c.threshold for t, c in calibrators.items()})
        )
    return student, pools, history
