"""Metrics, evaluation suites and report emission."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import binomtest

from .certify import DEFAULT_DELTA, ConformalCalibrator, ConformalSet, PoolExample, conformal_set, iou
from .controller import (
    CostModel,
    HeuristicPolicy,
    LearnedPolicy,
    PolicyParams,
    answers_match,
    make_policy,
)
from .dsl import NodeType
from .engine import AnswerRecord, CPMode, EngineConfig, ExecutionTrace, execute
from .errors import CertGraphError, EmptyTestSet, UnknownVariant
from .planner import plan_graph
from .seeding import derive_seed
from .world import DIFFICULTIES, Detection, NoiseConfig, PerturbationKind, WorldInstance, default_noise, generate_instance, ground_truth, perturb

ABLATION_VARIANTS = ("full", "no-cp", "final-only-cp", "heuristic-controller")
BUDGET_GRID = (8.0, 12.0, 16.0, 24.0)
_SEED_MASK = (1 << 63) - 1


# ---------------------------------------------------------------------------
# Support tests and hallucination
# ---------------------------------------------------------------------------


def _is_number(z) -> bool:
    return isinstance(z, (int, float)) and not isinstance(z, bool)


def _range(cset: ConformalSet) -> tuple[float, float] | None:
    """Numeric extent of a set: its interval, else its member span."""
    if cset.interval is not None:
        return cset.interval
    nums = [float(z) for z in cset.values if _is_number(z)]
    return (min(nums), max(nums)) if nums else None


def _covers(cset: ConformalSet, v: float) -> bool:
    if cset.interval is not None:
        return cset.interval[0] - 1e-9 <= v <= cset.interval[1] + 1e-9
    return any(_is_number(z) and abs(float(z) - v) < 1e-6 for z in cset.values)


def _evidence(trace: ExecutionTrace) -> dict[str, tuple[NodeType, ConformalSet]]:
    """Latest accepted set per node, the answer node excluded."""
    answer = trace.graph.answer_node
    out = {}
    for o in trace.outcomes:
        if o.accepted and o.node_id != answer:
            out[o.node_id] = (o.node_type, o.conformal_set)
    return out


def _answer_parents(trace: ExecutionTrace, evidence) -> list[ConformalSet | None]:
    spec = trace.graph.node(trace.graph.answer_node)
    return [evidence[p][1] if p in evidence else None for p in spec.parents]


def is_supported(answer, trace: ExecutionTrace) -> bool:
    """Whether an accepted non-answer node justifies ``answer``.

    Text: equal to, or a substring of, a member of an accepted ocr/logic
    set. Box: an accepted det member with IoU above 0.5. Numbers: an
    accepted chart interval covers the value, or the value lies in the
    range its parent evidence allows (sum of parent intervals for a sum,
    min/max label matches across detection parents for a count). A
    compared key is supported when its interval can reach the others'.
    """
    evidence = _evidence(trace)
    spec = trace.graph.node(trace.graph.answer_node)
    words = spec.prompt.split()
    op = words[0] if words else ""
    if isinstance(answer, Detection):
        return any(
            isinstance(z, Detection) and iou(z.box, answer.box) > 0.5
            for t, cs in evidence.values()
            if t is NodeType.DET
            for z in cs.values
        )
    if _is_number(answer):
        v = float(answer)
        if any(t is NodeType.CHART and _covers(cs, v) for t, cs in evidence.values()):
            return True
        parents = _answer_parents(trace, evidence)
        if op == "sum" and parents and all(p is not None for p in parents):
            ranges = [_range(p) for p in parents]
            if all(r is not None for r in ranges):
                lo = sum(r[0] for r in ranges)
                hi = sum(r[1] for r in ranges)
                return lo - 1e-9 <= v <= hi + 1e-9
        if op == "count" and len(words) > 1:
            label = words[1]
            sure = possible = 0
            for p in parents:
                labels = [z.label for z in p.values if isinstance(z, Detection)] if p is not None else []
                if labels and all(lab == label for lab in labels):
                    sure += 1
                if label in labels:
                    possible += 1
            return sure <= v <= possible
        return False
    if isinstance(answer, str):
        if op == "compare" and answer in words[1:]:
            parents = _answer_parents(trace, evidence)
            keyed = dict(zip(words[1:], parents))
            mine = keyed.get(answer)
            if mine is None or _range(mine) is None:
                return False
            hi = _range(mine)[1]
            for key, p in keyed.items():
                if key == answer:
                    continue
                r = _range(p) if p is not None else None
                if r is None or hi < r[0]:
                    return False
            return True
        return any(
            t in (NodeType.OCR, NodeType.LOGIC) and any(isinstance(z, str) and answer in z for z in cs.values)
            for t, cs in evidence.values()
        )
    return False


def hallucination_rate(traces: Sequence[ExecutionTrace], records: Sequence[AnswerRecord]) -> float:
    """Fraction of answered (non-aborted) episodes whose answer has no support."""
    flags = [not is_supported(r.point_answer, t) for t, r in zip(traces, records) if r.answered and not r.aborted]
    return float(np.mean(flags)) if flags else 0.0


# ---------------------------------------------------------------------------
# Coverage
# ---------------------------------------------------------------------------


def wilson_interval(k: int, n: int) -> tuple[float, float]:
    ci = binomtest(k, n).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass(frozen=True)
class CoverageEstimate:
    coverage: float
    low: float
    high: float
    n: int

    def to_json(self) -> dict:
        return {"coverage": self.coverage, "low": self.low, "high": self.high, "n": self.n}


def estimate(hits: Sequence[bool]) -> CoverageEstimate:
    n = len(hits)
    if n == 0:
        raise EmptyTestSet("no test nodes")
    k = int(sum(bool(h) for h in hits))
    lo, hi = wilson_interval(k, n)
    return CoverageEstimate(k / n, lo, hi, n)


def eval_coverage(
    calibrator: ConformalCalibrator,
    test_nodes: Sequence[PoolExample],
    k_max: int | None = None,
) -> tuple[float, tuple[float, float]]:
    """Empirical ``P(z_true in set)`` with a Wilson 95% interval.

    Sets are untruncated unless ``k_max`` is given.
    """
    if not test_nodes:
        raise EmptyTestSet("eval_coverage needs at least one test node")
    scorer = calibrator.scorer
    hits = [conformal_set(e.features, scorer, calibrator, k_max).contains(e.truth) for e in test_nodes]
    est = estimate(hits)
    return est.coverage, (est.low, est.high)


# ---------------------------------------------------------------------------
# Suite configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteConfig:
    """Everything that determines a report; hashed into its fingerprint."""

    instances: int = 500
    difficulties: tuple[str, ...] = DIFFICULTIES
    seeds: tuple[int, ...] = tuple(range(20))
    suite_seed: int = 0
    delta: float = DEFAULT_DELTA
    budget: float = 16.0
    policy: str = "learned"
    variant: str = "full"
    beta: float = 0.05
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    calibration_worlds: int = 2000
    calibration_seed: int = 0
    train_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["difficulties"] = list(self.difficulties)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SuiteConfig":
        d = dict(d)
        kw = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "noise" in kw:
            kw["noise"] = NoiseConfig.from_dict(kw["noise"])
        if "difficulties" in kw:
            kw["difficulties"] = tuple(kw["difficulties"])
        if "seeds" in kw:
            seeds = kw["seeds"]
            kw["seeds"] = tuple(range(seeds)) if isinstance(seeds, int) else tuple(int(s) for s in seeds)
        for k in ("budget", "delta", "beta"):
            if k in kw:
                kw[k] = float(kw[k])
        return cls(**kw)

    def with_(self, **changes) -> "SuiteConfig":
        return replace(self, **changes)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass(frozen=True)
class Agent:
    """Calibrators plus (optional) learned policy weights used by a suite."""

    calibrators: Mapping[NodeType, ConformalCalibrator]
    params: PolicyParams | None = None

    def fingerprint(self) -> str:
        return digest(
            {
                "calibrators": {t.value: c.to_json() for t, c in sorted(self.calibrators.items())},
                "policy": self.params.weights.tolist() if self.params is not None else None,
            }
        )


def fingerprint(config: SuiteConfig, agent: Agent, extra: Mapping | None = None) -> str:
    return digest({"config": config.to_dict(), "agent": agent.fingerprint(), "extra": dict(extra or {})})


# ---------------------------------------------------------------------------
# Running a suite
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeResult:
    seed: int
    difficulty: str
    index: int
    kind: str
    correct: bool
    answered: bool
    aborted: bool
    supported: bool
    answer_covered: bool
    abs_error: float | None
    c_comp: float
    node_hits: tuple[tuple[str, bool, bool], ...]  # (type, covered, truncated)


def eval_world(config: SuiteConfig, seed: int, difficulty: str, index: int) -> WorldInstance:
    wseed = derive_seed("eval-world", config.suite_seed, seed, difficulty, index) & _SEED_MASK
    return generate_instance(wseed, difficulty, noise=default_noise(difficulty, config.noise))


def node_hits(trace: ExecutionTrace, world: WorldInstance) -> tuple[tuple[str, bool, bool], ...]:
    """Coverage of every accepted, certified node with a resolvable truth."""
    out = []
    for o in trace.outcomes:
        if not o.accepted or o.certificate is None:
            continue
        try:
            truth = world.gold_answer if o.is_answer else ground_truth(world, o.spec)
        except CertGraphError:
            continue
        out.append((o.node_type.value, o.conformal_set.contains(truth), o.conformal_set.truncated))
    return tuple(out)


def run_episode(
    world: WorldInstance,
    agent: Agent,
    policy,
    budget: float,
    seed: int,
    engine: EngineConfig,
) -> tuple[AnswerRecord, ExecutionTrace]:
    return execute(plan_graph(world), world, agent.calibrators, policy, budget, seed, engine)


def summarize_episode(
    world: WorldInstance, record: AnswerRecord, trace: ExecutionTrace, seed: int, index: int
) -> EpisodeResult:
    gold = world.gold_answer
    answered = record.answered and not record.aborted
    abs_error = None
    if answered and _is_number(gold) and _is_number(record.point_answer):
        abs_error = abs(float(record.point_answer) - float(gold))
    return EpisodeResult(
        seed=seed,
        difficulty=world.difficulty,
        index=index,
        kind=world.query.kind,
        correct=answers_match(record.point_answer, gold),
        answered=answered,
        aborted=record.aborted,
        supported=is_supported(record.point_answer, trace) if answered else True,
        answer_covered=record.answer_set is not None and record.answer_set.contains(gold),
        abs_error=abs_error,
        c_comp=trace.c_comp,
        node_hits=node_hits(trace, world),
    )


def _variant_setup(config: SuiteConfig, agent: Agent):
    if config.variant not in ABLATION_VARIANTS:
        raise UnknownVariant(f"unknown ablation variant {config.variant!r}")
    cp_mode = {"no-cp": CPMode.NONE, "final-only-cp": CPMode.FINAL}.get(config.variant, CPMode.NODE)
    if config.variant == "heuristic-controller":
        policy = HeuristicPolicy()
    elif config.policy == "learned":
        if agent.params is None:
            raise CertGraphError("the learned policy needs trained weights")
        policy = LearnedPolicy(agent.params, greedy=True)
    else:
        policy = make_policy(config.policy)
    engine = EngineConfig(cost=replace(CostModel(), beta=config.beta), cp_mode=cp_mode)
    return policy, engine


def run_suite(
    config: SuiteConfig,
    agent: Agent,
    perturbation: tuple[PerturbationKind | str, float] | None = None,
) -> list[EpisodeResult]:
    """Every (seed, difficulty, instance) episode, sequentially and in a fixed order."""
    policy, engine = _variant_setup(config, agent)
    results = []
    for s in config.seeds:
        for d in config.difficulties:
            for i in range(config.instances):
                world = eval_world(config, s, d, i)
                if perturbation is not None:
                    kind, mag = perturbation
                    world = perturb(world, kind, mag, derive_seed("eval-perturb", config.suite_seed, s, d, i))
                ep_seed = derive_seed("eval-episode", config.suite_seed, s, d, i)
                record, trace = run_episode(world, agent, policy, config.budget, ep_seed, engine)
                results.append(summarize_episode(world, record, trace, s, i))
    return results


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _mean(xs: Iterable[float]) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else 0.0


@dataclass(frozen=True)
class SeedMetrics:
    seed: int
    em: float
    hallucination_rate: float
    mean_budget: float
    node_coverage: float
    episodes: int

    def to_json(self) -> dict:
        return asdict(self)


def _aggregate(results: Sequence[EpisodeResult]) -> dict:
    answered = [r for r in results if r.answered]
    hits = [h for r in results for h in r.node_hits]
    return {
        "em": _mean(r.correct for r in results),
        "hallucination_rate": _mean(not r.supported for r in answered),
        "mean_budget": _mean(r.c_comp for r in results),
        "node_coverage": _mean(h[1] for h in hits),
    }


@dataclass(frozen=True)
class MetricsReport:
    coverage: Mapping[str, CoverageEstimate]
    truncated_coverage: Mapping[str, CoverageEstimate]
    answer_coverage: float
    em: float
    abs_error: float | None
    hallucination_rate: float
    abort_rate: float
    mean_budget: float
    node_coverage: float
    episodes: int
    fingerprint: str
    config: Mapping
    per_seed: tuple[SeedMetrics, ...] = ()
    label: str = ""

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "episodes": self.episodes,
            "em": self.em,
            "abs_error": self.abs_error,
            "hallucination_rate": self.hallucination_rate,
            "abort_rate": self.abort_rate,
            "mean_budget": self.mean_budget,
            "answer_coverage": self.answer_coverage,
            "node_coverage": self.node_coverage,
            "coverage": {t: c.to_json() for t, c in sorted(self.coverage.items())},
            "truncated_coverage": {t: c.to_json() for t, c in sorted(self.truncated_coverage.items())},
            "per_seed": [s.to_json() for s in self.per_seed],
        }

    def rows(self) -> list[tuple[str, str, str, object]]:
        """Flat ``(label, section, key, value)`` rows carrying every number of the JSON form."""
        return _flatten_rows(self.label, self.to_json())


def build_report(
    results: Sequence[EpisodeResult], config: SuiteConfig, agent: Agent, label: str = "", extra: Mapping | None = None
) -> MetricsReport:
    if not results:
        raise EmptyTestSet("no episodes to report")
    by_type: dict[str, list[bool]] = {}
    trunc: dict[str, list[bool]] = {}
    for r in results:
        for t, covered, truncated in r.node_hits:
            by_type.setdefault(t, []).append(covered)
            if truncated:
                trunc.setdefault(t, []).append(covered)
    errors = [r.abs_error for r in results if r.abs_error is not None]
    per_seed = []
    for s in config.seeds:
        rs = [r for r in results if r.seed == s]
        if rs:
            agg = _aggregate(rs)
            per_seed.append(SeedMetrics(s, agg["em"], agg["hallucination_rate"], agg["mean_budget"], agg["node_coverage"], len(rs)))
    agg = _aggregate(results)
    return MetricsReport(
        coverage={t: estimate(h) for t, h in by_type.items()},
        truncated_coverage={t: estimate(h) for t, h in trunc.items()},
        answer_coverage=_mean(r.answer_covered for r in results),
        em=agg["em"],
        abs_error=_mean(errors) if errors else None,
        hallucination_rate=agg["hallucination_rate"],
        abort_rate=_mean(r.aborted for r in results),
        mean_budget=agg["mean_budget"],
        node_coverage=agg["node_coverage"],
        episodes=len(results),
        fingerprint=fingerprint(config, agent, extra),
        config=config.to_dict(),
        per_seed=tuple(per_seed),
        label=label,
    )


def evaluate_suite(
    config: SuiteConfig,
    agent: Agent,
    perturbation: tuple[PerturbationKind | str, float] | None = None,
    label: str = "",
) -> MetricsReport:
    extra = {"perturbation": [PerturbationKind(perturbation[0]).value, perturbation[1]]} if perturbation else None
    return build_report(run_suite(config, agent, perturbation), config, agent, label, extra)


def run_ablation(config: SuiteConfig, variant: str, agent: Agent) -> MetricsReport:
    """Full system or one of its ablations on the configured suite."""
    if variant not in ABLATION_VARIANTS:
        raise UnknownVariant(f"unknown ablation variant {variant!r}")
    return evaluate_suite(config.with_(variant=variant), agent, label=variant)


@dataclass(frozen=True)
class FrontierPoint:
    budget: float
    accuracy: float
    hallucination: float
    mean_budget: float

    def to_json(self) -> dict:
        return asdict(self)


def budget_sweep(config: SuiteConfig, budgets: Sequence[float], agent: Agent) -> list[FrontierPoint]:
    """One suite run per budget, sharing every world and episode seed."""
    if not budgets:
        raise ValueError("budget grid is empty")
    points = []
    for b in budgets:
        rep = evaluate_suite(config.with_(budget=float(b)), agent, label=f"B={b:g}")
        points.append(FrontierPoint(float(b), rep.em, rep.hallucination_rate, rep.mean_budget))
    return points


def robustness_suite(
    config: SuiteConfig,
    perturbation_grid: Sequence[tuple[PerturbationKind | str, float]],
    agent: Agent,
) -> list[MetricsReport]:
    """Baseline row, then one row per perturbation."""
    rows = [evaluate_suite(config, agent, label="baseline")]
    for kind, mag in perturbation_grid:
        kind = PerturbationKind(kind)
        rows.append(evaluate_suite(config, agent, (kind, float(mag)), label=f"{kind.value}@{mag:g}"))
    return rows


def coverage_drop(baseline: MetricsReport, shifted: Sequence[MetricsReport]) -> float:
    """Clean node coverage minus the mean node coverage under the shifts."""
    if not shifted:
        return 0.0
    return baseline.node_coverage - _mean(r.node_coverage for r in shifted)


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _flatten_rows(label: str, obj, prefix: str = "") -> list[tuple[str, str, str, object]]:
    rows = []
    if isinstance(obj, Mapping):
        for k in sorted(obj):
            rows.extend(_flatten_rows(label, obj[k], f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            rows.extend(_flatten_rows(label, v, f"{prefix}[{i}]"))
    else:
        section = prefix.split(".", 1)[0]
        rows.append((label, section, prefix, obj))
    return rows


def _cell(v) -> str:
    # json's encoding, so CSV and JSON carry the same digits
    if isinstance(v, float) and math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    return json.dumps(v)


def reports_to_json(reports: Sequence[MetricsReport] | MetricsReport) -> str:
    if isinstance(reports, MetricsReport):
        return json.dumps(reports.to_json(), indent=1, sort_keys=True) + "\n"
    return json.dumps([r.to_json() for r in reports], indent=1, sort_keys=True) + "\n"


def reports_to_csv(reports: Sequence[MetricsReport] | MetricsReport) -> str:
    if isinstance(reports, MetricsReport):
        reports = [reports]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "section", "key", "value"])
    for r in reports:
        for row in r.rows():
            w.writerow([row[0], row[1], row[2], _cell(row[3])])
    return buf.getvalue()


def frontier_to_json(points: Sequence[FrontierPoint]) -> str:
    return json.dumps([p.to_json() for p in points], indent=1, sort_keys=True) + "\n"


def frontier_to_csv(points: Sequence[FrontierPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["budget", "accuracy", "hallucination", "mean_budget"])
    for p in points:
        w.writerow([_cell(p.budget), _cell(p.accuracy), _cell(p.hallucination), _cell(p.mean_budget)])
    return buf.getvalue()


def csv_to_values(text: str) -> dict[tuple[str, str], object]:
    """Parse :func:`reports_to_csv` output back to ``{(label, key): value}``."""
    rows = list(csv.reader(io.StringIO(text)))[1:]
    return {(r[0], r[2]): json.loads(r[3]) for r in rows}


# ---------------------------------------------------------------------------
# Agents from a configuration
# ---------------------------------------------------------------------------


def build_agent(config: SuiteConfig, params: PolicyParams | None = None, train: bool = True) -> Agent:
    """Calibrate on fresh pools; train the learned policy when none is given."""
    from .pools import build_pools
    from .train import TrainConfig, train_policy
    from .certify import calibrate_all

    pools = build_pools(config.calibration_worlds, config.calibration_seed, noise=config.noise)
    calibrators = calibrate_all(pools, config.delta)
    if params is None and train and config.policy == "learned":
        cfg = TrainConfig(seed=config.train_seed, noise=config.noise, cost=replace(CostModel(), beta=config.beta))
        params = train_policy(calibrators, cfg).params
    return Agent(calibrators, params)
