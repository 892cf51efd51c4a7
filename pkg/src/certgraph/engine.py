"""Graph execution: sets per node, controller queries, local mutations."""

from __future__ import annotations

import enum
import itertools
import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .certify import (
    DEFAULT_K_MAX,
    ConformalCalibrator,
    ConformalSet,
    NodeFeatures,
    conformal_set,
    value_sort_key,
)
from .controller import (
    Action,
    BudgetState,
    CertificateState,
    CostModel,
    Decision,
    NodeContext,
    Policy,
)
from .dsl import (
    EXPAND_DEPTH_CAP,
    MAX_FIDELITY,
    Expand,
    NodeKind,
    NodeSpec,
    NodeType,
    ReasoningGraph,
    Region,
    Retry,
    mutate,
    tool_node,
    topological_order,
    validate_graph,
)
from .errors import CertGraphError, InvalidGraph, MissingCalibrator, ParentNotExecuted, Unresolvable, UnsupportedQueryKind
from .seeding import derive_seed
from .world import ALPHABET, MAX_CANDIDATES, Value, WorldInstance, ground_truth, tool_oracle, value_to_json


class NoAnswer(enum.Enum):
    NO_ANSWER = "NO_ANSWER"

    def __repr__(self) -> str:
        return "NO_ANSWER"


NO_ANSWER = NoAnswer.NO_ANSWER

FUSE_OPS = ("lookup", "sum", "compare", "count", "merge")
PRIOR_GUESSES = 4


class CPMode(str, enum.Enum):
    NODE = "node"  # conformal sets at every node
    FINAL = "final"  # only the answer node is calibrated
    NONE = "none"  # singleton MAP everywhere


def scoring_type(spec: NodeSpec) -> NodeType:
    """Type whose scorer/calibrator a node uses; merge nodes inherit their evidence type."""
    return spec.merges or spec.node_type


# ---------------------------------------------------------------------------
# Node inputs and fusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParentEvidence:
    node_id: str
    node_type: NodeType
    members: tuple[tuple[Value, float, float], ...]
    interval: tuple[float, float] | None = None

    @property
    def mass(self) -> float:
        return sum(p for _, _, p in self.members)


@dataclass(frozen=True)
class NodeInput:
    """Tool nodes: region, prompt, fidelity. Fuse nodes: parent sets plus the query."""

    node_id: str
    kind: NodeKind
    node_type: NodeType
    prompt: str
    fidelity: int
    region: Region | None = None
    query: str = ""
    parents: tuple[ParentEvidence, ...] = ()

    @property
    def parent_empty(self) -> bool:
        return any(not p.members for p in self.parents)

    def serialized(self) -> list[tuple[str, Value, float]]:
        """Parent members as ``(parent, z, score)``, by parent id then score."""
        out = []
        for p in sorted(self.parents, key=lambda e: e.node_id):
            for z, s, _ in sorted(p.members, key=lambda m: (m[1], value_sort_key(m[0]))):
                out.append((p.node_id, z, s))
        return out


def node_input(
    graph: ReasoningGraph, node_id: str, parent_sets: Mapping[str, ConformalSet], query: str = ""
) -> NodeInput:
    spec = graph.node(node_id)
    if spec.kind is NodeKind.TOOL:
        return NodeInput(node_id, spec.kind, spec.node_type, spec.prompt, spec.fidelity, spec.region, query)
    parents = []
    for p in spec.parents:
        if p not in parent_sets:
            raise ParentNotExecuted(f"{node_id} needs {p}, which has not been accepted yet")
        s = parent_sets[p]
        parents.append(ParentEvidence(p, s.node_type, s.members, s.interval))
    return NodeInput(node_id, spec.kind, scoring_type(spec), spec.prompt, spec.fidelity, spec.region, query, tuple(parents))


def _fuse_op(inp: NodeInput, world: WorldInstance) -> tuple[str, list[str]]:
    tokens = inp.prompt.split()
    if tokens and tokens[0] in FUSE_OPS:
        return tokens[0], tokens[1:]
    kind = world.query.kind
    if kind not in FUSE_OPS:
        raise UnsupportedQueryKind(f"cannot fuse for query kind {kind!r}")
    return kind, []


def _add(acc: dict, z, p: float) -> None:
    if p > 0:
        acc[z] = acc.get(z, 0.0) + p


def _union_average(parents: Sequence[ParentEvidence]) -> tuple[dict, float]:
    acc: dict = {}
    n = len(parents)
    for par in parents:
        for z, _, p in par.members:
            _add(acc, z, p / n)
    return acc, sum(par.mass for par in parents) / n


def _product(parents: Sequence[ParentEvidence], combine) -> tuple[dict, float]:
    acc: dict = {}
    for combo in itertools.product(*(par.members for par in parents)):
        p = math.prod(m[2] for m in combo)
        _add(acc, combine([m[0] for m in combo]), p)
    return acc, math.prod(par.mass for par in parents)


def _count_distribution(parents: Sequence[ParentEvidence], label: str) -> tuple[dict, float]:
    # polynomial product of (r_i + q_i x); equals the Cartesian-product sum
    dist = [1.0]
    for par in parents:
        q = sum(p for z, _, p in par.members if z.label == label)
        r = par.mass - q
        nxt = [0.0] * (len(dist) + 1)
        for c, w in enumerate(dist):
            nxt[c] += w * r
            nxt[c + 1] += w * q
        dist = nxt
    acc: dict = {}
    for c, w in enumerate(dist):
        _add(acc, c, w)
    return acc, math.prod(par.mass for par in parents)


def _prior_guesses(op: str, n_parents: int, rng: random.Random) -> list:
    if op == "lookup":
        guesses: set = set()
        while len(guesses) < PRIOR_GUESSES:
            guesses.add("".join(rng.choice(ALPHABET) for _ in range(rng.randint(3, 10))))
        return sorted(guesses)
    if op == "sum":
        return [float(v) for v in sorted(rng.sample(range(20, 199), PRIOR_GUESSES))]
    if op == "compare":
        return sorted(rng.sample("ABCDEFGHIJKLMNOPQRSTUVWXYZ", PRIOR_GUESSES))
    return sorted(rng.sample(range(n_parents + PRIOR_GUESSES), PRIOR_GUESSES))


def fuse_candidates(inp: NodeInput, world: WorldInstance, seed: int = 0) -> list[tuple[Value, float]]:
    """Answer candidates from combinations of parent-set members.

    Each answer gets the summed product of member probabilities over the
    combinations that produce it. The evidence leaves ``1 - M`` of the mass
    unexplained (``M`` = product of parent-set masses); a share
    ``fusion_prior_mass * fidelity_gain**(fidelity-1)`` of it goes to
    ungrounded prior guesses, standing in for a language prior. Merge
    nodes pool evidence only.
    """
    op, args = _fuse_op(inp, world)
    parents = inp.parents
    if not parents:
        evidence, mass = {}, 0.0
    elif op != "merge" and any(not p.members for p in parents):
        evidence, mass = {}, 0.0
    elif op in ("lookup", "merge"):
        evidence, mass = _union_average(parents)
    elif op == "sum":
        evidence, mass = _product(parents, lambda vals: round(sum(float(v) for v in vals), 6))
    elif op == "compare":
        keys = args[:2] if len(args) >= 2 else list(world.query.targets[:2])
        pair = parents[:2]
        if len(pair) < 2:
            evidence, mass = {}, 0.0
        else:
            evidence, mass = _product(pair, lambda vals: keys[0] if float(vals[0]) >= float(vals[1]) else keys[1])
    elif op == "count":
        label = args[0] if args else world.query.label
        evidence, mass = _count_distribution(parents, label)
    else:
        raise UnsupportedQueryKind(f"unsupported fuse op {op!r}")
    cands = dict(evidence)
    if op != "merge":
        noise = world.noise
        w_prior = max(0.0, 1.0 - mass) * noise.fusion_prior_mass * noise.fidelity_gain ** (inp.fidelity - 1)
        if w_prior > 0:
            rng = random.Random(derive_seed("prior", seed, inp.node_id, op))
            guesses = _prior_guesses(op, len(parents), rng)
            weights = [rng.uniform(0.5, 1.0) for _ in guesses]
            total = sum(weights)
            for g, w in zip(guesses, weights):
                _add(cands, g, w_prior * w / total)
    ranked = sorted(cands.items(), key=lambda t: (-t[1], value_sort_key(t[0])))
    return ranked[:MAX_CANDIDATES]


def select_answer(answer_set: ConformalSet | None):
    """Lowest-score member, ties broken by candidate order; empty -> NO_ANSWER."""
    if answer_set is None:
        return NO_ANSWER
    if answer_set.members:
        return min(answer_set.members, key=lambda m: (m[1], value_sort_key(m[0])))[0]
    if answer_set.interval is not None:
        lo, hi = answer_set.interval
        return (lo + hi) / 2.0
    return NO_ANSWER


def point_choice(cset: ConformalSet):
    if cset.interval is not None and not math.isinf(cset.interval[0]):
        return (cset.interval[0] + cset.interval[1]) / 2.0
    return select_answer(cset)


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeOutcome:
    node_id: str
    spec: NodeSpec
    conformal_set: ConformalSet
    point_choice: object
    certificate: CertificateState | None
    action: Action
    cost: float
    fidelity: int
    features: NodeFeatures = field(repr=False)
    decision: Decision | None = field(default=None, repr=False)
    is_answer: bool = False

    @property
    def node_type(self) -> NodeType:
        return scoring_type(self.spec)

    @property
    def accepted(self) -> bool:
        """Accepted sets count as evidence; an expanded node's own set is kept too."""
        return self.action in (Action.ACCEPT, Action.EXPAND)

    def to_json(self) -> dict:
        return {
            "node": self.node_id,
            "kind": self.spec.kind.value,
            "type": self.node_type.value,
            "fidelity": self.fidelity,
            "action": self.action.value,
            "cost": self.cost,
            "set": self.conformal_set.to_json(),
            "point": _jsonable(self.point_choice),
            "certificate": self.certificate.to_json() if self.certificate else None,
            "log_prob": self.decision.log_prob if self.decision else None,
        }


def _jsonable(v):
    if v is NO_ANSWER:
        return NO_ANSWER.value
    if isinstance(v, float) and math.isinf(v):
        return None
    return value_to_json(v)


@dataclass(frozen=True)
class ExecutionTrace:
    outcomes: tuple[NodeOutcome, ...]
    c_comp: float
    mutations: tuple[tuple[str, str, int], ...]
    budget: BudgetState
    seed: int
    graph: ReasoningGraph
    cp_mode: CPMode = CPMode.NODE

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "cp_mode": self.cp_mode.value,
            "c_comp": self.c_comp,
            "budget": {"total": self.budget.total, "spent": self.budget.spent},
            "mutations": [list(m) for m in self.mutations],
            "outcomes": [o.to_json() for o in self.outcomes],
            "graph": self.graph.to_dict(),
        }


@dataclass(frozen=True)
class AnswerRecord:
    answer_set: ConformalSet | None
    point_answer: object
    aborted: bool = False
    reason: str = ""

    def __post_init__(self) -> None:
        if self.aborted and self.point_answer is not NO_ANSWER:
            raise ValueError("aborted episodes carry NO_ANSWER")

    @property
    def answered(self) -> bool:
        return self.point_answer is not NO_ANSWER

    def to_json(self) -> dict:
        return {
            "answer_set": self.answer_set.to_json() if self.answer_set else None,
            "point_answer": _jsonable(self.point_answer),
            "aborted": self.aborted,
            "reason": self.reason,
        }


def dump_trace(record: AnswerRecord, trace: ExecutionTrace) -> str:
    return json.dumps({"answer": record.to_json(), "trace": trace.to_json()}, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def node_cost(spec: NodeSpec, cost: CostModel) -> float:
    return cost.tool_call(spec.fidelity) if spec.kind is NodeKind.TOOL else cost.c_fuse


def expand_children(spec: NodeSpec) -> tuple[NodeSpec, NodeSpec]:
    """Two overlapping sub-region reads (each 90% of the width and height)."""
    x0, y0, x1, y1 = spec.region.bbox
    dx, dy = 0.1 * (x1 - x0), 0.1 * (y1 - y0)
    a = Region(spec.region.image_index, (x0, y0, x1 - dx, y1 - dy))
    b = Region(spec.region.image_index, (x0 + dx, y0 + dy, x1, y1))
    return (
        tool_node(spec.tool_id, a, spec.prompt, fidelity=spec.fidelity),
        tool_node(spec.tool_id, b, spec.prompt, fidelity=spec.fidelity),
    )


def _point_set(features: NodeFeatures, stype: NodeType) -> ConformalSet:
    if not features.candidates:
        return ConformalSet(stype, 0.0, ())
    z = features.candidates[0][0]
    return ConformalSet(stype, 0.0, ((z, 0.0, features.probs[0]),))


@dataclass(frozen=True)
class EngineConfig:
    cost: CostModel = field(default_factory=CostModel)
    cp_mode: CPMode = CPMode.NODE
    k_max: Mapping[NodeType, int | None] = field(default_factory=lambda: dict(DEFAULT_K_MAX))
    training: bool = False


def required_types(graph: ReasoningGraph, cp_mode: CPMode) -> set[NodeType]:
    if cp_mode is CPMode.NONE:
        return set()
    if cp_mode is CPMode.FINAL:
        return {scoring_type(graph.node(graph.answer_node))}
    return {scoring_type(s) for s in graph.nodes.values()}


def execute(
    graph: ReasoningGraph,
    world: WorldInstance,
    calibrators: Mapping[NodeType, ConformalCalibrator],
    policy: Policy,
    budget: float = 16.0,
    seed: int = 0,
    config: EngineConfig | None = None,
) -> tuple[AnswerRecord, ExecutionTrace]:
    """Run one episode.

    Nodes run in topological order. After each node the policy picks an
    action among those the budget allows, where every not-yet-run node's
    base cost stays reserved. RETRY and EXPAND take effect immediately:
    the retried node (or the new children and their merge) runs next.
    """
    config = config or EngineConfig()
    cost = config.cost
    try:
        validate_graph(graph)
    except InvalidGraph:
        raise
    except CertGraphError as exc:  # cycles and dangling parents surface as InvalidGraph
        raise InvalidGraph(str(exc)) from exc
    if budget <= 0:
        raise ValueError("budget must be positive")
    for t in required_types(graph, config.cp_mode):
        if t not in calibrators:
            raise MissingCalibrator(f"no calibrator for {t.value}")

    state = BudgetState(float(budget))
    policy_rng = random.Random(derive_seed("policy", seed))
    queue = list(topological_order(graph))
    accepted: dict[str, ConformalSet] = {}
    retries: dict[str, int] = {}
    outcomes: list[NodeOutcome] = []
    mutations: list[tuple[str, str, int]] = []
    record: AnswerRecord | None = None

    while queue:
        v = queue.pop(0)
        spec = graph.node(v)
        stype = scoring_type(spec)
        is_answer = v == graph.answer_node
        run_cost = node_cost(spec, cost)
        reserve = sum(node_cost(graph.node(q), cost) for q in queue)
        if state.spent + run_cost > state.total + 1e-9:
            record = AnswerRecord(None, NO_ANSWER, True, "budget exhausted")
            break
        state = state.charge(run_cost)

        inp = node_input(graph, v, accepted, world.query.text)
        node_seed = derive_seed("node", seed, v, spec.fidelity)
        if spec.kind is NodeKind.TOOL:
            cands = tool_oracle(spec.node_type, world, spec.region, spec.prompt, spec.fidelity, node_seed)
        else:
            cands = fuse_candidates(inp, world, node_seed)
        features = NodeFeatures(stype, tuple(cands), inp.parent_empty)

        calibrated = config.cp_mode is CPMode.NODE or (config.cp_mode is CPMode.FINAL and is_answer)
        if calibrated:
            cal = calibrators[stype]
            cset = conformal_set(features, cal.scorer, cal, config.k_max.get(stype))
            tau = cal.threshold
        else:
            cset = _point_set(features, stype)
            tau = 0.0
        truth_in = None
        if config.training:
            try:
                truth_in = cset.contains(ground_truth(world, spec))
            except Unresolvable:
                truth_in = None
        cert = CertificateState(tau, cset.set_size, stype, cset.dispersion, truth_in)
        ctx = NodeContext(stype, inp.parent_empty, spec.fidelity, retries.get(v, 0), is_answer, spec.is_tool)

        retry_spec = replace(spec, fidelity=spec.fidelity + 1) if spec.fidelity < MAX_FIDELITY else None
        retry_cost = node_cost(retry_spec, cost) if retry_spec else math.inf
        can_expand = spec.kind is NodeKind.TOOL and not is_answer and spec.depth < EXPAND_DEPTH_CAP
        expand_cost = 2 * cost.tool_call(spec.fidelity) + cost.c_fuse if can_expand else math.inf
        masked = set()
        if retry_spec is None or state.spent + retry_cost + reserve > state.total + 1e-9:
            masked.add(Action.RETRY)
        if not can_expand or state.spent + expand_cost + reserve > state.total + 1e-9:
            masked.add(Action.EXPAND)

        shown_cert: CertificateState | None = cert
        if config.cp_mode is CPMode.FINAL and not is_answer:
            # no node certificate to act on: evidence is passed through
            decision = Decision(Action.ACCEPT)
            shown_cert = None
        else:
            decision = policy.act(
                cert,
                state,
                ctx,
                frozenset(masked),
                policy_rng,
                {Action.RETRY: retry_cost, Action.EXPAND: expand_cost},
            )
        action = decision.action
        outcomes.append(
            NodeOutcome(v, spec, cset, point_choice(cset), shown_cert, action, run_cost, spec.fidelity, features, decision, is_answer)
        )

        if action is Action.ABORT:
            record = AnswerRecord(None, NO_ANSWER, True, f"aborted at {v}")
            break
        if action is Action.RETRY:
            graph = mutate(graph, v, Retry(spec.fidelity + 1))
            retries[v] = retries.get(v, 0) + 1
            mutations.append((v, Action.RETRY.value, spec.fidelity + 1))
            queue.insert(0, v)
            continue
        accepted[v] = cset
        if action is Action.EXPAND:
            k = graph.mutation_count + 1
            graph = mutate(graph, v, Expand(expand_children(spec)))
            new_ids = [f"{v}_x{k}a", f"{v}_x{k}b", f"{v}_m{k}"]
            mutations.append((v, Action.EXPAND.value, spec.depth + 1))
            queue[0:0] = new_ids
            continue
        if is_answer:
            record = AnswerRecord(cset, select_answer(cset), False, "")

    if record is None:
        record = AnswerRecord(None, NO_ANSWER, True, "answer node never accepted")
    c_comp = sum(o.cost for o in outcomes)
    trace = ExecutionTrace(tuple(outcomes), c_comp, tuple(mutations), state, seed, graph, config.cp_mode)
    return record, trace
