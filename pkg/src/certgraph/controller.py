"""Budgeted node controller: state, cost model, policies and REINFORCE."""

from __future__ import annotations

import enum
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .dsl import NodeType
from .errors import AllActionsMasked, EmptyBatch


class Action(str, enum.Enum):
    ACCEPT = "accept"
    RETRY = "retry"
    EXPAND = "expand"
    ABORT = "abort"


ACTIONS: tuple[Action, ...] = (Action.ACCEPT, Action.RETRY, Action.EXPAND, Action.ABORT)
_ACTION_INDEX = {a: i for i, a in enumerate(ACTIONS)}


@dataclass(frozen=True)
class CostModel:
    c_tool: float = 1.0
    c_retry: float = 2.0
    c_fuse: float = 0.25
    beta: float = 0.05
    err_weight: float = 1.0

    def __post_init__(self) -> None:
        if min(self.c_tool, self.c_retry, self.c_fuse, self.beta, self.err_weight) < 0:
            raise ValueError("cost constants must be non-negative")

    def tool_call(self, fidelity: int) -> float:
        """Tool calls above base fidelity are billed at the retry rate."""
        return self.c_tool if fidelity <= 1 else self.c_retry


@dataclass(frozen=True)
class BudgetState:
    total: float = 16.0
    spent: float = 0.0

    def __post_init__(self) -> None:
        if self.total <= 0:
            raise ValueError("budget must be positive")
        if not 0.0 <= self.spent <= self.total + 1e-9:
            raise ValueError(f"spent {self.spent} outside [0, {self.total}]")

    @property
    def remaining(self) -> float:
        return self.total - self.spent

    def charge(self, cost: float) -> "BudgetState":
        return BudgetState(self.total, self.spent + cost)


@dataclass(frozen=True)
class CertificateState:
    """Controller view of a node's conformal set.

    ``truth_in_set`` is only filled in training traces.
    """

    tau: float
    set_size: float
    node_type: NodeType
    dispersion: float = 0.0
    truth_in_set: bool | None = None

    def __post_init__(self) -> None:
        if self.set_size < 0 or self.dispersion < 0:
            raise ValueError("set size and dispersion must be non-negative")

    def to_json(self) -> dict:
        return {
            "tau": None if math.isinf(self.tau) else self.tau,
            "set_size": None if math.isinf(self.set_size) else self.set_size,
            "node_type": self.node_type.value,
            "dispersion": self.dispersion,
            "truth_in_set": self.truth_in_set,
        }


@dataclass(frozen=True)
class NodeContext:
    node_type: NodeType
    parent_empty: bool = False
    fidelity: int = 1
    retry_count: int = 0
    is_answer: bool = False
    is_tool: bool = True


FEATURE_NAMES = (
    "bias",
    "log_tau",
    "log_set_size",
    "log_dispersion",
    "remaining_frac",
    "type_ocr",
    "type_det",
    "type_chart",
    "type_logic",
    "parent_empty",
    "empty_set",
    "fidelity",
    "is_answer",
)
_TYPE_ORDER = (NodeType.OCR, NodeType.DET, NodeType.CHART, NodeType.LOGIC)
_LOG_CAP = 1e3


def _log_feature(x: float) -> float:
    return math.log1p(min(max(x, 0.0), _LOG_CAP))


def policy_features(cert: CertificateState, budget: BudgetState, ctx: NodeContext) -> np.ndarray:
    """Scalar observation vector; see ``FEATURE_NAMES``."""
    onehot = [1.0 if ctx.node_type is t else 0.0 for t in _TYPE_ORDER]
    return np.array(
        [
            1.0,
            _log_feature(cert.tau),
            _log_feature(cert.set_size),
            _log_feature(cert.dispersion),
            budget.remaining / budget.total,
            *onehot,
            1.0 if ctx.parent_empty else 0.0,
            1.0 if cert.set_size == 0 else 0.0,
            float(ctx.fidelity - 1),
            1.0 if ctx.is_answer else 0.0,
        ]
    )


def _allowed_vector(masked: Iterable[Action]) -> np.ndarray:
    allowed = np.ones(len(ACTIONS), dtype=bool)
    for a in masked:
        allowed[_ACTION_INDEX[Action(a)]] = False
    if not allowed.any():
        raise AllActionsMasked("every action is masked")
    return allowed


def masked_softmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    z = np.where(allowed, logits, -np.inf)
    z = z - z[allowed].max()
    e = np.where(allowed, np.exp(z), 0.0)
    return e / e.sum()


@dataclass
class PolicyParams:
    """Softmax-linear policy weights, shape ``(len(FEATURE_NAMES), 4)``."""

    weights: np.ndarray = field(default_factory=lambda: np.zeros((len(FEATURE_NAMES), len(ACTIONS))))
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (len(self.feature_names), len(ACTIONS)):
            raise ValueError(f"weights shape {self.weights.shape} does not match features x actions")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("policy weights must be finite")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.feature_names)

    def to_json(self, baseline: float | None = None) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "actions": [a.value for a in ACTIONS],
            "weights": self.weights.tolist(),
            "baseline": baseline,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "PolicyParams":
        return cls(np.array(d["weights"], dtype=float), tuple(d["feature_names"]))


def action_probs(params: PolicyParams, x: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    return masked_softmax(x @ params.weights, allowed)


def decide(
    params: PolicyParams,
    certificate: CertificateState,
    budget: BudgetState,
    context: NodeContext,
    masked_actions: Iterable[Action],
    rng: random.Random,
    greedy: bool = False,
) -> tuple[Action, float]:
    """Sample (training) or argmax (evaluation) from the masked softmax."""
    allowed = _allowed_vector(masked_actions)
    probs = action_probs(params, policy_features(certificate, budget, context), allowed)
    idx = _choose(probs, rng, greedy)
    return ACTIONS[idx], float(math.log(probs[idx]))


def _choose(probs: np.ndarray, rng: random.Random, greedy: bool) -> int:
    if greedy:
        return int(np.argmax(probs))
    u = rng.random()
    acc = 0.0
    last = 0
    for i, p in enumerate(probs):
        if p <= 0:
            continue
        last = i
        acc += p
        if u < acc:
            return i
    return last


def heuristic_decide(
    certificate: CertificateState,
    budget: BudgetState,
    retry_count: int,
    *,
    threshold: float = 3.0,
    retry_cost: float = 2.0,
    max_retries: int = 2,
) -> Action:
    """Retry large sets up to twice while affordable; never abort."""
    if certificate.set_size > threshold and retry_count < max_retries and budget.remaining >= retry_cost:
        return Action.RETRY
    return Action.ACCEPT


# ---------------------------------------------------------------------------
# Policies as used by the engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Decision:
    action: Action
    log_prob: float = 0.0
    features: tuple[float, ...] | None = None
    allowed: tuple[bool, ...] | None = None


class Policy(Protocol):
    name: str

    def act(
        self,
        certificate: CertificateState,
        budget: BudgetState,
        context: NodeContext,
        masked: frozenset[Action],
        rng: random.Random,
        action_costs: Mapping[Action, float],
    ) -> Decision: ...


@dataclass
class LearnedPolicy:
    params: PolicyParams = field(default_factory=PolicyParams)
    greedy: bool = True
    name: str = "learned"

    def act(self, certificate, budget, context, masked, rng, action_costs) -> Decision:
        allowed = _allowed_vector(masked)
        x = policy_features(certificate, budget, context)
        probs = action_probs(self.params, x, allowed)
        idx = _choose(probs, rng, self.greedy)
        return Decision(ACTIONS[idx], float(math.log(probs[idx])), tuple(x), tuple(bool(a) for a in allowed))


@dataclass
class HeuristicPolicy:
    threshold: float = 3.0
    name: str = "heuristic"

    def act(self, certificate, budget, context, masked, rng, action_costs) -> Decision:
        action = heuristic_decide(
            certificate,
            budget,
            context.retry_count,
            threshold=self.threshold,
            retry_cost=action_costs.get(Action.RETRY, math.inf),
        )
        if action in masked:
            action = Action.ACCEPT
        return Decision(action)


@dataclass
class ConstantPolicy:
    action: Action = Action.ACCEPT
    name: str = "accept-always"

    def act(self, certificate, budget, context, masked, rng, action_costs) -> Decision:
        return Decision(self.action if self.action not in masked else Action.ACCEPT)


def make_policy(name: str, params: PolicyParams | None = None) -> Policy:
    if name == "learned":
        return LearnedPolicy(params or PolicyParams())
    if name == "heuristic":
        return HeuristicPolicy()
    if name == "accept-always":
        return ConstantPolicy(Action.ACCEPT, "accept-always")
    if name == "abort-always":
        return ConstantPolicy(Action.ABORT, "abort-always")
    raise ValueError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# Episode cost
# ---------------------------------------------------------------------------


def answers_match(a, b) -> bool:
    num = (int, float)
    if isinstance(a, num) and isinstance(b, num) and not isinstance(a, bool) and not isinstance(b, bool):
        return abs(float(a) - float(b)) < 1e-6
    return type(a) is type(b) and a == b


def episode_cost(trace, answer_record, gold, cost: CostModel | None = None) -> tuple[float, float, float]:
    """``(C, C_err, C_comp)`` with ``C = C_err + beta * C_comp``."""
    cost = cost or CostModel()
    wrong = not answers_match(answer_record.point_answer, gold)
    aset = answer_record.answer_set
    missed = aset is None or not aset.contains(gold)
    c_err = cost.err_weight * wrong + cost.err_weight * missed
    c_comp = sum(o.cost for o in trace.outcomes)
    return c_err + cost.beta * c_comp, float(c_err), float(c_comp)


# ---------------------------------------------------------------------------
# REINFORCE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Step:
    features: tuple[float, ...]
    allowed: tuple[bool, ...]
    action: Action


@dataclass(frozen=True)
class EpisodeSample:
    steps: tuple[Step, ...]
    reward: float


def steps_from_trace(trace) -> tuple[Step, ...]:
    return tuple(
        Step(o.decision.features, o.decision.allowed, o.action)
        for o in trace.outcomes
        if o.decision is not None and o.decision.features is not None
    )


@dataclass
class RewardBaseline:
    value: float = 0.0
    decay: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")

    def update(self, rewards: Sequence[float]) -> "RewardBaseline":
        mean = float(np.mean(rewards))
        return RewardBaseline(self.decay * self.value + (1.0 - self.decay) * mean, self.decay)


def batch_objective(weights: np.ndarray, episodes: Sequence[EpisodeSample], baseline: float) -> float:
    """``sum_e (R_e - b) sum_v log pi(a_v)``; its gradient is the update direction."""
    total = 0.0
    for ep in episodes:
        adv = ep.reward - baseline
        for st in ep.steps:
            p = masked_softmax(np.asarray(st.features) @ weights, np.asarray(st.allowed))
            total += adv * math.log(p[_ACTION_INDEX[st.action]])
    return total


def batch_gradient(weights: np.ndarray, episodes: Sequence[EpisodeSample], baseline: float) -> np.ndarray:
    grad = np.zeros_like(weights)
    for ep in episodes:
        adv = ep.reward - baseline
        if adv == 0:
            continue
        for st in ep.steps:
            x = np.asarray(st.features)
            p = masked_softmax(x @ weights, np.asarray(st.allowed))
            onehot = np.zeros(len(ACTIONS))
            onehot[_ACTION_INDEX[st.action]] = 1.0
            grad += adv * np.outer(x, onehot - p)
    return grad


def reinforce_update(
    episodes: Sequence[EpisodeSample],
    params: PolicyParams,
    baseline: RewardBaseline,
    lr: float,
) -> tuple[PolicyParams, RewardBaseline]:
    """One score-function step; the EMA baseline moves after the step."""
    if not episodes:
        raise EmptyBatch("reinforce_update needs at least one episode")
    grad = batch_gradient(params.weights, episodes, baseline.value)
    new = PolicyParams(params.weights + lr * grad, params.feature_names)
    return new, baseline.update([ep.reward for ep in episodes])


def save_policy(path: str | Path, params: PolicyParams, baseline: RewardBaseline | None = None) -> None:
    Path(path).write_text(json.dumps(params.to_json(baseline.value if baseline else None), indent=1) + "\n")


def load_policy(path: str | Path) -> PolicyParams:
    return PolicyParams.from_json(json.loads(Path(path).read_text()))
