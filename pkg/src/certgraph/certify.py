"""Nonconformity scoring, split-conformal calibration and set construction.

Each node type has a scorer ``s(x, z) >= 0``; a calibration pool of
``(features, truth)`` pairs turns it into a threshold ``tau`` such that the
set ``{z : s(x, z) <= tau}`` covers the truth with probability at least
``1 - delta`` for exchangeable test nodes.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import json
import math
import random
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dsl import NodeType
from .errors import DegenerateBox, EmptyPool, StaleCalibrator, TypeMismatch, WrongVariant
from .world import MAX_CANDIDATES, Detection, Value, value_from_json, value_to_json

DEFAULT_DELTA = 0.1
INF = math.inf


class ScorerVariant(str, enum.Enum):
    PROB_COMPLEMENT = "prob-complement"
    EDIT_DISTANCE = "edit-distance"
    BOX_IOU = "box-iou"
    NUMERIC_RESIDUAL = "numeric-residual"
    LEARNED_HEAD = "learned-head"


DEFAULT_VARIANT: dict[NodeType, ScorerVariant] = {
    NodeType.OCR: ScorerVariant.PROB_COMPLEMENT,
    NodeType.DET: ScorerVariant.BOX_IOU,
    NodeType.CHART: ScorerVariant.NUMERIC_RESIDUAL,
    NodeType.LOGIC: ScorerVariant.PROB_COMPLEMENT,
}

# None means the set is an interval and is never truncated
DEFAULT_K_MAX: dict[NodeType, int | None] = {
    NodeType.OCR: 5,
    NodeType.DET: 3,
    NodeType.CHART: None,
    NodeType.LOGIC: 5,
}

# Scale of the deterministic tie-break added to calibration and set scores.
# Discrete scores (integer residuals, off-list truths at 1.0) otherwise tie
# in large blocks and push coverage above 1 - delta + 1/(n+1).
TIE_EPS = 1e-9


# ---------------------------------------------------------------------------
# Geometry and distances
# ---------------------------------------------------------------------------


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise DegenerateBox(f"degenerate box {tuple(box)}")
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def box_distance(z: Detection, anchor: Detection) -> float:
    """``1 - IoU`` plus one if the labels disagree, so range is [0, 2]."""
    return 1.0 - iou(z.box, anchor.box) + (0.0 if z.label == anchor.label else 1.0)


def _is_number(z) -> bool:
    return isinstance(z, (int, float)) and not isinstance(z, bool)


def value_sort_key(z: Value) -> tuple:
    """Total order over mixed candidate values, used to break score ties."""
    if _is_number(z):
        return (0, float(z), "")
    if isinstance(z, str):
        return (1, 0.0, z)
    return (2, 0.0, z.label, z.box)


def check_value_type(node_type: NodeType, z) -> None:
    ok = {
        NodeType.OCR: isinstance(z, str),
        NodeType.DET: isinstance(z, Detection),
        NodeType.CHART: _is_number(z),
        NodeType.LOGIC: isinstance(z, str) or _is_number(z),
    }[node_type]
    if not ok:
        raise TypeMismatch(f"{type(z).__name__} candidate on a {node_type.value} node")


# ---------------------------------------------------------------------------
# Node features and scorers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeFeatures:
    """What a scorer sees of a node: its type and raw candidate list.

    ``candidates`` are ``(z, base_score)`` pairs with the MAP first.
    """

    node_type: NodeType
    candidates: tuple[tuple[Value, float], ...]
    parent_empty: bool = False

    @cached_property
    def probs(self) -> tuple[float, ...]:
        total = sum(p for _, p in self.candidates)
        if total <= 0:
            return tuple(1.0 / len(self.candidates) for _ in self.candidates) if self.candidates else ()
        return tuple(p / total for _, p in self.candidates)

    @cached_property
    def _index(self) -> dict:
        out: dict = {}
        for i, (z, _) in enumerate(self.candidates):
            out.setdefault(z, i)
        return out

    def index_of(self, z) -> int | None:
        try:
            return self._index.get(z)
        except TypeError:
            return None

    def prob_of(self, z) -> float:
        i = self.index_of(z)
        return 0.0 if i is None else self.probs[i]

    @property
    def map_value(self) -> Value | None:
        return self.candidates[0][0] if self.candidates else None

    @cached_property
    def digest(self) -> bytes:
        key = repr((self.node_type.value, [(value_to_json(z), p) for z, p in self.candidates], self.parent_empty))
        return hashlib.blake2b(key.encode(), digest_size=16).digest()

    @property
    def mu(self) -> float | None:
        """Predicted value ``mu`` of a numeric node: the MAP reading.

        The mode is used rather than the probability-weighted mean, which a
        single far-off distractor can drag away from every likely value.
        """
        return float(self.candidates[0][0]) if self.candidates else None

    def to_json(self) -> dict:
        return {
            "candidates": [[value_to_json(z), p] for z, p in self.candidates],
            "parent_empty": self.parent_empty,
        }

    @classmethod
    def from_json(cls, node_type: NodeType, d: Mapping) -> "NodeFeatures":
        cands = tuple((value_from_json(z), float(p)) for z, p in d["candidates"])
        return cls(node_type, cands, bool(d.get("parent_empty", False)))


HEAD_FEATURES = ("prob", "rank", "margin", "distance", "bias")
DEFAULT_PSI = (-4.0, 1.0, 0.0, 2.0, 0.0)


@dataclass(frozen=True)
class Scorer:
    node_type: NodeType
    variant: ScorerVariant
    psi: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.variant is ScorerVariant.LEARNED_HEAD:
            psi = self.psi if self.psi is not None else DEFAULT_PSI
            if len(psi) != len(HEAD_FEATURES):
                raise ValueError(f"psi must have {len(HEAD_FEATURES)} entries")
            object.__setattr__(self, "psi", tuple(float(v) for v in psi))
        compatible = {
            ScorerVariant.BOX_IOU: {NodeType.DET},
            ScorerVariant.NUMERIC_RESIDUAL: {NodeType.CHART},
            ScorerVariant.EDIT_DISTANCE: {NodeType.OCR, NodeType.LOGIC},
        }.get(self.variant)
        if compatible is not None and self.node_type not in compatible:
            raise WrongVariant(f"{self.variant.value} does not apply to {self.node_type.value}")


def default_scorer(node_type: NodeType) -> Scorer:
    return Scorer(node_type, DEFAULT_VARIANT[node_type])


def _distance(features: NodeFeatures, z: Value) -> float:
    """Type-specific distance of ``z`` from the node's point prediction."""
    anchor = features.map_value
    if anchor is None:
        return 1.0
    if isinstance(z, Detection):
        return box_distance(z, anchor)
    if features.node_type is NodeType.CHART:
        mu = features.mu
        return abs(float(z) - mu) / max(1.0, abs(mu))
    if _is_number(z) and _is_number(anchor):
        return abs(float(z) - float(anchor)) / max(1.0, abs(float(anchor)))
    a, b = str(z), str(anchor)
    return levenshtein(a, b) / max(1, len(a), len(b))


def head_features(features: NodeFeatures, z: Value) -> np.ndarray:
    """Per-candidate vector: normalized prob, rank, margin to MAP, distance, bias."""
    i = features.index_of(z)
    p = 0.0 if i is None else features.probs[i]
    rank = 1.0 if i is None else i / MAX_CANDIDATES
    p_map = features.probs[0] if features.probs else 0.0
    return np.array([p, rank, p_map - p, _distance(features, z), 1.0])


def _softplus(x):
    return np.logaddexp(0.0, x)


def score(scorer: Scorer, features: NodeFeatures, z: Value) -> float:
    """Nonconformity of candidate ``z``; always ``>= 0``."""
    if features.node_type is not scorer.node_type:
        raise TypeMismatch(f"{scorer.node_type.value} scorer on {features.node_type.value} features")
    check_value_type(features.node_type, z)
    v = scorer.variant
    if v is ScorerVariant.PROB_COMPLEMENT:
        return max(0.0, 1.0 - features.prob_of(z))
    if v is ScorerVariant.EDIT_DISTANCE:
        anchor = features.map_value
        return float(levenshtein(str(z), str(anchor)) if anchor is not None else len(str(z)))
    if v is ScorerVariant.BOX_IOU:
        anchor = features.map_value
        return 2.0 if anchor is None else box_distance(z, anchor)
    if v is ScorerVariant.NUMERIC_RESIDUAL:
        mu = features.mu
        return INF if mu is None else abs(float(z) - mu)
    return float(_softplus(head_features(features, z) @ np.asarray(scorer.psi)))


def tie_break(features: NodeFeatures, z: Value) -> float:
    """Pseudo-uniform draw in ``[0, 1)`` fixed by the node and the value."""
    v = float(z) if _is_number(z) else z
    h = hashlib.blake2b(features.digest + repr(value_to_json(v)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big") / 2.0**64


def ranked_score(scorer: Scorer, features: NodeFeatures, z: Value) -> float:
    """``score`` plus a ``TIE_EPS``-scale tie-break; what calibration and sets compare."""
    return score(scorer, features, z) + TIE_EPS * tie_break(features, z)


# ---------------------------------------------------------------------------
# Pools
# ---------------------------------------------------------------------------


PROVENANCES = ("base", "selfplay")


@dataclass(frozen=True)
class PoolExample:
    features: NodeFeatures
    truth: Value
    provenance: str = "base"


@dataclass(frozen=True)
class CalibrationPool:
    """Append-only pool; every append yields a new value with a bumped version."""

    node_type: NodeType
    examples: tuple[PoolExample, ...] = ()
    version: int = 0

    def __len__(self) -> int:
        return len(self.examples)

    def count(self, provenance: str) -> int:
        return sum(1 for e in self.examples if e.provenance == provenance)


def _as_example(node_type: NodeType, example, provenance: str) -> PoolExample:
    if provenance not in PROVENANCES:
        raise ValueError(f"unknown provenance {provenance!r}")
    if isinstance(example, PoolExample):
        feats, truth = example.features, example.truth
    else:
        feats, truth = example
    if feats.node_type is not node_type:
        raise TypeMismatch(f"{feats.node_type.value} example for a {node_type.value} pool")
    check_value_type(node_type, truth)
    return PoolExample(feats, truth, provenance)


def append_pool(pool: CalibrationPool, example, provenance: str = "base") -> CalibrationPool:
    ex = _as_example(pool.node_type, example, provenance)
    return CalibrationPool(pool.node_type, pool.examples + (ex,), pool.version + 1)


def extend_pool(pool: CalibrationPool, examples: Iterable, provenance: str = "base") -> CalibrationPool:
    new = tuple(_as_example(pool.node_type, e, provenance) for e in examples)
    if not new:
        return pool
    return CalibrationPool(pool.node_type, pool.examples + new, pool.version + len(new))


def save_pool(pool: CalibrationPool, path: str | Path) -> None:
    with open(path, "w") as fh:
        for e in pool.examples:
            row = {
                "type": pool.node_type.value,
                "features": e.features.to_json(),
                "truth": value_to_json(e.truth),
                "provenance": e.provenance,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_pool(path: str | Path, node_type: NodeType | None = None) -> CalibrationPool:
    examples = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        t = NodeType(row["type"])
        if node_type is None:
            node_type = t
        elif t is not node_type:
            raise TypeMismatch(f"{t.value} example in a {node_type.value} pool file")
        examples.append(PoolExample(NodeFeatures.from_json(t, row["features"]), value_from_json(row["truth"]), row["provenance"]))
    if node_type is None:
        raise EmptyPool(f"{path} holds no examples")
    return CalibrationPool(node_type, tuple(examples), len(examples))


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def conformal_rank(n: int, delta: float) -> int:
    """``k = ceil((n + 1)(1 - delta))``, robust to float round-off."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta={delta} outside (0, 1)")
    return math.ceil(round((n + 1) * (1.0 - delta), 9))


def conformal_threshold(scores: Sequence[float], delta: float) -> tuple[float, int]:
    """Return ``(tau, k)``: the k-th smallest score, or +inf when k > n."""
    n = len(scores)
    if n == 0:
        raise EmptyPool("cannot calibrate on an empty pool")
    k = conformal_rank(n, delta)
    if k > n:
        return INF, k
    return float(np.partition(np.asarray(scores, dtype=float), k - 1)[k - 1]), k


@dataclass(frozen=True)
class ConformalCalibrator:
    node_type: NodeType
    delta: float
    threshold: float
    k: int
    n: int
    variant: ScorerVariant
    psi: tuple[float, ...] | None = None
    sorted_scores: tuple[float, ...] = field(default=(), repr=False, compare=False)
    pool_version: int | None = None

    @property
    def scorer(self) -> Scorer:
        return Scorer(self.node_type, self.variant, self.psi)

    def to_json(self) -> dict:
        return {
            "type": self.node_type.value,
            "delta": self.delta,
            "threshold": None if math.isinf(self.threshold) else self.threshold,
            "n": self.n,
            "k": self.k,
            "variant": self.variant.value,
            "psi": list(self.psi) if self.psi is not None else None,
            "pool_version": self.pool_version,
            "scores": [None if math.isinf(v) else v for v in self.sorted_scores],
        }

    def rank_of(self, s: float) -> float:
        """Fraction of calibration scores strictly below ``s`` (type-free hardness)."""
        if not self.sorted_scores:
            return 1.0 if s > self.threshold else 0.0
        return bisect.bisect_left(self.sorted_scores, s) / len(self.sorted_scores)

    @classmethod
    def from_json(cls, d: Mapping) -> "ConformalCalibrator":
        thr = d["threshold"]
        node_type = NodeType(d["type"])
        n = int(d["n"])
        return cls(
            node_type=node_type,
            delta=float(d["delta"]),
            threshold=INF if thr is None else float(thr),
            k=int(d.get("k", conformal_rank(n, float(d["delta"])))),
            n=n,
            variant=ScorerVariant(d.get("variant", DEFAULT_VARIANT[node_type].value)),
            psi=tuple(d["psi"]) if d.get("psi") is not None else None,
            pool_version=d.get("pool_version"),
            sorted_scores=tuple(INF if v is None else float(v) for v in d.get("scores", ())),
        )


def pool_scores(pool: CalibrationPool, scorer: Scorer) -> list[float]:
    return [ranked_score(scorer, e.features, e.truth) for e in pool.examples]


def calibrate(pool: CalibrationPool, delta: float = DEFAULT_DELTA, scorer: Scorer | None = None) -> ConformalCalibrator:
    if len(pool) == 0:
        raise EmptyPool(f"{pool.node_type.value} pool is empty")
    scorer = scorer or default_scorer(pool.node_type)
    if scorer.node_type is not pool.node_type:
        raise TypeMismatch(f"{scorer.node_type.value} scorer for a {pool.node_type.value} pool")
    scores = sorted(pool_scores(pool, scorer))
    tau, k = conformal_threshold(scores, delta)
    return ConformalCalibrator(
        pool.node_type, delta, tau, k, len(scores), scorer.variant, scorer.psi, tuple(scores), pool.version
    )


def ensure_fresh(calibrator: ConformalCalibrator, pool: CalibrationPool) -> None:
    """Raise if the pool was appended to after the calibrator was fit."""
    if calibrator.pool_version is not None and (
        calibrator.pool_version != pool.version or calibrator.n != len(pool)
    ):
        raise StaleCalibrator(
            f"{pool.node_type.value} calibrator fit at pool version {calibrator.pool_version}, pool is at {pool.version}"
        )


def calibrate_all(
    pools: Mapping[NodeType, CalibrationPool],
    delta: float = DEFAULT_DELTA,
    scorers: Mapping[NodeType, Scorer] | None = None,
) -> dict[NodeType, ConformalCalibrator]:
    scorers = scorers or {}
    return {t: calibrate(p, delta, scorers.get(t)) for t, p in pools.items() if len(p)}


# ---------------------------------------------------------------------------
# Conformal sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConformalSet:
    """Set-valued node output.

    ``members`` are ``(z, score, prob)`` sorted by ascending score. Numeric
    sets additionally carry ``interval``; members then list the candidates
    inside it. ``truncated`` flags sets cut down to ``K_max``.
    """

    node_type: NodeType
    tau: float
    members: tuple[tuple[Value, float, float], ...]
    interval: tuple[float, float] | None = None
    truncated: bool = False
    features: NodeFeatures | None = field(default=None, repr=False, compare=False)
    scorer: Scorer | None = field(default=None, repr=False, compare=False)

    @property
    def is_empty(self) -> bool:
        return self.interval is None and not self.members

    @property
    def set_size(self) -> float:
        if self.interval is not None:
            return self.interval[1] - self.interval[0]
        return float(len(self.members))

    @property
    def values(self) -> list[Value]:
        return [z for z, _, _ in self.members]

    @property
    def dispersion(self) -> float:
        if len(self.members) <= 1:
            return 0.0
        return self.members[-1][1] - self.members[0][1]

    @property
    def cutoff(self) -> float:
        """Score level actually realized: tau, or the last kept score if truncated."""
        return self.members[-1][1] if self.truncated else self.tau

    def contains(self, z: Value) -> bool:
        """Coverage test for a (true) value: ``ranked_score(z) <= cutoff``.

        This is the set ``{z : s(x, z) <= tau}`` itself, so a value missing
        from the candidate list is covered once tau reaches its score. Sets
        without a scorer (MAP singletons) fall back to interval or member
        tests.
        """
        if self.features is not None and self.scorer is not None:
            if self.interval is not None and not _is_number(z):
                return False
            return ranked_score(self.scorer, self.features, z) <= self.cutoff
        if self.interval is not None:
            return _is_number(z) and self.interval[0] <= float(z) <= self.interval[1]
        return any(_same(z, m) for m in self.values)

    def to_json(self) -> dict:
        return {
            "type": self.node_type.value,
            "tau": None if math.isinf(self.tau) else self.tau,
            "members": [[value_to_json(z), s, p] for z, s, p in self.members],
            "interval": list(self.interval) if self.interval is not None else None,
            "truncated": self.truncated,
        }


def _same(a, b) -> bool:
    if _is_number(a) and _is_number(b):
        return float(a) == float(b)
    return type(a) is type(b) and a == b


def empty_set(node_type: NodeType, tau: float = 0.0) -> ConformalSet:
    return ConformalSet(node_type, tau, ())


def conformal_set(
    features: NodeFeatures,
    scorer: Scorer,
    calibrator: ConformalCalibrator,
    k_max: int | None = None,
) -> ConformalSet:
    """Filter candidates at ``s <= tau``, sort ascending, truncate to ``k_max``.

    Score ties are broken by :func:`value_sort_key`. A numeric-residual
    scorer yields the interval ``[mu - tau, mu + tau]`` instead, listing the
    candidates inside it as members.
    """
    if calibrator.node_type is not features.node_type:
        raise TypeMismatch(f"{calibrator.node_type.value} calibrator on a {features.node_type.value} node")
    if calibrator.variant is not scorer.variant:
        raise WrongVariant(f"calibrator fit for {calibrator.variant.value}, scorer is {scorer.variant.value}")
    tau = calibrator.threshold
    probs = features.probs
    scored = [(z, ranked_score(scorer, features, z), probs[i]) for i, (z, _) in enumerate(features.candidates)]
    kept = sorted((m for m in scored if m[1] <= tau), key=lambda m: (m[1], value_sort_key(m[0])))
    if scorer.variant is ScorerVariant.NUMERIC_RESIDUAL:
        if features.mu is None:
            return ConformalSet(features.node_type, tau, (), None, False, features, scorer)
        mu = features.mu
        return ConformalSet(
            features.node_type, tau, tuple(kept[:MAX_CANDIDATES]), (mu - tau, mu + tau), False, features, scorer
        )
    if k_max is not None and k_max < 1:
        raise ValueError("k_max must be >= 1")
    truncated = k_max is not None and len(kept) > k_max
    if truncated:
        kept = kept[:k_max]
    return ConformalSet(features.node_type, tau, tuple(kept), None, truncated, features, scorer)


# ---------------------------------------------------------------------------
# Margin training of the learned head
# ---------------------------------------------------------------------------


def hinge_loss(psi: np.ndarray, X: np.ndarray, tau: float, eps: float) -> float:
    """Mean of ``max(0, softplus(X psi) - tau - eps)`` with tau held fixed."""
    if math.isinf(tau):
        return 0.0
    s = _softplus(X @ psi)
    return float(np.mean(np.maximum(0.0, s - tau - eps)))


def hinge_grad(psi: np.ndarray, X: np.ndarray, tau: float, eps: float) -> np.ndarray:
    if math.isinf(tau):
        return np.zeros_like(psi)
    u = X @ psi
    active = _softplus(u) - tau - eps > 0
    sig = 1.0 / (1.0 + np.exp(-u))
    return (X[active] * sig[active, None]).sum(axis=0) / len(X)


def _fit_tau(psi: np.ndarray, X: np.ndarray, delta: float) -> float:
    return conformal_threshold(_softplus(X @ psi), delta)[0]


def margin_objective(psi: np.ndarray, X: np.ndarray, delta: float, eps: float) -> float:
    """Hinge loss with tau recomputed from the same scores."""
    return hinge_loss(psi, X, _fit_tau(psi, X, delta), eps)


@dataclass(frozen=True)
class MarginFit:
    psi: tuple[float, ...]
    losses: tuple[float, ...]
    validate_loss: float | None
    tau: float


def train_scorer_margin(
    pool: CalibrationPool,
    delta: float = DEFAULT_DELTA,
    eps: float = 0.01,
    lr: float = 0.5,
    epochs: int = 50,
    scorer: Scorer | None = None,
    seed: int = 0,
) -> MarginFit:
    """Gradient descent on the certificate hinge over the fit half of the pool.

    tau is recomputed on the fit half at every epoch and treated as a
    constant inside the step. A step is accepted only if the objective with
    the refreshed tau does not increase (halving the step otherwise), so the
    recorded training losses are non-increasing. The hinge alone does not
    penalize large sets; a collapsed head is a valid minimizer.
    """
    scorer = scorer or Scorer(pool.node_type, ScorerVariant.LEARNED_HEAD)
    if scorer.variant is not ScorerVariant.LEARNED_HEAD:
        raise WrongVariant("margin training needs the learned-head variant")
    if len(pool) == 0:
        raise EmptyPool(f"{pool.node_type.value} pool is empty")
    order = list(range(len(pool)))
    random.Random(seed).shuffle(order)
    half = (len(order) + 1) // 2
    rows = np.array([head_features(pool.examples[i].features, pool.examples[i].truth) for i in order])
    X_fit, X_val = rows[:half], rows[half:]
    psi = np.asarray(scorer.psi, dtype=float)
    loss = margin_objective(psi, X_fit, delta, eps)
    losses = [loss]
    for _ in range(epochs):
        tau = _fit_tau(psi, X_fit, delta)
        g = hinge_grad(psi, X_fit, tau, eps)
        if not np.any(g):
            losses.append(loss)
            continue
        step = lr
        for _ in range(30):
            cand = psi - step * g
            new = margin_objective(cand, X_fit, delta, eps)
            if new <= loss:
                psi, loss = cand, new
                break
            step *= 0.5
        losses.append(loss)
    tau = _fit_tau(psi, X_fit, delta)
    val = hinge_loss(psi, X_val, tau, eps) if len(X_val) else None
    return MarginFit(tuple(float(v) for v in psi), tuple(losses), val, tau)


def with_psi(scorer: Scorer, psi: Sequence[float]) -> Scorer:
    return replace(scorer, psi=tuple(float(v) for v in psi))
