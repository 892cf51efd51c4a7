"""Synthetic scenes and stochastic tool oracles.

A :class:`WorldInstance` is a structured stand-in for a document or chart:
text fields, labelled objects and chart bars laid out on 1000x1000 panels,
plus a query whose gold answer is a deterministic function of the truths.
Tool oracles emulate OCR, detection and chart parsing with a documented,
seeded noise process; every function here is pure given its seed.
"""

from __future__ import annotations

import enum
import json
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

from .dsl import NodeKind, NodeSpec, NodeType, Region
from .errors import RegionOutOfBounds, UnknownKind, Unresolvable
from .seeding import derive_seed

SCENE_SIZE = 1000.0
ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
LABELS = ("car", "cat", "dog", "sign", "tree")
QUERY_KINDS = ("lookup", "sum", "compare", "count")
DIFFICULTIES = ("easy", "medium", "hard")
MAX_CANDIDATES = 16
MIN_OVERLAP = 0.25
CHART_RESOLUTION = 1.0

# visually confusable symbols; anything absent falls back to a random symbol
_CONFUSABLE = {
    "O": "0DQ", "0": "OD8", "D": "0O", "Q": "O0",
    "I": "1LT", "1": "I7L", "L": "I1", "T": "7I",
    "S": "58", "5": "S6", "B": "83", "8": "B3",
    "Z": "27", "2": "Z7", "G": "6C", "6": "G5",
    "A": "4", "4": "A", "E": "FB", "F": "EP",
    "P": "FR", "R": "PK", "U": "VO", "V": "UY",
    "M": "NW", "N": "MH", "W": "MV", "H": "NK",
    "C": "GO", "K": "XR", "X": "KY", "Y": "VX",
    "J": "I", "3": "8B", "7": "1T", "9": "8",
}

_FIELD_RANGE = {"easy": (3, 5), "medium": (6, 10), "hard": (11, 20)}
_SERIES_RANGE = {"easy": (2, 3), "medium": (3, 4), "hard": (4, 6)}
_OBJECT_RANGE = {"easy": (2, 3), "medium": (3, 4), "hard": (4, 6)}
_DIFFICULTY_DISTRACTORS = {"easy": 0, "medium": 1, "hard": 2}
_GRID_COLS, _GRID_ROWS = 4, 5


@dataclass(frozen=True)
class NoiseConfig:
    """Observation noise of the tool oracles.

    ``miss_prob``, ``fusion_prior_mass``, ``skew_deg`` and ``panel_leak`` go
    beyond the core knobs: they model tools returning nothing, the fraction
    of unexplained evidence mass the fuser hands to its ungrounded prior,
    geometric skew and cross-panel reading leaks.
    """

    char_confusion_prob: float = 0.04
    box_jitter_sigma: float = 6.0
    numeric_noise_sigma: float = 0.02
    distractor_count: int = 0
    fidelity_gain: float = 0.3
    miss_prob: float = 0.03
    fusion_prior_mass: float = 0.5
    skew_deg: float = 0.0
    panel_leak: float = 0.0

    def __post_init__(self) -> None:
        for name in ("char_confusion_prob", "miss_prob", "fusion_prior_mass", "panel_leak"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.box_jitter_sigma < 0 or self.numeric_noise_sigma < 0 or self.skew_deg < 0:
            raise ValueError("noise scales must be non-negative")
        if self.distractor_count < 0 or int(self.distractor_count) != self.distractor_count:
            raise ValueError("distractor_count must be a non-negative integer")
        if not 0.0 < self.fidelity_gain <= 1.0:
            raise ValueError("fidelity_gain must lie in (0, 1]")

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0, 0.5, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NoiseConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def default_noise(difficulty: str, base: NoiseConfig | None = None) -> NoiseConfig:
    base = base or NoiseConfig()
    return replace(base, distractor_count=base.distractor_count + _DIFFICULTY_DISTRACTORS[difficulty])


@dataclass(frozen=True)
class Detection:
    """Candidate/truth value of a det-box node."""

    box: tuple[float, float, float, float]
    label: str

    def to_json(self) -> dict:
        return {"box": list(self.box), "label": self.label}


Value = Union[str, float, int, Detection]


def value_to_json(z: Value):
    return z.to_json() if isinstance(z, Detection) else z


def value_from_json(v) -> Value:
    if isinstance(v, dict):
        return Detection(tuple(float(c) for c in v["box"]), v["label"])
    return v


@dataclass(frozen=True)
class TextField:
    key: str
    region: Region
    truth: str


@dataclass(frozen=True)
class SceneObject:
    key: str
    region: Region
    truth_box: tuple[float, float, float, float]
    label: str


@dataclass(frozen=True)
class ChartSeries:
    key: str
    region: Region
    truth_value: float


@dataclass(frozen=True)
class Query:
    kind: str
    targets: tuple[str, ...]
    label: str | None = None

    @property
    def text(self) -> str:
        if self.kind == "lookup":
            return f"What is written in field {self.targets[0]}?"
        if self.kind == "sum":
            return f"What is {self.targets[0]} plus {self.targets[1]}?"
        if self.kind == "compare":
            return f"Which is larger, {self.targets[0]} or {self.targets[1]}?"
        return f"How many {self.label} objects are there?"


@dataclass(frozen=True)
class WorldInstance:
    seed: int
    difficulty: str
    n_images: int
    text_fields: tuple[TextField, ...]
    objects: tuple[SceneObject, ...]
    chart_series: tuple[ChartSeries, ...]
    query: Query
    gold_answer: Value
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def field_by_key(self, key: str) -> TextField:
        return next(f for f in self.text_fields if f.key == key)

    def series_by_key(self, key: str) -> ChartSeries:
        return next(s for s in self.chart_series if s.key == key)

    def object_by_key(self, key: str) -> SceneObject:
        return next(o for o in self.objects if o.key == key)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "difficulty": self.difficulty,
            "n_images": self.n_images,
            "text_fields": [{"key": f.key, "region": f.region.to_dict(), "truth": f.truth} for f in self.text_fields],
            "objects": [
                {"key": o.key, "region": o.region.to_dict(), "truth_box": list(o.truth_box), "label": o.label}
                for o in self.objects
            ],
            "chart_series": [
                {"key": s.key, "region": s.region.to_dict(), "truth_value": s.truth_value} for s in self.chart_series
            ],
            "query": {"kind": self.query.kind, "targets": list(self.query.targets), "label": self.query.label},
            "gold_answer": value_to_json(self.gold_answer),
            "noise": asdict(self.noise),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorldInstance":
        q = d["query"]
        return cls(
            seed=d["seed"],
            difficulty=d["difficulty"],
            n_images=d["n_images"],
            text_fields=tuple(TextField(f["key"], Region.from_dict(f["region"]), f["truth"]) for f in d["text_fields"]),
            objects=tuple(
                SceneObject(o["key"], Region.from_dict(o["region"]), tuple(o["truth_box"]), o["label"])
                for o in d["objects"]
            ),
            chart_series=tuple(
                ChartSeries(s["key"], Region.from_dict(s["region"]), float(s["truth_value"])) for s in d["chart_series"]
            ),
            query=Query(q["kind"], tuple(q["targets"]), q.get("label")),
            gold_answer=value_from_json(d["gold_answer"]),
            noise=NoiseConfig.from_dict(d["noise"]),
        )


# ---------------------------------------------------------------------------
# Instance generation
# ---------------------------------------------------------------------------


def _random_string(rng: random.Random, lo: int = 3, hi: int = 10) -> str:
    return "".join(rng.choice(ALPHABET) for _ in range(rng.randint(lo, hi)))


def gold_for(query: Query, fields: Sequence[TextField], objects: Sequence[SceneObject], series: Sequence[ChartSeries]) -> Value:
    if query.kind == "lookup":
        return next(f.truth for f in fields if f.key == query.targets[0])
    values = {s.key: s.truth_value for s in series}
    if query.kind == "sum":
        return round(values[query.targets[0]] + values[query.targets[1]], 6)
    if query.kind == "compare":
        a, b = query.targets
        return a if values[a] >= values[b] else b
    if query.kind == "count":
        labels = {o.key: o.label for o in objects}
        return sum(1 for k in query.targets if labels[k] == query.label)
    raise UnknownKind(f"unknown query kind {query.kind!r}")


def generate_instance(
    seed: int,
    difficulty: str = "easy",
    *,
    noise: NoiseConfig | None = None,
    kind: str | None = None,
) -> WorldInstance:
    """Sample a scene deterministically from ``(seed, difficulty)``.

    ``noise=None`` uses :func:`default_noise` for the difficulty; an explicit
    config is taken verbatim. ``kind`` pins the query kind.
    """
    if difficulty not in _FIELD_RANGE:
        raise UnknownKind(f"unknown difficulty {difficulty!r}")
    if kind is not None and kind not in QUERY_KINDS:
        raise UnknownKind(f"unknown query kind {kind!r}")
    rng = random.Random(derive_seed("world", seed, difficulty))
    n_fields = rng.randint(*_FIELD_RANGE[difficulty])
    n_series = rng.randint(*_SERIES_RANGE[difficulty])
    n_objects = rng.randint(*_OBJECT_RANGE[difficulty])
    total = n_fields + n_series + n_objects
    cells_per_image = _GRID_COLS * _GRID_ROWS
    n_images = -(-total // cells_per_image)
    slots = rng.sample(range(n_images * cells_per_image), total)
    cw, ch = SCENE_SIZE / _GRID_COLS, SCENE_SIZE / _GRID_ROWS

    def cell_box(slot: int, mx: tuple[float, float], my: tuple[float, float]) -> Region:
        img, cell = divmod(slot, cells_per_image)
        cx, cy = (cell % _GRID_COLS) * cw, (cell // _GRID_COLS) * ch
        box = (
            round(cx + rng.uniform(*mx), 1),
            round(cy + rng.uniform(*my), 1),
            round(cx + cw - rng.uniform(*mx), 1),
            round(cy + ch - rng.uniform(*my), 1),
        )
        return Region(img, box)

    fields = []
    truths: set[str] = set()
    for i in range(n_fields):
        truth = _random_string(rng)
        while truth in truths:
            truth = _random_string(rng)
        truths.add(truth)
        fields.append(TextField(f"F{i}", cell_box(slots[i], (10, 40), (40, 70)), truth))
    values = rng.sample(range(10, 100), n_series)
    series = [
        ChartSeries(chr(ord("A") + j), cell_box(slots[n_fields + j], (60, 90), (10, 30)), float(values[j]))
        for j in range(n_series)
    ]
    objects = []
    for j in range(n_objects):
        region = cell_box(slots[n_fields + n_series + j], (8, 15), (8, 15))
        x0, y0, x1, y1 = region.bbox
        w, h = x1 - x0, y1 - y0
        tb = (
            round(x0 + rng.uniform(0.1, 0.25) * w, 1),
            round(y0 + rng.uniform(0.1, 0.25) * h, 1),
            round(x1 - rng.uniform(0.1, 0.25) * w, 1),
            round(y1 - rng.uniform(0.1, 0.25) * h, 1),
        )
        objects.append(SceneObject(f"o{j}", region, tb, rng.choice(LABELS)))

    qkind = kind or rng.choice(QUERY_KINDS)
    if qkind == "lookup":
        query = Query("lookup", (rng.choice(fields).key,))
    elif qkind in ("sum", "compare"):
        a, b = rng.sample([s.key for s in series], 2)
        query = Query(qkind, (a, b))
    else:
        label = rng.choice(objects).label
        query = Query("count", tuple(o.key for o in objects), label)

    return WorldInstance(
        seed=seed,
        difficulty=difficulty,
        n_images=n_images,
        text_fields=tuple(fields),
        objects=tuple(objects),
        chart_series=tuple(series),
        query=query,
        gold_answer=gold_for(query, fields, objects, series),
        noise=noise if noise is not None else default_noise(difficulty),
    )


# ---------------------------------------------------------------------------
# Geometry helpers shared with the oracles
# ---------------------------------------------------------------------------


def _intersection(a: Sequence[float], b: Sequence[float]) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return w * h if w > 0 and h > 0 else 0.0


def _area(b: Sequence[float]) -> float:
    return (b[2] - b[0]) * (b[3] - b[1])


def _check_region(world: WorldInstance, region: Region) -> None:
    x0, y0, x1, y1 = region.bbox
    if region.image_index >= world.n_images:
        raise RegionOutOfBounds(f"image {region.image_index} but instance has {world.n_images}")
    if x0 < 0 or y0 < 0 or x1 > SCENE_SIZE or y1 > SCENE_SIZE:
        raise RegionOutOfBounds(f"bbox {region.bbox} outside the {SCENE_SIZE:g}x{SCENE_SIZE:g} scene")


def _resolve(items: Iterable, region: Region, box_of) -> tuple[object, float] | None:
    """Item with the largest intersection, and the covered fraction of it."""
    best, best_inter = None, 0.0
    for item in items:
        if item.region.image_index != region.image_index:
            continue
        inter = _intersection(region.bbox, box_of(item))
        if inter > best_inter:
            best, best_inter = item, inter
    if best is None:
        return None
    frac = best_inter / _area(box_of(best))
    return (best, frac) if frac >= MIN_OVERLAP else None


def _items_for(world: WorldInstance, node_type: NodeType):
    if node_type is NodeType.OCR:
        return world.text_fields, (lambda f: f.region.bbox)
    if node_type is NodeType.DET:
        return world.objects, (lambda o: o.truth_box)
    if node_type is NodeType.CHART:
        return world.chart_series, (lambda s: s.region.bbox)
    raise Unresolvable(f"{node_type} is not a tool node type")


# ---------------------------------------------------------------------------
# Tool oracles
# ---------------------------------------------------------------------------


def confuse(ch: str, rng: random.Random, exclude: str = "") -> str:
    """Draw a symbol a recognizer might mistake ``ch`` for (never ``ch``)."""
    options = [c for c in _CONFUSABLE.get(ch, "") if c in ALPHABET and c != ch and c not in exclude]
    if options and rng.random() < 0.8:
        return rng.choice(options)
    while True:
        c = rng.choice(ALPHABET)
        if c != ch and c not in exclude:
            return c


def ocr_positions(truth: str, p: float, eps: float, rng: random.Random) -> list[tuple[str, str, float]]:
    """Per-character (top, runner-up, top-confidence) triples.

    Each character is corrupted with probability ``p``: the top reading is a
    confusion and the truth is runner-up with probability 0.9, at
    confidence U(0.5, 0.8). Clean characters read correctly at confidence
    ``1 - eps * U(0, 1)`` with a confusion as runner-up.
    """
    out = []
    for c in truth:
        if rng.random() < p:
            top = confuse(c, rng)
            alt = c if rng.random() < 0.9 else confuse(c, rng, exclude=top)
            conf = 0.5 + 0.3 * rng.random()
        else:
            top = c
            alt = confuse(c, rng)
            conf = 1.0 - eps * rng.random()
        out.append((top, alt, conf))
    return out


def beam_top_k(positions: Sequence[tuple[str, str, float]], k: int) -> list[tuple[str, float]]:
    """Exact top-``k`` strings under independent per-position choices."""
    beam: list[tuple[str, float]] = [("", 1.0)]
    for top, alt, conf in positions:
        grown = []
        for prefix, p in beam:
            grown.append((prefix + top, p * conf))
            if conf < 1.0:
                grown.append((prefix + alt, p * (1.0 - conf)))
        grown.sort(key=lambda t: -t[1])
        beam = grown[:k]
    return beam


def _merge_injected(base: list[tuple[Value, float]], injected: list[tuple[Value, float]]) -> list[tuple[Value, float]]:
    raw = sum(m for _, m in injected)
    mass = min(0.9, raw)
    if injected:
        injected = [(z, m * mass / raw) for z, m in injected]
    keep = MAX_CANDIDATES - len(injected)
    merged: dict = {}
    order: list = []
    for z, p in base[:keep]:
        if z not in merged:
            order.append(z)
        merged[z] = merged.get(z, 0.0) + p * (1.0 - mass)
    for z, m in injected:
        if z not in merged:
            order.append(z)
        merged[z] = merged.get(z, 0.0) + m
    out = [(z, merged[z]) for z in order if merged[z] > 0.0]
    out.sort(key=lambda t: -t[1])
    return out[:MAX_CANDIDATES]


def _noise_scale(noise: NoiseConfig, fidelity: int, overlap: float) -> float:
    return noise.fidelity_gain ** (fidelity - 1) * (1.0 + noise.skew_deg / 5.0) * (1.0 + 2.0 * (1.0 - overlap))


def _jitter_box(box: Sequence[float], sigma: float, rng: random.Random) -> tuple[float, float, float, float]:
    if sigma == 0:
        return tuple(box)
    x0, y0, x1, y1 = (c + rng.gauss(0.0, sigma) for c in box)
    x0, x1 = sorted((x0, x1))
    y0, y1 = sorted((y0, y1))
    if x1 - x0 < 1.0:
        x1 = x0 + 1.0
    if y1 - y0 < 1.0:
        y1 = y0 + 1.0
    return (x0, y0, x1, y1)


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def tool_oracle(
    node_type: NodeType,
    world: WorldInstance,
    region: Region,
    prompt: str,
    fidelity: int,
    seed: int,
) -> list[tuple[Value, float]]:
    """Candidates ``[(z, base_score), ...]`` from an emulated perception tool.

    Candidate 0 is the tool's MAP reading and base scores sum to at most 1.
    An empty list means the tool found nothing (no scene content under the
    region, or a miss). All noise scales by ``fidelity_gain**(fidelity-1)``.
    """
    _check_region(world, region)
    items, box_of = _items_for(world, node_type)
    hit = _resolve(items, region, box_of)
    if hit is None:
        return []
    item, overlap = hit
    noise = world.noise
    lam = _noise_scale(noise, fidelity, overlap)
    rng = random.Random(derive_seed("tool", seed, node_type.value, fidelity, region.image_index, region.bbox, prompt))
    if rng.random() < min(1.0, noise.miss_prob * lam):
        return []
    distract_scale = noise.fidelity_gain ** (fidelity - 1)
    if node_type is NodeType.OCR:
        return _ocr(world, item, noise, lam, distract_scale, rng)
    if node_type is NodeType.DET:
        return _det(world, item, noise, lam, distract_scale, rng)
    return _chart(world, item, noise, lam, distract_scale, rng)


def _leak_value(world: WorldInstance, item, rng: random.Random, noise: NoiseConfig, pick) -> list:
    if noise.panel_leak > 0 and rng.random() < noise.panel_leak:
        others = [o for o in pick if o is not item]
        if others:
            return [rng.choice(others)]
    return []


def _ocr(world, item: TextField, noise, lam, dscale, rng) -> list[tuple[Value, float]]:
    p = min(0.9, noise.char_confusion_prob * lam)
    eps = min(0.5, 2.0 * noise.char_confusion_prob * lam)
    beam = beam_top_k(ocr_positions(item.truth, p, eps, rng), MAX_CANDIDATES)
    injected = []
    for _ in range(noise.distractor_count):
        n = max(3, len(item.truth) + rng.randint(-1, 1))
        injected.append((_random_string(rng, n, n), rng.uniform(0.02, 0.12) * dscale))
    for other in _leak_value(world, item, rng, noise, world.text_fields):
        injected.append((other.truth, rng.uniform(0.2, 0.7)))
    return _merge_injected(beam, injected)


def _det(world, item: SceneObject, noise, lam, dscale, rng) -> list[tuple[Value, float]]:
    sigma = noise.box_jitter_sigma * lam
    p_lab = min(0.9, noise.char_confusion_prob * lam)

    def label(p: float) -> str:
        if rng.random() < p:
            return rng.choice([l for l in LABELS if l != item.label])
        return item.label

    map_det = Detection(_jitter_box(item.truth_box, sigma, rng), label(p_lab))
    w0 = 0.45 + 0.3 * rng.random()
    rest = [rng.random() for _ in range(4)]
    norm = sum(rest) + 0.25
    base = [(map_det, w0)]
    for r in sorted(rest, reverse=True):
        alt = Detection(_jitter_box(item.truth_box, 1.5 * sigma, rng), label(min(0.9, 2 * p_lab)))
        base.append((alt, (1.0 - w0) * r / norm))
    injected = []
    x0, y0, x1, y1 = item.region.bbox
    for _ in range(noise.distractor_count):
        cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        s = rng.uniform(15, 40)
        injected.append((Detection((cx - s, cy - s, cx + s, cy + s), rng.choice(LABELS)), rng.uniform(0.02, 0.12) * dscale))
    for other in _leak_value(world, item, rng, noise, world.objects):
        injected.append((Detection(tuple(other.truth_box), other.label), rng.uniform(0.2, 0.7)))
    return _merge_injected(_dedupe(base), injected)


def _dedupe(cands: list[tuple[Value, float]]) -> list[tuple[Value, float]]:
    merged: dict = {}
    for z, p in cands:
        merged[z] = merged.get(z, 0.0) + p
    out = list(merged.items())
    out.sort(key=lambda t: -t[1])
    return out


def _chart(world, item: ChartSeries, noise, lam, dscale, rng) -> list[tuple[Value, float]]:
    v = item.truth_value
    sigma = noise.numeric_noise_sigma * abs(v) * lam
    mu = v + (rng.gauss(0.0, sigma) if sigma > 0 else 0.0)
    spread = max(sigma, 0.25)
    centre = round(mu / CHART_RESOLUTION)
    base = []
    for k in range(centre - 7, centre + 8):
        z = k * CHART_RESOLUTION
        p = _phi((z + 0.5 * CHART_RESOLUTION - mu) / spread) - _phi((z - 0.5 * CHART_RESOLUTION - mu) / spread)
        if p > 1e-9:
            base.append((float(z), p))
    base.sort(key=lambda t: -t[1])
    injected = []
    for _ in range(noise.distractor_count):
        # a neighbouring gridline or label misread as the bar value
        offset = rng.choice((-1, 1)) * rng.randint(3, 12)
        injected.append((float(round(v) + offset), rng.uniform(0.02, 0.12) * dscale))
    for other in _leak_value(world, item, rng, noise, world.chart_series):
        injected.append((other.truth_value, rng.uniform(0.2, 0.7)))
    return _merge_injected(base, injected)


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------


def resolve_truth(world: WorldInstance, node_type: NodeType, region: Region) -> Value:
    try:
        _check_region(world, region)
    except RegionOutOfBounds as exc:
        raise Unresolvable(str(exc)) from None
    items, box_of = _items_for(world, node_type)
    hit = _resolve(items, region, box_of)
    if hit is None:
        raise Unresolvable(f"region {region.bbox} on image {region.image_index} covers no {node_type.value} truth")
    item = hit[0]
    if node_type is NodeType.OCR:
        return item.truth
    if node_type is NodeType.DET:
        return Detection(tuple(item.truth_box), item.label)
    return item.truth_value


def ground_truth(world: WorldInstance, node_spec: NodeSpec) -> Value:
    """True node-level value: region content for tools, gold for reasoning fuses.

    Merge nodes inserted by Expand resolve like the tool node they refine.
    """
    if node_spec.kind is NodeKind.TOOL:
        return resolve_truth(world, node_spec.node_type, node_spec.region)
    if node_spec.merges is not None:
        if node_spec.merges is NodeType.LOGIC or node_spec.region is None:
            raise Unresolvable("merge over reasoning nodes has no node-level truth")
        return resolve_truth(world, node_spec.merges, node_spec.region)
    return world.gold_answer


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


class PerturbationKind(str, enum.Enum):
    CHAR_CONFUSION_SHIFT = "char-confusion-shift"
    CLUTTER = "clutter"
    AFFINE_OFFSET = "affine-offset"
    PANEL_SHUFFLE = "panel-shuffle"


MAGNITUDE_RANGES: dict[PerturbationKind, tuple[float, float]] = {
    PerturbationKind.CHAR_CONFUSION_SHIFT: (0.0, 0.5),
    PerturbationKind.CLUTTER: (0.0, 1.0),
    PerturbationKind.AFFINE_OFFSET: (0.0, 15.0),
    PerturbationKind.PANEL_SHUFFLE: (0.0, 0.5),
}


def _shear(region: Region, tan: float) -> Region:
    x0, y0, x1, y1 = region.bbox
    xs = [x + tan * (y - SCENE_SIZE / 2) for x in (x0, x1) for y in (y0, y1)]
    nx0 = min(max(min(xs), 0.0), SCENE_SIZE - 2.0)
    nx1 = max(min(max(xs), SCENE_SIZE), nx0 + 2.0)
    return Region(region.image_index, (round(nx0, 6), y0, round(nx1, 6), y1))


def _shear_box(box, tan):
    return _shear(Region(0, tuple(box)), tan).bbox


def _panel_permutation(n: int, seed: int) -> list[int]:
    perm = list(range(n))
    random.Random(derive_seed("panel-shuffle", seed, n)).shuffle(perm)
    return perm


def perturb(
    world: WorldInstance,
    kind: PerturbationKind | str,
    magnitude: float,
    seed: int = 0,
    *,
    invert: bool = False,
) -> WorldInstance:
    """Shift observation difficulty without touching the gold answer.

    Magnitudes: char-confusion-shift adds to ``char_confusion_prob``; clutter
    is a fraction of the field count added as distractors; affine-offset is a
    shear angle in degrees; panel-shuffle permutes text-field regions and
    sets a cross-panel leak probability. ``invert=True`` undoes a
    panel-shuffle applied with the same seed and magnitude.
    """
    try:
        kind = PerturbationKind(kind)
    except ValueError:
        raise UnknownKind(f"unknown perturbation {kind!r}") from None
    lo, hi = MAGNITUDE_RANGES[kind]
    if not lo <= magnitude <= hi:
        raise ValueError(f"{kind.value} magnitude {magnitude} outside [{lo}, {hi}]")
    if magnitude == 0:
        return world
    noise = world.noise
    if kind is PerturbationKind.CHAR_CONFUSION_SHIFT:
        return replace(world, noise=replace(noise, char_confusion_prob=min(1.0, noise.char_confusion_prob + magnitude)))
    if kind is PerturbationKind.CLUTTER:
        extra = math.ceil(magnitude * len(world.text_fields))
        return replace(world, noise=replace(noise, distractor_count=noise.distractor_count + extra))
    if kind is PerturbationKind.AFFINE_OFFSET:
        tan = math.tan(math.radians(magnitude))
        return replace(
            world,
            text_fields=tuple(replace(f, region=_shear(f.region, tan)) for f in world.text_fields),
            objects=tuple(
                replace(o, region=_shear(o.region, tan), truth_box=_shear_box(o.truth_box, tan)) for o in world.objects
            ),
            chart_series=tuple(replace(s, region=_shear(s.region, tan)) for s in world.chart_series),
            noise=replace(noise, skew_deg=noise.skew_deg + magnitude),
        )
    perm = _panel_permutation(len(world.text_fields), seed)
    regions = [f.region for f in world.text_fields]
    if invert:
        inverse = [0] * len(perm)
        for i, j in enumerate(perm):
            inverse[j] = i
        perm = inverse
        leak = max(0.0, round(noise.panel_leak - magnitude, 12))
    else:
        leak = min(1.0, round(noise.panel_leak + magnitude, 12))
    fields = tuple(replace(f, region=regions[perm[i]]) for i, f in enumerate(world.text_fields))
    return replace(world, text_fields=fields, noise=replace(noise, panel_leak=leak))


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    seed: int
    difficulty: str
    perturbation: tuple[str, float] | None = None


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    rows = [
        {"seed": e.seed, "difficulty": e.difficulty, "perturbation": list(e.perturbation) if e.perturbation else None}
        for e in entries
    ]
    Path(path).write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    rows = json.loads(Path(path).read_text())
    return [
        ManifestEntry(int(r["seed"]), r["difficulty"], tuple(r["perturbation"]) if r.get("perturbation") else None)
        for r in rows
    ]


def materialize(entry: ManifestEntry, noise: NoiseConfig | None = None) -> WorldInstance:
    world = generate_instance(entry.seed, entry.difficulty, noise=noise)
    if entry.perturbation:
        kind, mag = entry.perturbation
        world = perturb(world, kind, float(mag), entry.seed)
    return world
