"""Reasoning-graph DSL: parsing, graph construction, ordering and mutation.

Concrete syntax, one instruction per line::

    CALL_TOOL(1, img0[120,40,380,90], "read F2") -> v1
    FUSE([v1], "lookup F2") -> v2
    RETURN(v2)

Blank lines and ``#`` comments are ignored. Prompts are double-quoted and
support backslash escapes (``\\"``, ``\\\\``, ``\\n``).
"""

from __future__ import annotations

import enum
import heapq
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Union

from .errors import (
    CycleDetected,
    DanglingParent,
    DuplicateNode,
    ExpandDepthExceeded,
    ExpandOnAnswerNode,
    InvalidGraph,
    InvalidMutation,
    MissingReturn,
    MultipleReturn,
    ProgramSyntaxError,
    RetryCapExceeded,
    UndefinedNode,
    UnknownNode,
    UnknownTool,
)

RETRY_CAP = 2
EXPAND_DEPTH_CAP = 3
MAX_FIDELITY = 1 + RETRY_CAP


class NodeType(str, enum.Enum):
    OCR = "ocr-string"
    DET = "det-box"
    CHART = "chart-num"
    LOGIC = "logic-text"


class NodeKind(str, enum.Enum):
    TOOL = "tool"
    FUSE = "fuse"


TOOL_TYPES: dict[int, NodeType] = {1: NodeType.OCR, 2: NodeType.DET, 3: NodeType.CHART}
TOOL_IDS: dict[NodeType, int] = {t: k for k, t in TOOL_TYPES.items()}


@dataclass(frozen=True)
class Region:
    """Image index plus ``(x0, y0, x1, y1)`` box in scene units."""

    image_index: int
    bbox: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if self.image_index < 0:
            raise InvalidGraph(f"negative image index {self.image_index}")
        if not (x0 < x1 and y0 < y1):
            raise InvalidGraph(f"degenerate region bbox {self.bbox}")

    def to_dict(self) -> dict:
        return {"image_index": self.image_index, "bbox": list(self.bbox)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Region":
        return cls(int(d["image_index"]), tuple(float(v) for v in d["bbox"]))


@dataclass(frozen=True)
class CallTool:
    tool_id: int
    region: Region
    prompt: str
    out: str


@dataclass(frozen=True)
class Fuse:
    parents: tuple[str, ...]
    prompt: str
    out: str


@dataclass(frozen=True)
class Return:
    node: str


Instruction = Union[CallTool, Fuse, Return]


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...]


# ---------------------------------------------------------------------------
# Lexing / parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<arrow>->)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<number>[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[()\[\],])
    """,
    re.VERBOSE,
)
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_IMG_RE = re.compile(r"img(\d+)\Z")
_ESCAPES = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}
_KEYWORDS = {"CALL_TOOL", "FUSE", "RETURN"}


def _tokenize(line: str, lineno: int) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    while pos < len(line):
        m = _TOKEN_RE.match(line, pos)
        if m is None:
            raise ProgramSyntaxError(f"unexpected character {line[pos]!r}", lineno)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group()))
        pos = m.end()
    return tokens


def _unquote(literal: str, lineno: int) -> str:
    body = literal[1:-1]
    out = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            nxt = body[i + 1]
            if nxt not in _ESCAPES:
                raise ProgramSyntaxError(f"unknown escape \\{nxt}", lineno)
            out.append(_ESCAPES[nxt])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t") + '"'


class _LineParser:
    def __init__(self, tokens: list[tuple[str, str]], lineno: int):
        self.tokens = tokens
        self.pos = 0
        self.lineno = lineno

    def peek(self) -> tuple[str, str] | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, kind: str, value: str | None = None) -> str:
        tok = self.peek()
        if tok is None or tok[0] != kind or (value is not None and tok[1] != value):
            want = value or kind
            got = tok[1] if tok else "end of line"
            raise ProgramSyntaxError(f"expected {want}, got {got!r}", self.lineno)
        self.pos += 1
        return tok[1]

    def node_id(self) -> str:
        name = self.take("ident")
        if name in _KEYWORDS:
            raise ProgramSyntaxError(f"keyword {name} used as node id", self.lineno)
        return name

    def number(self) -> float:
        return float(self.take("number"))

    def region(self) -> Region:
        name = self.take("ident")
        m = _IMG_RE.match(name)
        if m is None:
            raise ProgramSyntaxError(f"expected region literal imgN[...], got {name!r}", self.lineno)
        self.take("punct", "[")
        coords = [self.number()]
        for _ in range(3):
            self.take("punct", ",")
            coords.append(self.number())
        self.take("punct", "]")
        try:
            return Region(int(m.group(1)), tuple(coords))
        except InvalidGraph as exc:
            raise ProgramSyntaxError(str(exc), self.lineno) from None

    def end(self) -> None:
        if self.peek() is not None:
            raise ProgramSyntaxError(f"trailing tokens after instruction: {self.peek()[1]!r}", self.lineno)

    def instruction(self) -> Instruction:
        head = self.take("ident")
        self.take("punct", "(")
        if head == "CALL_TOOL":
            raw = self.take("number")
            if not re.fullmatch(r"\d+", raw):
                raise ProgramSyntaxError(f"tool id must be a non-negative integer, got {raw}", self.lineno)
            tool_id = int(raw)
            if tool_id not in TOOL_TYPES:
                raise UnknownTool(f"line {self.lineno}: tool id {tool_id} is not registered")
            self.take("punct", ",")
            region = self.region()
            self.take("punct", ",")
            prompt = _unquote(self.take("string"), self.lineno)
            self.take("punct", ")")
            self.take("arrow")
            out = self.node_id()
            self.end()
            return CallTool(tool_id, region, prompt, out)
        if head == "FUSE":
            self.take("punct", "[")
            parents = [self.node_id()]
            while self.peek() == ("punct", ","):
                self.pos += 1
                parents.append(self.node_id())
            self.take("punct", "]")
            if len(set(parents)) != len(parents):
                raise ProgramSyntaxError("FUSE parents must be duplicate-free", self.lineno)
            self.take("punct", ",")
            prompt = _unquote(self.take("string"), self.lineno)
            self.take("punct", ")")
            self.take("arrow")
            out = self.node_id()
            self.end()
            return Fuse(tuple(parents), prompt, out)
        if head == "RETURN":
            node = self.node_id()
            self.take("punct", ")")
            self.end()
            return Return(node)
        raise ProgramSyntaxError(f"unknown instruction {head!r}", self.lineno)


def parse_program(text: str) -> Program:
    """Parse DSL source into a :class:`Program`.

    Raises ``ProgramSyntaxError`` on malformed lines, ``UndefinedNode`` when a
    node is referenced before it is defined, and ``MissingReturn`` /
    ``MultipleReturn`` when the program does not end in exactly one RETURN.
    """
    instructions: list[Instruction] = []
    defined: set[str] = set()
    returns = 0
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        instr = _LineParser(_tokenize(line, lineno), lineno).instruction()
        if returns:
            if isinstance(instr, Return):
                raise MultipleReturn(f"line {lineno}: second RETURN")
            raise ProgramSyntaxError("RETURN must be the last instruction", lineno)
        if isinstance(instr, Fuse):
            for p in instr.parents:
                if p not in defined:
                    raise UndefinedNode(f"line {lineno}: {p} used before definition")
        if isinstance(instr, Return):
            if instr.node not in defined:
                raise UndefinedNode(f"line {lineno}: {instr.node} used before definition")
            returns += 1
        else:
            if instr.out in defined:
                raise DuplicateNode(f"line {lineno}: {instr.out} defined twice")
            defined.add(instr.out)
        instructions.append(instr)
    if not returns:
        raise MissingReturn("program has no RETURN instruction")
    return Program(tuple(instructions))


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() and abs(x) < 1e15 else repr(float(x))


def format_program(program: Program) -> str:
    """Render a program back to DSL text (inverse of :func:`parse_program`)."""
    lines = []
    for instr in program.instructions:
        if isinstance(instr, CallTool):
            coords = ",".join(_fmt_num(c) for c in instr.region.bbox)
            lines.append(
                f"CALL_TOOL({instr.tool_id}, img{instr.region.image_index}[{coords}], "
                f"{_quote(instr.prompt)}) -> {instr.out}"
            )
        elif isinstance(instr, Fuse):
            lines.append(f"FUSE([{', '.join(instr.parents)}], {_quote(instr.prompt)}) -> {instr.out}")
        else:
            lines.append(f"RETURN({instr.node})")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Graphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeSpec:
    kind: NodeKind
    node_type: NodeType
    parents: tuple[str, ...] = ()
    tool_id: int | None = None
    region: Region | None = None
    prompt: str = ""
    fidelity: int = 1
    # expansion depth; children of an expanded node sit one level deeper
    depth: int = 0
    # evidence type pooled by a merge node inserted by Expand
    merges: NodeType | None = None

    @property
    def is_tool(self) -> bool:
        return self.kind is NodeKind.TOOL

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "node_type": self.node_type.value,
            "parents": list(self.parents),
            "tool_id": self.tool_id,
            "region": self.region.to_dict() if self.region else None,
            "prompt": self.prompt,
            "fidelity": self.fidelity,
            "depth": self.depth,
            "merges": self.merges.value if self.merges else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NodeSpec":
        return cls(
            kind=NodeKind(d["kind"]),
            node_type=NodeType(d["node_type"]),
            parents=tuple(d.get("parents", ())),
            tool_id=d.get("tool_id"),
            region=Region.from_dict(d["region"]) if d.get("region") else None,
            prompt=d.get("prompt", ""),
            fidelity=int(d.get("fidelity", 1)),
            depth=int(d.get("depth", 0)),
            merges=NodeType(d["merges"]) if d.get("merges") else None,
        )


def tool_node(tool_id: int, region: Region, prompt: str, *, fidelity: int = 1, depth: int = 0) -> NodeSpec:
    if tool_id not in TOOL_TYPES:
        raise UnknownTool(f"tool id {tool_id} is not registered")
    return NodeSpec(NodeKind.TOOL, TOOL_TYPES[tool_id], (), tool_id, region, prompt, fidelity, depth)


def fuse_node(parents: Iterable[str], prompt: str, **kw) -> NodeSpec:
    return NodeSpec(NodeKind.FUSE, NodeType.LOGIC, tuple(parents), None, kw.pop("region", None), prompt, **kw)


@dataclass(frozen=True)
class ReasoningGraph:
    """Immutable DAG of node specs. Parent order inside a spec is significant."""

    nodes: Mapping[str, NodeSpec]
    answer_node: str
    mutation_count: int = field(default=0, compare=False)

    @property
    def edges(self) -> tuple[tuple[str, str], ...]:
        return tuple((p, v) for v in sorted(self.nodes) for p in self.nodes[v].parents)

    def parents(self, node_id: str) -> tuple[str, ...]:
        return self.node(node_id).parents

    def children(self, node_id: str) -> list[str]:
        return sorted(v for v, spec in self.nodes.items() if node_id in spec.parents)

    def node(self, node_id: str) -> NodeSpec:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no node {node_id!r}") from None

    def to_dict(self) -> dict:
        return {
            "nodes": {k: self.nodes[k].to_dict() for k in sorted(self.nodes)},
            "edges": [list(e) for e in self.edges],
            "answer_node": self.answer_node,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReasoningGraph":
        nodes = {k: NodeSpec.from_dict(v) for k, v in d["nodes"].items()}
        graph = cls(nodes, d["answer_node"])
        validate_graph(graph)
        return graph


def _kahn(nodes: Mapping[str, NodeSpec]) -> list[str]:
    indeg = {v: len(spec.parents) for v, spec in nodes.items()}
    children: dict[str, list[str]] = {v: [] for v in nodes}
    for v, spec in nodes.items():
        for p in spec.parents:
            children[p].append(v)
    heap = [v for v, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, c)
    if len(order) != len(nodes):
        stuck = sorted(v for v, d in indeg.items() if d > 0)
        raise CycleDetected(f"cycle among nodes {stuck}")
    return order


def validate_graph(graph: ReasoningGraph) -> None:
    """Shared validator: parent existence, acyclicity, answer node, typing."""
    nodes = graph.nodes
    if not nodes:
        raise InvalidGraph("graph has no nodes")
    for v, spec in nodes.items():
        if not _IDENT_RE.match(v):
            raise InvalidGraph(f"bad node id {v!r}")
        if len(set(spec.parents)) != len(spec.parents):
            raise InvalidGraph(f"{v} lists a parent twice")
        for p in spec.parents:
            if p not in nodes:
                raise DanglingParent(f"{v} references missing parent {p}")
    _kahn(nodes)
    if graph.answer_node not in nodes:
        raise InvalidGraph(f"answer node {graph.answer_node!r} not in graph")
    answer = nodes[graph.answer_node]
    if answer.kind is not NodeKind.FUSE:
        raise InvalidGraph("answer node must be a Fuse node")
    if any(graph.answer_node in spec.parents for spec in nodes.values()):
        raise InvalidGraph("answer node must not have children")
    for v, spec in nodes.items():
        if spec.kind is NodeKind.TOOL:
            if spec.tool_id not in TOOL_TYPES or TOOL_TYPES[spec.tool_id] is not spec.node_type:
                raise InvalidGraph(f"{v}: node type does not match tool id {spec.tool_id}")
            if spec.parents:
                raise InvalidGraph(f"{v}: tool nodes take no parents")
            if spec.region is None:
                raise InvalidGraph(f"{v}: tool node without region")
        elif spec.node_type is not NodeType.LOGIC:
            raise InvalidGraph(f"{v}: fuse nodes are logic-text")
        if not 1 <= spec.fidelity <= MAX_FIDELITY:
            raise InvalidGraph(f"{v}: fidelity {spec.fidelity} outside [1, {MAX_FIDELITY}]")


def build_graph(program: Program) -> ReasoningGraph:
    nodes: dict[str, NodeSpec] = {}
    answer = None
    for instr in program.instructions:
        if isinstance(instr, CallTool):
            nodes[instr.out] = tool_node(instr.tool_id, instr.region, instr.prompt)
        elif isinstance(instr, Fuse):
            for p in instr.parents:
                if p not in nodes:
                    raise DanglingParent(f"{instr.out} references missing parent {p}")
            nodes[instr.out] = fuse_node(instr.parents, instr.prompt)
        else:
            answer = instr.node
    if answer is None:
        raise MissingReturn("program has no RETURN instruction")
    graph = ReasoningGraph(nodes, answer)
    validate_graph(graph)
    return graph


def graph_from_text(text: str) -> ReasoningGraph:
    return build_graph(parse_program(text))


def topological_order(graph: ReasoningGraph) -> list[str]:
    """Kahn's algorithm with lexicographic node-id tie-breaking."""
    return _kahn(graph.nodes)


def fallback_graph(query: str) -> ReasoningGraph:
    """Default single-pass template: one answer Fuse node, no tools."""
    graph = ReasoningGraph({"answer": fuse_node((), query)}, "answer")
    validate_graph(graph)
    return graph


def add_edge(graph: ReasoningGraph, parent: str, child: str) -> ReasoningGraph:
    """Return a copy with ``parent -> child`` added; validated like any mutation."""
    spec = graph.node(child)
    graph.node(parent)
    nodes = dict(graph.nodes)
    nodes[child] = replace(spec, parents=spec.parents + (parent,))
    out = ReasoningGraph(nodes, graph.answer_node, graph.mutation_count + 1)
    validate_graph(out)
    return out


@dataclass(frozen=True)
class Retry:
    fidelity: int


@dataclass(frozen=True)
class Expand:
    children: tuple[NodeSpec, ...]


def mutate(graph: ReasoningGraph, node_id: str, detail: Retry | Expand) -> ReasoningGraph:
    """Apply a local Retry or Expand mutation and return the new graph.

    Expand inserts the given children plus a merge Fuse over
    ``(node, *children)``; every consumer of ``node`` is rewired to the merge
    node so earlier evidence is kept.
    """
    spec = graph.node(node_id)
    nodes = dict(graph.nodes)
    if isinstance(detail, Retry):
        if detail.fidelity <= spec.fidelity:
            raise InvalidMutation(f"retry fidelity {detail.fidelity} not above current {spec.fidelity}")
        if detail.fidelity > MAX_FIDELITY:
            raise RetryCapExceeded(f"{node_id}: fidelity cap {MAX_FIDELITY} reached")
        nodes[node_id] = replace(spec, fidelity=detail.fidelity)
    elif isinstance(detail, Expand):
        if node_id == graph.answer_node:
            raise ExpandOnAnswerNode("the answer node may only be retried")
        if spec.depth >= EXPAND_DEPTH_CAP:
            raise ExpandDepthExceeded(f"{node_id} is at expansion depth {spec.depth}")
        if not detail.children:
            raise InvalidMutation("Expand needs at least one child")
        k = graph.mutation_count + 1
        child_ids = []
        for i, child in enumerate(detail.children):
            cid = f"{node_id}_x{k}{chr(ord('a') + i)}"
            if cid in nodes:
                raise InvalidMutation(f"generated id {cid} already exists")
            nodes[cid] = replace(child, parents=child.parents, depth=spec.depth + 1)
            child_ids.append(cid)
        merge_id = f"{node_id}_m{k}"
        for v in graph.children(node_id):
            cons = nodes[v]
            nodes[v] = replace(cons, parents=tuple(merge_id if p == node_id else p for p in cons.parents))
        nodes[merge_id] = fuse_node(
            (node_id, *child_ids),
            "merge",
            region=spec.region,
            depth=spec.depth + 1,
            merges=spec.merges or spec.node_type,
        )
    else:
        raise InvalidMutation(f"unknown mutation {detail!r}")
    out = ReasoningGraph(nodes, graph.answer_node, graph.mutation_count + 1)
    validate_graph(out)
    return out
