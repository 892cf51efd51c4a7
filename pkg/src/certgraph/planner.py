"""Deterministic template planner: query kind -> DSL program text."""

from __future__ import annotations

from .dsl import CallTool, Fuse, Program, ReasoningGraph, Region, Return, format_program, graph_from_text
from .errors import UnknownKind
from .world import WorldInstance

TEMPLATE_KINDS = ("lookup", "sum", "compare", "count")


def plan_program(world: WorldInstance, kind: str | None = None) -> Program:
    """Build the template program for the world's query.

    ``kind`` may override the template; the query's own targets are still
    used, so overriding is only meaningful for same-arity kinds.
    """
    q = world.query
    kind = kind or q.kind
    instrs: list = []
    ids: list[str] = []

    def tool(tool_id: int, region: Region, prompt: str) -> None:
        out = f"v{len(instrs) + 1}"
        instrs.append(CallTool(tool_id, region, prompt, out))
        ids.append(out)

    if kind == "lookup":
        f = world.field_by_key(q.targets[0])
        tool(1, f.region, f"read {f.key}")
        prompt = f"lookup {f.key}"
    elif kind in ("sum", "compare"):
        for key in q.targets:
            tool(3, world.series_by_key(key).region, f"value of {key}")
        prompt = f"{kind} {' '.join(q.targets)}"
    elif kind == "count":
        for key in q.targets:
            tool(2, world.object_by_key(key).region, f"detect {key}")
        prompt = f"count {q.label}"
    else:
        raise UnknownKind(f"no template for query kind {kind!r}")
    out = f"v{len(instrs) + 1}"
    instrs.append(Fuse(tuple(ids), prompt, out))
    instrs.append(Return(out))
    return Program(tuple(instrs))


def plan_text(world: WorldInstance, kind: str | None = None) -> str:
    return format_program(plan_program(world, kind))


def plan_graph(world: WorldInstance, kind: str | None = None) -> ReasoningGraph:
    """Template graph, routed through the text DSL so planner output is always parseable."""
    return graph_from_text(plan_text(world, kind))

