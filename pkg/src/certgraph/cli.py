"""Command-line entry point: ``certgraph <command> ...``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import bench
from .certify import (
    DEFAULT_DELTA,
    ConformalCalibrator,
    calibrate,
    calibrate_all,
    load_pool,
    save_pool,
)
from .controller import CostModel, answers_match, episode_cost, load_policy, make_policy, save_policy
from .dsl import NodeType, graph_from_text
from .engine import CPMode, EngineConfig, dump_trace, execute
from .errors import CertGraphError
from .planner import plan_graph
from .pools import build_pools
from .world import DIFFICULTIES, generate_instance, value_to_json

log = logging.getLogger("certgraph")

SEED_ENV = "CERTGRAPH_SEED"


def global_seed(default: int) -> int:
    """``CERTGRAPH_SEED`` overrides every command's base seed when set."""
    raw = os.environ.get(SEED_ENV)
    return int(raw) if raw not in (None, "") else default


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_calibrators(path: str, calibrators) -> None:
    _write(path, _dump({t.value: c.to_json() for t, c in sorted(calibrators.items())}))


def load_calibrators(path: str) -> dict[NodeType, ConformalCalibrator]:
    raw = json.loads(Path(path).read_text())
    return {NodeType(t): ConformalCalibrator.from_json(c) for t, c in raw.items()}


def _suite_config(args) -> bench.SuiteConfig:
    raw = json.loads(Path(args.suite).read_text()) if getattr(args, "suite", None) else {}
    cfg = bench.SuiteConfig.from_dict(raw)
    overrides = {}
    for name in ("budget", "beta", "policy", "instances"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "seeds", None) is not None:
        overrides["seeds"] = tuple(range(args.seeds))
    overrides["suite_seed"] = global_seed(cfg.suite_seed)
    return cfg.with_(**overrides)


def _agent(cfg: bench.SuiteConfig, args) -> bench.Agent:
    calib = getattr(args, "calib", None)
    params = load_policy(args.policy_file) if getattr(args, "policy_file", None) else None
    if calib:
        agent = bench.Agent(load_calibrators(calib), params)
        if params is None and cfg.policy == "learned":
            built = bench.build_agent(cfg)
            agent = bench.Agent(agent.calibrators, built.params)
        return agent
    return bench.build_agent(cfg, params)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_pools(args) -> int:
    pools = build_pools(args.worlds, global_seed(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, pool in sorted(pools.items()):
        save_pool(pool, out / f"{t.value}.jsonl")
        log.info("%s: %d examples", t.value, len(pool))
    return 0


def cmd_calibrate(args) -> int:
    cals = {}
    for path in args.pool:
        pool = load_pool(path)
        cals[pool.node_type] = calibrate(pool, args.delta)
    save_calibrators(args.out, cals)
    return 0


def cmd_train(args) -> int:
    from .train import TrainConfig, train_policy

    cals = load_calibrators(args.calib)
    cfg = TrainConfig(
        iterations=args.iterations,
        seed=global_seed(args.seed),
        cost=CostModel(beta=args.beta),
    )
    res = train_policy(cals, cfg)
    save_policy(args.out, res.params, res.baseline)
    return 0


def cmd_run(args) -> int:
    seed = global_seed(args.world_seed)
    world = generate_instance(seed, args.difficulty, kind=args.template)
    graph = graph_from_text(Path(args.graph).read_text()) if args.graph else plan_graph(world)
    if args.calib:
        cals = load_calibrators(args.calib)
    else:
        cals = calibrate_all(build_pools(args.calibration_worlds, 0), args.delta)
    params = load_policy(args.policy_file) if args.policy_file else None
    if args.policy == "learned" and params is None:
        raise CertGraphError("--policy learned needs --policy-file")
    policy = make_policy(args.policy, params)
    engine = EngineConfig(cost=CostModel(beta=args.beta), cp_mode=CPMode(args.cp_mode))
    record, trace = execute(graph, world, cals, policy, args.budget, seed, engine)
    if args.trace_out:
        _write(args.trace_out, dump_trace(record, trace) + "\n")
    c, c_err, c_comp = episode_cost(trace, record, world.gold_answer, engine.cost)
    summary = {
        "world_seed": seed,
        "query": world.query.text,
        "answer": json.loads(dump_trace(record, trace))["answer"],
        "gold": value_to_json(world.gold_answer),
        "correct": answers_match(record.point_answer, world.gold_answer),
        "supported": bench.is_supported(record.point_answer, trace) if record.answered else None,
        "cost": {"C": c, "C_err": c_err, "C_comp": c_comp},
    }
    _write(args.report, _dump(summary))
    return 0


def _emit_reports(reports, out_dir: str | None, stem: str) -> None:
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(bench.reports_to_json(reports))
        (out / f"{stem}.csv").write_text(bench.reports_to_csv(reports))
    else:
        sys.stdout.write(bench.reports_to_json(reports))


def cmd_bench(args) -> int:
    cfg = _suite_config(args)
    agent = _agent(cfg, args)
    variants = args.variant or [cfg.variant]
    reports = [bench.run_ablation(cfg, v, agent) for v in variants]
    _emit_reports(reports, args.report, "report")
    return 0


def cmd_sweep(args) -> int:
    cfg = _suite_config(args)
    agent = _agent(cfg, args)
    budgets = [float(b) for b in args.budgets.split(",") if b.strip()]
    points = bench.budget_sweep(cfg, budgets, agent)
    if args.report:
        out = Path(args.report)
        out.mkdir(parents=True, exist_ok=True)
        (out / "frontier.json").write_text(bench.frontier_to_json(points))
        (out / "frontier.csv").write_text(bench.frontier_to_csv(points))
    else:
        sys.stdout.write(bench.frontier_to_json(points))
    return 0


def cmd_robustness(args) -> int:
    from .selfplay import load_grid

    cfg = _suite_config(args)
    agent = _agent(cfg, args)
    rows = bench.robustness_suite(cfg, load_grid(args.grid), agent)
    _emit_reports(rows, args.report, "robustness")
    return 0


def cmd_selfplay(args) -> int:
    from .selfplay import AgentBundle, load_grid, run_selfplay, save_counterexamples, mine_counterexamples, refresh_adversary
    from .train import training_world

    seed = global_seed(args.seed)
    pools = build_pools(args.calibration_worlds, seed)
    cals = calibrate_all(pools, args.delta)
    params = load_policy(args.policy_file) if args.policy_file else None
    student = AgentBundle(cals, params)
    grid = load_grid(args.grid)
    worlds = [training_world(seed, i) for i in range(args.worlds)]
    student, pools, history = run_selfplay(student, pools, worlds, grid, args.rounds, budget=args.budget, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rounds.json").write_text(_dump([h.to_json() for h in history]))
    save_calibrators(str(out / "calibrators.json"), student.calibrators)
    for t, pool in sorted(pools.items()):
        save_pool(pool, out / f"{t.value}.jsonl")
    # the last adversary's haul, for inspection
    last = mine_counterexamples(refresh_adversary(student), worlds, grid, args.budget, seed)
    save_counterexamples(out / "counterexamples.jsonl", last)
    return 0


def cmd_report(args) -> int:
    raw = json.loads(Path(args.input).read_text())
    if args.format == "json":
        _write(args.out, json.dumps(raw, indent=1, sort_keys=True) + "\n")
        return 0
    items = raw if isinstance(raw, list) else [raw]
    if items and "budget" in items[0] and "accuracy" in items[0]:
        points = [bench.FrontierPoint(**p) for p in items]
        _write(args.out, bench.frontier_to_csv(points))
        return 0
    rows = []
    for item in items:
        rows.extend(bench._flatten_rows(item.get("label", ""), item))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "section", "key", "value"])
    for r in rows:
        w.writerow([r[0], r[1], r[2], bench._cell(r[3])])
    _write(args.out, buf.getvalue())
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _suite_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--suite", help="suite configuration JSON")
    p.add_argument("--report", help="output directory for JSON and CSV reports")
    p.add_argument("--calib", help="calibrators JSON (default: calibrate fresh pools)")
    p.add_argument("--policy", choices=["learned", "heuristic", "accept-always", "abort-always"])
    p.add_argument("--policy-file", help="learned policy weights JSON")
    p.add_argument("--budget", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--instances", type=int, help="instances per difficulty and seed")
    p.add_argument("--seeds", type=int, help="number of suite seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certgraph", description="Certified reasoning-graph execution on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pools", help="build calibration pools from synthetic worlds")
    p.add_argument("--worlds", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pools)

    p = sub.add_parser("calibrate", help="split-conformal thresholds from pool files")
    p.add_argument("--pool", action="append", required=True, help="pool JSONL (repeatable)")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train the learned controller")
    p.add_argument("--calib", required=True)
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="execute one episode")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--graph", help="DSL program file")
    src.add_argument("--template", choices=["lookup", "sum", "compare", "count"], help="query kind for the generated world")
    p.add_argument("--world-seed", type=int, default=0)
    p.add_argument("--difficulty", choices=DIFFICULTIES, default="easy")
    p.add_argument("--policy", choices=["learned", "heuristic", "accept-always", "abort-always"], default="heuristic")
    p.add_argument("--policy-file")
    p.add_argument("--calib")
    p.add_argument("--calibration-worlds", type=int, default=2000)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--budget", type=float, default=16.0)
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--cp-mode", choices=[m.value for m in CPMode], default=CPMode.NODE.value)
    p.add_argument("--trace-out")
    p.add_argument("--report", help="summary JSON path (default stdout)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="evaluation suite report")
    _suite_args(p)
    p.add_argument("--variant", action="append", choices=list(bench.ABLATION_VARIANTS))
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="accuracy/budget frontier")
    _suite_args(p)
    p.add_argument("--budgets", default="8,12,16,24")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("robustness", help="suite under a perturbation grid")
    _suite_args(p)
    p.add_argument("--grid", help="JSON list of [kind, magnitude]; default 4x3 grid")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("selfplay", help="mine counterexamples and augment pools")
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--grid", help="JSON list of [kind, magnitude]; default 4x3 grid")
    p.add_argument("--worlds", type=int, default=200)
    p.add_argument("--calibration-worlds", type=int, default=2000)
    p.add_argument("--policy-file")
    p.add_argument("--budget", type=float, default=16.0)
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_selfplay)

    p = sub.add_parser("report", help="re-emit a saved report as CSV or JSON")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["csv", "json"], default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CertGraphError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
