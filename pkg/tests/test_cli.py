from __future__ import annotations

import json

import pytest

from certgraph.cli import SEED_ENV, build_parser, global_seed, load_calibrators, main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Pools, calibrators and a briefly trained policy shared by the command tests."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["pools", "--worlds", "120", "--seed", "3", "--out", str(d / "pools")]) == 0
    pool_args = []
    for f in sorted((d / "pools").glob("*.jsonl")):
        pool_args += ["--pool", str(f)]
    assert main(["calibrate", *pool_args, "--delta", "0.1", "--out", str(d / "cal.json")]) == 0
    assert main(["train", "--calib", str(d / "cal.json"), "--iterations", "2", "--out", str(d / "policy.json")]) == 0
    (d / "suite.json").write_text(json.dumps({"instances": 3, "seeds": 2, "policy": "heuristic"}))
    return d


def suite_args(d):
    return ["--suite", str(d / "suite.json"), "--calib", str(d / "cal.json")]


class TestCommands:
    def test_pools_written(self, workdir):
        names = {p.stem for p in (workdir / "pools").glob("*.jsonl")}
        assert names == {"ocr-string", "det-box", "chart-num", "logic-text"}

    def test_calibrators_load(self, workdir):
        cals = load_calibrators(workdir / "cal.json")
        assert len(cals) == 4 and all(c.delta == 0.1 for c in cals.values())

    def test_policy_file(self, workdir):
        doc = json.loads((workdir / "policy.json").read_text())
        assert doc["actions"] == ["accept", "retry", "expand", "abort"]
        assert len(doc["weights"]) == len(doc["feature_names"])

    def test_run_learned(self, workdir, tmp_path):
        args = [
            "run", "--world-seed", "4", "--difficulty", "medium", "--calib", str(workdir / "cal.json"),
            "--policy", "learned", "--policy-file", str(workdir / "policy.json"),
            "--trace-out", str(tmp_path / "trace.json"), "--report", str(tmp_path / "run.json"),
        ]
        assert main(args) == 0
        summary = json.loads((tmp_path / "run.json").read_text())
        assert set(summary) >= {"answer", "gold", "correct", "cost"}
        trace = json.loads((tmp_path / "trace.json").read_text())
        assert trace["trace"]["outcomes"]

    def test_run_graph_file(self, workdir, tmp_path):
        prog = tmp_path / "g.dsl"
        prog.write_text('CALL_TOOL(1, img0[0,0,10,10], "read") -> v1\nFUSE([v1], "answer") -> v2\nRETURN(v2)\n')
        assert main(["run", "--graph", str(prog), "--calib", str(workdir / "cal.json"), "--report", str(tmp_path / "r.json")]) == 0

    def test_run_learned_needs_weights(self, workdir, capsys):
        assert main(["run", "--calib", str(workdir / "cal.json"), "--policy", "learned"]) == 2
        assert "policy-file" in capsys.readouterr().err

    def test_bench_outputs(self, workdir, tmp_path):
        out = tmp_path / "bench"
        assert main(["bench", *suite_args(workdir), "--variant", "full", "--variant", "no-cp", "--report", str(out)]) == 0
        reports = json.loads((out / "report.json").read_text())
        assert [r["label"] for r in reports] == ["full", "no-cp"]
        assert (out / "report.csv").read_text().startswith("label,section,key,value")

    def test_sweep(self, workdir, tmp_path):
        out = tmp_path / "sweep"
        assert main(["sweep", *suite_args(workdir), "--budgets", "8,16", "--report", str(out)]) == 0
        assert [p["budget"] for p in json.loads((out / "frontier.json").read_text())] == [8.0, 16.0]

    def test_robustness(self, workdir, tmp_path):
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps([["clutter", 0.5]]))
        out = tmp_path / "rob"
        assert main(["robustness", *suite_args(workdir), "--grid", str(grid), "--report", str(out)]) == 0
        assert [r["label"] for r in json.loads((out / "robustness.json").read_text())] == ["baseline", "clutter@0.5"]

    def test_selfplay(self, tmp_path):
        out = tmp_path / "sp"
        args = ["selfplay", "--rounds", "1", "--worlds", "3", "--calibration-worlds", "120", "--out", str(out)]
        assert main(args) == 0
        assert len(json.loads((out / "rounds.json").read_text())) == 1
        assert (out / "counterexamples.jsonl").exists()
        assert len(load_calibrators(out / "calibrators.json")) == 4

    def test_report_round_trip(self, workdir, tmp_path):
        out = tmp_path / "bench"
        main(["bench", *suite_args(workdir), "--report", str(out)])
        csv_path = tmp_path / "again.csv"
        assert main(["report", "--input", str(out / "report.json"), "--format", "csv", "--out", str(csv_path)]) == 0
        assert csv_path.read_text() == (out / "report.csv").read_text()

    def test_missing_file(self, capsys):
        assert main(["calibrate", "--pool", "/nonexistent.jsonl", "--out", "/tmp/x.json"]) == 1
        assert "error" in capsys.readouterr().err


class TestDeterminism:
    def test_run_byte_identical(self, workdir, tmp_path):
        base = ["run", "--world-seed", "9", "--difficulty", "hard", "--calib", str(workdir / "cal.json")]
        for name in ("a", "b"):
            assert main([*base, "--trace-out", str(tmp_path / f"{name}.t"), "--report", str(tmp_path / f"{name}.r")]) == 0
        assert (tmp_path / "a.t").read_bytes() == (tmp_path / "b.t").read_bytes()
        assert (tmp_path / "a.r").read_bytes() == (tmp_path / "b.r").read_bytes()

    def test_seed_env_override(self, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        assert global_seed(7) == 7
        monkeypatch.setenv(SEED_ENV, "42")
        assert global_seed(7) == 42

    def test_parser_requires_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])
