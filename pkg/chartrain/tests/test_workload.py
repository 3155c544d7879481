"""End-to-end workload checks.

The demo tests drive the optimization harness strictly from the outside:
its command line, a reply script file, a git repository holding the
target, and the artifact files a run leaves behind.  Nothing here
imports the harness.
"""

import json
import math
import re
import subprocess
import sys
import time
from pathlib import Path

import chartrain
from conftest import make_target_repo, metric_of, run_check, run_script, run_variant

RUN_LINE_RE = re.compile(r"run (\S+) \((\w+)\) finished: (\d+) rounds, (\d+) promotions")
METRIC_MOVE_RE = re.compile(r"val_bpb (\d+\.\d{4}) -> (\d+\.\d{4})")


def drive_harness(work: Path, topology: str, fixture: str) -> dict:
    """One scripted harness run against a fresh copy of the target."""
    work.mkdir(parents=True, exist_ok=True)
    repo = make_target_repo(work / "repo")
    script = chartrain.write_fixture(fixture, work)
    out = work / "out"
    argv = [
        sys.executable, "-m", "optloop.cli", "run",
        "--repo", str(repo),
        "--topology", topology,
        "--script", str(script),
        "--out", str(out),
        "--t-max-s", "100",
        "--max-rounds", "1",
        "--set", "execution.eval_command=" + json.dumps([sys.executable, "train.py"]),
        "--set", "execution.preflight_command="
                 + json.dumps([sys.executable, "-m", "py_compile", "train.py"]),
    ]
    started = time.monotonic()
    result = subprocess.run(argv, capture_output=True, text=True, timeout=150)
    elapsed = time.monotonic() - started
    assert result.returncode == 0, result.stderr
    run_match = RUN_LINE_RE.search(result.stdout)
    move_match = METRIC_MOVE_RE.search(result.stdout)
    assert run_match and move_match, result.stdout
    return {
        "elapsed": elapsed,
        "rounds": int(run_match.group(3)),
        "promotions": int(run_match.group(4)),
        "baseline": float(move_match.group(1)),
        "final": float(move_match.group(2)),
        "run_dir": out / run_match.group(1),
    }


def read_event_log(run_dir: Path) -> list[dict]:
    lines = (run_dir / "events.jsonl").read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def test_target_workload(tmp_path):
    def check():
        target = chartrain.write_target(tmp_path)
        first, second = run_script(target), run_script(target)
        assert first.returncode == 0
        assert first.stdout == second.stdout

        ladder = [metric_of(run_variant(tmp_path, iterations=count))
                  for count in chartrain.IMPROVING_ITERATIONS]
        assert all(a > b for a, b in zip(ladder, ladder[1:])), ladder

        corpus = re.search(r'CORPUS = """(.*?)"""', chartrain.target_source(), re.S).group(1)
        bound = math.log2(len(set(" ".join(corpus.lower().split()))))
        assert abs(ladder[0] - bound) <= 0.05 * bound

        demo = drive_harness(tmp_path / "demo", "subagent", "subagent")
        assert demo["elapsed"] < 120.0
        assert demo["promotions"] == 1
        assert demo["baseline"] == chartrain.GOLDEN_BASELINE
        assert demo["final"] < chartrain.GOLDEN_BASELINE
        return (f"ladder {ladder[0]:.4f}->{ladder[-1]:.4f} over {len(ladder)} points, "
                f"uniform bound {bound:.4f}, demo val_bpb {demo['baseline']:.4f}->"
                f"{demo['final']:.4f} in {demo['elapsed']:.1f}s")

    run_check("target workload", check)


def test_single_worker_demo(tmp_path):
    demo = drive_harness(tmp_path, "single", "single")
    assert demo["rounds"] == 1
    assert demo["promotions"] == 1
    assert abs(demo["final"] - 3.3933) < 5e-4
    events = read_event_log(demo["run_dir"])
    proposals = [e for e in events if e["kind"] == "proposal"]
    assert [e["state"] for e in proposals] == ["TrainingSuccess"]


def test_coordinator_merge_demo(tmp_path):
    demo = drive_harness(tmp_path, "subagent", "subagent")
    assert demo["promotions"] == 1
    # the merged proposal combines both improving levers and beats each alone
    assert abs(demo["final"] - 3.3469) < 5e-4
    events = read_event_log(demo["run_dir"])
    by_source = {e["source"]: e["state"] for e in events if e["kind"] == "proposal"}
    assert by_source == {
        "worker-1": "TrainingSuccess",
        "worker-2": "TrainingSuccess",
        "worker-3": "TrainingCrash",
        "merged": "TrainingSuccess",
    }
    promotion = [e for e in events if e["kind"] == "promotion"]
    assert len(promotion) == 1
    assert promotion[0]["source"] == "merged"


def test_engineer_repair_demo(tmp_path):
    demo = drive_harness(tmp_path, "team", "team")
    assert demo["promotions"] == 1
    assert abs(demo["final"] - 3.3702) < 5e-4
    events = read_event_log(demo["run_dir"])
    proposals = [e for e in events if e["kind"] == "proposal"]
    # six expert slots plus the engineer's repair, all part of the promoted round
    assert len(proposals) == 7
    assert proposals[-1]["source"] == "engineer"
    assert all(e["state"] == "TrainingSuccess" for e in proposals)
