"""Shared fixtures: pinned target repos, reply scripts, run configs.

The fixture workload is a one-line "training" script that prints a
hard-coded metric, so a scripted reply can move the number and a test
can predict every promotion exactly.
"""

import sys
from pathlib import Path

from optloop.config import RunConfig
from optloop.worktrees import RepoHandle, init_repo

BASE_METRIC = "1.35"
PRINT_LINE = "print('val_bpb: %.4f' % metric)"
BASE_TRAIN = f"metric = {BASE_METRIC}\n{PRINT_LINE}\n"

# eval that takes about a second, for budget tests
SLOW_TRAIN = f"import time\ntime.sleep(1.0)\nmetric = {BASE_METRIC}\n{PRINT_LINE}\n"


def make_repo(root: Path, train: str = BASE_TRAIN) -> RepoHandle:
    """Fresh single-commit repository; identical inputs, identical commit id."""
    return init_repo(root, {"train.py": train})


def make_proposal(summary: str, edits, motivation: str = "move the metric") -> str:
    """Well-formed reply text with one or more search/replace edits."""
    lines = [f"MOTIVATION: {motivation}", f"IDEA_SUMMARY: {summary}"]
    for path, search, replace in edits:
        lines += [f"EDIT {path}", "<<<<<<< SEARCH", search, "=======", replace,
                  ">>>>>>> REPLACE"]
    return "\n".join(lines) + "\n"


def set_metric(old: str, new: str) -> str:
    """Proposal that rewrites the printed metric value."""
    return make_proposal(
        f"set metric to {new}",
        [("train.py", f"metric = {old}", f"metric = {new}")],
    )


def crash_proposal() -> str:
    """Proposal that compiles but makes training exit nonzero."""
    return make_proposal(
        "abort before reporting",
        [("train.py", PRINT_LINE, f"raise SystemExit(3)\n{PRINT_LINE}")],
    )


def inject_raise(message: str = "injected") -> str:
    """Proposal that plants a runtime error ahead of the metric print."""
    return make_proposal(
        "guard the report path",
        [("train.py", PRINT_LINE, f"raise RuntimeError('{message}')\n{PRINT_LINE}")],
    )


def remove_raise(message: str = "injected") -> str:
    """Engineer-style repair: delete the planted error."""
    return make_proposal(
        "drop the failing guard",
        [("train.py", f"raise RuntimeError('{message}')\n{PRINT_LINE}", PRINT_LINE)],
    )


def write_script(path: Path, replies: dict) -> Path:
    """Serialize {(round, source, attempt): reply} into a script file."""
    parts = []
    for (round_number, source, attempt), text in replies.items():
        parts.append(f"[{round_number}.{source}.{attempt}]")
        parts.append(text.rstrip("\n"))
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path


def subagent_replies() -> dict:
    """One parallel round: two improvements, one crash, a winning merge."""
    return {
        (1, "worker-1", 1): set_metric("1.35", "1.30"),
        (1, "worker-2", 1): set_metric("1.35", "1.28"),
        (1, "worker-3", 1): crash_proposal(),
        (1, "coordinator", 1): set_metric("1.35", "1.26"),
    }


def team_replies() -> dict:
    """Two team rounds: the first is repaired and promoted, the second is not."""
    return {
        # round 1: six expert turns; the optimizer plants a crash
        (1, "architect", 1): set_metric("1.35", "1.33"),
        (1, "optimizer", 1): inject_raise(),
        (1, "efficiency", 1): set_metric("1.33", "1.31"),
        (1, "architect", 2): set_metric("1.31", "1.30"),
        (1, "optimizer", 2): set_metric("1.30", "1.29"),
        (1, "efficiency", 2): set_metric("1.29", "1.27"),
        (1, "engineer", 1): remove_raise(),
        # round 2: same shape, but the engineer's patch fixes nothing
        (2, "architect", 1): set_metric("1.27", "1.26"),
        (2, "optimizer", 1): inject_raise(),
        (2, "efficiency", 1): set_metric("1.26", "1.25"),
        (2, "architect", 2): set_metric("1.25", "1.24"),
        (2, "optimizer", 2): set_metric("1.24", "1.23"),
        (2, "efficiency", 2): set_metric("1.23", "1.22"),
        (2, "engineer", 1): make_proposal(
            "annotate the metric",
            [("train.py", "metric = 1.22", "metric = 1.22  # reviewed")]),
    }


def make_cfg(
    repo_root: Path,
    work_dir: Path,
    script: Path,
    topology: str = "single",
    max_rounds: int = 1,
    name: str = "run",
) -> RunConfig:
    """Config for a deterministic scripted run against a fixture repo."""
    cfg = RunConfig()
    cfg.repo.root_path = str(repo_root)
    cfg.repo.scratch_dir = str(work_dir / f"{name}-scratch")
    cfg.out = str(work_dir / f"{name}-out")
    cfg.agents.script = str(script)
    cfg.topology.name = topology
    cfg.budget.t_max_s = 120.0
    cfg.budget.max_rounds = max_rounds
    cfg.execution.preflight_command = [sys.executable, "-m", "py_compile", "train.py"]
    cfg.execution.eval_command = [sys.executable, "train.py"]
    cfg.execution.eval_timeout_s = 30.0
    return cfg


# --- acceptance reporting ---------------------------------------------------
# The gate suite announces one verdict line per criterion; collecting them
# here and replaying them in the terminal summary keeps the lines visible
# even though pytest captures per-test stdout.

ACCEPTANCE_LINES: list[str] = []


def report_criterion(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] {name}"
    if detail:
        line += f" :: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def run_criterion(name: str, check) -> None:
    """Run one gate check, always leaving a verdict line behind."""
    try:
        detail = check()
    except BaseException as exc:  # the FAIL line must survive any outcome
        report_criterion(name, False, f"{type(exc).__name__}: {str(exc)[:160]}")
        raise
    report_criterion(name, True, detail or "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
