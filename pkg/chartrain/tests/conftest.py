"""Shared helpers: run the target as a subprocess, patch hyperparameters,
stand up a throwaway git repository, and print one verdict line for the
workload acceptance check."""

import re
import subprocess
import sys
from pathlib import Path

import chartrain

METRIC_RE = re.compile(r"^val_bpb: (\d+\.\d{4})$")


def run_script(path: Path, timeout: float = 30.0) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, str(path)],
        capture_output=True, text=True, timeout=timeout, cwd=path.parent,
    )


def patched_source(**overrides) -> str:
    """Target source with hyperparameter lines rewritten.

    Patches assignments textually, the way a harness edit would, so the
    tests exercise the same file shape the fixtures edit.
    """
    source = chartrain.target_source()
    for name, value in overrides.items():
        source, count = re.subn(
            rf"^{name} = [^ #]+", f"{name} = {value}", source, count=1, flags=re.M,
        )
        assert count == 1, f"hyperparameter {name} not found"
    return source


def run_variant(tmp_dir: Path, **overrides) -> subprocess.CompletedProcess:
    script = tmp_dir / "variant.py"
    script.write_text(patched_source(**overrides), encoding="utf-8")
    return run_script(script)


def metric_of(result: subprocess.CompletedProcess) -> float:
    assert result.returncode == 0, result.stderr
    match = METRIC_RE.match(result.stdout.strip())
    assert match, f"unexpected output: {result.stdout!r}"
    return float(match.group(1))


def make_target_repo(root: Path) -> Path:
    """Fresh single-commit git repository holding only the target script."""
    root.mkdir(parents=True)
    chartrain.write_target(root)

    def git(*args: str) -> None:
        subprocess.run(["git", *args], cwd=root, check=True, capture_output=True)

    git("init", "-q", "-b", "main")
    git("config", "user.email", "demo@example.invalid")
    git("config", "user.name", "Demo")
    git("add", chartrain.TARGET_FILENAME)
    git("commit", "-q", "-m", "target baseline")
    return root


# --- workload verdict line -------------------------------------------------

VERDICT_LINES: list[str] = []


def report_check(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    line = f"[{status}] {name}"
    if detail:
        line += f" :: {detail}"
    VERDICT_LINES.append(line)
    print(line)


def run_check(name: str, check) -> None:
    """Run a check body; record and re-raise on failure, record on success."""
    try:
        detail = check()
    except BaseException as exc:
        report_check(name, False, f"{type(exc).__name__}: {exc}")
        raise
    report_check(name, True, detail or "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not VERDICT_LINES:
        return
    terminalreporter.section("target workload")
    for line in VERDICT_LINES:
        terminalreporter.write_line(line)
