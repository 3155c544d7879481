"""Preflight validation and training-command evaluation.

Preflight is a cheap gate run before any training: a compile/static check
plus a denylist scan over the files the proposal touched.  Evaluation runs
the configured training command with a hard timeout and classifies the
result; every failure mode is encoded in the returned outcome rather than
raised, because crashes are data the orchestrator records and learns from.
"""

from __future__ import annotations

import logging
import math
import os
import re
import signal
import subprocess
import time
from dataclasses import dataclass
from enum import Enum

from .worktrees import WorktreeHandle, _git

log = logging.getLogger(__name__)

DEFAULT_METRIC_PATTERN = r"val_bpb[:=]\s*([0-9.]+)"
DEFAULT_LOG_EXCERPT_LINES = 50

# Environment variables forwarded to target commands; everything else is
# scrubbed so credentials in the harness environment never leak into
# agent-authored code.
SAFE_ENV_VARS = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "TERM")


class EvalStatus(str, Enum):
    SUCCESS = "success"
    CRASH = "crash"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class PreflightReport:
    """Result of the pre-training gate.

    ``stage`` is ``"compile"`` or ``"denylist"`` when the gate failed and
    ``"none"`` when it passed.
    """

    passed: bool
    stage: str
    detail: str = ""


@dataclass(frozen=True)
class EvalOutcome:
    """Classified result of one training run.

    ``metric`` is present exactly when ``status`` is ``success``, and is
    then finite and positive.
    """

    status: EvalStatus
    metric: float | None
    duration_s: float
    log_excerpt: str
    detail: str = ""


def scrubbed_env(passthrough: tuple[str, ...] | list[str] = ()) -> dict[str, str]:
    """Minimal environment for target commands."""
    env = {key: os.environ[key] for key in SAFE_ENV_VARS if key in os.environ}
    for key in passthrough:
        if key in os.environ:
            env[key] = os.environ[key]
    return env


def tail_lines(text: str, limit: int) -> str:
    """Last ``limit`` lines of ``text``."""
    lines = text.splitlines()
    return "\n".join(lines[-limit:])


def extract_metric(output: str, pattern: str = DEFAULT_METRIC_PATTERN) -> float | None:
    """Value of the last metric line in ``output``, or None.

    The last match wins so that per-step progress lines do not shadow the
    final reported value.  A match that is not a readable number counts as
    no metric.
    """
    matches = re.findall(pattern, output)
    if not matches:
        return None
    captured = matches[-1]
    if isinstance(captured, tuple):
        captured = captured[0]
    try:
        return float(captured)
    except ValueError:
        return None


def changed_files(worktree: WorktreeHandle) -> list[str]:
    """Repo-relative paths modified or added in the worktree."""
    # NUL-separated entries survive paths with spaces; a rename entry is
    # "XY new\0old\0" and only the new path matters here.
    out = _git(["status", "--porcelain", "-z"], cwd=worktree.path, strip=False)
    entries = out.split("\0")
    paths = []
    skip_next = False
    for entry in entries:
        if skip_next:
            skip_next = False
            continue
        if not entry:
            continue
        status, path = entry[:2], entry[3:]
        if status and status[0] == "R":
            skip_next = True
        paths.append(path)
    return paths


def _kill_process_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


def run_preflight(
    worktree: WorktreeHandle,
    command: list[str] | None,
    denylist_patterns: list[str] = (),
    timeout_s: float = 30.0,
    passthrough: tuple[str, ...] | list[str] = (),
) -> PreflightReport:
    """Gate a worktree's current state before training.

    Runs the compile command (if configured) in the worktree, then scans
    every file the worktree changed relative to its baseline against the
    denylist regexes.
    """
    if command:
        try:
            proc = subprocess.run(
                command, cwd=str(worktree.path), env=scrubbed_env(passthrough),
                capture_output=True, text=True, timeout=timeout_s,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            return PreflightReport(False, "compile", f"{type(exc).__name__}: {exc}")
        if proc.returncode != 0:
            detail = tail_lines(proc.stderr or proc.stdout, DEFAULT_LOG_EXCERPT_LINES)
            return PreflightReport(False, "compile", detail)

    compiled = [re.compile(p) for p in denylist_patterns]
    if compiled:
        for rel in changed_files(worktree):
            target = worktree.path / rel
            if not target.is_file():
                continue
            text = target.read_text(encoding="utf-8", errors="replace")
            for pattern in compiled:
                if pattern.search(text):
                    return PreflightReport(False, "denylist", f"{rel}: matches {pattern.pattern!r}")
    return PreflightReport(True, "none")


def evaluate(
    worktree: WorktreeHandle,
    command: list[str],
    timeout_s: float = 120.0,
    metric_pattern: str = DEFAULT_METRIC_PATTERN,
    log_excerpt_lines: int = DEFAULT_LOG_EXCERPT_LINES,
    passthrough: tuple[str, ...] | list[str] = (),
) -> EvalOutcome:
    """Run the training command in the worktree and classify the result.

    The command runs in its own process group; on timeout the whole group
    is killed, so a stuck child cannot outlive the evaluation.  Exit code
    zero without a parseable, finite, positive metric is still a crash.
    """
    started = time.monotonic()
    try:
        proc = subprocess.Popen(
            command, cwd=str(worktree.path), env=scrubbed_env(passthrough),
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
            text=True, start_new_session=True,
        )
    except OSError as exc:
        return EvalOutcome(EvalStatus.CRASH, None, 0.0, "", f"spawn failure: {exc}")
    try:
        output, _ = proc.communicate(timeout=timeout_s)
    except subprocess.TimeoutExpired:
        _kill_process_group(proc)
        output, _ = proc.communicate()
        duration = time.monotonic() - started
        return EvalOutcome(
            EvalStatus.TIMEOUT, None, duration,
            tail_lines(output or "", log_excerpt_lines),
            f"killed after {timeout_s:g}s",
        )
    finally:
        _kill_process_group(proc)
    duration = time.monotonic() - started
    excerpt = tail_lines(output or "", log_excerpt_lines)
    if proc.returncode != 0:
        return EvalOutcome(EvalStatus.CRASH, None, duration, excerpt, f"exit status {proc.returncode}")
    metric = extract_metric(output or "", metric_pattern)
    if metric is None:
        return EvalOutcome(EvalStatus.CRASH, None, duration, excerpt, "MetricMissing")
    if not math.isfinite(metric) or metric <= 0.0:
        return EvalOutcome(EvalStatus.CRASH, None, duration, excerpt, f"MetricInvalid: {metric!r}")
    return EvalOutcome(EvalStatus.SUCCESS, metric, duration, excerpt)
