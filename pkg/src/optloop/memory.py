"""Append-only experience and meta memory files.

Two human-readable markdown files accumulate what worked, what failed, and
what crashed across rounds: an experience file shared by every topology,
and a meta file recording team-level collaboration outcomes.  Entries are
one line each so the context renderer can truncate on entry boundaries,
and lines carry no timestamps so a rerun with the same inputs produces
byte-identical files.
"""

from __future__ import annotations

import shutil
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

EXPERIENCE_KIND = "experience"
META_KIND = "meta"

_HEADERS = {
    EXPERIENCE_KIND: "# Experience memory\n",
    META_KIND: "# Team meta-memory\n",
}

_TEAM_ONLY_OUTCOMES = frozenset({"UnresolvableCrash", "EffectiveCollaboration"})


class Outcome(str, Enum):
    SUCCESS = "Success"
    FAILED = "Failed"
    CRASH = "Crash"
    UNRESOLVABLE_CRASH = "UnresolvableCrash"
    EFFECTIVE_COLLABORATION = "EffectiveCollaboration"


class StorageError(RuntimeError):
    """The memory file could not be written; the run must stop."""


@dataclass(frozen=True)
class MemoryRecord:
    """One remembered outcome.

    ``source`` names who produced the change (``worker-2``, ``merged``,
    a team role, ``engineer``, or ``team`` for whole-round outcomes).
    Metrics are optional because crashes produce none.
    """

    round: int
    topology: str
    source: str
    idea_summary: str
    outcome: Outcome
    metric_before: float | None = None
    metric_after: float | None = None

    def validate(self) -> None:
        if self.outcome is Outcome.SUCCESS:
            if self.metric_before is None or self.metric_after is None:
                raise ValueError("a Success record needs both metrics")
            if not self.metric_after < self.metric_before:
                raise ValueError(
                    f"a Success record must improve the metric "
                    f"({self.metric_after} is not below {self.metric_before})"
                )
        if self.outcome.value in _TEAM_ONLY_OUTCOMES and self.topology != "team":
            raise ValueError(f"{self.outcome.value} records only exist for the team topology")


def _fmt_metric(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def format_record(record: MemoryRecord) -> str:
    """Render a record as its single memory line (no trailing newline)."""
    summary = " ".join(record.idea_summary.split()) or "(no summary)"
    return (
        f"- [round {record.round}][{record.topology}][{record.source}]"
        f"[{record.outcome.value}] val_bpb {_fmt_metric(record.metric_before)}"
        f"→{_fmt_metric(record.metric_after)} :: {summary}"
    )


class MemoryFile:
    """An append-only memory file with serialized writers."""

    def __init__(self, path: str | Path, kind: str = EXPERIENCE_KIND):
        if kind not in _HEADERS:
            raise ValueError(f"unknown memory kind {kind!r}")
        self.path = Path(path)
        self.kind = kind
        self._lock = threading.Lock()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists() or not self.path.read_text(encoding="utf-8"):
                self.path.write_text(_HEADERS[kind], encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot initialize memory file {self.path}: {exc}") from exc

    def record(self, record: MemoryRecord) -> None:
        """Validate and append one entry."""
        record.validate()
        line = format_record(record) + "\n"
        with self._lock:
            try:
                with self.path.open("a", encoding="utf-8") as handle:
                    handle.write(line)
                    handle.flush()
            except OSError as exc:
                raise StorageError(f"cannot append to {self.path}: {exc}") from exc

    def entries(self) -> list[str]:
        """All entry lines, oldest first."""
        try:
            text = self.path.read_text(encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot read {self.path}: {exc}") from exc
        return [line for line in text.splitlines() if line.startswith("- ")]

    def render_context(self, limit: int, char_budget: int = 6000) -> str:
        """Prompt block with up to ``limit`` newest entries, oldest first.

        Entries are dropped oldest-first (never split) until the block fits
        the character budget.  ``limit=0`` yields a header-only block.
        """
        header = _HEADERS[self.kind].rstrip("\n").lstrip("# ")
        header = f"## {header}"
        if limit <= 0:
            return header + "\n"
        newest = self.entries()[-limit:]
        selected: list[str] = []
        total = len(header) + 1
        for entry in reversed(newest):
            if total + len(entry) + 1 > char_budget:
                break
            selected.append(entry)
            total += len(entry) + 1
        selected.reverse()
        return "\n".join([header, *selected]) + "\n"


def seed_from(source_path: str | Path, dest_path: str | Path, kind: str) -> MemoryFile:
    """Start a run's memory file from a prior run's file."""
    dest = Path(dest_path)
    try:
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(source_path, dest)
    except OSError as exc:
        raise StorageError(f"cannot seed memory from {source_path}: {exc}") from exc
    return MemoryFile(dest, kind)
