"""Lifecycle telemetry: event log, aggregation, run report, and replay.

Every proposal a backend produces ends in exactly one of four states:

* ``ProposalFailure``   - reply unparseable or edits inapplicable
* ``PreflightFailure``  - edits applied but the pre-training gate failed
* ``TrainingCrash``     - training ran and crashed, timed out, or
  produced no usable metric
* ``TrainingSuccess``   - training ran and reported a valid metric

Events are appended to a JSONL log as they happen; the log plus the run
report (which embeds the accepted patch chain) is enough to reproduce the
promoted code states without any agent, which ``replay`` verifies tree
hash by tree hash.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

from .execution import EvalOutcome, EvalStatus, PreflightReport
from .patching import ApplyError, ParseError, Proposal, apply_edits, parse_proposal
from .worktrees import (
    RepoHandle,
    baseline_commit,
    create_worktree,
    destroy_worktree,
    promote,
    tree_of_commit,
    worktree_tree_hash,
)

COMMIT_EPOCH = 1_600_000_000  # promoted commit dates: epoch + round number


def promotion_message(round_number: int, idea_summary: str) -> str:
    """Commit message for a promoted round.

    Used verbatim by both the live run and replay; commit ids only
    reproduce if the two agree byte for byte.
    """
    summary = " ".join(idea_summary.split())
    return f"round {round_number}: {summary}"


class StorageError(RuntimeError):
    """The event log could not be written; the run must stop."""


class MalformedLog(RuntimeError):
    """The event log is unreadable at a specific line."""

    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number


class ReplayDivergence(RuntimeError):
    """Replayed state stopped matching the recorded run at a round."""

    def __init__(self, round_number: int, reason: str):
        super().__init__(f"round {round_number}: {reason}")
        self.round = round_number


class LifecycleState(str, Enum):
    PROPOSAL_FAILURE = "ProposalFailure"
    PREFLIGHT_FAILURE = "PreflightFailure"
    TRAINING_CRASH = "TrainingCrash"
    TRAINING_SUCCESS = "TrainingSuccess"


STATE_ORDER = (
    LifecycleState.PROPOSAL_FAILURE,
    LifecycleState.PREFLIGHT_FAILURE,
    LifecycleState.TRAINING_CRASH,
    LifecycleState.TRAINING_SUCCESS,
)


def classify(
    parse_result: Proposal | ParseError | ApplyError,
    preflight: PreflightReport | None = None,
    eval_outcome: EvalOutcome | None = None,
) -> LifecycleState:
    """Map one proposal's pipeline results to its single lifecycle state.

    Later stages must be absent when an earlier one failed; a complete
    prefix is required otherwise, so an accidentally skipped stage is a
    programming error, not a silent success.
    """
    if isinstance(parse_result, (ParseError, ApplyError)):
        return LifecycleState.PROPOSAL_FAILURE
    if preflight is None:
        raise ValueError("a parsed proposal needs a preflight result to classify")
    if not preflight.passed:
        return LifecycleState.PREFLIGHT_FAILURE
    if eval_outcome is None:
        raise ValueError("a preflighted proposal needs an evaluation result to classify")
    if eval_outcome.status is not EvalStatus.SUCCESS:
        return LifecycleState.TRAINING_CRASH
    return LifecycleState.TRAINING_SUCCESS


def utc_now() -> str:
    return dt.datetime.now(dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass(frozen=True)
class TelemetryEvent:
    """One proposal's classified outcome."""

    run_id: str
    round: int
    topology: str
    source: str
    state: LifecycleState
    baseline_metric: float
    metric: float | None = None
    duration_s: float = 0.0
    timestamp: str = field(default_factory=utc_now)
    detail: str = ""

    def __post_init__(self) -> None:
        has_metric = self.metric is not None
        if has_metric != (self.state is LifecycleState.TRAINING_SUCCESS):
            raise ValueError("metric must be present exactly for TrainingSuccess events")


class EventSink:
    """Append-only JSONL writer, flushed per record, serialized across threads."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self.path.open("a", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot open event log {self.path}: {exc}") from exc

    def _write(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            try:
                self._handle.write(line + "\n")
                self._handle.flush()
            except (OSError, ValueError) as exc:
                raise StorageError(f"cannot append to event log {self.path}: {exc}") from exc

    def emit_run_start(
        self, run_id: str, topology: str, seed: int, t_max_s: float,
        k: int, turns: int, baseline_metric: float, initial_commit: str,
    ) -> None:
        self._write({
            "kind": "run_start", "run_id": run_id, "topology": topology,
            "seed": seed, "t_max_s": t_max_s, "k": k, "turns": turns,
            "baseline_metric": baseline_metric, "initial_commit": initial_commit,
            "timestamp": utc_now(),
        })

    def emit(self, event: TelemetryEvent) -> None:
        record = asdict(event)
        record["state"] = event.state.value
        record["kind"] = "proposal"
        self._write(record)

    def emit_promotion(
        self, run_id: str, round_number: int, source: str, commit: str,
        tree_hash: str, idea_summary: str, metric: float, elapsed_s: float,
    ) -> None:
        self._write({
            "kind": "promotion", "run_id": run_id, "round": round_number,
            "source": source, "commit": commit, "tree_hash": tree_hash,
            "idea_summary": idea_summary, "metric": metric,
            "elapsed_s": elapsed_s, "timestamp": utc_now(),
        })

    def emit_round_start(self, run_id: str, round_number: int, elapsed_s: float) -> None:
        self._write({
            "kind": "round_start", "run_id": run_id, "round": round_number,
            "elapsed_s": elapsed_s, "timestamp": utc_now(),
        })

    def emit_run_end(
        self, run_id: str, final_metric: float, final_commit: str,
        final_tree_hash: str, rounds_executed: int, promotions: int,
    ) -> None:
        self._write({
            "kind": "run_end", "run_id": run_id, "final_metric": final_metric,
            "final_commit": final_commit, "final_tree_hash": final_tree_hash,
            "rounds_executed": rounds_executed, "promotions": promotions,
            "timestamp": utc_now(),
        })

    def close(self) -> None:
        with self._lock:
            try:
                self._handle.close()
            except OSError:
                pass


def read_events(path: str | Path) -> list[dict]:
    """All records of a JSONL event log, with line-accurate failure."""
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLog(number, f"invalid JSON: {exc}") from exc
        if not isinstance(record, dict) or "kind" not in record:
            raise MalformedLog(number, "record has no kind")
        records.append(record)
    return records


# Volatile fields stripped when comparing two runs of the same config.
VOLATILE_FIELDS = ("timestamp", "duration_s", "elapsed_s", "latency_s")


def normalize_events(records: list[dict]) -> list[dict]:
    """Drop wall-clock fields so structurally identical runs compare equal."""
    normalized = []
    for record in records:
        normalized.append({k: v for k, v in record.items() if k not in VOLATILE_FIELDS})
    return normalized


@dataclass
class StateTable:
    counts: dict[str, int]
    ratios: dict[str, float]
    total: int


@dataclass
class ProgressPoint:
    round: int
    elapsed_s: float
    best_metric: float
    delta_val_bpb: float  # cumulative improvement over the baseline


@dataclass
class Aggregate:
    run_id: str
    topology: str
    baseline_metric: float
    state_table: StateTable
    progress: list[ProgressPoint]
    promotions: list[dict]
    final_metric: float
    rounds_executed: int


def tabulate_states(records: list[dict]) -> StateTable:
    """Count and ratio each lifecycle state among proposal events."""
    counts = {state.value: 0 for state in STATE_ORDER}
    for record in records:
        if record.get("kind") != "proposal":
            continue
        state = record.get("state")
        if state not in counts:
            raise MalformedLog(0, f"unknown lifecycle state {state!r}")
        counts[state] += 1
    total = sum(counts.values())
    if total:
        ratios = {state: count / total for state, count in counts.items()}
    else:
        ratios = {state: 0.0 for state in counts}
    return StateTable(counts=counts, ratios=ratios, total=total)


def aggregate(path: str | Path) -> Aggregate:
    """Summarize an event log into state table, progress series, promotions."""
    records = read_events(path)
    start = next((r for r in records if r["kind"] == "run_start"), None)
    if start is None:
        raise MalformedLog(1, "log has no run_start record")
    baseline = float(start["baseline_metric"])

    promotions = [r for r in records if r["kind"] == "promotion"]
    round_starts = {r["round"]: float(r.get("elapsed_s", 0.0)) for r in records if r["kind"] == "round_start"}
    max_round = 0
    for record in records:
        if record.get("kind") in ("proposal", "promotion", "round_start"):
            max_round = max(max_round, int(record.get("round", 0)))

    by_round_metric = {int(r["round"]): float(r["metric"]) for r in promotions}
    progress = [ProgressPoint(0, 0.0, baseline, 0.0)]
    best = baseline
    for round_number in range(1, max_round + 1):
        if round_number in by_round_metric:
            best = min(best, by_round_metric[round_number])
        progress.append(ProgressPoint(
            round_number, round_starts.get(round_number, 0.0), best, baseline - best,
        ))

    end = next((r for r in records if r["kind"] == "run_end"), None)
    final_metric = float(end["final_metric"]) if end else best
    return Aggregate(
        run_id=start["run_id"], topology=start["topology"], baseline_metric=baseline,
        state_table=tabulate_states(records), progress=progress,
        promotions=promotions, final_metric=final_metric, rounds_executed=max_round,
    )


def check_consistency(records: list[dict]) -> list[str]:
    """Cross-check a log's promotion records against its proposal events.

    Every promotion must match a TrainingSuccess event from the same round
    carrying the same metric, and ratios must sum to one.
    Returns human-readable problems; empty means consistent.
    """
    problems = []
    successes: dict[int, list[float]] = {}
    for r in records:
        if r.get("kind") == "proposal" and r.get("state") == LifecycleState.TRAINING_SUCCESS.value:
            successes.setdefault(r["round"], []).append(r["metric"])
    for record in records:
        if record.get("kind") != "promotion":
            continue
        round_number = record["round"]
        metrics = successes.get(round_number, [])
        # a team promotion is labeled "team" while its events carry role
        # names, so the match is by round and metric value
        if not any(math.isclose(m, record["metric"], rel_tol=0, abs_tol=1e-12) for m in metrics):
            problems.append(
                f"promotion in round {round_number} (metric {record['metric']}) "
                f"has no matching TrainingSuccess event"
            )
    table = tabulate_states(records)
    if table.total and abs(sum(table.ratios.values()) - 1.0) > 1e-9:
        problems.append("state ratios do not sum to 1")
    return problems


def write_state_csv(path: str | Path, table: StateTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["state", "count", "ratio"])
        for state in STATE_ORDER:
            writer.writerow([state.value, table.counts[state.value], f"{table.ratios[state.value]:.6f}"])


def write_progress_csv(path: str | Path, progress: list[ProgressPoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["round", "elapsed_s", "best_val_bpb", "delta_val_bpb"])
        for point in progress:
            writer.writerow([point.round, f"{point.elapsed_s:.3f}", f"{point.best_metric:.6f}", f"{point.delta_val_bpb:.6f}"])


@dataclass
class ChainEntry:
    """One promoted round: enough to reproduce its exact tree."""

    round: int
    source: str
    commit: str
    tree_hash: str
    metric: float
    idea_summary: str
    applied_proposals: list[str]  # rendered proposal texts, application order


@dataclass
class RunReport:
    """Self-contained summary of a finished run, written as summary.json."""

    run_id: str
    topology: str
    seed: int
    baseline_metric: float
    final_metric: float
    delta_val_bpb: float
    rounds_executed: int
    promotions: int
    initial_commit: str
    final_commit: str
    final_tree_hash: str
    state_counts: dict[str, int]
    state_ratios: dict[str, float]
    accepted_patch_chain: list[ChainEntry]
    round_starts_elapsed_s: list[float]
    elapsed_s: float
    started_at: str
    finished_at: str
    config: dict

    def save(self, path: str | Path) -> None:
        payload = asdict(self)
        try:
            Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write report {path}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        data["accepted_patch_chain"] = [ChainEntry(**entry) for entry in data["accepted_patch_chain"]]
        return cls(**data)


def _apply_proposal_text(worktree, proposal_text: str, round_number: int) -> None:
    parsed = parse_proposal(proposal_text)
    if isinstance(parsed, ParseError):
        raise ReplayDivergence(round_number, f"recorded proposal does not parse: {parsed.kind.value}")
    file_map: dict[str, str] = {}
    for edit in parsed.edits:
        target = worktree.path / edit.target_file
        if edit.target_file not in file_map and target.is_file():
            file_map[edit.target_file] = target.read_text(encoding="utf-8")
    result = apply_edits(file_map, parsed.edits)
    if isinstance(result, ApplyError):
        raise ReplayDivergence(round_number, f"recorded proposal does not apply: {result.kind.value}")
    for rel, content in result.items():
        target = worktree.path / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")


def replay(report: RunReport, repo: RepoHandle, scratch_dir: str | Path) -> str:
    """Re-apply the accepted patch chain and verify every recorded tree.

    The repository must sit at the run's initial commit.  Each chain entry
    is applied in a fresh worktree of the current tip; the resulting tree
    hash must equal the recorded one before it is committed.  Divergence
    is reported at the first round where the trees differ (or the entry
    fails to apply).  Returns the final commit id.
    """
    tip = baseline_commit(repo)
    if tip != report.initial_commit:
        raise ReplayDivergence(0, (
            f"repository is at {tip[:12]}, but the run started from "
            f"{report.initial_commit[:12]}"
        ))
    scratch = Path(scratch_dir)
    for entry in report.accepted_patch_chain:
        worktree = create_worktree(repo, tip, f"replay-{entry.round}", scratch / f"replay-{entry.round}")
        try:
            for proposal_text in entry.applied_proposals:
                _apply_proposal_text(worktree, proposal_text, entry.round)
            tree = worktree_tree_hash(worktree)
            if tree != entry.tree_hash:
                raise ReplayDivergence(entry.round, (
                    f"replayed tree {tree[:12]} does not match recorded {entry.tree_hash[:12]}"
                ))
            tip = promote(
                repo, worktree,
                promotion_message(entry.round, entry.idea_summary),
                timestamp=COMMIT_EPOCH + entry.round,
            )
        finally:
            destroy_worktree(worktree)
    final_round = report.accepted_patch_chain[-1].round if report.accepted_patch_chain else 0
    final_tree = tree_of_commit(repo, tip)
    if final_tree != report.final_tree_hash:
        raise ReplayDivergence(final_round, (
            f"final tree {final_tree[:12]} does not match recorded {report.final_tree_hash[:12]}"
        ))
    return tip
