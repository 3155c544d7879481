"""Coordination procedures and the round loop.

Three topologies share one pipeline (propose, parse, apply, preflight,
evaluate) and one acceptance rule, and differ only in how proposals are
produced within a round:

* ``single``    - one worker per round in its own worktree
* ``subagent``  - K workers in parallel worktrees; when more than one
  improves, a coordinator merges the improving candidates and the merged
  patch competes with them for promotion
* ``team``      - one shared worktree edited turn by turn by role experts
  with a growing handoff context; a failed check or crashed training
  triggers one engineer repair attempt before the round is given up

The wall-clock budget only gates round starts: a running round may finish
past the limit, but no new round begins once the remaining time drops to
the configured margin.
"""

from __future__ import annotations

import logging
import math
import os
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import agents as agents_mod
from .agents import AgentRequest, AgentResponse, PromptSet, ScriptedBackend, HttpBackend
from .config import RunConfig, SUBAGENT, TEAM, derive_run_id, snapshot, validate_config
from .execution import EvalOutcome, EvalStatus, PreflightReport, evaluate, run_preflight
from .memory import (
    EXPERIENCE_KIND,
    META_KIND,
    MemoryFile,
    MemoryRecord,
    Outcome,
    seed_from,
)
from .patching import (
    ApplyError,
    ApplyErrorKind,
    ParseError,
    Proposal,
    apply_edits,
    render_edits,
    render_proposal,
    parse_proposal,
)
from .telemetry import (
    COMMIT_EPOCH,
    ChainEntry,
    EventSink,
    LifecycleState,
    RunReport,
    TelemetryEvent,
    aggregate,
    classify,
    promotion_message,
    utc_now,
    write_progress_csv,
    write_state_csv,
)
from .worktrees import (
    RepoHandle,
    WorktreeHandle,
    baseline_commit,
    create_worktree,
    destroy_worktree,
    open_repo,
    promote,
    tree_of_commit,
    worktree_tree_hash,
    _git,
)

log = logging.getLogger(__name__)

MERGED_SOURCE = "merged"
TEAM_SOURCE = "team"


class RunError(RuntimeError):
    """The run cannot proceed for infrastructure reasons (not a proposal failure)."""


def accept(l_new: float, l_best: float) -> bool:
    """Strict improvement rule: a candidate replaces the best only if lower.

    Non-finite values never improve anything; the evaluation layer already
    rejects them, so this guard is the last line of defense.
    """
    if not math.isfinite(l_new):
        return False
    return l_new < l_best


@dataclass
class Budget:
    """Wall-clock budget; the baseline evaluation runs before it starts."""

    t_max_s: float
    min_round_margin_s: float = 0.0
    started_at: float = field(default_factory=time.monotonic)

    def elapsed(self) -> float:
        return time.monotonic() - self.started_at

    def remaining(self) -> float:
        return max(0.0, self.t_max_s - self.elapsed())

    def round_may_start(self) -> bool:
        return self.remaining() > self.min_round_margin_s


@dataclass
class Candidate:
    """An evaluated, training-successful proposal kept for selection."""

    source: str
    proposal: Proposal
    proposal_text: str
    worktree: WorktreeHandle
    metric: float
    idea_summary: str


def _selection_key(candidate: Candidate) -> tuple:
    # lowest metric wins; on a tie, an individual worker beats the merged
    # patch (the merge must strictly surpass every input to be chosen),
    # and lower worker index breaks worker ties
    is_merged = 1 if candidate.source == MERGED_SOURCE else 0
    index = 0
    if candidate.source.startswith("worker-"):
        index = int(candidate.source.rsplit("-", 1)[1])
    return (candidate.metric, is_merged, index)


def select_best(candidates: list[Candidate]) -> Candidate:
    """Deterministic argmin over evaluated candidates."""
    if not candidates:
        raise ValueError("select_best needs at least one candidate")
    return min(candidates, key=_selection_key)


@dataclass(frozen=True)
class HandoffEntry:
    """What one team slot leaves for its successors: conclusions only."""

    role: str
    idea_summary: str
    motivation: str
    diff: str


class HandoffContext:
    """Ordered, append-only record of a team round's turns."""

    def __init__(self) -> None:
        self.entries: list[HandoffEntry] = []

    def add(self, entry: HandoffEntry) -> None:
        self.entries.append(entry)

    def add_rejection(self, role: str, reason: str) -> None:
        self.add(HandoffEntry(role, f"(patch rejected: {reason})", "", ""))

    def render(self) -> str:
        lines = ["## Handoff context"]
        if not self.entries:
            lines.append("(no contributions yet)")
        for number, entry in enumerate(self.entries, start=1):
            lines.append(f"### {number}. {entry.role}")
            lines.append(f"Idea: {entry.idea_summary}")
            if entry.motivation:
                lines.append(f"Motivation: {entry.motivation}")
            if entry.diff:
                lines.append("Edits:")
                lines.append(entry.diff)
        return "\n".join(lines) + "\n"


@dataclass
class PipelineResult:
    """Everything one proposal attempt produced, before telemetry."""

    source: str
    attempt: int
    response: AgentResponse | None = None
    parse_result: Proposal | ParseError | ApplyError | None = None
    preflight: PreflightReport | None = None
    outcome: EvalOutcome | None = None
    proposal_text: str = ""
    worktree: WorktreeHandle | None = None

    def state(self) -> LifecycleState:
        return classify(self.parse_result, self.preflight, self.outcome)


class Orchestrator:
    """Owns one run: repository, budget, memory, telemetry, and rounds."""

    def __init__(self, cfg: RunConfig, backend=None):
        validate_config(cfg, for_run=True)
        self.cfg = cfg
        self.topology = cfg.topology.name
        self.run_id = derive_run_id(cfg)
        self.repo = open_repo(cfg.repo.root_path, cfg.repo.main_branch)
        self._require_clean_repo()

        self.run_dir = Path(cfg.out) / self.run_id
        if self.run_dir.exists():
            raise RunError(
                f"run directory {self.run_dir} already exists; "
                f"pass a fresh out directory or run_id"
            )
        self.run_dir.mkdir(parents=True)
        (self.run_dir / "candidates").mkdir()
        scratch_root = cfg.repo.scratch_dir or f"{self.repo.root_path}.scratch"
        self.scratch = Path(scratch_root) / self.run_id

        self.prompts = PromptSet(cfg.agents.prompt_dir or None)
        self.backend = backend if backend is not None else make_backend(cfg, self.prompts)
        self.sink = EventSink(self.run_dir / "events.jsonl")
        self.exp_memory = self._open_memory(
            cfg.memory.seed_experience, self.run_dir / "program_exp.md", EXPERIENCE_KIND)
        self.meta_memory = self._open_memory(
            cfg.memory.seed_meta, self.run_dir / "program_meta.md", META_KIND)

        permits = cfg.execution.eval_permits or cfg.topology.k
        self._eval_permits = threading.BoundedSemaphore(max(1, permits))
        self._live_worktrees: dict[str, WorktreeHandle] = {}
        self._worktree_lock = threading.Lock()

        self.l_best = float("nan")
        self.round = 0
        self.promotions = 0
        self.chain: list[ChainEntry] = []
        self.round_starts: list[float] = []
        self.budget: Budget | None = None

    # ----- infrastructure helpers -------------------------------------------

    def _require_clean_repo(self) -> None:
        status = _git(["status", "--porcelain"], cwd=self.repo.root_path)
        if status:
            raise RunError(
                f"target repository {self.repo.root_path} has uncommitted changes; "
                f"commit or stash them first"
            )

    @staticmethod
    def _open_memory(seed_path: str, dest: Path, kind: str) -> MemoryFile:
        if seed_path:
            return seed_from(seed_path, dest, kind)
        return MemoryFile(dest, kind)

    def _worktree(self, name: str) -> WorktreeHandle:
        dest = self.scratch / f"round-{self.round:03d}" / name
        handle = create_worktree(self.repo, baseline_commit(self.repo), name, dest)
        with self._worktree_lock:
            self._live_worktrees[name] = handle
        return handle

    def _destroy(self, handle: WorktreeHandle | None) -> None:
        if handle is None:
            return
        destroy_worktree(handle)
        with self._worktree_lock:
            self._live_worktrees.pop(handle.id, None)

    def _cleanup_all_worktrees(self) -> None:
        with self._worktree_lock:
            leftovers = list(self._live_worktrees.values())
            self._live_worktrees.clear()
        for handle in leftovers:
            destroy_worktree(handle)

    def _code_context(self, worktree: WorktreeHandle) -> str:
        parts = []
        for rel in self.cfg.repo.target_files:
            target = worktree.path / rel
            content = target.read_text(encoding="utf-8") if target.is_file() else "(file missing)\n"
            parts.append(f"--- file: {rel} ---\n{content}")
        return "\n".join(parts)

    def _memory_context(self, include_meta: bool) -> str:
        mem_cfg = self.cfg.memory
        block = self.exp_memory.render_context(mem_cfg.context_entries, mem_cfg.char_budget)
        if include_meta:
            block += "\n" + self.meta_memory.render_context(mem_cfg.context_entries, mem_cfg.char_budget)
        return block

    def _log_candidate(self, result: PipelineResult) -> None:
        path = self.run_dir / "candidates" / f"round-{self.round:03d}-{result.source}.log"
        parts = [f"round: {self.round}", f"source: {result.source}", f"attempt: {result.attempt}"]
        if result.response is not None:
            parts.append("--- raw reply ---")
            parts.append(result.response.raw_text)
        if isinstance(result.parse_result, ParseError):
            parts.append(f"parse error: {result.parse_result.kind.value} "
                         f"at line {result.parse_result.location}: {result.parse_result.detail}")
        if isinstance(result.parse_result, ApplyError):
            parts.append(f"apply error: {result.parse_result.kind.value} "
                         f"edit {result.parse_result.edit_index}: {result.parse_result.detail}")
        if result.preflight is not None and not result.preflight.passed:
            parts.append(f"preflight failed at {result.preflight.stage}: {result.preflight.detail}")
        if result.outcome is not None:
            parts.append(f"evaluation: {result.outcome.status.value} "
                         f"metric={result.outcome.metric} detail={result.outcome.detail}")
            parts.append("--- log excerpt ---")
            parts.append(result.outcome.log_excerpt)
        try:
            path.write_text("\n".join(parts) + "\n", encoding="utf-8")
        except OSError:
            log.warning("could not write candidate log %s", path, exc_info=True)

    # ----- pipeline stages ---------------------------------------------------

    def _apply_to_worktree(
        self, worktree: WorktreeHandle, proposal: Proposal
    ) -> ApplyError | None:
        """Apply a parsed proposal to worktree files; None means success."""
        file_map: dict[str, str] = {}
        for index, edit in enumerate(proposal.edits):
            if edit.target_file in file_map:
                continue
            target = worktree.path / edit.target_file
            if not target.is_file():
                return ApplyError(ApplyErrorKind.UNKNOWN_FILE, index, detail=edit.target_file)
            file_map[edit.target_file] = target.read_text(encoding="utf-8")
        result = apply_edits(file_map, proposal.edits)
        if isinstance(result, ApplyError):
            return result
        for rel, content in result.items():
            if content != file_map.get(rel):
                (worktree.path / rel).write_text(content, encoding="utf-8")
        return None

    def _run_checks(self, result: PipelineResult, worktree: WorktreeHandle) -> None:
        """Preflight then (if it passes) evaluate, filling the result in place."""
        exe = self.cfg.execution
        result.preflight = run_preflight(
            worktree, exe.preflight_command or None, exe.denylist_patterns,
            exe.preflight_timeout_s, exe.env_passthrough,
        )
        if not result.preflight.passed:
            return
        with self._eval_permits:
            result.outcome = evaluate(
                worktree, exe.eval_command, exe.eval_timeout_s,
                exe.metric_pattern, exe.log_excerpt_lines, exe.env_passthrough,
            )

    def _propose_pipeline(
        self, request: AgentRequest, worktree: WorktreeHandle
    ) -> PipelineResult:
        """One full proposal attempt in an isolated worktree."""
        result = PipelineResult(source=request.source, attempt=request.attempt, worktree=worktree)
        result.response = self.backend.propose(request)
        parsed = parse_proposal(result.response.raw_text)
        if isinstance(parsed, ParseError):
            result.parse_result = parsed
            return result
        apply_error = self._apply_to_worktree(worktree, parsed)
        if apply_error is not None:
            result.parse_result = apply_error
            return result
        result.parse_result = parsed
        result.proposal_text = render_proposal(parsed)
        self._run_checks(result, worktree)
        return result

    def _emit(self, result: PipelineResult) -> None:
        state = result.state()
        detail = ""
        if isinstance(result.parse_result, ParseError):
            detail = f"parse: {result.parse_result.kind.value}: {result.parse_result.detail}"
        elif isinstance(result.parse_result, ApplyError):
            detail = f"apply: {result.parse_result.kind.value}: {result.parse_result.detail}"
        elif result.preflight is not None and not result.preflight.passed:
            detail = f"{result.preflight.stage}: {result.preflight.detail}"
        elif result.outcome is not None and result.outcome.status is not EvalStatus.SUCCESS:
            detail = f"{result.outcome.status.value}: {result.outcome.detail}"
        self.sink.emit(TelemetryEvent(
            run_id=self.run_id, round=self.round, topology=self.topology,
            source=result.source, state=state, baseline_metric=self.l_best,
            metric=result.outcome.metric if state is LifecycleState.TRAINING_SUCCESS else None,
            duration_s=result.outcome.duration_s if result.outcome else 0.0,
            detail=detail,
        ))
        self._log_candidate(result)

    def _record(self, source: str, outcome: Outcome, idea_summary: str,
                before: float | None = None, after: float | None = None,
                meta: bool = False) -> None:
        record = MemoryRecord(
            round=self.round, topology=self.topology, source=source,
            idea_summary=idea_summary, outcome=outcome,
            metric_before=before, metric_after=after,
        )
        (self.meta_memory if meta else self.exp_memory).record(record)

    def _promote(self, worktree: WorktreeHandle, source: str, metric: float,
                 idea_summary: str, applied: list[Proposal]) -> None:
        # only the files the proposals touched are committed: training
        # by-products stay in the scratch worktree, and the accepted patch
        # chain replays to the identical tree
        touched = sorted({edit.target_file for proposal in applied for edit in proposal.edits})
        applied_proposals = [render_proposal(proposal) for proposal in applied]
        tree = worktree_tree_hash(worktree, touched)
        commit = promote(
            self.repo, worktree, promotion_message(self.round, idea_summary),
            timestamp=COMMIT_EPOCH + self.round, paths=touched,
        )
        self.chain.append(ChainEntry(
            round=self.round, source=source, commit=commit, tree_hash=tree,
            metric=metric, idea_summary=idea_summary,
            applied_proposals=applied_proposals,
        ))
        self.sink.emit_promotion(
            self.run_id, self.round, source, commit, tree, idea_summary,
            metric, self.budget.elapsed() if self.budget else 0.0,
        )
        self._record(source, Outcome.SUCCESS, idea_summary, before=self.l_best, after=metric)
        self.l_best = metric
        self.promotions += 1

    # ----- rounds ------------------------------------------------------------

    def _round_single(self) -> None:
        worktree = self._worktree("worker-1")
        try:
            request = AgentRequest(
                role=agents_mod.WORKER, round=self.round, source="worker-1",
                code_context=self._code_context(worktree),
                memory_context=self._memory_context(include_meta=False),
            )
            result = self._propose_pipeline(request, worktree)
            self._emit(result)
            state = result.state()
            if state is LifecycleState.TRAINING_CRASH:
                summary = result.parse_result.idea_summary if isinstance(result.parse_result, Proposal) else ""
                self._record("worker-1", Outcome.CRASH, summary, before=self.l_best)
                return
            if state is not LifecycleState.TRAINING_SUCCESS:
                return
            proposal = result.parse_result
            metric = result.outcome.metric
            if accept(metric, self.l_best):
                self._promote(worktree, "worker-1", metric, proposal.idea_summary, [proposal])
            else:
                self._record("worker-1", Outcome.FAILED, proposal.idea_summary,
                             before=self.l_best, after=metric)
        finally:
            self._destroy(worktree)

    def _round_subagent(self) -> None:
        k = self.cfg.topology.k
        memory_context = self._memory_context(include_meta=False)
        worktrees = [self._worktree(f"worker-{i}") for i in range(1, k + 1)]

        def pipeline(index: int) -> PipelineResult:
            worktree = worktrees[index]
            request = AgentRequest(
                role=agents_mod.WORKER, round=self.round, source=worktree.id,
                code_context=self._code_context(worktree),
                memory_context=memory_context,
            )
            return self._propose_pipeline(request, worktree)

        try:
            with ThreadPoolExecutor(max_workers=k, thread_name_prefix="worker") as pool:
                results = list(pool.map(pipeline, range(k)))

            candidates: list[Candidate] = []
            for result in results:  # worker order keeps logs deterministic
                self._emit(result)
                state = result.state()
                if state is LifecycleState.TRAINING_SUCCESS:
                    proposal = result.parse_result
                    metric = result.outcome.metric
                    if accept(metric, self.l_best):
                        candidates.append(Candidate(
                            source=result.source, proposal=proposal,
                            proposal_text=result.proposal_text,
                            worktree=result.worktree, metric=metric,
                            idea_summary=proposal.idea_summary,
                        ))
                        continue  # keep the worktree for possible promotion
                    self._record(result.source, Outcome.FAILED, proposal.idea_summary,
                                 before=self.l_best, after=metric)
                elif state is LifecycleState.TRAINING_CRASH:
                    summary = result.parse_result.idea_summary if isinstance(result.parse_result, Proposal) else ""
                    self._record(result.source, Outcome.CRASH, summary, before=self.l_best)
                self._destroy(result.worktree)

            if len(candidates) > 1:
                merged = self._merge_round(candidates, memory_context)
                if merged is not None:
                    candidates.append(merged)

            if candidates:
                best = select_best(candidates)
                if accept(best.metric, self.l_best):
                    self._promote(best.worktree, best.source, best.metric,
                                  best.idea_summary, [best.proposal])
                for candidate in candidates:
                    self._destroy(candidate.worktree)
        finally:
            for worktree in worktrees:
                self._destroy(worktree)

    def _merge_round(self, candidates: list[Candidate], memory_context: str) -> Candidate | None:
        """Coordinator merge: evaluated on the round baseline, kept if it trains."""
        worktree = self._worktree(MERGED_SOURCE)
        result = PipelineResult(source=MERGED_SOURCE, attempt=1, worktree=worktree)
        result.response = agents_mod.merge_candidates(
            self.backend, [(c.proposal, c.metric) for c in candidates],
            self.round, memory_context,
        )
        parsed = parse_proposal(result.response.raw_text)
        if isinstance(parsed, ParseError):
            result.parse_result = parsed
        else:
            apply_error = self._apply_to_worktree(worktree, parsed)
            if apply_error is not None:
                result.parse_result = apply_error
            else:
                result.parse_result = parsed
                result.proposal_text = render_proposal(parsed)
                self._run_checks(result, worktree)
        self._emit(result)
        state = result.state()
        if state is LifecycleState.TRAINING_SUCCESS:
            # the merged candidate joins selection regardless of its
            # metric; argmin decides whether it actually wins
            return Candidate(
                source=MERGED_SOURCE, proposal=parsed,
                proposal_text=result.proposal_text, worktree=worktree,
                metric=result.outcome.metric, idea_summary=parsed.idea_summary,
            )
        if state is LifecycleState.TRAINING_CRASH:
            summary = parsed.idea_summary if isinstance(parsed, Proposal) else ""
            self._record(MERGED_SOURCE, Outcome.CRASH, summary, before=self.l_best)
        self._destroy(worktree)
        return None

    def _round_team(self) -> None:
        topo = self.cfg.topology
        worktree = self._worktree(TEAM_SOURCE)
        handoff = HandoffContext()
        slot_results: list[PipelineResult] = []
        applied: list[PipelineResult] = []
        role_counts: Counter = Counter()
        try:
            for slot in range(topo.turns):
                role = topo.roles[slot % len(topo.roles)]
                role_counts[role] += 1
                request = AgentRequest(
                    role=role, round=self.round, source=role, attempt=role_counts[role],
                    code_context=self._code_context(worktree),
                    memory_context=self._memory_context(include_meta=True),
                    handoff_context=handoff.render(),
                )
                result = PipelineResult(source=role, attempt=role_counts[role], worktree=worktree)
                result.response = self.backend.propose(request)
                parsed = parse_proposal(result.response.raw_text)
                if isinstance(parsed, ParseError):
                    result.parse_result = parsed
                    handoff.add_rejection(role, f"unparseable reply ({parsed.kind.value})")
                    slot_results.append(result)
                    continue
                apply_error = self._apply_to_worktree(worktree, parsed)
                if apply_error is not None:
                    result.parse_result = apply_error
                    handoff.add_rejection(role, f"edits did not apply ({apply_error.kind.value})")
                    slot_results.append(result)
                    continue
                result.parse_result = parsed
                result.proposal_text = render_proposal(parsed)
                handoff.add(HandoffEntry(
                    role=role, idea_summary=parsed.idea_summary,
                    motivation=parsed.motivation, diff=render_edits(parsed.edits),
                ))
                slot_results.append(result)
                applied.append(result)

            # training happens once, after the whole chat
            shared = PipelineResult(source=TEAM_SOURCE, attempt=1, worktree=worktree)
            self._run_checks(shared, worktree)
            final_preflight, final_outcome = shared.preflight, shared.outcome
            engineer_result: PipelineResult | None = None

            crashed = (not final_preflight.passed) or final_outcome.status is not EvalStatus.SUCCESS
            if crashed:
                if not final_preflight.passed:
                    error_log = f"preflight {final_preflight.stage}: {final_preflight.detail}"
                else:
                    error_log = f"{final_outcome.detail}\n{final_outcome.log_excerpt}"
                engineer_result = PipelineResult(source=agents_mod.ENGINEER, attempt=1, worktree=worktree)
                engineer_result.response = agents_mod.debug_fix(
                    self.backend, self.round, error_log,
                    self._code_context(worktree), handoff.render(),
                )
                fixed_parse = parse_proposal(engineer_result.response.raw_text)
                if isinstance(fixed_parse, ParseError):
                    engineer_result.parse_result = fixed_parse
                else:
                    apply_error = self._apply_to_worktree(worktree, fixed_parse)
                    if apply_error is not None:
                        engineer_result.parse_result = apply_error
                    else:
                        engineer_result.parse_result = fixed_parse
                        engineer_result.proposal_text = render_proposal(fixed_parse)
                        self._run_checks(engineer_result, worktree)
                        final_preflight = engineer_result.preflight
                        final_outcome = engineer_result.outcome

            fixed = final_preflight.passed and final_outcome is not None \
                and final_outcome.status is EvalStatus.SUCCESS

            # an applied expert's fate is the round's final fate: the shared
            # worktree trains as one unit, after any engineer repair
            for result in slot_results:
                if isinstance(result.parse_result, Proposal):
                    result.preflight = final_preflight
                    result.outcome = final_outcome
                self._emit(result)
            if engineer_result is not None:
                self._emit(engineer_result)

            round_summary = "; ".join(r.parse_result.idea_summary for r in applied) or "(no applied edits)"
            if not fixed:
                self._record(
                    TEAM_SOURCE, Outcome.UNRESOLVABLE_CRASH, round_summary,
                    before=self.l_best, meta=True,
                )
                return

            l_shared = final_outcome.metric
            if accept(l_shared, self.l_best):
                proposals = [r.parse_result for r in applied]
                if engineer_result is not None and isinstance(engineer_result.parse_result, Proposal):
                    proposals.append(engineer_result.parse_result)
                before = self.l_best
                self._promote(worktree, TEAM_SOURCE, l_shared, round_summary, proposals)
                self._record(TEAM_SOURCE, Outcome.EFFECTIVE_COLLABORATION, round_summary,
                             before=before, after=l_shared, meta=True)
            else:
                self._record(TEAM_SOURCE, Outcome.FAILED, round_summary,
                             before=self.l_best, after=l_shared)
        finally:
            self._destroy(worktree)

    # ----- run ---------------------------------------------------------------

    def _evaluate_baseline(self) -> float:
        worktree = self._worktree("baseline")
        try:
            exe = self.cfg.execution
            report = run_preflight(
                worktree, exe.preflight_command or None, [],
                exe.preflight_timeout_s, exe.env_passthrough,
            )
            if not report.passed:
                raise RunError(f"baseline fails preflight ({report.stage}): {report.detail}")
            outcome = evaluate(
                worktree, exe.eval_command, exe.eval_timeout_s,
                exe.metric_pattern, exe.log_excerpt_lines, exe.env_passthrough,
            )
            result = PipelineResult(source="baseline", attempt=0)
            result.preflight, result.outcome = report, outcome
            self._log_candidate(result)
            if outcome.status is not EvalStatus.SUCCESS:
                raise RunError(
                    f"baseline evaluation failed ({outcome.status.value}: {outcome.detail}); "
                    f"nothing to optimize against"
                )
            return outcome.metric
        finally:
            self._destroy(worktree)

    def run(self) -> RunReport:
        cfg = self.cfg
        started_at = utc_now()
        initial_commit = baseline_commit(self.repo)
        runner = {
            SUBAGENT: self._round_subagent,
            TEAM: self._round_team,
        }.get(self.topology, self._round_single)
        try:
            self.l_best = self._evaluate_baseline()
            baseline_metric = self.l_best
            # the clock starts after the baseline measurement
            self.budget = Budget(cfg.budget.t_max_s, cfg.budget.min_round_margin_s)
            self.sink.emit_run_start(
                self.run_id, self.topology, cfg.seed, cfg.budget.t_max_s,
                cfg.topology.k, cfg.topology.turns, baseline_metric, initial_commit,
            )
            max_rounds = cfg.budget.max_rounds
            while self.budget.round_may_start():
                if max_rounds and self.round >= max_rounds:
                    break
                self.round += 1
                self.round_starts.append(self.budget.elapsed())
                self.sink.emit_round_start(self.run_id, self.round, self.round_starts[-1])
                runner()
            final_commit = baseline_commit(self.repo)
            final_tree = tree_of_commit(self.repo, final_commit)
            self.sink.emit_run_end(
                self.run_id, self.l_best, final_commit, final_tree,
                self.round, self.promotions,
            )
            report = RunReport(
                run_id=self.run_id, topology=self.topology, seed=cfg.seed,
                baseline_metric=baseline_metric, final_metric=self.l_best,
                delta_val_bpb=baseline_metric - self.l_best,
                rounds_executed=self.round, promotions=self.promotions,
                initial_commit=initial_commit, final_commit=final_commit,
                final_tree_hash=final_tree,
                state_counts={}, state_ratios={},
                accepted_patch_chain=self.chain,
                round_starts_elapsed_s=self.round_starts,
                elapsed_s=self.budget.elapsed(),
                started_at=started_at, finished_at=utc_now(),
                config=snapshot(cfg),
            )
        finally:
            self._cleanup_all_worktrees()
            self.sink.close()
        summary = aggregate(self.run_dir / "events.jsonl")
        report.state_counts = summary.state_table.counts
        report.state_ratios = summary.state_table.ratios
        report.save(self.run_dir / "summary.json")
        write_state_csv(self.run_dir / "report.csv", summary.state_table)
        write_progress_csv(self.run_dir / "progress.csv", summary.progress)
        return report


def make_backend(cfg: RunConfig, prompts: PromptSet | None = None):
    """Build the configured backend."""
    if cfg.agents.backend == "scripted":
        return ScriptedBackend.from_file(cfg.agents.script)
    return HttpBackend(
        base_url=cfg.agents.base_url,
        api_key=os.environ.get(cfg.agents.api_key_env, ""),
        models=cfg.agents.models,
        default_model=cfg.agents.model,
        prompts=prompts or PromptSet(cfg.agents.prompt_dir or None),
        timeout_s=cfg.agents.request_timeout_s,
        max_retries=cfg.agents.max_retries,
    )


def run(cfg: RunConfig, backend=None) -> RunReport:
    """Execute one full run under the configured topology."""
    return Orchestrator(cfg, backend).run()


def run_single(cfg: RunConfig, backend=None) -> RunReport:
    cfg.topology.name = "single"
    return run(cfg, backend)


def run_subagent(cfg: RunConfig, backend=None) -> RunReport:
    cfg.topology.name = SUBAGENT
    return run(cfg, backend)


def run_team(cfg: RunConfig, backend=None) -> RunReport:
    cfg.topology.name = TEAM
    return run(cfg, backend)
