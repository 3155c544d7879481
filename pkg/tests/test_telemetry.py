"""Telemetry tests: classification, event log, aggregation, replay."""

from __future__ import annotations

import json
import threading
from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

from optloop.execution import EvalOutcome, EvalStatus, PreflightReport
from optloop.patching import ApplyError, ApplyErrorKind, Edit, ParseError, ParseErrorKind, Proposal, render_proposal
from optloop.telemetry import (
    COMMIT_EPOCH,
    Aggregate,
    ChainEntry,
    EventSink,
    LifecycleState,
    MalformedLog,
    ProgressPoint,
    ReplayDivergence,
    RunReport,
    TelemetryEvent,
    aggregate,
    check_consistency,
    classify,
    normalize_events,
    read_events,
    replay,
    tabulate_states,
    write_progress_csv,
    write_state_csv,
)
from optloop.worktrees import (
    baseline_commit,
    create_worktree,
    destroy_worktree,
    init_repo,
    promote,
    tree_of_commit,
    worktree_tree_hash,
)

PROPOSAL = Proposal("m", "s", (Edit("train.py", "a", "b"),))
PARSE_ERROR = ParseError(ParseErrorKind.NO_EDITS, 1)
APPLY_ERROR = ApplyError(ApplyErrorKind.NO_MATCH, 0)
PF_OK = PreflightReport(True, "none")
PF_FAIL = PreflightReport(False, "compile", "SyntaxError")
EVAL_OK = EvalOutcome(EvalStatus.SUCCESS, 1.30, 1.0, "val_bpb: 1.30")
EVAL_CRASH = EvalOutcome(EvalStatus.CRASH, None, 1.0, "Traceback", "exit status 1")
EVAL_TIMEOUT = EvalOutcome(EvalStatus.TIMEOUT, None, 5.0, "", "killed after 5s")


# --- classification ----------------------------------------------------------

def test_classify_four_states():
    assert classify(PARSE_ERROR) is LifecycleState.PROPOSAL_FAILURE
    assert classify(APPLY_ERROR) is LifecycleState.PROPOSAL_FAILURE
    assert classify(PROPOSAL, PF_FAIL) is LifecycleState.PREFLIGHT_FAILURE
    assert classify(PROPOSAL, PF_OK, EVAL_CRASH) is LifecycleState.TRAINING_CRASH
    assert classify(PROPOSAL, PF_OK, EVAL_TIMEOUT) is LifecycleState.TRAINING_CRASH
    assert classify(PROPOSAL, PF_OK, EVAL_OK) is LifecycleState.TRAINING_SUCCESS


def test_classify_rejects_incomplete_prefix():
    with pytest.raises(ValueError):
        classify(PROPOSAL)
    with pytest.raises(ValueError):
        classify(PROPOSAL, PF_OK)


def test_event_metric_presence_matches_state():
    TelemetryEvent("r", 1, "single", "worker-1", LifecycleState.TRAINING_SUCCESS, 1.35, metric=1.30)
    with pytest.raises(ValueError):
        TelemetryEvent("r", 1, "single", "worker-1", LifecycleState.TRAINING_SUCCESS, 1.35)
    with pytest.raises(ValueError):
        TelemetryEvent("r", 1, "single", "worker-1", LifecycleState.TRAINING_CRASH, 1.35, metric=1.30)


# --- event log ---------------------------------------------------------------

def make_event(round_number: int, state: LifecycleState, source: str = "worker-1") -> TelemetryEvent:
    return TelemetryEvent(
        run_id="run", round=round_number, topology="single", source=source,
        state=state, baseline_metric=1.35,
        metric=1.30 if state is LifecycleState.TRAINING_SUCCESS else None,
    )


def test_sink_appends_flushed_jsonl(tmp_path):
    sink = EventSink(tmp_path / "events.jsonl")
    sink.emit_run_start("run", "single", 0, 300.0, 1, 6, 1.35, "c" * 40)
    # flushed immediately: readable before close
    records = read_events(sink.path)
    assert records[0]["kind"] == "run_start"
    sink.emit(make_event(1, LifecycleState.TRAINING_SUCCESS))
    sink.emit_run_end("run", 1.30, "d" * 40, "t" * 40, 1, 1)
    sink.close()
    kinds = [r["kind"] for r in read_events(sink.path)]
    assert kinds == ["run_start", "proposal", "run_end"]


def test_sink_concurrent_writers(tmp_path):
    sink = EventSink(tmp_path / "events.jsonl")
    threads = [
        threading.Thread(target=lambda i=i: [
            sink.emit(make_event(i, LifecycleState.TRAINING_CRASH, source=f"worker-{i}"))
            for _ in range(20)
        ])
        for i in range(6)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    sink.close()
    records = read_events(sink.path)
    assert len(records) == 120
    assert all(r["kind"] == "proposal" for r in records)


def test_read_events_reports_malformed_line(tmp_path):
    path = tmp_path / "events.jsonl"
    path.write_text('{"kind": "run_start"}\nnot json at all\n')
    with pytest.raises(MalformedLog) as excinfo:
        read_events(path)
    assert excinfo.value.line_number == 2


def test_normalize_strips_volatile_fields():
    records = [{"kind": "proposal", "state": "TrainingSuccess", "timestamp": "t", "duration_s": 1.2, "elapsed_s": 3.4, "metric": 1.3}]
    normalized = normalize_events(records)
    assert normalized == [{"kind": "proposal", "state": "TrainingSuccess", "metric": 1.3}]


# --- aggregation -------------------------------------------------------------

_STATES = list(LifecycleState)


@given(st.lists(st.sampled_from(_STATES), min_size=1, max_size=60))
def test_state_ratios_close_and_match_counter(states):
    records = [
        {"kind": "proposal", "state": s.value, "round": i, "source": "worker-1"}
        for i, s in enumerate(states)
    ]
    table = tabulate_states(records)
    expected = Counter(s.value for s in states)
    for state in LifecycleState:
        assert table.counts[state.value] == expected.get(state.value, 0)
    assert table.total == len(states)
    assert abs(sum(table.ratios.values()) - 1.0) <= 1e-9


def _write_fixture_log(path):
    sink = EventSink(path)
    sink.emit_run_start("run", "single", 0, 300.0, 1, 6, 1.35, "c" * 40)
    best_by_round = {1: 1.30, 2: None, 3: 1.22}
    for round_number, metric in best_by_round.items():
        sink.emit_round_start("run", round_number, float(round_number))
        state = LifecycleState.TRAINING_SUCCESS
        event = TelemetryEvent(
            run_id="run", round=round_number, topology="single", source="worker-1",
            state=state, baseline_metric=1.35, metric=metric if metric else 1.40,
        )
        sink.emit(event)
        if metric:
            sink.emit_promotion("run", round_number, "worker-1", "c" * 40, "t" * 40, "idea", metric, float(round_number))
    sink.emit_run_end("run", 1.22, "d" * 40, "t" * 40, 3, 2)
    sink.close()


def test_aggregate_progress_series(tmp_path):
    path = tmp_path / "events.jsonl"
    _write_fixture_log(path)
    result = aggregate(path)
    assert isinstance(result, Aggregate)
    assert [p.best_metric for p in result.progress] == [1.35, 1.30, 1.30, 1.22]
    assert [p.round for p in result.progress] == [0, 1, 2, 3]
    assert result.progress[-1].delta_val_bpb == pytest.approx(0.13)
    assert result.final_metric == pytest.approx(1.22)
    assert result.rounds_executed == 3
    assert result.state_table.counts["TrainingSuccess"] == 3


def test_check_consistency_accepts_fixture(tmp_path):
    path = tmp_path / "events.jsonl"
    _write_fixture_log(path)
    assert check_consistency(read_events(path)) == []


def test_check_consistency_flags_orphan_promotion():
    records = [
        {"kind": "promotion", "round": 1, "source": "worker-1", "metric": 1.3},
    ]
    problems = check_consistency(records)
    assert problems and "TrainingSuccess" in problems[0]


def test_csv_outputs(tmp_path):
    path = tmp_path / "events.jsonl"
    _write_fixture_log(path)
    result = aggregate(path)
    write_state_csv(tmp_path / "report.csv", result.state_table)
    write_progress_csv(tmp_path / "progress.csv", result.progress)
    report_lines = (tmp_path / "report.csv").read_text().splitlines()
    assert report_lines[0] == "state,count,ratio"
    assert len(report_lines) == 5
    progress_lines = (tmp_path / "progress.csv").read_text().splitlines()
    assert progress_lines[0] == "round,elapsed_s,best_val_bpb,delta_val_bpb"
    assert len(progress_lines) == 5


# --- report and replay -------------------------------------------------------

FILES = {"train.py": "metric = 1.35\nprint('val_bpb: %.4f' % metric)\n"}


def proposal_text(search: str, replace: str) -> str:
    return render_proposal(Proposal("m", f"set {replace}", (Edit("train.py", search, replace),)))


def _build_run(tmp_path, name: str):
    """Execute two promoted rounds by hand and record their chain."""
    repo = init_repo(tmp_path / name, FILES)
    initial = baseline_commit(repo)
    chain = []
    texts = [("metric = 1.35", "metric = 1.30"), ("metric = 1.30", "metric = 1.22")]
    for round_number, (search, replace) in enumerate(texts, start=1):
        tip = baseline_commit(repo)
        wt = create_worktree(repo, tip, f"w{round_number}", tmp_path / f"{name}-scratch" / f"w{round_number}")
        text = proposal_text(search, replace)
        content = (wt.path / "train.py").read_text()
        (wt.path / "train.py").write_text(content.replace(search, replace))
        tree = worktree_tree_hash(wt)
        commit = promote(
            repo, wt, f"round {round_number}: set {replace}",
            timestamp=COMMIT_EPOCH + round_number,
        )
        destroy_worktree(wt)
        chain.append(ChainEntry(
            round=round_number, source="worker-1", commit=commit, tree_hash=tree,
            metric=1.30 if round_number == 1 else 1.22, idea_summary=f"set {replace}",
            applied_proposals=[text],
        ))
    report = RunReport(
        run_id="run", topology="single", seed=0, baseline_metric=1.35,
        final_metric=1.22, delta_val_bpb=0.13, rounds_executed=2, promotions=2,
        initial_commit=initial, final_commit=chain[-1].commit,
        final_tree_hash=chain[-1].tree_hash,
        state_counts={s.value: 0 for s in LifecycleState},
        state_ratios={s.value: 0.0 for s in LifecycleState},
        accepted_patch_chain=chain, round_starts_elapsed_s=[0.1, 1.2],
        elapsed_s=2.0, started_at="t0", finished_at="t1", config={},
    )
    return repo, report


def test_report_save_load_round_trip(tmp_path):
    _, report = _build_run(tmp_path, "origin")
    report.save(tmp_path / "summary.json")
    loaded = RunReport.load(tmp_path / "summary.json")
    assert loaded == report


def test_replay_reproduces_commits_and_trees(tmp_path):
    repo, report = _build_run(tmp_path, "origin")
    fresh = init_repo(tmp_path / "fresh", FILES)
    final = replay(report, fresh, tmp_path / "replay-scratch")
    assert final == report.final_commit
    assert tree_of_commit(fresh, final) == report.final_tree_hash
    assert baseline_commit(fresh) == final


def test_replay_rejects_wrong_starting_commit(tmp_path):
    _, report = _build_run(tmp_path, "origin")
    other = init_repo(tmp_path / "other", {"train.py": "different\n"})
    with pytest.raises(ReplayDivergence) as excinfo:
        replay(report, other, tmp_path / "replay-scratch")
    assert excinfo.value.round == 0


def test_replay_detects_missing_chain_entry(tmp_path):
    _, report = _build_run(tmp_path, "origin")
    report.accepted_patch_chain = report.accepted_patch_chain[1:]  # drop round 1
    fresh = init_repo(tmp_path / "fresh", FILES)
    with pytest.raises(ReplayDivergence) as excinfo:
        replay(report, fresh, tmp_path / "replay-scratch")
    assert excinfo.value.round == 2


def test_replay_detects_tampered_tree(tmp_path):
    _, report = _build_run(tmp_path, "origin")
    report.accepted_patch_chain[1].tree_hash = "f" * 40
    fresh = init_repo(tmp_path / "fresh", FILES)
    with pytest.raises(ReplayDivergence) as excinfo:
        replay(report, fresh, tmp_path / "replay-scratch")
    assert excinfo.value.round == 2
