"""Command-line entry point.

Subcommands:

* ``optloop init``    - write a commented configuration template
* ``optloop run``     - execute one optimization run
* ``optloop report``  - summarize a run directory's event log
* ``optloop replay``  - re-apply a run's accepted patch chain and verify it
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import (
    CONFIG_TEMPLATE,
    ConfigError,
    TOPOLOGIES,
    apply_override,
    load_config,
)
from .telemetry import (
    MalformedLog,
    ReplayDivergence,
    RunReport,
    aggregate,
    check_consistency,
    read_events,
    replay,
)
from .topology import RunError, run
from .worktrees import RepoError, open_repo

log = logging.getLogger(__name__)

# named flags are shorthand for the dotted override they set
_FLAG_KEYS = [
    ("repo", "repo.root_path"),
    ("topology", "topology.name"),
    ("t_max_s", "budget.t_max_s"),
    ("max_rounds", "budget.max_rounds"),
    ("k", "topology.k"),
    ("turns", "topology.turns"),
    ("seed", "seed"),
    ("backend", "agents.backend"),
    ("script", "agents.script"),
    ("out", "out"),
    ("run_id", "run_id"),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="optloop",
        description="budget-bounded multi-agent code optimization runs",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    init = commands.add_parser("init", help="write a configuration template")
    init.add_argument("path", nargs="?", default="optloop.toml")

    runner = commands.add_parser("run", help="execute one run")
    runner.add_argument("--config", help="TOML configuration file")
    runner.add_argument("--repo", help="target git repository")
    runner.add_argument("--topology", choices=TOPOLOGIES)
    runner.add_argument("--t-max-s", dest="t_max_s", type=float,
                        help="wall-clock budget in seconds")
    runner.add_argument("--max-rounds", dest="max_rounds", type=int,
                        help="hard round cap (0 = clock only)")
    runner.add_argument("--k", type=int, help="parallel workers (subagent)")
    runner.add_argument("--turns", type=int, help="expert slots per round (team)")
    runner.add_argument("--seed", type=int)
    runner.add_argument("--backend", choices=("http", "scripted"))
    runner.add_argument("--script", help="reply script for the scripted backend")
    runner.add_argument("--out", help="directory that receives run artifacts")
    runner.add_argument("--run-id", dest="run_id", help="fixed run id")
    runner.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field by dotted name")

    report = commands.add_parser("report", help="summarize a finished run")
    report.add_argument("run_dir", help="run directory (or an events.jsonl path)")
    report.add_argument("--json", action="store_true", help="machine-readable output")

    replayer = commands.add_parser("replay", help="verify a run's patch chain")
    replayer.add_argument("run_dir", help="run directory (or a summary.json path)")
    replayer.add_argument("--repo", required=True,
                          help="repository positioned at the run's initial commit")
    replayer.add_argument("--scratch", help="worktree area (default: <repo>.replay)")
    return parser


def _build_config(args: argparse.Namespace):
    cfg = load_config(args.config)
    for attr, dotted in _FLAG_KEYS:
        value = getattr(args, attr)
        if value is not None:
            apply_override(cfg, dotted, str(value))
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        apply_override(cfg, key.strip(), raw)
    return cfg


def _cmd_init(args: argparse.Namespace) -> int:
    path = Path(args.path)
    if path.exists():
        print(f"refusing to overwrite {path}", file=sys.stderr)
        return 1
    path.write_text(CONFIG_TEMPLATE, encoding="utf-8")
    print(f"wrote {path}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _build_config(args)
    report = run(cfg)
    run_dir = Path(cfg.out) / report.run_id
    print(f"run {report.run_id} ({report.topology}) finished: "
          f"{report.rounds_executed} rounds, {report.promotions} promotions, "
          f"{report.elapsed_s:.1f}s")
    print(f"val_bpb {report.baseline_metric:.4f} -> {report.final_metric:.4f} "
          f"(delta {report.delta_val_bpb:+.4f})")
    print(f"artifacts in {run_dir}")
    return 0


def _events_path(run_dir: str) -> Path:
    path = Path(run_dir)
    return path if path.is_file() else path / "events.jsonl"


def _report_path(run_dir: str) -> Path:
    path = Path(run_dir)
    return path if path.is_file() else path / "summary.json"


def _cmd_report(args: argparse.Namespace) -> int:
    path = _events_path(args.run_dir)
    summary = aggregate(path)
    problems = check_consistency(read_events(path))
    if args.json:
        payload = {
            "run_id": summary.run_id,
            "topology": summary.topology,
            "baseline_metric": summary.baseline_metric,
            "final_metric": summary.final_metric,
            "delta_val_bpb": summary.baseline_metric - summary.final_metric,
            "rounds_executed": summary.rounds_executed,
            "state_counts": summary.state_table.counts,
            "state_ratios": summary.state_table.ratios,
            "progress": [
                {"round": p.round, "elapsed_s": p.elapsed_s,
                 "best_val_bpb": p.best_metric, "delta_val_bpb": p.delta_val_bpb}
                for p in summary.progress
            ],
            "problems": problems,
        }
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        delta = summary.baseline_metric - summary.final_metric
        print(f"run {summary.run_id} ({summary.topology})")
        print(f"val_bpb {summary.baseline_metric:.4f} -> {summary.final_metric:.4f} "
              f"(delta {delta:+.4f}) over {summary.rounds_executed} rounds")
        print("proposal lifecycle:")
        for state, count in summary.state_table.counts.items():
            ratio = summary.state_table.ratios[state]
            print(f"  {state:<18} {count:>4}  {ratio:.6f}")
        print("progress:")
        for point in summary.progress:
            print(f"  round {point.round:>3}  t={point.elapsed_s:8.1f}s  "
                  f"best {point.best_metric:.4f}  delta {point.delta_val_bpb:+.4f}")
        for problem in problems:
            print(f"inconsistency: {problem}", file=sys.stderr)
    return 1 if problems else 0


def _cmd_replay(args: argparse.Namespace) -> int:
    report = RunReport.load(_report_path(args.run_dir))
    repo = open_repo(args.repo)
    scratch = args.scratch or f"{repo.root_path}.replay"
    final = replay(report, repo, scratch)
    print(f"replayed {len(report.accepted_patch_chain)} promoted rounds")
    print(f"final commit {final} matches the recorded run")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"init": _cmd_init, "run": _cmd_run,
                "report": _cmd_report, "replay": _cmd_replay}
    try:
        return handlers[args.command](args)
    except (ConfigError, RunError, RepoError, MalformedLog, ReplayDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
