"""Run configuration: TOML schema, defaults, overrides, validation.

Every knob lives in a typed dataclass section.  A config file may set any
subset; command-line overrides address fields by their dotted name
(``budget.t_max_s``), and the effective config is snapshotted into the
run report so a run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib  # Python 3.11+
except ModuleNotFoundError:
    import tomli as tomllib

from .execution import DEFAULT_LOG_EXCERPT_LINES, DEFAULT_METRIC_PATTERN

SINGLE = "single"
SUBAGENT = "subagent"
TEAM = "team"
TOPOLOGIES = (SINGLE, SUBAGENT, TEAM)

# Patterns that disqualify a proposal before training: destructive file
# operations, network access, and version-control meddling have no place
# in a training script.
DEFAULT_DENYLIST = [
    r"rm\s+-rf",
    r"shutil\.rmtree",
    r"os\.system",
    r"\bsubprocess\b",
    r"urllib\.request",
    r"\brequests\.(get|post|put|delete)",
    r"socket\.socket",
    r"https?://",
    r"\bgit\s+(push|commit|reset|checkout|clean|rm)\b",
]


class ConfigError(ValueError):
    """The configuration is unreadable, unknown, or inconsistent."""


@dataclass
class RepoConfig:
    root_path: str = ""
    main_branch: str = "main"
    target_files: list[str] = field(default_factory=lambda: ["train.py"])
    scratch_dir: str = ""


@dataclass
class BudgetConfig:
    t_max_s: float = 300.0
    min_round_margin_s: float = 0.0
    max_rounds: int = 0  # 0 means unlimited; the clock is the only stop


@dataclass
class TopologyConfig:
    name: str = SINGLE
    k: int = 3
    turns: int = 6
    roles: list[str] = field(default_factory=lambda: ["architect", "optimizer", "efficiency"])


@dataclass
class AgentsConfig:
    backend: str = "scripted"
    script: str = ""
    base_url: str = ""
    api_key_env: str = "OPTLOOP_API_KEY"
    model: str = "default"
    models: dict[str, str] = field(default_factory=dict)
    request_timeout_s: float = 60.0
    max_retries: int = 3
    prompt_dir: str = ""


@dataclass
class ExecutionConfig:
    preflight_command: list[str] = field(default_factory=list)
    eval_command: list[str] = field(default_factory=list)
    eval_timeout_s: float = 120.0
    preflight_timeout_s: float = 30.0
    metric_pattern: str = DEFAULT_METRIC_PATTERN
    denylist_patterns: list[str] = field(default_factory=lambda: list(DEFAULT_DENYLIST))
    log_excerpt_lines: int = DEFAULT_LOG_EXCERPT_LINES
    eval_permits: int = 0  # 0 means one permit per parallel worker
    env_passthrough: list[str] = field(default_factory=list)


@dataclass
class MemoryConfig:
    context_entries: int = 20
    char_budget: int = 6000
    seed_experience: str = ""
    seed_meta: str = ""


@dataclass
class RunConfig:
    repo: RepoConfig = field(default_factory=RepoConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    agents: AgentsConfig = field(default_factory=AgentsConfig)
    execution: ExecutionConfig = field(default_factory=ExecutionConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    seed: int = 0
    out: str = "runs"
    run_id: str = ""


_SECTIONS = ("repo", "budget", "topology", "agents", "execution", "memory")
_TOP_LEVEL = ("seed", "out", "run_id")


def _apply_section(section_obj, data: dict, section_name: str):
    known = {f.name for f in fields(section_obj)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {section_name}.{key}")
        setattr(section_obj, key, value)
    return section_obj


def load_config(path: str | Path | None = None) -> RunConfig:
    """Build a config from defaults plus an optional TOML file."""
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be a table")
            _apply_section(getattr(cfg, key), value, key)
        elif key in _TOP_LEVEL:
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown config key {key}")
    return cfg


def _coerce(raw: str, current) -> object:
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        if raw.startswith("["):
            return json.loads(raw)
        return [part for part in raw.split(",") if part]
    if isinstance(current, dict):
        return json.loads(raw)
    return raw


def apply_override(cfg: RunConfig, dotted_key: str, raw_value: str) -> None:
    """Set one field addressed as ``section.field`` (or a top-level name)."""
    parts = dotted_key.split(".")
    if len(parts) == 1:
        if parts[0] not in _TOP_LEVEL:
            raise ConfigError(f"unknown config key {dotted_key}")
        setattr(cfg, parts[0], _coerce(raw_value, getattr(cfg, parts[0])))
        return
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"unknown config key {dotted_key}")
    section = getattr(cfg, parts[0])
    known = {f.name for f in fields(section)}
    if parts[1] not in known:
        raise ConfigError(f"unknown config key {dotted_key}")
    try:
        value = _coerce(raw_value, getattr(section, parts[1]))
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad value for {dotted_key}: {raw_value!r} ({exc})") from exc
    setattr(section, parts[1], value)


def snapshot(cfg: RunConfig) -> dict:
    """Plain nested dict of the effective configuration."""
    return asdict(cfg)


def dotted_keys(cfg: RunConfig | None = None) -> list[str]:
    """All addressable override keys, for CLI help."""
    cfg = cfg or RunConfig()
    keys = list(_TOP_LEVEL)
    for section_name in _SECTIONS:
        for f in fields(getattr(cfg, section_name)):
            keys.append(f"{section_name}.{f.name}")
    return keys


def validate_config(cfg: RunConfig, for_run: bool = True) -> None:
    """Reject configurations that cannot drive a run."""
    if cfg.topology.name not in TOPOLOGIES:
        raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {cfg.topology.name!r}")
    if cfg.topology.k < 1:
        raise ConfigError("topology.k must be at least 1")
    if cfg.topology.turns < 1:
        raise ConfigError("topology.turns must be at least 1")
    if not cfg.topology.roles:
        raise ConfigError("topology.roles must not be empty")
    if cfg.budget.t_max_s <= 0:
        raise ConfigError("budget.t_max_s must be positive")
    if cfg.budget.min_round_margin_s < 0:
        raise ConfigError("budget.min_round_margin_s must not be negative")
    if cfg.agents.backend not in ("http", "scripted"):
        raise ConfigError(f"agents.backend must be http or scripted, got {cfg.agents.backend!r}")
    if not cfg.repo.target_files:
        raise ConfigError("repo.target_files must not be empty")
    pattern = re.compile(cfg.execution.metric_pattern)
    if pattern.groups < 1:
        raise ConfigError("execution.metric_pattern needs one capture group for the value")
    for deny in cfg.execution.denylist_patterns:
        re.compile(deny)
    if for_run:
        if not cfg.repo.root_path:
            raise ConfigError("repo.root_path is required to run")
        if not cfg.execution.eval_command:
            raise ConfigError("execution.eval_command is required to run")
        if cfg.agents.backend == "scripted" and not cfg.agents.script:
            raise ConfigError("agents.backend=scripted requires agents.script")
        if cfg.agents.backend == "http" and not cfg.agents.base_url:
            raise ConfigError("agents.backend=http requires agents.base_url")


def derive_run_id(cfg: RunConfig) -> str:
    """Deterministic run id: a pure function of topology and seed knobs."""
    if cfg.run_id:
        return cfg.run_id
    topo = cfg.topology
    parts = [topo.name, f"t{cfg.budget.t_max_s:g}"]
    if topo.name == SUBAGENT:
        parts.append(f"k{topo.k}")
    if topo.name == TEAM:
        parts.append(f"n{topo.turns}")
    parts.append(f"seed{cfg.seed}")
    return "-".join(parts)


CONFIG_TEMPLATE = """\
# optloop run configuration

seed = 0
out = "runs"
run_id = ""                # default: derived from topology, budget, seed

[repo]
root_path = "path/to/target-repo"   # git repository the agents optimize
main_branch = "main"
target_files = ["train.py"]          # files shown to agents as code context
scratch_dir = ""                     # worktree area; default: <root_path>.scratch

[budget]
t_max_s = 300.0            # wall-clock optimization budget (seconds)
min_round_margin_s = 0.0   # a round starts only if more than this remains
max_rounds = 0             # 0 = unlimited; the clock is the stop

[topology]
name = "single"            # single | subagent | team
k = 3                      # parallel workers (subagent)
turns = 6                  # expert slots per round (team)
roles = ["architect", "optimizer", "efficiency"]

[agents]
backend = "scripted"       # http | scripted
script = ""                # reply script path (scripted backend)
base_url = ""              # chat-completions endpoint (http backend)
api_key_env = "OPTLOOP_API_KEY"
model = "default"
request_timeout_s = 60.0
max_retries = 3
prompt_dir = ""            # directory of prompt overrides; default: packaged

[agents.models]            # optional per-role model overrides
# architect = "some-model"

[execution]
preflight_command = ["python3", "-m", "py_compile", "train.py"]
eval_command = ["python3", "train.py"]
eval_timeout_s = 120.0
preflight_timeout_s = 30.0
metric_pattern = 'val_bpb[:=]\\s*([0-9.]+)'
log_excerpt_lines = 50
eval_permits = 0           # concurrent evaluations; 0 = one per worker
env_passthrough = []       # extra environment variables forwarded to targets

[memory]
context_entries = 20       # newest entries shown to agents
char_budget = 6000         # max characters of memory context
seed_experience = ""       # optional prior program_exp.md to start from
seed_meta = ""             # optional prior program_meta.md to start from
"""
