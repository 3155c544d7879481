"""A small, deterministic training script to point optimization harnesses at.

The package ships one self-contained target (``target_train.py``): a
character-level language model over a few kilobytes of embedded prose
that trains in well under ten seconds, prints a single ``val_bpb:``
line, and produces a bit-identical metric for a fixed seed.  Alongside
it come three canned reply scripts that drive a scripted harness run
against the target: a lone worker, a parallel-worker round with a
coordinator merge, and a team round where an engineer repairs a planted
crash.

Everything here is plain text on purpose.  A harness copies the target
into a scratch repository and edits the hyperparameter block at the top
of the file; this package only hands out the bytes and the pinned
reference numbers.
"""

from importlib import resources
from pathlib import Path

# Metric printed by the target at its shipped hyperparameters, measured
# once and pinned.  A run that ends strictly below this has genuinely
# improved the target.
GOLDEN_BASELINE_STR = "3.5771"
GOLDEN_BASELINE = float(GOLDEN_BASELINE_STR)

# Iteration counts over which more training strictly lowers val_bpb.
# The target's hyperparameter comment documents the same range.
IMPROVING_ITERATIONS = (0, 60, 120, 240, 480, 960)

TARGET_FILENAME = "train.py"
FIXTURES = ("single", "subagent", "team")


def _read(*parts: str) -> str:
    return resources.files("chartrain").joinpath(*parts).read_text(encoding="utf-8")


def target_source() -> str:
    """The target training script, verbatim."""
    return _read("target_train.py")


def write_target(dest: str | Path) -> Path:
    """Write the target script to ``dest``.

    A directory receives it under its conventional name ``train.py``;
    any other path is written as given.
    """
    path = Path(dest)
    if path.is_dir():
        path = path / TARGET_FILENAME
    path.write_text(target_source(), encoding="utf-8")
    return path


def fixture_text(name: str) -> str:
    """One of the canned reply scripts, verbatim."""
    if name not in FIXTURES:
        raise ValueError(f"unknown fixture {name!r}; choose from {FIXTURES}")
    return _read("fixtures", f"{name}.txt")


def write_fixture(name: str, dest: str | Path) -> Path:
    """Write the named reply script to ``dest`` (directory or file path)."""
    text = fixture_text(name)
    path = Path(dest)
    if path.is_dir():
        path = path / f"{name}.txt"
    path.write_text(text, encoding="utf-8")
    return path
