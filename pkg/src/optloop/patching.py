"""Search/replace edit contract: parsing, rendering, and application.

Agents modify the target codebase only through proposal documents in a
fixed wire format:

    MOTIVATION:
    <free text>
    IDEA_SUMMARY:
    <free text>
    EDIT <relative/path>
    <<<<<<< SEARCH
    <exact existing content>
    =======
    <replacement content>
    >>>>>>> REPLACE

Parsing is total: malformed input yields a ``ParseError`` value, never an
exception, because a malformed reply is ordinary lifecycle data for the
harness.  Application is all-or-nothing and requires each search block to
occur exactly once (counting overlapping occurrences) in its target file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence, Union

SEARCH_MARKER = "<<<<<<< SEARCH"
DIVIDER_MARKER = "======="
REPLACE_MARKER = ">>>>>>> REPLACE"
MOTIVATION_HEADER = "MOTIVATION:"
SUMMARY_HEADER = "IDEA_SUMMARY:"
EDIT_PREFIX = "EDIT "


class ParseErrorKind(str, Enum):
    MISSING_SECTION = "MissingSection"
    NO_EDITS = "NoEdits"
    MALFORMED_EDIT_FENCE = "MalformedEditFence"
    EMPTY_SEARCH_BLOCK = "EmptySearchBlock"
    UNSAFE_PATH = "UnsafePath"


class ApplyErrorKind(str, Enum):
    NO_MATCH = "NoMatch"
    AMBIGUOUS = "Ambiguous"
    UNKNOWN_FILE = "UnknownFile"


@dataclass(frozen=True)
class ParseError:
    """First contract violation found while scanning a proposal top to bottom.

    ``location`` is a 1-based line number in the raw input.
    """

    kind: ParseErrorKind
    location: int
    detail: str = ""


@dataclass(frozen=True)
class ApplyError:
    """Why applying a sequence of edits was rejected.

    ``edit_index`` is the 0-based position of the failing edit;
    ``occurrence_count`` is meaningful only for ``Ambiguous``.
    """

    kind: ApplyErrorKind
    edit_index: int
    occurrence_count: int = 0
    detail: str = ""


def is_safe_relative_path(path: str) -> bool:
    """True for non-empty relative paths that stay inside the repository."""
    if not path or path != path.strip():
        return False
    if os.path.isabs(path) or path.startswith(("~", "\\")):
        return False
    parts = path.replace("\\", "/").split("/")
    return all(part not in ("", "..") for part in parts)


@dataclass(frozen=True)
class Edit:
    """One search/replace operation against a single repository file."""

    target_file: str
    search_block: str
    replace_block: str

    def __post_init__(self) -> None:
        if not is_safe_relative_path(self.target_file):
            raise ValueError(f"unsafe edit path: {self.target_file!r}")
        if not self.search_block:
            raise ValueError("search_block must be non-empty")


@dataclass(frozen=True)
class Proposal:
    """A parsed agent reply: rationale plus an ordered list of edits."""

    motivation: str
    idea_summary: str
    edits: tuple[Edit, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not self.idea_summary.strip():
            raise ValueError("idea_summary must be non-empty")
        if not self.edits:
            raise ValueError("a proposal must contain at least one edit")


ParseResult = Union[Proposal, ParseError]
ApplyResult = Union[dict, ApplyError]


_ALL_MARKERS = (SEARCH_MARKER, DIVIDER_MARKER, REPLACE_MARKER)


class _FenceViolation(Exception):
    """Internal signal: fence structure broken at a 1-based line number."""

    def __init__(self, location: int, detail: str):
        super().__init__(detail)
        self.location = location
        self.detail = detail


def _collect_section(lines: list[str], start: int, stop_prefixes: tuple[str, ...]) -> tuple[list[str], int]:
    """Consume lines from ``start`` until one starts with a stop prefix at column 0."""
    body: list[str] = []
    i = start
    while i < len(lines) and not lines[i].startswith(stop_prefixes):
        body.append(lines[i])
        i += 1
    return body, i


def _collect_block(lines: list[str], start: int, end_marker: str) -> tuple[list[str], int]:
    """Consume lines until one equals ``end_marker`` exactly.

    A different structural marker inside the block means a terminator was
    forgotten; flagging it here beats silently swallowing fence syntax as
    content and failing later with a baffling no-match.
    """
    body: list[str] = []
    i = start
    while i < len(lines):
        if lines[i] == end_marker:
            return body, i + 1
        if lines[i] in _ALL_MARKERS:
            raise _FenceViolation(i + 1, f"found {lines[i]!r} while expecting {end_marker!r}")
        body.append(lines[i])
        i += 1
    raise _FenceViolation(len(lines), f"missing {end_marker!r}")


def parse_proposal(raw: str) -> ParseResult:
    """Parse a raw agent reply into a ``Proposal`` or the first ``ParseError``.

    Leading text before ``MOTIVATION:`` and text between a closed fence and
    the next ``EDIT`` line are ignored, so replies wrapped in chatter still
    parse.  Fence markers must appear alone at column 0; everything between
    them is content, verbatim.
    """
    lines = raw.split("\n")

    start = next((i for i, ln in enumerate(lines) if ln.startswith(MOTIVATION_HEADER)), None)
    if start is None:
        return ParseError(ParseErrorKind.MISSING_SECTION, 1, "no MOTIVATION: header")
    motivation_lines: list[str] = []
    inline = lines[start][len(MOTIVATION_HEADER):]
    if inline.strip():
        motivation_lines.append(inline[1:] if inline.startswith(" ") else inline)
    body, i = _collect_section(lines, start + 1, (SUMMARY_HEADER, EDIT_PREFIX))
    motivation_lines.extend(body)

    if i >= len(lines) or not lines[i].startswith(SUMMARY_HEADER):
        return ParseError(ParseErrorKind.MISSING_SECTION, min(i + 1, len(lines)), "no IDEA_SUMMARY: header")
    summary_lines: list[str] = []
    inline = lines[i][len(SUMMARY_HEADER):]
    if inline.strip():
        summary_lines.append(inline[1:] if inline.startswith(" ") else inline)
    body, i = _collect_section(lines, i + 1, (EDIT_PREFIX,))
    summary_lines.extend(body)
    idea_summary = "\n".join(summary_lines)
    if not idea_summary.strip():
        return ParseError(ParseErrorKind.MISSING_SECTION, min(i + 1, len(lines)), "IDEA_SUMMARY section is empty")

    edits: list[Edit] = []
    while i < len(lines):
        line = lines[i]
        if not line.startswith(EDIT_PREFIX):
            i += 1
            continue
        path = line[len(EDIT_PREFIX):].strip()
        if not is_safe_relative_path(path):
            return ParseError(ParseErrorKind.UNSAFE_PATH, i + 1, f"path {path!r}")
        i += 1
        if i >= len(lines) or lines[i] != SEARCH_MARKER:
            return ParseError(
                ParseErrorKind.MALFORMED_EDIT_FENCE, min(i + 1, len(lines)),
                f"expected {SEARCH_MARKER!r}",
            )
        try:
            search_lines, i = _collect_block(lines, i + 1, DIVIDER_MARKER)
            replace_lines, i = _collect_block(lines, i, REPLACE_MARKER)
        except _FenceViolation as violation:
            return ParseError(ParseErrorKind.MALFORMED_EDIT_FENCE, violation.location, violation.detail)
        search_block = "\n".join(search_lines)
        if not search_block:
            return ParseError(ParseErrorKind.EMPTY_SEARCH_BLOCK, i, f"edit for {path!r} searches for nothing")
        edits.append(Edit(path, search_block, "\n".join(replace_lines)))

    if not edits:
        return ParseError(ParseErrorKind.NO_EDITS, len(lines), "no EDIT sections found")
    return Proposal("\n".join(motivation_lines), idea_summary, tuple(edits))


def render_edits(edits: Sequence[Edit]) -> str:
    """Serialize just the EDIT sections of a proposal."""
    parts: list[str] = []
    for edit in edits:
        parts.append(f"{EDIT_PREFIX}{edit.target_file}")
        parts.append(SEARCH_MARKER)
        parts.append(edit.search_block)
        parts.append(DIVIDER_MARKER)
        parts.append(edit.replace_block)
        parts.append(REPLACE_MARKER)
    return "\n".join(parts)


def render_proposal(proposal: Proposal) -> str:
    """Serialize a proposal back to the wire format.

    ``parse_proposal(render_proposal(p))`` returns a proposal structurally
    equal to ``p`` whenever the free-text fields contain no lines that
    collide with the structural markers.
    """
    parts: list[str] = [MOTIVATION_HEADER]
    if proposal.motivation:
        parts.append(proposal.motivation)
    parts.append(SUMMARY_HEADER)
    if proposal.idea_summary:
        parts.append(proposal.idea_summary)
    parts.append(render_edits(proposal.edits))
    return "\n".join(parts) + "\n"


def count_occurrences(text: str, needle: str) -> int:
    """Occurrences of ``needle`` in ``text``, overlapping matches included."""
    if not needle:
        return 0
    count = 0
    start = 0
    while True:
        idx = text.find(needle, start)
        if idx < 0:
            return count
        count += 1
        start = idx + 1


def apply_edits(file_contents: Mapping[str, str], edits: Sequence[Edit]) -> ApplyResult:
    """Apply edits in order to an in-memory file map, all-or-nothing.

    Each edit's search block must occur exactly once in the current state
    of its target file; later edits see the effect of earlier ones.  On
    any failure the input mapping is left untouched and an ``ApplyError``
    identifies the offending edit.  Returns a new dict on success.
    """
    result = dict(file_contents)
    for index, edit in enumerate(edits):
        if edit.target_file not in result:
            return ApplyError(ApplyErrorKind.UNKNOWN_FILE, index, detail=edit.target_file)
        text = result[edit.target_file]
        occurrences = count_occurrences(text, edit.search_block)
        if occurrences == 0:
            return ApplyError(ApplyErrorKind.NO_MATCH, index, detail=edit.target_file)
        if occurrences > 1:
            return ApplyError(
                ApplyErrorKind.AMBIGUOUS, index, occurrence_count=occurrences,
                detail=f"{edit.target_file}: {occurrences} matches",
            )
        at = text.find(edit.search_block)
        result[edit.target_file] = text[:at] + edit.replace_block + text[at + len(edit.search_block):]
    return result
