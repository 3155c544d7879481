"""Budget-bounded multi-agent harness for automated code optimization.

The harness drives one of three coordination procedures (single agent,
parallel subagents with a coordinator merge, or a sequential expert team
with an engineer fallback) against a target git repository.  Agents can
only touch the target through a strict search/replace edit contract,
every change is trialed in an isolated worktree, and every proposal is
classified into exactly one lifecycle state in an append-only event log.
"""

__version__ = "0.1.0"
