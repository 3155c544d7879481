"""Git worktree isolation and main-line promotion for the target repository.

Every trial runs in a detached worktree created from a baseline commit, so
concurrent proposals can never see each other's edits.  Promotion commits a
worktree's tree directly onto the main branch with a compare-and-swap on
the branch ref, which turns a stale baseline into an explicit error instead
of a silent overwrite.
"""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

log = logging.getLogger(__name__)

# Fixed commit identity so promoted commits are reproducible byte for byte.
COMMIT_AUTHOR = "optloop"
COMMIT_EMAIL = "optloop@localhost"


class RepoError(RuntimeError):
    """A git operation failed or the repository is unusable."""


class UnknownCommit(RepoError):
    """The requested baseline does not resolve to a commit."""


class StaleBaseline(RepoError):
    """The main branch moved since this worktree's baseline was taken."""


# git mutates shared state under .git; serialize worktree bookkeeping and
# promotions within this process.
_REGISTRY_LOCK = threading.Lock()
_PROMOTE_LOCK = threading.Lock()


def _git(args: list[str], cwd: Path, env: dict[str, str] | None = None, check: bool = True, strip: bool = True) -> str:
    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    proc = subprocess.run(
        ["git", *args], cwd=str(cwd), env=full_env,
        capture_output=True, text=True,
    )
    if check and proc.returncode != 0:
        raise RepoError(f"git {' '.join(args)} failed: {proc.stderr.strip() or proc.stdout.strip()}")
    return proc.stdout.strip() if strip else proc.stdout


def _commit_env(timestamp: int | None) -> dict[str, str]:
    env = {
        "GIT_AUTHOR_NAME": COMMIT_AUTHOR,
        "GIT_AUTHOR_EMAIL": COMMIT_EMAIL,
        "GIT_COMMITTER_NAME": COMMIT_AUTHOR,
        "GIT_COMMITTER_EMAIL": COMMIT_EMAIL,
    }
    if timestamp is not None:
        env["GIT_AUTHOR_DATE"] = f"{timestamp} +0000"
        env["GIT_COMMITTER_DATE"] = f"{timestamp} +0000"
    return env


@dataclass(frozen=True)
class RepoHandle:
    """An opened target repository and the branch the harness promotes to."""

    root_path: Path
    main_branch: str = "main"


@dataclass(frozen=True)
class WorktreeHandle:
    """A detached checkout of ``baseline_commit`` at ``path``."""

    id: str
    path: Path
    baseline_commit: str
    repo_root: Path


def open_repo(root_path: str | Path, main_branch: str = "main") -> RepoHandle:
    """Validate that ``root_path`` is a git repository with ``main_branch``."""
    root = Path(root_path).resolve()
    if not root.is_dir():
        raise RepoError(f"not a directory: {root}")
    _git(["rev-parse", "--git-dir"], cwd=root)
    out = _git(["rev-parse", "--verify", "--quiet", f"refs/heads/{main_branch}"], cwd=root, check=False)
    if not out:
        raise RepoError(f"branch {main_branch!r} not found in {root}")
    return RepoHandle(root_path=root, main_branch=main_branch)


def baseline_commit(repo: RepoHandle) -> str:
    """Current tip commit id of the repository's main branch."""
    return _git(["rev-parse", f"refs/heads/{repo.main_branch}"], cwd=repo.root_path)


def tree_of_commit(repo: RepoHandle, commit: str) -> str:
    """Tree object id recorded by ``commit``."""
    return _git(["rev-parse", f"{commit}^{{tree}}"], cwd=repo.root_path)


def create_worktree(repo: RepoHandle, commit: str, worktree_id: str, dest: Path) -> WorktreeHandle:
    """Materialize a detached worktree of ``commit`` at ``dest``."""
    resolved = _git(
        ["rev-parse", "--verify", "--quiet", f"{commit}^{{commit}}"],
        cwd=repo.root_path, check=False,
    )
    if not resolved:
        raise UnknownCommit(f"commit {commit!r} not found in {repo.root_path}")
    dest = Path(dest).resolve()
    dest.parent.mkdir(parents=True, exist_ok=True)
    with _REGISTRY_LOCK:
        _git(["worktree", "add", "--detach", str(dest), resolved], cwd=repo.root_path)
    return WorktreeHandle(id=worktree_id, path=dest, baseline_commit=resolved, repo_root=repo.root_path)


def destroy_worktree(worktree: WorktreeHandle) -> None:
    """Remove a worktree and its registration.  Idempotent; never raises."""
    with _REGISTRY_LOCK:
        try:
            _git(["worktree", "remove", "--force", str(worktree.path)], cwd=worktree.repo_root)
            return
        except RepoError:
            pass
        try:
            shutil.rmtree(worktree.path, ignore_errors=True)
            _git(["worktree", "prune"], cwd=worktree.repo_root, check=False)
        except Exception:
            log.warning("worktree cleanup left residue at %s", worktree.path, exc_info=True)


def worktree_tree_hash(worktree: WorktreeHandle, paths: Sequence[str] | None = None) -> str:
    """Tree object id of the worktree's current file state.

    Without ``paths`` everything is staged, untracked files included.
    With ``paths`` the tree is the worktree's baseline plus exactly those
    files, so by-products a training run scattered around the worktree
    (bytecode caches, checkpoints, logs) cannot leak into it.
    """
    if paths is None:
        _git(["add", "-A"], cwd=worktree.path)
    else:
        _git(["read-tree", f"{worktree.baseline_commit}^{{tree}}"], cwd=worktree.path)
        if paths:
            _git(["add", "--", *sorted(paths)], cwd=worktree.path)
    return _git(["write-tree"], cwd=worktree.path)


def promote(
    repo: RepoHandle,
    worktree: WorktreeHandle,
    message: str,
    timestamp: int | None = None,
    paths: Sequence[str] | None = None,
) -> str:
    """Commit the worktree's tree onto the main branch and return the commit id.

    The branch ref is advanced with an expected-old-value update, and the
    worktree must still be based on the current tip, so a promotion racing
    another one fails with ``StaleBaseline`` rather than dropping work.
    Passing ``timestamp`` pins the commit dates for reproducible ids;
    ``paths`` restricts the commit to those files (see worktree_tree_hash).
    """
    with _PROMOTE_LOCK:
        current = baseline_commit(repo)
        if current != worktree.baseline_commit:
            raise StaleBaseline(
                f"worktree {worktree.id} is based on {worktree.baseline_commit[:12]}, "
                f"but {repo.main_branch} is now at {current[:12]}"
            )
        tree = worktree_tree_hash(worktree, paths)
        commit = _git(
            ["commit-tree", tree, "-p", current, "-m", message],
            cwd=worktree.path, env=_commit_env(timestamp),
        )
        try:
            _git(
                ["update-ref", f"refs/heads/{repo.main_branch}", commit, current],
                cwd=repo.root_path,
            )
        except RepoError as exc:
            raise StaleBaseline(f"branch {repo.main_branch} moved during promotion: {exc}") from exc
        head = _git(["symbolic-ref", "-q", "HEAD"], cwd=repo.root_path, check=False)
        if head == f"refs/heads/{repo.main_branch}":
            _git(["reset", "--hard", commit], cwd=repo.root_path)
        return commit


def live_worktrees(repo: RepoHandle) -> list[Path]:
    """Paths of all registered worktrees other than the main checkout."""
    out = _git(["worktree", "list", "--porcelain"], cwd=repo.root_path)
    paths = [
        Path(line[len("worktree "):])
        for line in out.splitlines()
        if line.startswith("worktree ")
    ]
    return [p for p in paths if p != repo.root_path]


def init_repo(
    root: str | Path,
    files: dict[str, str],
    main_branch: str = "main",
    message: str = "initial state",
    timestamp: int = 1_600_000_000,
) -> RepoHandle:
    """Create a fresh repository with one commit holding ``files``.

    Used by fixtures and demos; the pinned timestamp makes the initial
    commit id a pure function of the file contents.
    """
    root = Path(root).resolve()
    root.mkdir(parents=True, exist_ok=True)
    _git(["init", "-q", "-b", main_branch, str(root)], cwd=root)
    for rel, content in files.items():
        target = root / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(content, encoding="utf-8")
    _git(["add", "-A"], cwd=root)
    _git(["commit", "-q", "-m", message], cwd=root, env=_commit_env(timestamp))
    return RepoHandle(root_path=root, main_branch=main_branch)


def wait_for_clean_registry(repo: RepoHandle, attempts: int = 3, delay_s: float = 0.1) -> bool:
    """Prune and poll until no auxiliary worktrees remain; True when clean."""
    for _ in range(attempts):
        _git(["worktree", "prune"], cwd=repo.root_path, check=False)
        if not live_worktrees(repo):
            return True
        time.sleep(delay_s)
    return not live_worktrees(repo)
