"""Sandbox runtime: per-iteration workspaces, guarded subprocess execution,
and the budget clock with its spend ledger.

Processes run with the workspace as working directory, a scrubbed
environment, no shell interpretation, a hard timeout, and truncated output
capture. Absolute paths in arguments must stay inside the workspace or one
of its read-only mounts; nothing may start once the wall-clock deadline has
passed.
"""

from __future__ import annotations

import os
import signal
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import DeadlinePassed, SpendLimitExceeded, StorageFailure, WorkspaceViolation

MAX_OUTPUT_BYTES = 4 * 1024 * 1024
TRUNCATION_MARKER = "\n[output truncated]\n"

# environment variables a child may inherit; everything else is dropped
_ENV_ALLOWLIST = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "PYTHONHASHSEED", "NODE_PATH")


class SystemClock:
    """Monotonic wall time."""

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class LogicalClock:
    """Deterministic time source: each reading advances by a fixed quantum.

    Used for reproducible runs where event streams must be byte-identical;
    sleep() advances time instead of waiting.
    """

    def __init__(self, start: float = 0.0, quantum: float = 0.001) -> None:
        self._t = start
        self.quantum = quantum

    def now(self) -> float:
        self._t = round(self._t + self.quantum, 9)
        return self._t

    def sleep(self, seconds: float) -> None:
        self._t = round(self._t + seconds, 9)


@dataclass
class LedgerEntry:
    amount: float
    memo: str
    iteration: int
    ts: float

    def to_json(self) -> dict[str, Any]:
        return {"amount": self.amount, "memo": self.memo, "iteration": self.iteration, "ts": self.ts}


class BudgetClock:
    """Tracks the wall-clock deadline and accumulates LLM spend.

    remaining() never reports negative; charge() appends to the ledger even
    when it pushes past the spend limit, then raises, so the ledger always
    accounts for every unit spent.
    """

    def __init__(
        self,
        wall_clock_limit: float,
        spend_limit: float | None = None,
        clock: Any = None,
    ) -> None:
        if wall_clock_limit <= 0:
            raise ValueError("wall_clock_limit must be positive")
        self.clock = clock or SystemClock()
        self.wall_clock_limit = wall_clock_limit
        self.spend_limit = spend_limit
        self.started_at = self.clock.now()
        self.spent = 0.0
        self.ledger: list[LedgerEntry] = []

    def now(self) -> float:
        return self.clock.now()

    def elapsed(self) -> float:
        return self.clock.now() - self.started_at

    def remaining(self) -> float:
        return max(0.0, self.wall_clock_limit - self.elapsed())

    def expired(self) -> bool:
        return self.remaining() <= 0.0

    def charge(self, amount: float, memo: str, iteration: int = -1) -> LedgerEntry:
        if amount < 0:
            raise ValueError("charges must be non-negative")
        entry = LedgerEntry(amount=amount, memo=memo, iteration=iteration, ts=self.clock.now())
        self.ledger.append(entry)
        self.spent += amount
        if self.spend_limit is not None and self.spent > self.spend_limit:
            raise SpendLimitExceeded(
                f"spend {self.spent:.6f} exceeds limit {self.spend_limit:.6f}"
            )
        return entry

    def total_cost(self) -> float:
        return sum(entry.amount for entry in self.ledger)


@dataclass
class Workspace:
    """Isolated directory for one (run, iteration) pair."""

    run_id: str
    iteration: int
    root: Path
    read_only_mounts: tuple[Path, ...] = ()

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)


def create_workspace(
    runs_dir: Path | str,
    run_id: str,
    iteration: int | str,
    read_only_mounts: Sequence[Path | str] = (),
) -> Workspace:
    name = f"iter_{iteration:03d}" if isinstance(iteration, int) and iteration >= 0 else str(iteration)
    root = Path(runs_dir) / run_id / name
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageFailure(str(exc)) from exc
    index = iteration if isinstance(iteration, int) else -1
    return Workspace(
        run_id=run_id,
        iteration=index,
        root=root.resolve(),
        read_only_mounts=tuple(Path(m).resolve() for m in read_only_mounts),
    )


@dataclass
class ExecutionResult:
    exit_code: int
    stdout: str
    stderr: str
    duration: float
    timed_out: bool = False
    truncated: bool = False


def _inside(path: Path, roots: Sequence[Path]) -> bool:
    for root in roots:
        try:
            path.resolve().relative_to(root)
            return True
        except ValueError:
            continue
    return False


def _check_args(argv: Sequence[str], workspace: Workspace) -> None:
    allowed = (workspace.root, *workspace.read_only_mounts)
    for arg in argv[1:]:  # the executable itself may live anywhere on PATH
        candidate = Path(arg)
        if not candidate.is_absolute():
            continue
        if not candidate.exists() and not candidate.parent.exists():
            continue  # not a real path, just absolute-looking text
        if not _inside(candidate, allowed):
            raise WorkspaceViolation(f"argument escapes the workspace: {arg}")


def _scrubbed_env(additions: Mapping[str, str] | None) -> dict[str, str]:
    env = {k: os.environ[k] for k in _ENV_ALLOWLIST if k in os.environ}
    if additions:
        env.update({str(k): str(v) for k, v in additions.items()})
    return env


def execute(
    workspace: Workspace,
    argv: Sequence[str],
    budget: BudgetClock | None = None,
    timeout: float | None = None,
    env: Mapping[str, str] | None = None,
    event_log: Any = None,
    purpose: str = "process",
    max_output_bytes: int = MAX_OUTPUT_BYTES,
) -> ExecutionResult:
    """Run one command inside the workspace.

    Refuses to start once the budget deadline has passed (DeadlinePassed);
    kills the whole process group on timeout; truncates either stream at
    max_output_bytes with a marker.
    """
    if not argv:
        raise ValueError("empty command")
    # One clock sample serves both the deadline gate and the process_start
    # timestamp, so a passed gate can never emit an event past the deadline.
    gate_ts: float | None = None
    if budget is not None:
        gate_ts = budget.now()
        if gate_ts - budget.started_at >= budget.wall_clock_limit:
            raise DeadlinePassed(
                f"not starting {argv[0]!r}: wall-clock budget exhausted"
            )
    _check_args(argv, workspace)

    effective_timeout = timeout
    if budget is not None:
        slack = max(0.1, budget.wall_clock_limit - (gate_ts - budget.started_at))
        effective_timeout = min(timeout, slack) if timeout else slack
        if isinstance(budget.clock, LogicalClock):
            effective_timeout = timeout  # logical deadlines don't bound real time

    if event_log is not None:
        event_log.append(
            "process_start",
            iteration=workspace.iteration,
            ts=gate_ts,
            purpose=purpose,
            exe=Path(argv[0]).name,
        )
    started = gate_ts if gate_ts is not None else time.monotonic()
    stdout_path = workspace.path("stdout.log")
    stderr_path = workspace.path("stderr.log")
    timed_out = False
    with stdout_path.open("wb") as out_fh, stderr_path.open("wb") as err_fh:
        proc = subprocess.Popen(
            list(argv),
            cwd=str(workspace.root),
            env=_scrubbed_env(env),
            stdout=out_fh,
            stderr=err_fh,
            stdin=subprocess.DEVNULL,
            start_new_session=True,  # lets us kill the whole tree
        )
        try:
            exit_code = proc.wait(timeout=effective_timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                proc.kill()
            proc.wait()
            exit_code = -9

    duration = (budget.now() - started) if budget is not None else time.monotonic() - started

    def _read_truncated(path: Path) -> tuple[str, bool]:
        data = path.read_bytes()
        if len(data) > max_output_bytes:
            return (
                data[:max_output_bytes].decode("utf-8", errors="replace") + TRUNCATION_MARKER,
                True,
            )
        return data.decode("utf-8", errors="replace"), False

    stdout, trunc_out = _read_truncated(stdout_path)
    stderr, trunc_err = _read_truncated(stderr_path)
    result = ExecutionResult(
        exit_code=exit_code,
        stdout=stdout,
        stderr=stderr,
        duration=duration,
        timed_out=timed_out,
        truncated=trunc_out or trunc_err,
    )
    if event_log is not None:
        event_log.append(
            "process_end",
            iteration=workspace.iteration,
            purpose=purpose,
            exit_code=exit_code,
            timed_out=timed_out,
        )
    return result
