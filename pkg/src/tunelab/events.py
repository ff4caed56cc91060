"""Append-only event stream: one JSON object per line, never rewritten.

Every record carries {ts, run_id, iteration, event, detail}. The stream is
the ground truth for replay: telemetry recomputed from it must equal the
in-memory report, and audits (gate soundness, deadline behavior) read it
instead of trusting module state.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

from .errors import StorageFailure


@dataclass(frozen=True)
class Event:
    ts: float
    run_id: str
    iteration: int
    event: str
    detail: dict[str, Any]

    def to_json(self) -> dict[str, Any]:
        return {
            "ts": self.ts,
            "run_id": self.run_id,
            "iteration": self.iteration,
            "event": self.event,
            "detail": self.detail,
        }


class EventLog:
    """Line-buffered appender; a lock serializes writers within the process."""

    def __init__(self, path: Path | str, run_id: str, clock: Any) -> None:
        self.path = Path(path)
        self.run_id = run_id
        self.clock = clock
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)

    def append(self, event: str, iteration: int = -1, ts: float | None = None, **detail: Any) -> Event:
        # ts override exists so a caller can stamp an event with the same
        # clock sample it used for a gate decision (deadline audit soundness).
        record = Event(
            ts=self.clock.now() if ts is None else ts,
            run_id=self.run_id,
            iteration=iteration,
            event=event,
            detail=detail,
        )
        line = json.dumps(record.to_json(), sort_keys=True)
        with self._lock:
            try:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")
                    fh.flush()
            except OSError as exc:
                raise StorageFailure(str(exc)) from exc
        return record


def read_events(path: Path | str) -> list[Event]:
    """Parse a stream file; a corrupt line raises with its line number."""
    events = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            events.append(
                Event(
                    ts=float(doc["ts"]),
                    run_id=str(doc["run_id"]),
                    iteration=int(doc["iteration"]),
                    event=str(doc["event"]),
                    detail=dict(doc.get("detail", {})),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise StorageFailure(f"corrupt event stream at line {lineno}: {exc}") from exc
    return events


# -- replay --------------------------------------------------------------------


def telemetry_from_events(events: Iterable[Event]) -> dict[str, Any]:
    """Recompute run telemetry purely from the stream.

    loops counts started iterations; improve_rate is accepted/loops (an
    artifact definition, 0 when no loop started); effective iterations are
    those that reached an accept/reject decision; total_cost is the exact
    ledger sum.
    """
    loops = 0
    accepted = 0
    effective = 0
    total_cost = 0.0
    for event in events:
        if event.event == "iteration_started":
            loops += 1
        elif event.event == "decision":
            verdict = event.detail.get("decision")
            if verdict == "accepted":
                accepted += 1
                effective += 1
            elif verdict == "rejected":
                effective += 1
        elif event.event == "charge":
            total_cost += float(event.detail.get("amount", 0.0))
    return {
        "loops": loops,
        "accepted": accepted,
        "improve_rate": (accepted / loops) if loops else 0.0,
        "effective_iterations": effective,
        "total_cost": total_cost,
    }


# -- audits ---------------------------------------------------------------------


def audit_gate_soundness(events: Iterable[Event]) -> list[str]:
    """Full training may only start in an iteration whose validation report
    passed; returns a list of violations (empty = sound)."""
    verdicts: dict[int, str] = {}
    violations = []
    for event in events:
        if event.event == "validation_report":
            verdicts[event.iteration] = str(event.detail.get("verdict"))
        elif event.event == "process_start" and event.detail.get("purpose") == "full_training":
            verdict = verdicts.get(event.iteration)
            if verdict is None or verdict == "hard_fail":
                violations.append(
                    f"iteration {event.iteration}: full training started with verdict {verdict!r}"
                )
    return violations


def audit_deadline(events: Iterable[Event], started_at: float, wall_clock_limit: float) -> list[str]:
    """No process may start after the wall-clock deadline."""
    deadline = started_at + wall_clock_limit
    return [
        f"process started at ts={event.ts:.6f} after deadline {deadline:.6f}"
        for event in events
        if event.event == "process_start" and event.ts > deadline
    ]
