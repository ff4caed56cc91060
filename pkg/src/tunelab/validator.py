"""Fail-fast progressive validation: static -> mini run -> runtime sanity.

Each stage only runs if no earlier stage hard-failed; skipped stages are
recorded as such. The report's verdict is hard_fail iff any diagnostic is
hard, pass_with_warnings iff only soft diagnostics fired, else pass. Full
training is gated on verdict != hard_fail, so a broken plan costs one mini
run at most, never a full training launch.

Diagnostic codes are stable strings; downstream code may match on them.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .adapters import (
    EXIT_DATA_ERROR,
    EXIT_NUMERICAL_ERROR,
    EXIT_OK,
    AdapterDescription,
    AdapterRef,
    parse_loss_log,
)
from .analysis import LossPoint, RegimeThresholds
from .repository import ProcessingStats
from .sandbox import BudgetClock, Workspace, execute

# stable diagnostic codes
CONFIG_RANGE = "CONFIG_RANGE"
PATH_MISSING = "PATH_MISSING"
EMPTY_DATASET = "EMPTY_DATASET"
HIGH_FILTER_RATE = "HIGH_FILTER_RATE"
SKEWED_DISTRIBUTION = "SKEWED_DISTRIBUTION"
EXPLODING_LOSS = "EXPLODING_LOSS"
INVALID_GRADIENTS = "INVALID_GRADIENTS"
FORMAT_VIOLATION = "FORMAT_VIOLATION"
MINI_RUN_FAILED = "MINI_RUN_FAILED"
BUDGET_EXCEEDED = "BUDGET_EXCEEDED"

HARD = "hard"
SOFT = "soft"

STAGES = ("static", "mini_run", "runtime_sanity")

MINI_SAMPLE_CAP = 16
MINI_STEP_CAP = 2
RETENTION_FLOOR = 0.10
SKEW_CEILING = 0.9

_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class TrainingConfig:
    """Declarative training parameters, as proposed by the agent.

    Deliberately permissive at construction: out-of-range values must reach
    the validator so they surface as CONFIG_RANGE diagnostics instead of
    crashes. `violations()` is the authoritative range check.
    """

    method: str = "lora"  # "full" | "lora"
    learning_rate: float = 1e-4
    batch_size: int = 8
    grad_accumulation: int = 1
    epochs: int | None = 1
    max_steps: int | None = None
    sequence_length_cap: int = 2048
    prompt_format: str = "plain"
    eval_fraction: float = 0.2
    seed: int = 0

    def violations(self) -> list[str]:
        problems = []
        if self.method not in ("full", "lora"):
            problems.append(f"method must be 'full' or 'lora', got {self.method!r}")
        if not (0.0 < self.learning_rate < 1.0):
            problems.append(f"learning_rate must be in (0, 1), got {self.learning_rate}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be positive, got {self.batch_size}")
        if self.grad_accumulation < 1:
            problems.append(f"grad_accumulation must be positive, got {self.grad_accumulation}")
        if (self.epochs is None) == (self.max_steps is None):
            problems.append("exactly one of epochs or max_steps must be set")
        if self.epochs is not None and self.epochs < 1:
            problems.append(f"epochs must be positive, got {self.epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            problems.append(f"max_steps must be positive, got {self.max_steps}")
        if self.sequence_length_cap < 1:
            problems.append(f"sequence_length_cap must be positive, got {self.sequence_length_cap}")
        if not (0.0 < self.eval_fraction < 1.0):
            problems.append(f"eval_fraction must be in (0, 1), got {self.eval_fraction}")
        return problems

    def to_json(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "grad_accumulation": self.grad_accumulation,
            "epochs": self.epochs,
            "max_steps": self.max_steps,
            "sequence_length_cap": self.sequence_length_cap,
            "prompt_format": self.prompt_format,
            "eval_fraction": self.eval_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "TrainingConfig":
        known = {f: doc[f] for f in cls.__dataclass_fields__ if f in doc}
        if "max_steps" in known and known.get("max_steps") is not None and "epochs" not in doc:
            known["epochs"] = None
        return cls(**known)


@dataclass
class Diagnostic:
    code: str
    severity: str  # HARD | SOFT
    message: str
    stage: str
    locus: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "code": self.code,
            "severity": self.severity,
            "message": self.message,
            "stage": self.stage,
            "locus": self.locus,
        }


@dataclass
class StageResult:
    stage: str
    status: str  # "passed" | "failed" | "skipped"
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def hard_failed(self) -> bool:
        return any(d.severity == HARD for d in self.diagnostics)

    def to_json(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "status": self.status,
            "diagnostics": [d.to_json() for d in self.diagnostics],
        }


@dataclass
class ValidationReport:
    verdict: str  # "pass" | "pass_with_warnings" | "hard_fail"
    stages: list[StageResult]
    mini_trajectory: list[LossPoint] = field(default_factory=list)

    @property
    def hard_diagnostics(self) -> list[Diagnostic]:
        return [d for s in self.stages for d in s.diagnostics if d.severity == HARD]

    @property
    def soft_diagnostics(self) -> list[Diagnostic]:
        return [d for s in self.stages for d in s.diagnostics if d.severity == SOFT]

    def to_json(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict,
            "stages": [s.to_json() for s in self.stages],
            "mini_trajectory": [p.to_json() for p in self.mini_trajectory],
        }

    def write(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")
        return path


def _verdict(stages: Sequence[StageResult]) -> str:
    if any(s.hard_failed for s in stages):
        return "hard_fail"
    if any(s.diagnostics for s in stages):
        return "pass_with_warnings"
    return "pass"


# -- stage 1: static ------------------------------------------------------------


def validate_static(
    config: TrainingConfig,
    train_file: Path | str,
    adapter_description: AdapterDescription | None = None,
) -> StageResult:
    diagnostics: list[Diagnostic] = []
    for problem in config.violations():
        diagnostics.append(
            Diagnostic(CONFIG_RANGE, HARD, problem, stage="static", locus="training_config")
        )
    train_path = Path(train_file)
    if not train_path.is_file():
        diagnostics.append(
            Diagnostic(
                PATH_MISSING, HARD, f"training set file not found: {train_path}",
                stage="static", locus="train_set",
            )
        )
    elif train_path.stat().st_size == 0:
        diagnostics.append(
            Diagnostic(
                EMPTY_DATASET, HARD, "training set file is empty",
                stage="static", locus="train_set",
            )
        )
    if adapter_description is not None:
        for key, (lo, hi) in sorted(adapter_description.ranges.items()):
            value = getattr(config, key, None)
            if value is None:
                continue
            if not (lo <= float(value) <= hi):
                diagnostics.append(
                    Diagnostic(
                        CONFIG_RANGE,
                        HARD,
                        f"{key}={value} outside adapter-declared range [{lo}, {hi}]",
                        stage="static",
                        locus="training_config",
                    )
                )
    status = "failed" if any(d.severity == HARD for d in diagnostics) else "passed"
    return StageResult(stage="static", status=status, diagnostics=diagnostics)


# -- stage 2: mini run ------------------------------------------------------------


def _load_records(train_path: Path) -> list[dict[str, Any]]:
    records = []
    for line in train_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict):
            records.append(doc)
    return records


def _looks_reasoned(output: str) -> bool:
    # a reasoning trace has more than one sentence-ish segment or a line break
    segments = [s for s in re.split(r"[.!?]\s+|\n", output.strip()) if s.strip()]
    return len(segments) >= 2


@dataclass
class MiniRunOutcome:
    executed: bool
    exit_code: int | None = None
    trajectory: list[LossPoint] = field(default_factory=list)
    log_parsed: bool = False


def validate_mini_run(
    config: TrainingConfig,
    train_file: Path | str,
    adapter: AdapterRef,
    workspace: Workspace,
    budget: BudgetClock | None = None,
    event_log: Any = None,
    stats: ProcessingStats | None = None,
    requires_reasoning: bool = False,
    sample_cap: int = MINI_SAMPLE_CAP,
    mini_timeout: float = 120.0,
) -> tuple[StageResult, MiniRunOutcome]:
    """Content checks plus a capped mini training run through the adapter."""
    diagnostics: list[Diagnostic] = []
    train_path = Path(train_file)
    records = _load_records(train_path)

    if not records:
        diagnostics.append(
            Diagnostic(
                EMPTY_DATASET, HARD, "training set parses to zero records",
                stage="mini_run", locus="train_set",
            )
        )
        return (
            StageResult(stage="mini_run", status="failed", diagnostics=diagnostics),
            MiniRunOutcome(executed=False),
        )

    empty_fields = [
        i for i, r in enumerate(records)
        if not str(r.get("instruction", "")).strip() or not str(r.get("output", "")).strip()
    ]
    if empty_fields:
        diagnostics.append(
            Diagnostic(
                FORMAT_VIOLATION,
                HARD,
                f"{len(empty_fields)} record(s) have empty instruction/output "
                f"(first at index {empty_fields[0]})",
                stage="mini_run",
                locus="train_set",
            )
        )
    if requires_reasoning:
        unreasoned = [
            i for i, r in enumerate(records) if not _looks_reasoned(str(r.get("output", "")))
        ]
        if unreasoned:
            diagnostics.append(
                Diagnostic(
                    FORMAT_VIOLATION,
                    HARD,
                    f"task requires reasoning traces; {len(unreasoned)} record(s) "
                    f"lack one (first at index {unreasoned[0]})",
                    stage="mini_run",
                    locus="train_set",
                )
            )

    if stats is not None and stats.input_count > 0 and stats.retention_ratio < RETENTION_FLOOR:
        diagnostics.append(
            Diagnostic(
                HIGH_FILTER_RATE,
                SOFT,
                f"filters retain {stats.retention_ratio:.3f} of inputs "
                f"({stats.retained_count}/{stats.input_count})",
                stage="mini_run",
                locus="data_strategy",
            )
        )
    labels = [_WS.sub(" ", str(r.get("output", "")).casefold()).strip() for r in records]
    if labels:
        top = max(set(labels), key=labels.count)
        share = labels.count(top) / len(labels)
        if share > SKEW_CEILING and len(set(labels)) > 1:
            diagnostics.append(
                Diagnostic(
                    SKEWED_DISTRIBUTION,
                    SOFT,
                    f"majority output value covers {share:.2f} of records",
                    stage="mini_run",
                    locus="train_set",
                )
            )

    if any(d.severity == HARD for d in diagnostics):
        return (
            StageResult(stage="mini_run", status="failed", diagnostics=diagnostics),
            MiniRunOutcome(executed=False),
        )

    # capped run through the adapter's mini mode
    mini_dir = workspace.path("mini")
    mini_dir.mkdir(parents=True, exist_ok=True)
    mini_train = mini_dir / "train.jsonl"
    with mini_train.open("w", encoding="utf-8") as fh:
        for record in records[:sample_cap]:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    mini_config = mini_dir / "config.json"
    mini_config.write_text(json.dumps(config.to_json(), sort_keys=True), encoding="utf-8")
    out_dir = mini_dir / "out"
    result = execute(
        workspace,
        adapter.train_argv(str(mini_config), str(mini_train), str(out_dir), mini=True),
        budget=budget,
        timeout=mini_timeout,
        event_log=event_log,
        purpose="mini_run",
    )

    outcome = MiniRunOutcome(executed=True, exit_code=result.exit_code)
    loss_path = out_dir / "loss.log"
    if result.timed_out:
        diagnostics.append(
            Diagnostic(
                MINI_RUN_FAILED, HARD, "mini run timed out", stage="mini_run", locus="adapter"
            )
        )
    elif result.exit_code == EXIT_DATA_ERROR:
        diagnostics.append(
            Diagnostic(
                EMPTY_DATASET,
                HARD,
                f"adapter rejected the data (exit {EXIT_DATA_ERROR}): {result.stderr.strip()[:200]}",
                stage="mini_run",
                locus="adapter",
            )
        )
    elif result.exit_code not in (EXIT_OK, EXIT_NUMERICAL_ERROR):
        diagnostics.append(
            Diagnostic(
                MINI_RUN_FAILED,
                HARD,
                f"mini run exited {result.exit_code}: {result.stderr.strip()[:200]}",
                stage="mini_run",
                locus="adapter",
            )
        )
    else:
        try:
            outcome.trajectory = parse_loss_log(loss_path) if loss_path.is_file() else []
            outcome.log_parsed = loss_path.is_file()
        except ValueError as exc:
            diagnostics.append(
                Diagnostic(
                    MINI_RUN_FAILED, HARD, f"mini telemetry unreadable: {exc}",
                    stage="mini_run", locus="adapter",
                )
            )
        if not loss_path.is_file():
            diagnostics.append(
                Diagnostic(
                    MINI_RUN_FAILED, HARD, "mini run produced no loss.log",
                    stage="mini_run", locus="adapter",
                )
            )

    status = "failed" if any(d.severity == HARD for d in diagnostics) else "passed"
    return StageResult(stage="mini_run", status=status, diagnostics=diagnostics), outcome


# -- stage 3: runtime sanity -------------------------------------------------------


def validate_runtime_sanity(
    outcome: MiniRunOutcome, thresholds: RegimeThresholds | None = None
) -> StageResult:
    """Judge the mini run's telemetry: finite, stable, non-empty."""
    th = thresholds or RegimeThresholds()
    diagnostics: list[Diagnostic] = []
    points = outcome.trajectory
    if not points:
        diagnostics.append(
            Diagnostic(
                EMPTY_DATASET, HARD, "zero batches consumed in the mini run",
                stage="runtime_sanity", locus="adapter",
            )
        )
    else:
        losses = [p.train_loss for p in points] + [
            p.eval_loss for p in points if p.eval_loss is not None
        ]
        if any(not math.isfinite(x) for x in losses):
            diagnostics.append(
                Diagnostic(
                    EXPLODING_LOSS, HARD, "non-finite loss in mini telemetry",
                    stage="runtime_sanity", locus="adapter",
                )
            )
        else:
            train = [p.train_loss for p in points]
            for prev, nxt in zip(train, train[1:]):
                if prev > 0 and nxt / prev > th.jump_ratio:
                    diagnostics.append(
                        Diagnostic(
                            EXPLODING_LOSS,
                            HARD,
                            f"train loss jumped {nxt / prev:.1f}x in one step "
                            f"({prev:.4g} -> {nxt:.4g})",
                            stage="runtime_sanity",
                            locus="adapter",
                        )
                    )
                    break
            if not diagnostics and outcome.exit_code == EXIT_NUMERICAL_ERROR:
                diagnostics.append(
                    Diagnostic(
                        INVALID_GRADIENTS, HARD,
                        "adapter reported a numerical error (invalid gradients)",
                        stage="runtime_sanity", locus="adapter",
                    )
                )
    status = "failed" if any(d.severity == HARD for d in diagnostics) else "passed"
    return StageResult(stage="runtime_sanity", status=status, diagnostics=diagnostics)


# -- the gate -----------------------------------------------------------------------


def progressive_validate(
    config: TrainingConfig,
    train_file: Path | str,
    adapter: AdapterRef,
    workspace: Workspace,
    adapter_description: AdapterDescription | None = None,
    budget: BudgetClock | None = None,
    event_log: Any = None,
    stats: ProcessingStats | None = None,
    requires_reasoning: bool = False,
    thresholds: RegimeThresholds | None = None,
) -> ValidationReport:
    """Run the three stages with fail-fast short-circuiting."""
    stages: list[StageResult] = []
    static = validate_static(config, train_file, adapter_description)
    stages.append(static)
    mini_outcome = MiniRunOutcome(executed=False)
    if static.hard_failed:
        stages.append(StageResult(stage="mini_run", status="skipped"))
        stages.append(StageResult(stage="runtime_sanity", status="skipped"))
    else:
        mini, mini_outcome = validate_mini_run(
            config,
            train_file,
            adapter,
            workspace,
            budget=budget,
            event_log=event_log,
            stats=stats,
            requires_reasoning=requires_reasoning,
        )
        stages.append(mini)
        if mini.hard_failed:
            stages.append(StageResult(stage="runtime_sanity", status="skipped"))
        else:
            stages.append(validate_runtime_sanity(mini_outcome, thresholds))

    report = ValidationReport(
        verdict=_verdict(stages), stages=stages, mini_trajectory=mini_outcome.trajectory
    )
    if event_log is not None:
        event_log.append(
            "validation_report",
            iteration=workspace.iteration,
            verdict=report.verdict,
            codes=sorted({d.code for s in stages for d in s.diagnostics}),
        )
    report.write(workspace.path("validation_report.json"))
    return report
