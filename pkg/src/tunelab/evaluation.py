"""Evaluation engine: metric application plus the two-phase run protocol.

During a run the agent may score candidate models against the validation
split as often as it likes; the held-out test split is scored exactly once,
after finalization begins. This module owns that state machine:

    open --begin_finalizing()--> finalizing --submit_final_test()--> finalized

submit_validation requires the run not be finalized and budget to remain;
submit_final_test requires finalizing and an unconsumed test set. Test
feedback never carries gold values, only the aggregate and correctness flags.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .errors import (
    BudgetExhausted,
    MissingGold,
    RunFinalized,
    RunNotFinalizing,
    TestAlreadyConsumed,
)
from .metrics import MetricRegistry, extract_answer, run_external_metric
from .registry import TaskSpec

FAILURE_SAMPLE_K = 10


@dataclass(frozen=True)
class EvalItem:
    instance_id: str
    instruction: str
    input: str
    gold: str


@dataclass
class InstanceOutcome:
    instance_id: str
    prediction: str
    gold: str | None
    correct: bool
    error_tag: str | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "prediction": self.prediction,
            "gold": self.gold,
            "correct": self.correct,
            "error_tag": self.error_tag,
        }


@dataclass
class EvalFeedback:
    phase: str  # "validation" | "test"
    aggregates: dict[str, float]
    primary_metric: str
    primary_score: float
    per_instance: list[InstanceOutcome]
    failure_samples: list[InstanceOutcome]
    timestamp: float
    loss_trajectory: list[dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "phase": self.phase,
            "aggregates": dict(self.aggregates),
            "primary_metric": self.primary_metric,
            "primary_score": self.primary_score,
            "per_instance": [o.to_json() for o in self.per_instance],
            "failure_samples": [o.to_json() for o in self.failure_samples],
            "timestamp": self.timestamp,
            "loss_trajectory": list(self.loss_trajectory),
        }


def _sample_failures(
    outcomes: Sequence[InstanceOutcome], seed: int, k: int = FAILURE_SAMPLE_K
) -> list[InstanceOutcome]:
    failures = [o for o in outcomes if not o.correct]
    if len(failures) <= k:
        return list(failures)
    picked = sorted(random.Random(seed).sample(range(len(failures)), k))
    return [failures[i] for i in picked]


class EvaluationProtocol:
    """Run-scoped scorer enforcing unlimited-validation / test-at-most-once."""

    def __init__(
        self,
        task: TaskSpec,
        val_items: Sequence[EvalItem],
        test_items: Sequence[EvalItem],
        metrics: MetricRegistry | None = None,
        clock: Any = None,
        seed: int = 0,
        scratch_dir: Path | str | None = None,
        external_runner: Any = None,
    ) -> None:
        self.task = task
        self.val_items = list(val_items)
        self.test_items = list(test_items)
        self.metrics = metrics or MetricRegistry()
        self.clock = clock
        self.seed = seed
        self.scratch_dir = Path(scratch_dir) if scratch_dir else None
        self.external_runner = external_runner
        self.finalizing = False
        self.test_consumed = False
        self.validation_count = 0

    # -- state ---------------------------------------------------------------

    @property
    def finalized(self) -> bool:
        return self.test_consumed

    def begin_finalizing(self) -> None:
        self.finalizing = True

    # -- scoring -------------------------------------------------------------

    def submit_validation(self, predictions: Mapping[str, str]) -> EvalFeedback:
        if self.finalized:
            raise RunFinalized("validation submission after the run was finalized")
        if self.clock is not None and self.clock.remaining() <= 0:
            raise BudgetExhausted("wall-clock budget exhausted")
        self.validation_count += 1
        return self._score(
            self.val_items,
            predictions,
            phase="validation",
            include_gold=True,
            sample_seed=self.seed * 100_003 + self.validation_count,
        )

    def submit_final_test(self, predictions: Mapping[str, str]) -> EvalFeedback:
        if self.test_consumed:
            raise TestAlreadyConsumed("the held-out test set is evaluated at most once")
        if not self.finalizing:
            raise RunNotFinalizing("test submission before finalization began")
        feedback = self._score(
            self.test_items,
            predictions,
            phase="test",
            include_gold=False,
            sample_seed=self.seed * 100_003,
        )
        self.test_consumed = True
        return feedback

    def _score(
        self,
        items: Sequence[EvalItem],
        predictions: Mapping[str, str],
        phase: str,
        include_gold: bool,
        sample_seed: int,
    ) -> EvalFeedback:
        expected = {item.instance_id for item in items}
        got = set(predictions)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise MissingGold(
                f"{phase} ids do not match the split manifest "
                f"(missing={missing}, unexpected={extra})"
            )
        extracted = [
            extract_answer(predictions[item.instance_id], self.task.answer_extraction)
            for item in items
        ]
        golds = [item.gold for item in items]

        aggregates: dict[str, float] = {}
        primary_flags: tuple[bool, ...] = ()
        for binding in self.task.metrics:
            if binding.external_cmd:
                aggregate, per_rows = self._run_external(binding.external_cmd, items, extracted)
                flags = self._flags_from_rows(items, per_rows)
            else:
                result = self.metrics.get(binding.metric_id)(extracted, golds)
                aggregate, flags = result.aggregate, result.correct
            aggregates[binding.metric_id] = aggregate
            if binding.primary:
                primary_flags = tuple(flags)

        primary = self.task.primary_metric
        outcomes = [
            InstanceOutcome(
                instance_id=item.instance_id,
                prediction=predictions[item.instance_id],
                gold=item.gold if include_gold else None,
                correct=flag,
            )
            for item, flag in zip(items, primary_flags)
        ]
        failures = _sample_failures(outcomes, seed=sample_seed) if include_gold else []
        return EvalFeedback(
            phase=phase,
            aggregates=aggregates,
            primary_metric=primary.metric_id,
            primary_score=aggregates[primary.metric_id],
            per_instance=outcomes,
            failure_samples=failures,
            timestamp=self.clock.now() if self.clock is not None else 0.0,
        )

    def _run_external(
        self, cmd: tuple[str, ...], items: Sequence[EvalItem], extracted: Sequence[str]
    ) -> tuple[float, list[dict[str, Any]]]:
        if self.scratch_dir is None:
            raise MissingGold("external metrics need a scratch_dir to exchange files")
        self.scratch_dir.mkdir(parents=True, exist_ok=True)
        preds_file = self.scratch_dir / "metric_predictions.jsonl"
        gold_file = self.scratch_dir / "metric_gold.jsonl"
        write_predictions_file(
            preds_file, {item.instance_id: p for item, p in zip(items, extracted)}
        )
        write_gold_file(gold_file, {item.instance_id: item.gold for item in items})
        return run_external_metric(
            cmd, str(preds_file), str(gold_file), runner=self.external_runner
        )

    @staticmethod
    def _flags_from_rows(
        items: Sequence[EvalItem], rows: list[dict[str, Any]]
    ) -> tuple[bool, ...]:
        by_id = {str(r["instance_id"]): bool(r["correct"]) for r in rows}
        return tuple(by_id.get(item.instance_id, False) for item in items)


# -- eval item construction ---------------------------------------------------


def build_eval_items(catalog: Any, task: TaskSpec, indices: Sequence[int]) -> list[EvalItem]:
    """Materialize eval items for split indices over the task's eval source.

    Indices address the source's normalizable records in file order, the same
    "filtered instance" sequence that make_splits(n, ...) was sized against.
    """
    from .repository import UnparsableRecord, normalize  # local import avoids a cycle

    entry = catalog.get(task.eval_source_id)
    filtered = []
    for raw in entry.records:
        try:
            filtered.append(normalize(raw, entry.ref.format_hint))
        except UnparsableRecord:
            continue
    items = []
    for idx in indices:
        record = filtered[idx]
        items.append(
            EvalItem(
                instance_id=str(idx),
                instruction=record.instruction,
                input=record.input,
                gold=record.output,
            )
        )
    return items


def write_eval_inputs_file(path: Path | str, items: Sequence[EvalItem]) -> Path:
    """Model-facing eval file: ids and prompts, never gold."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for item in items:
            fh.write(
                json.dumps(
                    {
                        "instance_id": item.instance_id,
                        "instruction": item.instruction,
                        "input": item.input,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return path


# -- file formats -------------------------------------------------------------


def write_predictions_file(path: Path | str, predictions: Mapping[str, str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for instance_id in predictions:
            fh.write(
                json.dumps(
                    {"instance_id": instance_id, "output": predictions[instance_id]},
                    sort_keys=True,
                )
                + "\n"
            )
    return path


def read_predictions_file(path: Path | str) -> dict[str, str]:
    predictions: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        predictions[str(doc["instance_id"])] = str(doc.get("output", ""))
    return predictions


def write_gold_file(path: Path | str, golds: Mapping[str, str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for instance_id in golds:
            fh.write(
                json.dumps({"instance_id": instance_id, "label": golds[instance_id]}, sort_keys=True)
                + "\n"
            )
    return path


def read_gold_file(path: Path | str) -> dict[str, str]:
    golds: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        golds[str(doc["instance_id"])] = str(doc.get("label", ""))
    return golds


def score_files(
    metric_id: str,
    predictions_path: Path | str,
    gold_path: Path | str,
    metrics: MetricRegistry | None = None,
) -> float:
    """Offline scorer behind cmd_score: gold must cover every prediction id."""
    registry = metrics or MetricRegistry()
    predictions = read_predictions_file(predictions_path)
    golds = read_gold_file(gold_path)
    missing = sorted(set(predictions) - set(golds))
    if missing:
        raise MissingGold(f"gold file missing ids: {missing[:5]}")
    ids = sorted(predictions)
    result = registry.get(metric_id)([predictions[i] for i in ids], [golds[i] for i in ids])
    return result.aggregate
