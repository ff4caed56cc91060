"""Built-in metrics, the metric registry, and the external-metric protocol.

A metric maps aligned prediction/gold label lists to an aggregate plus a
per-instance correctness vector. Rate-style aggregates stay within [0, 1];
error-style aggregates (mae) are non-negative. External metrics are separate
executables: they receive the predictions file and gold file as their first
two arguments and print one JSON document to stdout:

    {"aggregate": <number>, "per_instance": [{"instance_id": ..., "correct": ...}]}

A nonzero exit or malformed output is surfaced as MetricFailure.
"""

from __future__ import annotations

import json
import re
import subprocess
from dataclasses import dataclass
from typing import Any, Callable, Sequence

from .errors import DuplicateMetricId, MetricFailure, MetricNotRegistered

_WS = re.compile(r"\s+")


def _canon(text: str) -> str:
    return _WS.sub(" ", text.casefold()).strip()


def _parse_number(text: str) -> float | None:
    try:
        return float(text.strip())
    except ValueError:
        return None


@dataclass(frozen=True)
class MetricResult:
    aggregate: float
    correct: tuple[bool, ...]


MetricFn = Callable[[Sequence[str], Sequence[str]], MetricResult]


def accuracy(preds: Sequence[str], golds: Sequence[str]) -> MetricResult:
    """Share of predictions matching gold after whitespace collapse + casefold."""
    flags = tuple(_canon(p) == _canon(g) for p, g in zip(preds, golds))
    return MetricResult(sum(flags) / len(flags) if flags else 0.0, flags)


def exact_match(preds: Sequence[str], golds: Sequence[str]) -> MetricResult:
    """Share of predictions equal to gold verbatim (post answer extraction)."""
    flags = tuple(p == g for p, g in zip(preds, golds))
    return MetricResult(sum(flags) / len(flags) if flags else 0.0, flags)


def macro_f1(preds: Sequence[str], golds: Sequence[str]) -> MetricResult:
    """Unweighted mean of per-class F1 over the union of observed labels.

    A class with zero precision+recall contributes F1 = 0.
    """
    p = [_canon(x) for x in preds]
    g = [_canon(x) for x in golds]
    classes = sorted(set(p) | set(g))
    if not classes:
        return MetricResult(0.0, ())
    total = 0.0
    for cls in classes:
        tp = sum(1 for pi, gi in zip(p, g) if pi == cls and gi == cls)
        fp = sum(1 for pi, gi in zip(p, g) if pi == cls and gi != cls)
        fn = sum(1 for pi, gi in zip(p, g) if pi != cls and gi == cls)
        denom = 2 * tp + fp + fn
        total += (2 * tp / denom) if denom else 0.0
    flags = tuple(pi == gi for pi, gi in zip(p, g))
    return MetricResult(total / len(classes), flags)


def mae(preds: Sequence[str], golds: Sequence[str]) -> MetricResult:
    """Mean absolute error over numeric labels (lower is better).

    An unparsable prediction is charged the worst-case |gold| + 1 penalty;
    an unparsable gold label is a task-definition bug and raises.
    """
    errors = []
    flags = []
    for p, g in zip(preds, golds):
        gold_value = _parse_number(g)
        if gold_value is None:
            raise MetricFailure(f"gold label is not numeric: {g!r}")
        pred_value = _parse_number(p)
        err = abs(pred_value - gold_value) if pred_value is not None else abs(gold_value) + 1.0
        errors.append(err)
        flags.append(err <= 1e-9)
    return MetricResult(sum(errors) / len(errors) if errors else 0.0, tuple(flags))


class MetricRegistry:
    def __init__(self) -> None:
        self._metrics: dict[str, MetricFn] = {}
        for metric_id, fn in (
            ("accuracy", accuracy),
            ("exact-match", exact_match),
            ("macro-f1", macro_f1),
            ("mae", mae),
        ):
            self._metrics[metric_id] = fn

    def register(self, metric_id: str, fn: MetricFn) -> None:
        if metric_id in self._metrics:
            raise DuplicateMetricId(metric_id)
        self._metrics[metric_id] = fn

    def get(self, metric_id: str) -> MetricFn:
        try:
            return self._metrics[metric_id]
        except KeyError:
            raise MetricNotRegistered(metric_id) from None

    def has(self, metric_id: str) -> bool:
        return metric_id in self._metrics


# -- answer extraction --------------------------------------------------------


def extract_answer(text: str, mode: Any = "full-text") -> str:
    """Pull the scored answer out of raw model output.

    Modes: "full-text" (trimmed output), "last-line" (last non-empty line),
    or {"regex": pattern} (first capture group of the first match; empty
    string when nothing matches, which downstream scoring treats as wrong).
    """
    if isinstance(mode, dict) and "regex" in mode:
        match = re.search(mode["regex"], text, flags=re.DOTALL)
        if not match:
            return ""
        return (match.group(1) if match.groups() else match.group(0)).strip()
    if mode == "last-line":
        lines = [line for line in text.splitlines() if line.strip()]
        return lines[-1].strip() if lines else ""
    if mode == "full-text":
        return text.strip()
    raise ValueError(f"unknown answer extraction mode: {mode!r}")


# -- external metric protocol -------------------------------------------------

CommandRunner = Callable[[list[str]], tuple[int, str]]


def _default_runner(argv: list[str]) -> tuple[int, str]:
    proc = subprocess.run(argv, capture_output=True, text=True, timeout=300)
    return proc.returncode, proc.stdout


def run_external_metric(
    cmd: Sequence[str],
    predictions_file: str,
    gold_file: str,
    runner: CommandRunner | None = None,
) -> tuple[float, list[dict[str, Any]]]:
    """Invoke an external metric executable per the wire protocol."""
    argv = [*cmd, predictions_file, gold_file]
    code, stdout = (runner or _default_runner)(argv)
    if code != 0:
        raise MetricFailure(f"external metric exited {code}: {' '.join(cmd)}")
    try:
        doc = json.loads(stdout)
    except json.JSONDecodeError as exc:
        raise MetricFailure(f"external metric wrote invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "aggregate" not in doc:
        raise MetricFailure("external metric output missing 'aggregate'")
    aggregate = doc["aggregate"]
    if not isinstance(aggregate, (int, float)) or isinstance(aggregate, bool):
        raise MetricFailure(f"external metric aggregate is not numeric: {aggregate!r}")
    per_instance = doc.get("per_instance", [])
    if not isinstance(per_instance, list):
        raise MetricFailure("external metric per_instance is not a list")
    for row in per_instance:
        if not isinstance(row, dict) or "instance_id" not in row or "correct" not in row:
            raise MetricFailure(f"malformed per_instance row: {row!r}")
    return float(aggregate), per_instance
