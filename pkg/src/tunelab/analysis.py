"""Feedback analyzer: loss-curve regimes, error tagging, the accept/reject
decision, and iteration-summary distillation.

Regime rules are ordered and total; the first matching rule wins:

  1. unstable     any non-finite loss, or a step-to-step train-loss jump
                  beyond jump_ratio (default 10x)
  2. overfitting  eval minimum occurs before the final tail_fraction of
                  steps (default 25%) AND final eval >= rebound_ratio * min
                  eval (default 1.05) AND train loss non-increasing overall
  3. underfitting final train > plateau_ratio * initial train (default 0.9)
  4. healthy      eval loss non-increasing over its last three points
  5. inconclusive everything else

The thresholds are artifact constants, adjustable per run via
RegimeThresholds; they are not measured quantities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Sequence

from .errors import EmptyTrajectory
from .evaluation import EvalFeedback, InstanceOutcome

SUMMARY_BYTE_CAP = 2_048

REGIMES = ("unstable", "overfitting", "underfitting", "healthy", "inconclusive")


@dataclass(frozen=True)
class LossPoint:
    step: int
    train_loss: float
    eval_loss: float | None = None

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"step": self.step, "train_loss": self.train_loss}
        if self.eval_loss is not None:
            doc["eval_loss"] = self.eval_loss
        return doc


@dataclass(frozen=True)
class RegimeThresholds:
    jump_ratio: float = 10.0
    tail_fraction: float = 0.25
    rebound_ratio: float = 1.05
    plateau_ratio: float = 0.9


@dataclass
class RegimeCall:
    regime: str
    evidence: dict[str, float | int | None]


def classify_loss_curve(
    trajectory: Sequence[LossPoint], thresholds: RegimeThresholds | None = None
) -> RegimeCall:
    if len(trajectory) < 2:
        raise EmptyTrajectory(f"need >= 2 loss points, got {len(trajectory)}")
    th = thresholds or RegimeThresholds()
    train = [p.train_loss for p in trajectory]
    evals = [p.eval_loss for p in trajectory if p.eval_loss is not None]

    losses = train + evals
    if any(not math.isfinite(x) for x in losses):
        return RegimeCall("unstable", {"non_finite": 1})
    max_jump = 0.0
    for prev, nxt in zip(train, train[1:]):
        if prev > 0 and nxt / prev > max_jump:
            max_jump = nxt / prev
    if max_jump > th.jump_ratio:
        return RegimeCall("unstable", {"max_step_ratio": max_jump})

    if evals:
        min_eval = min(evals)
        min_index = evals.index(min_eval)  # first occurrence
        cutoff = math.ceil((1.0 - th.tail_fraction) * len(evals))
        train_non_increasing = train[-1] <= train[0]
        if (
            min_index < cutoff
            and min_eval > 0
            and evals[-1] >= th.rebound_ratio * min_eval
            and train_non_increasing
        ):
            return RegimeCall(
                "overfitting",
                {
                    "eval_min_index": min_index,
                    "tail_cutoff": cutoff,
                    "final_over_min_eval": evals[-1] / min_eval,
                },
            )

    if train[0] > 0 and train[-1] > th.plateau_ratio * train[0]:
        return RegimeCall(
            "underfitting", {"final_over_initial_train": train[-1] / train[0]}
        )

    if len(evals) >= 3 and evals[-3] >= evals[-2] >= evals[-1]:
        return RegimeCall("healthy", {"eval_tail": evals[-1]})

    return RegimeCall("inconclusive", {})


# -- error tagging -------------------------------------------------------------


def _parse_number(text: str) -> float | None:
    try:
        return float(text.strip())
    except ValueError:
        return None


def tag_failures(
    failures: Sequence[InstanceOutcome],
    extraction_mode: Any = "full-text",
    numeric_tolerance: float = 1.0,
) -> dict[str, int]:
    """Assign one tag per failure sample, mutating error_tag in place.

    Rules, in priority order: empty-output, format-violation (extraction or
    expected-numeric parse failure), numeric-off-by-tolerance (both numeric,
    within the tolerance but not equal), wrong-label. Tags already supplied
    by an external metric are passed through untouched.
    """
    counts: dict[str, int] = {}
    for outcome in failures:
        if outcome.error_tag is None:
            outcome.error_tag = _tag_one(outcome, extraction_mode, numeric_tolerance)
        counts[outcome.error_tag] = counts.get(outcome.error_tag, 0) + 1
    return counts


def _tag_one(outcome: InstanceOutcome, extraction_mode: Any, tolerance: float) -> str:
    from .metrics import extract_answer

    if not outcome.prediction.strip():
        return "empty-output"
    extracted = extract_answer(outcome.prediction, extraction_mode)
    if not extracted:
        return "format-violation"
    gold_num = _parse_number(outcome.gold) if outcome.gold is not None else None
    if gold_num is not None:
        pred_num = _parse_number(extracted)
        if pred_num is None:
            return "format-violation"
        if abs(pred_num - gold_num) <= tolerance:
            return "numeric-off-by-tolerance"
    return "wrong-label"


@dataclass
class Diagnosis:
    regime: str
    evidence: dict[str, Any]
    error_tags: dict[str, int]
    notes: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "regime": self.regime,
            "evidence": dict(self.evidence),
            "error_tags": dict(self.error_tags),
            "notes": self.notes,
        }


def diagnose(
    feedback: EvalFeedback,
    trajectory: Sequence[LossPoint],
    extraction_mode: Any = "full-text",
    thresholds: RegimeThresholds | None = None,
) -> Diagnosis:
    call = classify_loss_curve(trajectory, thresholds)
    tags = tag_failures(feedback.failure_samples, extraction_mode)
    return Diagnosis(regime=call.regime, evidence=dict(call.evidence), error_tags=tags)


# -- accept / reject -----------------------------------------------------------


def decide(
    current: float,
    best: float | None,
    baseline: float | None,
    direction: str = "higher",
) -> str:
    """Strict-improvement rule: accepted iff current beats every incumbent.

    Ties are rejections; with no incumbent at all the candidate is accepted.
    """
    incumbents = [x for x in (best, baseline) if x is not None]
    if not incumbents:
        return "accepted"
    if direction == "lower":
        return "accepted" if all(current < x for x in incumbents) else "rejected"
    return "accepted" if all(current > x for x in incumbents) else "rejected"


# -- summaries ------------------------------------------------------------------

_NARRATIVE_FIELDS = ("data_gist", "config_gist", "rationale_gist", "diagnosis_gist")


@dataclass
class IterationSummary:
    iteration: int
    decision: str
    primary_score: float | None
    data_gist: str = ""
    config_gist: str = ""
    rationale_gist: str = ""
    diagnosis_gist: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "decision": self.decision,
            "primary_score": self.primary_score,
            "data_gist": self.data_gist,
            "config_gist": self.config_gist,
            "rationale_gist": self.rationale_gist,
            "diagnosis_gist": self.diagnosis_gist,
        }

    def serialized(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)

    def byte_size(self) -> int:
        return len(self.serialized().encode("utf-8"))


def distill(
    iteration: int,
    decision: str,
    primary_score: float | None,
    data_gist: str = "",
    config_gist: str = "",
    rationale_gist: str = "",
    diagnosis_gist: str = "",
    byte_cap: int = SUMMARY_BYTE_CAP,
) -> IterationSummary:
    """Compress one iteration into a bounded summary.

    Narrative fields are trimmed last-listed-first (diagnosis, rationale,
    config, data) until the serialized summary fits the byte cap; the
    iteration index, decision, and score are never dropped.
    """
    summary = IterationSummary(
        iteration=iteration,
        decision=decision,
        primary_score=primary_score,
        data_gist=data_gist,
        config_gist=config_gist,
        rationale_gist=rationale_gist,
        diagnosis_gist=diagnosis_gist,
    )
    if summary.byte_size() <= byte_cap:
        return summary
    for fieldname in reversed(_NARRATIVE_FIELDS):
        overshoot = summary.byte_size() - byte_cap
        if overshoot <= 0:
            break
        text = getattr(summary, fieldname)
        if not text:
            continue
        encoded = text.encode("utf-8")
        if len(encoded) > overshoot:
            kept = encoded[: len(encoded) - overshoot].decode("utf-8", errors="ignore")
            setattr(summary, fieldname, kept)
        else:
            setattr(summary, fieldname, "")
    # multi-byte boundaries can leave a few bytes of slack; shave if needed
    while summary.byte_size() > byte_cap:
        for fieldname in reversed(_NARRATIVE_FIELDS):
            text = getattr(summary, fieldname)
            if text:
                setattr(summary, fieldname, text[:-1])
                break
        else:
            break
    return summary
