"""The improvement loop: propose -> validate -> train -> evaluate -> diagnose.

One Runner drives one task run. Each iteration asks the gateway for a plan
(data strategy + training config + rationale), materializes the data under
leakage exclusion, walks the fail-fast validation gate, and only then spends
a full training launch. Validation scoring is unlimited; the held-out test
split is scored exactly once, after finalization begins. A candidate is
accepted only on strict improvement over max(best, baseline) under the
primary metric's direction.

Phase discipline (enforced here, audited from the event stream in tests):

    proposing -> validating -> training -> evaluating -> diagnosing -> proposing
    validating/training/evaluating may fall back to proposing on failure;
    finalizing is entered only from proposing or diagnosing.

A crash inside propose still consumes an iteration slot. Telemetry:
loops = started iterations, improve_rate = accepted / loops (artifact
definition, documented in the report), effective iterations = those that
reached an accept/reject decision, total_cost = the exact ledger sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .adapters import (
    AdapterDescription,
    AdapterRef,
    Manifest,
    check_adapter_output,
    parse_loss_log,
    predict_argv,
)
from .analysis import (
    Diagnosis,
    IterationSummary,
    RegimeThresholds,
    decide,
    diagnose,
    distill,
)
from .errors import (
    BudgetExceeded,
    BudgetExhausted,
    DeadlinePassed,
    EmptyResult,
    GatewayError,
    HarnessError,
    MissingGold,
    SchemaViolation,
    ScriptExhausted,
    SpendLimitExceeded,
)
from .evaluation import (
    EvalFeedback,
    EvaluationProtocol,
    build_eval_items,
    read_predictions_file,
    write_eval_inputs_file,
)
from .events import EventLog
from .gateway import Gateway, LlmRequest
from .registry import TaskSpec
from .repository import (
    Catalog,
    DataStrategy,
    TrainSet,
    apply_strategy,
    make_splits,
    normalization_key,
)
from .sandbox import BudgetClock, SystemClock, Workspace, create_workspace, execute
from .validator import (
    BUDGET_EXCEEDED,
    HARD,
    Diagnostic,
    StageResult,
    TrainingConfig,
    ValidationReport,
    progressive_validate,
)

SUMMARY_WINDOW = 20
FAILURE_DIGEST_LINES = 8

PLAN_SCHEMA = {
    "reason": "string",
    "data_strategy": "object",
    "training_config": "object",
    "hypothesis": "string?",
    "stop": "boolean?",
}

ALLOWED_TRANSITIONS = {
    ("proposing", "proposing"),  # crashed propose consumes its slot
    ("proposing", "validating"),
    ("proposing", "finalizing"),
    ("validating", "training"),
    ("validating", "proposing"),
    ("training", "evaluating"),
    ("training", "proposing"),
    ("evaluating", "diagnosing"),
    ("evaluating", "proposing"),
    ("diagnosing", "proposing"),
    ("diagnosing", "finalizing"),
    ("finalizing", "finalized"),
}

FINALIZING_SOURCES = ("proposing", "diagnosing")


@dataclass
class Plan:
    strategy: DataStrategy
    config: TrainingConfig
    rationale: str
    config_extras: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "data_strategy": self.strategy.to_json(),
            "training_config": self.config.to_json(),
            "rationale": self.rationale,
        }


@dataclass
class ExperienceEntry:
    iteration: int
    decision: str  # accepted|rejected|failed_validation|crashed|aborted|stopped
    parent_best_iteration: int | None
    summary: IterationSummary
    plan: Plan | None = None
    validation: ValidationReport | None = None
    feedback: EvalFeedback | None = None
    diagnosis: Diagnosis | None = None
    manifest: Manifest | None = None
    cost: float = 0.0
    failure_note: str = ""


@dataclass
class Telemetry:
    loops: int
    accepted: int
    improve_rate: float
    effective_iterations: int
    total_cost: float

    def to_json(self) -> dict[str, Any]:
        return {
            "loops": self.loops,
            "accepted": self.accepted,
            "improve_rate": self.improve_rate,
            "improve_rate_definition": "accepted_iterations / started_iterations",
            "effective_iterations": self.effective_iterations,
            "total_cost": self.total_cost,
        }


class Runner:
    def __init__(
        self,
        task: TaskSpec,
        catalog: Catalog,
        adapter: AdapterRef,
        gateway: Gateway,
        runs_dir: Path | str,
        seed: int = 0,
        clock: Any = None,
        catalog_dir: Path | str | None = None,
        wall_clock_limit: float | None = None,
        max_train_samples: int | None = None,
        max_iterations: int | None = None,
        spend_limit: float | None = None,
        run_id: str | None = None,
        thresholds: RegimeThresholds | None = None,
    ) -> None:
        self.task = task
        self.catalog = catalog
        self.adapter = adapter
        self.gateway = gateway
        self.runs_dir = Path(runs_dir)
        self.seed = seed
        self.clock = clock or SystemClock()
        self.run_id = run_id or f"{task.task_id}-{seed}"
        self.wall_clock_limit = wall_clock_limit or task.budget.wall_clock_limit
        self.max_train_samples = max_train_samples or task.budget.max_train_samples
        self.max_iterations = (
            max_iterations if max_iterations is not None else task.budget.max_iterations
        )
        self.spend_limit = spend_limit if spend_limit is not None else task.budget.spend_limit
        self.thresholds = thresholds or RegimeThresholds()

        mounts = [Path(self.adapter.argv[-1]).parent]
        if catalog_dir is not None:
            mounts.append(Path(catalog_dir))
        for binding in task.metrics:
            if binding.external_cmd:
                mounts.append(Path(binding.external_cmd[-1]).parent)
        self._mounts = tuple(m.resolve() for m in mounts if str(m) not in (".", ""))

        self.budget = BudgetClock(self.wall_clock_limit, spend_limit=self.spend_limit, clock=self.clock)
        self.events = EventLog(self.runs_dir / self.run_id / "events.jsonl", self.run_id, self.clock)
        if self.gateway.budget is None:
            self.gateway.budget = self.budget
        if self.gateway.event_log is None:
            self.gateway.event_log = self.events

        self.phase = "proposing"
        self.entries: list[ExperienceEntry] = []
        self.best_entry: ExperienceEntry | None = None
        self.baseline_score: float | None = None
        self.baseline_manifest: Manifest | None = None
        self.baseline_workspace: Workspace | None = None
        self.soft_warnings: list[str] = []
        self.last_failures: list[str] = []
        self.stop_reason: str = ""
        self.protocol: EvaluationProtocol | None = None
        self.adapter_description: AdapterDescription | None = None
        self.report: dict[str, Any] | None = None

    # -- helpers ----------------------------------------------------------------

    def _transition(self, to: str) -> None:
        edge = (self.phase, to)
        if to == "finalizing" and self.phase not in FINALIZING_SOURCES:
            raise AssertionError(f"illegal finalize entry from {self.phase}")
        if edge not in ALLOWED_TRANSITIONS:
            raise AssertionError(f"illegal phase transition {edge}")
        self.events.append("phase", iteration=len(self.entries), from_phase=self.phase, to_phase=to)
        self.phase = to

    def _workspace(self, iteration: int | str) -> Workspace:
        return create_workspace(self.runs_dir, self.run_id, iteration, read_only_mounts=self._mounts)

    def _iteration_cost(self, iteration: int) -> float:
        return sum(e.amount for e in self.budget.ledger if e.iteration == iteration)

    @property
    def best_score(self) -> float | None:
        return self.best_entry.feedback.primary_score if self.best_entry else None

    def telemetry(self) -> Telemetry:
        loops = len(self.entries)
        accepted = sum(1 for e in self.entries if e.decision == "accepted")
        effective = sum(1 for e in self.entries if e.decision in ("accepted", "rejected"))
        return Telemetry(
            loops=loops,
            accepted=accepted,
            improve_rate=(accepted / loops) if loops else 0.0,
            effective_iterations=effective,
            total_cost=self.budget.total_cost(),
        )

    # -- setup --------------------------------------------------------------------

    def _setup(self) -> None:
        entry = self.catalog.get(self.task.eval_source_id)
        from .repository import UnparsableRecord, normalize

        n_filtered = 0
        for raw in entry.records:
            try:
                normalize(raw, entry.ref.format_hint)
                n_filtered += 1
            except UnparsableRecord:
                continue
        split = make_splits(n_filtered, self.seed)
        run_dir = self.runs_dir / self.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "split_manifest.json").write_text(
            json.dumps(split.to_json(), sort_keys=True), encoding="utf-8"
        )
        self.val_items = build_eval_items(self.catalog, self.task, split.val_indices)
        self.test_items = build_eval_items(self.catalog, self.task, split.test_indices)
        self.exclusion = {
            normalization_key(item.instruction, item.input)
            for item in (*self.val_items, *self.test_items)
        }
        self.protocol = EvaluationProtocol(
            task=self.task,
            val_items=self.val_items,
            test_items=self.test_items,
            clock=self.budget,
            seed=self.seed,
            scratch_dir=run_dir / "metric_scratch",
        )
        self.events.append(
            "run_started",
            task_id=self.task.task_id,
            seed=self.seed,
            n_val=len(self.val_items),
            n_test=len(self.test_items),
        )

        ws = self._workspace("setup")
        result = execute(
            ws, self.adapter.describe_argv(), budget=self.budget,
            timeout=60, event_log=self.events, purpose="describe",
        )
        if result.exit_code == 0:
            try:
                self.adapter_description = AdapterDescription.from_json(json.loads(result.stdout))
            except (json.JSONDecodeError, ValueError):
                self.adapter_description = None

    def _measure_baseline(self) -> None:
        """Iteration -1: score the untuned model reference on validation."""
        if self.adapter_description is None or "baseline" not in self.adapter_description.modes:
            self.events.append("baseline_skipped", reason="adapter has no baseline mode")
            return
        ws = self._workspace("baseline")
        out_dir = ws.path("out")
        config_path = ws.path("config.json")
        config_path.write_text(json.dumps(TrainingConfig().to_json(), sort_keys=True), "utf-8")
        data_path = ws.path("unused.jsonl")
        data_path.write_text("", encoding="utf-8")
        result = execute(
            ws,
            self.adapter.train_argv(str(config_path), str(data_path), str(out_dir), baseline=True),
            budget=self.budget,
            timeout=300,
            event_log=self.events,
            purpose="baseline",
        )
        if result.exit_code != 0:
            self.events.append("baseline_skipped", reason=f"baseline mode exited {result.exit_code}")
            return
        manifest = Manifest.load(out_dir / "manifest")
        predictions = self._predict(ws, manifest)
        feedback = self.protocol.submit_validation(predictions)
        self.baseline_score = feedback.primary_score
        self.baseline_manifest = manifest
        self.baseline_workspace = ws
        self.events.append("baseline_evaluated", score=feedback.primary_score)

    def _predict(self, workspace: Workspace, manifest: Manifest, items: Any = None) -> dict[str, str]:
        items = items if items is not None else self.val_items
        eval_path = workspace.path("eval_inputs.jsonl")
        write_eval_inputs_file(eval_path, items)
        preds_path = workspace.path("predictions.jsonl")
        result = execute(
            workspace,
            predict_argv(manifest, str(eval_path), str(preds_path)),
            budget=self.budget,
            timeout=600,
            event_log=self.events,
            purpose="predict",
        )
        if result.exit_code != 0:
            raise HarnessError(
                f"predict command exited {result.exit_code}: {result.stderr.strip()[:200]}"
            )
        return read_predictions_file(preds_path)

    # -- propose --------------------------------------------------------------------

    def _context_variables(self) -> dict[str, str]:
        summaries = self.entries[-SUMMARY_WINDOW:]
        if summaries:
            best_iter = self.best_entry.iteration if self.best_entry else None
            lines = []
            for entry in summaries:
                marker = " [sibling of current best's lineage]" if (
                    entry.parent_best_iteration == best_iter and best_iter is not None
                ) else ""
                lines.append(entry.summary.serialized() + marker)
            summary_block = "\n".join(lines)
        else:
            summary_block = "(none)"
        best_block = (
            json.dumps(self.best_entry.plan.to_json(), indent=2, sort_keys=True)
            if self.best_entry and self.best_entry.plan
            else "(none yet)"
        )
        warnings = "\n".join(self.soft_warnings) if self.soft_warnings else "(none)"
        failures = "\n".join(self.last_failures) if self.last_failures else "(none)"
        baseline = (
            f"{self.baseline_score:.6f}" if self.baseline_score is not None else "(unmeasured)"
        )
        return {
            "objective": self.task.objective,
            "output_contract": self.task.output_contract,
            "baseline": baseline,
            "budget_note": (
                f"{self.budget.remaining():.0f}s wall clock, "
                f"{self.max_train_samples} train samples max"
            ),
            "best_block": best_block,
            "summaries": summary_block,
            "warnings": warnings,
            "failures": failures,
        }

    def _propose(self, iteration: int) -> tuple[Plan | None, bool]:
        """Returns (plan, stop_requested)."""
        request = LlmRequest(
            template_id="hypothesis", variables=self._context_variables(), iteration=iteration
        )
        payload = self.gateway.complete_structured(request, PLAN_SCHEMA)
        if payload.get("stop"):
            return None, True
        strategy = DataStrategy.from_json(payload["data_strategy"])
        config_doc = payload["training_config"]
        config = TrainingConfig.from_json(config_doc)
        extras = {k: v for k, v in config_doc.items() if k not in TrainingConfig.__dataclass_fields__}
        rationale = str(payload["reason"])
        hypothesis = payload.get("hypothesis")
        if hypothesis:
            rationale = f"{rationale} | expectation: {hypothesis}"
        return Plan(strategy=strategy, config=config, rationale=rationale, config_extras=extras), False

    # -- iteration ---------------------------------------------------------------------

    def _synthesizer(self, iteration: int):
        def synthesize(template_id: str, record: Any) -> str:
            request = LlmRequest(
                template_id="data_processing",
                variables={
                    "instruction": record.instruction,
                    "input": record.input,
                    "output": record.output,
                },
                iteration=iteration,
            )
            return self.gateway.complete(request).text

        return synthesize

    def _record_entry(self, entry: ExperienceEntry) -> None:
        entry.cost = self._iteration_cost(entry.iteration)
        self.entries.append(entry)
        self.events.append(
            "decision",
            iteration=entry.iteration,
            decision=entry.decision,
            score=entry.feedback.primary_score if entry.feedback else None,
        )

    def _failed_entry(
        self, iteration: int, decision: str, note: str, plan: Plan | None = None,
        validation: ValidationReport | None = None,
    ) -> ExperienceEntry:
        summary = distill(
            iteration=iteration,
            decision=decision,
            primary_score=None,
            data_gist=json.dumps(plan.strategy.to_json(), sort_keys=True) if plan else "",
            config_gist=json.dumps(plan.config.to_json(), sort_keys=True) if plan else "",
            rationale_gist=plan.rationale if plan else "",
            diagnosis_gist=note,
        )
        return ExperienceEntry(
            iteration=iteration,
            decision=decision,
            parent_best_iteration=self.best_entry.iteration if self.best_entry else None,
            summary=summary,
            plan=plan,
            validation=validation,
            failure_note=note,
        )

    def _run_iteration(self, iteration: int) -> str:
        """Execute one loop pass; returns the recorded decision."""
        parent = self.best_entry.iteration if self.best_entry else None
        self.events.append("iteration_started", iteration=iteration)

        # propose
        try:
            plan, stop = self._propose(iteration)
        except ScriptExhausted:
            self.stop_reason = "script_exhausted"
            self.events.append("agent_stop", iteration=iteration, reason="script_exhausted")
            self._record_entry(self._failed_entry(iteration, "stopped", "scripted plans exhausted"))
            return "stopped"
        except (SchemaViolation, GatewayError) as exc:
            self._record_entry(
                self._failed_entry(iteration, "crashed", f"propose failed: {exc}")
            )
            self._transition("proposing")
            return "crashed"
        except (ValueError, KeyError, TypeError) as exc:
            self._record_entry(
                self._failed_entry(iteration, "crashed", f"plan unparsable: {exc}")
            )
            self._transition("proposing")
            return "crashed"

        if stop:
            self.stop_reason = "agent_stop"
            self.events.append("agent_stop", iteration=iteration, reason="agent_stop")
            self._record_entry(self._failed_entry(iteration, "stopped", "agent signaled stop"))
            return "stopped"

        # validate
        self._transition("validating")
        workspace = self._workspace(iteration)
        train_path = workspace.path("train.jsonl")
        stats = None
        try:
            train_set: TrainSet | None = apply_strategy(
                plan.strategy,
                self.catalog,
                exclusion=self.exclusion,
                seed=self.seed * 7919 + iteration,
                max_train_samples=self.max_train_samples,
                synthesizer=self._synthesizer(iteration) if plan.strategy.synthesis_requests else None,
            )
            stats = train_set.stats
            train_set.write_jsonl(train_path)
        except EmptyResult as exc:
            train_path.write_text("", encoding="utf-8")
            stats = getattr(exc, "stats", None)
            train_set = None
        except BudgetExceeded as exc:
            report = ValidationReport(
                verdict="hard_fail",
                stages=[
                    StageResult(
                        stage="static",
                        status="failed",
                        diagnostics=[
                            Diagnostic(
                                BUDGET_EXCEEDED, HARD, str(exc), stage="static",
                                locus="data_strategy",
                            )
                        ],
                    ),
                    StageResult(stage="mini_run", status="skipped"),
                    StageResult(stage="runtime_sanity", status="skipped"),
                ],
            )
            report.write(workspace.path("validation_report.json"))
            self.events.append(
                "validation_report", iteration=iteration, verdict="hard_fail",
                codes=[BUDGET_EXCEEDED],
            )
            entry = self._failed_entry(
                iteration, "failed_validation", str(exc), plan=plan, validation=report
            )
            self._record_entry(entry)
            self._note_validation_failure(report)
            self._transition("proposing")
            return "failed_validation"

        report = progressive_validate(
            plan.config,
            train_path,
            self.adapter,
            workspace,
            adapter_description=self.adapter_description,
            budget=self.budget,
            event_log=self.events,
            stats=stats,
            requires_reasoning=self.task.requires_reasoning,
            thresholds=self.thresholds,
        )
        if report.verdict == "hard_fail":
            entry = self._failed_entry(
                iteration, "failed_validation",
                "; ".join(f"{d.code}: {d.message}" for d in report.hard_diagnostics[:3]),
                plan=plan, validation=report,
            )
            self._record_entry(entry)
            self._note_validation_failure(report)
            self._transition("proposing")
            return "failed_validation"
        self.soft_warnings = [
            f"{d.code}: {d.message}" for d in report.soft_diagnostics
        ]

        # train
        self._transition("training")
        config_path = workspace.path("config.json")
        config_doc = {**plan.config_extras, **plan.config.to_json()}
        config_path.write_text(json.dumps(config_doc, sort_keys=True), encoding="utf-8")
        out_dir = workspace.path("out")
        result = execute(
            workspace,
            self.adapter.train_argv(str(config_path), str(train_path), str(out_dir)),
            budget=self.budget,
            timeout=None,
            event_log=self.events,
            purpose="full_training",
        )
        if result.exit_code != 0 or result.timed_out:
            note = (
                f"training exited {result.exit_code}"
                + (" (timeout)" if result.timed_out else "")
                + f": {result.stderr.strip()[:160]}"
            )
            entry = self._failed_entry(iteration, "crashed", note, plan=plan, validation=report)
            self._record_entry(entry)
            self._transition("proposing")
            return "crashed"
        problems = check_adapter_output(out_dir)
        if problems:
            entry = self._failed_entry(
                iteration, "crashed", f"adapter output malformed: {'; '.join(problems)}",
                plan=plan, validation=report,
            )
            self._record_entry(entry)
            self._transition("proposing")
            return "crashed"
        trajectory = parse_loss_log(out_dir / "loss.log")
        manifest = Manifest.load(out_dir / "manifest")

        # evaluate
        self._transition("evaluating")
        try:
            predictions = self._predict(workspace, manifest)
            feedback = self.protocol.submit_validation(predictions)
        except (HarnessError, OSError) as exc:
            if isinstance(exc, (BudgetExhausted, DeadlinePassed, SpendLimitExceeded)):
                raise
            entry = self._failed_entry(
                iteration, "crashed", f"evaluation failed: {exc}", plan=plan, validation=report
            )
            self._record_entry(entry)
            self._transition("proposing")
            return "crashed"
        feedback.loss_trajectory = [p.to_json() for p in trajectory]
        self.events.append(
            "validation_submitted",
            iteration=iteration,
            score=feedback.primary_score,
            metric=feedback.primary_metric,
        )

        # diagnose and decide
        self._transition("diagnosing")
        diagnosis = diagnose(
            feedback, trajectory, extraction_mode=self.task.answer_extraction,
            thresholds=self.thresholds,
        )
        verdict = decide(
            feedback.primary_score,
            self.best_score,
            self.baseline_score,
            direction=self.task.primary_metric.direction,
        )
        self.last_failures = [
            f"{o.instance_id}: predicted {o.prediction!r}, expected {o.gold!r} [{o.error_tag}]"
            for o in feedback.failure_samples[:FAILURE_DIGEST_LINES]
        ]
        summary = distill(
            iteration=iteration,
            decision=verdict,
            primary_score=feedback.primary_score,
            data_gist=json.dumps(plan.strategy.to_json(), sort_keys=True),
            config_gist=json.dumps(plan.config.to_json(), sort_keys=True),
            rationale_gist=plan.rationale,
            diagnosis_gist=f"regime={diagnosis.regime} tags={json.dumps(diagnosis.error_tags, sort_keys=True)}",
        )
        entry = ExperienceEntry(
            iteration=iteration,
            decision=verdict,
            parent_best_iteration=parent,
            summary=summary,
            plan=plan,
            validation=report,
            feedback=feedback,
            diagnosis=diagnosis,
            manifest=manifest,
        )
        self._record_entry(entry)
        if verdict == "accepted":
            self.best_entry = entry
            self.events.append(
                "best_updated", iteration=iteration, score=feedback.primary_score
            )
        self._transition("proposing")
        return verdict

    def _note_validation_failure(self, report: ValidationReport) -> None:
        self.soft_warnings = [f"{d.code}: {d.message}" for d in report.soft_diagnostics]

    # -- run ----------------------------------------------------------------------------

    def _should_stop(self) -> str:
        if self.stop_reason:
            return self.stop_reason
        if self.budget.expired():
            return "wall_clock"
        if self.spend_limit is not None and self.budget.spent > self.spend_limit:
            return "spend_limit"
        if self.max_iterations is not None and len(self.entries) >= self.max_iterations:
            return "max_iterations"
        return ""

    def run(self) -> dict[str, Any]:
        aborted = False
        abort_note = ""
        try:
            self._setup()
            self._measure_baseline()
        except (DeadlinePassed, BudgetExhausted, SpendLimitExceeded) as exc:
            aborted = True
            abort_note = f"setup aborted: {exc}"
        if not aborted:
            while True:
                stop = self._should_stop()
                if stop:
                    self.events.append("stopping", reason=stop)
                    break
                try:
                    self._run_iteration(len(self.entries))
                except (DeadlinePassed, BudgetExhausted) as exc:
                    entry = self._failed_entry(
                        len(self.entries), "aborted", f"budget exhausted: {exc}"
                    )
                    self._record_entry(entry)
                    if self.phase != "proposing":
                        self._transition("proposing")
                    aborted = True
                    abort_note = str(exc)
                    break
                except SpendLimitExceeded as exc:
                    entry = self._failed_entry(
                        len(self.entries), "aborted", f"spend limit: {exc}"
                    )
                    self._record_entry(entry)
                    if self.phase != "proposing":
                        self._transition("proposing")
                    self.stop_reason = "spend_limit"
                    break
        return self._finalize(aborted=aborted, abort_note=abort_note)

    def _finalize(self, aborted: bool = False, abort_note: str = "") -> dict[str, Any]:
        self._transition("finalizing")
        self.events.append("run_finalizing", iteration=len(self.entries))
        test_result: dict[str, Any] | None = None
        no_improvement = self.best_entry is None
        if self.protocol is not None:
            self.protocol.begin_finalizing()
            try:
                if self.best_entry is not None and self.best_entry.manifest is not None:
                    ws = self._workspace(self.best_entry.iteration)
                    manifest = self.best_entry.manifest
                elif self.baseline_manifest is not None:
                    ws = self.baseline_workspace
                    manifest = self.baseline_manifest
                else:
                    ws = None
                    manifest = None
                if manifest is not None and ws is not None:
                    predictions = self._predict(ws, manifest, items=self.test_items)
                    feedback = self.protocol.submit_final_test(predictions)
                    test_result = {
                        "aggregate": feedback.primary_score,
                        "metric": feedback.primary_metric,
                        "model": "best" if self.best_entry is not None else "baseline",
                    }
                    self.events.append(
                        "test_submitted",
                        iteration=len(self.entries),
                        aggregate=feedback.primary_score,
                    )
            except (DeadlinePassed, BudgetExhausted, SpendLimitExceeded, HarnessError, OSError) as exc:
                aborted = aborted or isinstance(exc, (DeadlinePassed, BudgetExhausted))
                abort_note = abort_note or f"final test unavailable: {exc}"
                self.events.append("test_skipped", reason=str(exc))

        telemetry = self.telemetry()
        report = {
            "run_id": self.run_id,
            "task_id": self.task.task_id,
            "seed": self.seed,
            "adapter": self.adapter.name,
            "status": "aborted" if aborted else "finalized",
            "abort_note": abort_note,
            "stop_reason": self.stop_reason or ("aborted" if aborted else self._should_stop()),
            "baseline_score": self.baseline_score,
            "best_iteration": self.best_entry.iteration if self.best_entry else None,
            "best_score": self.best_score,
            "no_improvement": no_improvement,
            "final_test": test_result,
            "telemetry": telemetry.to_json(),
            "budget": {
                "wall_clock_limit": self.wall_clock_limit,
                "spend_limit": self.spend_limit,
                "spent": round(self.budget.spent, 10),
            },
            "iterations": [
                {**e.summary.to_json(), "cost": round(e.cost, 10)} for e in self.entries
            ],
        }
        run_dir = self.runs_dir / self.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True), encoding="utf-8"
        )
        self.events.append("run_finalized", status=report["status"])
        self._transition("finalized")
        self.report = report
        return report
