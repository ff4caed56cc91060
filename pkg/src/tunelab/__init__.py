"""tunelab: a harness for iterative fine-tuning experiments.

The package wires four services (task registry, data repository, evaluator,
sandbox) to an improvement loop that proposes data/config plans, validates
them fail-fast, trains through an external adapter process, and keeps a
strictly-improving best candidate. See README for the adapter contract.
"""

from __future__ import annotations

from .adapters import AdapterRef, Manifest, mock_trainer_ref, resolve_adapter
from .analysis import (
    Diagnosis,
    IterationSummary,
    LossPoint,
    RegimeThresholds,
    classify_loss_curve,
    decide,
    diagnose,
    distill,
)
from .errors import HarnessError
from .evaluation import EvalFeedback, EvalItem, EvaluationProtocol, build_eval_items, score_files
from .events import EventLog, read_events, telemetry_from_events
from .gateway import Gateway, LlmRequest, ScriptedBackend
from .loop import Plan, Runner, Telemetry
from .metrics import MetricRegistry, extract_answer
from .registry import BudgetSpec, MetricBinding, TaskRegistry, TaskSpec, load_task_file
from .repository import (
    Catalog,
    DataRecord,
    DataStrategy,
    apply_strategy,
    make_splits,
    normalization_key,
)
from .sandbox import BudgetClock, LogicalClock, SystemClock, Workspace, create_workspace, execute
from .validator import TrainingConfig, ValidationReport, progressive_validate

__version__ = "0.1.0"

__all__ = [
    "AdapterRef",
    "BudgetClock",
    "BudgetSpec",
    "Catalog",
    "DataRecord",
    "DataStrategy",
    "Diagnosis",
    "EvalFeedback",
    "EvalItem",
    "EvaluationProtocol",
    "EventLog",
    "Gateway",
    "HarnessError",
    "IterationSummary",
    "LlmRequest",
    "LogicalClock",
    "LossPoint",
    "Manifest",
    "MetricBinding",
    "MetricRegistry",
    "Plan",
    "RegimeThresholds",
    "Runner",
    "ScriptedBackend",
    "SystemClock",
    "TaskRegistry",
    "TaskSpec",
    "Telemetry",
    "TrainingConfig",
    "ValidationReport",
    "Workspace",
    "apply_strategy",
    "build_eval_items",
    "classify_loss_curve",
    "create_workspace",
    "decide",
    "diagnose",
    "distill",
    "execute",
    "extract_answer",
    "load_task_file",
    "make_splits",
    "mock_trainer_ref",
    "normalization_key",
    "progressive_validate",
    "read_events",
    "resolve_adapter",
    "score_files",
    "telemetry_from_events",
    "__version__",
]
