"""Task registry: the environment's catalog of optimization targets.

A task spec is a JSON document with fields task_id, objective, domain_tag,
metrics, data_sources, budget, output_contract (plus optional evaluation
hints). The registry validates on registration and is append-only: there is
no update operation, so a spec referenced by a run can never change under it.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import (
    DuplicateTaskId,
    NoPrimaryMetric,
    UnknownFacet,
    UnknownTask,
    UnresolvableDataDescriptor,
)
from .repository import Catalog

DEFAULT_WALL_CLOCK_LIMIT = 43_200.0  # 12 hours
DEFAULT_MAX_TRAIN_SAMPLES = 2_000

FACETS = ("objective", "metrics", "data", "budget", "capabilities")

OPERATIONS = (
    "query_meta",
    "catalog_sources",
    "apply_strategy",
    "progressive_validate",
    "train",
    "submit_validation",
    "submit_final_test",
)


@dataclass(frozen=True)
class MetricBinding:
    metric_id: str
    direction: str = "higher"  # "higher" | "lower"
    primary: bool = False
    external_cmd: tuple[str, ...] = ()  # non-empty for external metric processes

    def __post_init__(self) -> None:
        if self.direction not in ("higher", "lower"):
            raise ValueError(f"direction must be 'higher' or 'lower', got {self.direction!r}")

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "metric_id": self.metric_id,
            "direction": self.direction,
            "primary": self.primary,
        }
        if self.external_cmd:
            doc["external_cmd"] = list(self.external_cmd)
        return doc


@dataclass(frozen=True)
class BudgetSpec:
    wall_clock_limit: float = DEFAULT_WALL_CLOCK_LIMIT
    max_train_samples: int = DEFAULT_MAX_TRAIN_SAMPLES
    spend_limit: float | None = None
    max_iterations: int | None = None

    def __post_init__(self) -> None:
        if self.wall_clock_limit <= 0:
            raise ValueError("wall_clock_limit must be positive")
        if self.max_train_samples < 1:
            raise ValueError("max_train_samples must be positive")

    def to_json(self) -> dict[str, Any]:
        return {
            "wall_clock_limit": self.wall_clock_limit,
            "max_train_samples": self.max_train_samples,
            "spend_limit": self.spend_limit,
            "max_iterations": self.max_iterations,
        }


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    objective: str
    domain_tag: str
    metrics: tuple[MetricBinding, ...]
    data_sources: tuple[str, ...]
    budget: BudgetSpec
    output_contract: str
    # evaluation hints beyond the seven core fields
    eval_source: str = ""  # defaults to the first data source
    answer_extraction: Any = "full-text"  # "full-text" | "last-line" | {"regex": pattern}
    requires_reasoning: bool = False

    def __post_init__(self) -> None:
        if not self.task_id.strip():
            raise ValueError("task_id must be non-empty")
        if not self.metrics:
            raise NoPrimaryMetric(f"{self.task_id}: task declares no metrics")
        primaries = [m for m in self.metrics if m.primary]
        if len(primaries) != 1:
            raise NoPrimaryMetric(
                f"{self.task_id}: exactly one metric must be primary, got {len(primaries)}"
            )
        if not self.data_sources:
            raise ValueError(f"{self.task_id}: task declares no data sources")

    @property
    def primary_metric(self) -> MetricBinding:
        return next(m for m in self.metrics if m.primary)

    @property
    def eval_source_id(self) -> str:
        return self.eval_source or self.data_sources[0]

    def to_json(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "objective": self.objective,
            "domain_tag": self.domain_tag,
            "metrics": [m.to_json() for m in self.metrics],
            "data_sources": list(self.data_sources),
            "budget": self.budget.to_json(),
            "output_contract": self.output_contract,
            "eval_source": self.eval_source,
            "answer_extraction": self.answer_extraction,
            "requires_reasoning": self.requires_reasoning,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "TaskSpec":
        budget_doc = doc.get("budget") or {}
        metrics = tuple(
            MetricBinding(
                metric_id=m["metric_id"],
                direction=m.get("direction", "higher"),
                primary=bool(m.get("primary", False)),
                external_cmd=tuple(m.get("external_cmd", []) or []),
            )
            for m in doc["metrics"]
        )
        return cls(
            task_id=doc["task_id"],
            objective=doc["objective"],
            domain_tag=doc.get("domain_tag", ""),
            metrics=metrics,
            data_sources=tuple(doc["data_sources"]),
            budget=BudgetSpec(
                wall_clock_limit=float(budget_doc.get("wall_clock_limit", DEFAULT_WALL_CLOCK_LIMIT)),
                max_train_samples=int(budget_doc.get("max_train_samples", DEFAULT_MAX_TRAIN_SAMPLES)),
                spend_limit=budget_doc.get("spend_limit"),
                max_iterations=budget_doc.get("max_iterations"),
            ),
            output_contract=doc.get("output_contract", ""),
            eval_source=doc.get("eval_source", ""),
            answer_extraction=doc.get("answer_extraction", "full-text"),
            requires_reasoning=bool(doc.get("requires_reasoning", False)),
        )


@dataclass
class AdapterCapability:
    """One adapter's self-description, as reported by its describe mode."""

    name: str
    modes: tuple[str, ...] = ()
    ranges: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"name": self.name, "modes": list(self.modes), "ranges": dict(self.ranges)}


class TaskRegistry:
    """Append-only registry; register under a single writer lock, read freely."""

    def __init__(self, adapters: list[AdapterCapability] | None = None) -> None:
        self._tasks: dict[str, TaskSpec] = {}
        self._raw: dict[str, bytes] = {}
        self._adapters = list(adapters or [])
        self._write_lock = threading.Lock()

    def register_task(self, spec: TaskSpec, catalog: Catalog, raw: bytes | None = None) -> None:
        for source_id in spec.data_sources:
            if not catalog.has(source_id):
                raise UnresolvableDataDescriptor(f"{spec.task_id}: {source_id}")
        if spec.eval_source and not catalog.has(spec.eval_source):
            raise UnresolvableDataDescriptor(f"{spec.task_id}: {spec.eval_source}")
        with self._write_lock:
            if spec.task_id in self._tasks:
                raise DuplicateTaskId(spec.task_id)
            self._tasks[spec.task_id] = spec
            self._raw[spec.task_id] = raw if raw is not None else json.dumps(
                spec.to_json(), sort_keys=True
            ).encode("utf-8")

    def get(self, task_id: str) -> TaskSpec:
        try:
            return self._tasks[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None

    def raw_spec(self, task_id: str) -> bytes:
        """The registered document, byte-for-byte as stored."""
        self.get(task_id)
        return self._raw[task_id]

    def task_ids(self) -> list[str]:
        return sorted(self._tasks)

    def query_meta(self, task_id: str, facet: str) -> dict[str, Any]:
        spec = self.get(task_id)
        if facet == "objective":
            return {
                "task_id": spec.task_id,
                "objective": spec.objective,
                "domain_tag": spec.domain_tag,
                "output_contract": spec.output_contract,
            }
        if facet == "metrics":
            return {"metrics": [m.to_json() for m in spec.metrics]}
        if facet == "data":
            return {"data_sources": list(spec.data_sources), "eval_source": spec.eval_source_id}
        if facet == "budget":
            return spec.budget.to_json()
        if facet == "capabilities":
            return {
                "operations": list(OPERATIONS),
                "adapters": [a.to_json() for a in self._adapters],
            }
        raise UnknownFacet(facet)


def load_task_file(path: Path | str) -> tuple[TaskSpec, bytes]:
    raw = Path(path).read_bytes()
    return TaskSpec.from_json(json.loads(raw.decode("utf-8"))), raw


def load_registry_dir(
    directory: Path | str, catalog: Catalog, adapters: list[AdapterCapability] | None = None
) -> TaskRegistry:
    """Build a registry from every *.json task file in a directory."""
    registry = TaskRegistry(adapters=adapters)
    for path in sorted(Path(directory).glob("*.json")):
        spec, raw = load_task_file(path)
        registry.register_task(spec, catalog, raw=raw)
    return registry
