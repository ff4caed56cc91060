"""Task registry: validation on register, raw-byte fidelity, meta queries."""

from __future__ import annotations

import json

import pytest

from tunelab.errors import (
    DuplicateTaskId,
    NoPrimaryMetric,
    UnknownFacet,
    UnknownTask,
    UnresolvableDataDescriptor,
)
from tunelab.registry import (
    AdapterCapability,
    BudgetSpec,
    MetricBinding,
    TaskRegistry,
    TaskSpec,
    load_registry_dir,
    load_task_file,
)


def _spec(**overrides):
    base = dict(
        task_id="t1",
        objective="answer factual questions",
        domain_tag="qa",
        metrics=(MetricBinding("accuracy", primary=True),),
        data_sources=("qa-eval", "qa-train"),
        budget=BudgetSpec(),
        output_contract="single short answer",
    )
    base.update(overrides)
    return TaskSpec(**base)


def test_register_and_fetch(qa_catalog):
    registry = TaskRegistry()
    registry.register_task(_spec(), qa_catalog)
    assert registry.task_ids() == ["t1"]
    assert registry.get("t1").objective == "answer factual questions"


def test_raw_spec_is_byte_identical(qa_catalog, tmp_path):
    doc = {
        "task_id": "bytes-task",
        "objective": "o",
        "domain_tag": "d",
        "metrics": [{"metric_id": "accuracy", "primary": True}],
        "data_sources": ["qa-eval"],
        "budget": {},
        "output_contract": "c",
    }
    # deliberately odd formatting that a round-trip would destroy
    raw = ("{\n  \"task_id\": \"bytes-task\",   \"objective\": \"o\",\n"
           "  \"domain_tag\": \"d\",\n"
           "  \"metrics\": [{\"metric_id\": \"accuracy\", \"primary\": true}],\n"
           "  \"data_sources\": [\"qa-eval\"],\n  \"budget\": {},\n"
           "  \"output_contract\": \"c\"}\n").encode("utf-8")
    assert json.loads(raw) == doc
    path = tmp_path / "task.json"
    path.write_bytes(raw)
    spec, loaded_raw = load_task_file(path)
    assert loaded_raw == raw
    registry = TaskRegistry()
    registry.register_task(spec, qa_catalog, raw=loaded_raw)
    assert registry.raw_spec("bytes-task") == raw


def test_duplicate_task_id(qa_catalog):
    registry = TaskRegistry()
    registry.register_task(_spec(), qa_catalog)
    with pytest.raises(DuplicateTaskId):
        registry.register_task(_spec(), qa_catalog)


def test_no_primary_metric():
    with pytest.raises(NoPrimaryMetric):
        _spec(metrics=(MetricBinding("accuracy"),))
    with pytest.raises(NoPrimaryMetric):
        _spec(metrics=())
    with pytest.raises(NoPrimaryMetric):
        _spec(metrics=(MetricBinding("accuracy", primary=True),
                       MetricBinding("exact-match", primary=True)))


def test_unresolvable_data_descriptor(qa_catalog):
    registry = TaskRegistry()
    with pytest.raises(UnresolvableDataDescriptor):
        registry.register_task(_spec(data_sources=("qa-eval", "missing-src")), qa_catalog)
    with pytest.raises(UnresolvableDataDescriptor):
        registry.register_task(_spec(eval_source="nope"), qa_catalog)


def test_unknown_task_and_facet(qa_catalog):
    registry = TaskRegistry()
    registry.register_task(_spec(), qa_catalog)
    with pytest.raises(UnknownTask):
        registry.get("ghost")
    with pytest.raises(UnknownTask):
        registry.query_meta("ghost", "objective")
    with pytest.raises(UnknownFacet):
        registry.query_meta("t1", "provenance")


def test_budget_defaults():
    budget = BudgetSpec()
    assert budget.wall_clock_limit == 43_200.0
    assert budget.max_train_samples == 2_000
    assert budget.spend_limit is None
    assert budget.max_iterations is None
    with pytest.raises(ValueError):
        BudgetSpec(wall_clock_limit=0)
    with pytest.raises(ValueError):
        BudgetSpec(max_train_samples=0)


def test_query_meta_facets(qa_catalog):
    adapters = [AdapterCapability(name="mock", modes=("train", "mini", "baseline"))]
    registry = TaskRegistry(adapters=adapters)
    registry.register_task(_spec(), qa_catalog)

    objective = registry.query_meta("t1", "objective")
    assert objective["objective"] == "answer factual questions"
    assert objective["output_contract"] == "single short answer"

    metrics = registry.query_meta("t1", "metrics")
    assert metrics["metrics"][0]["metric_id"] == "accuracy"
    assert metrics["metrics"][0]["primary"] is True

    data = registry.query_meta("t1", "data")
    assert data["data_sources"] == ["qa-eval", "qa-train"]
    assert data["eval_source"] == "qa-eval"

    budget = registry.query_meta("t1", "budget")
    assert budget["wall_clock_limit"] == 43_200.0

    caps = registry.query_meta("t1", "capabilities")
    assert "submit_final_test" in caps["operations"]
    assert caps["adapters"][0]["name"] == "mock"


def test_primary_metric_and_eval_source_properties():
    spec = _spec(metrics=(MetricBinding("mae", direction="lower"),
                          MetricBinding("accuracy", primary=True)))
    assert spec.primary_metric.metric_id == "accuracy"
    assert spec.eval_source_id == "qa-eval"
    spec2 = _spec(eval_source="qa-train")
    assert spec2.eval_source_id == "qa-train"


def test_from_json_round_trip():
    spec = _spec(answer_extraction={"regex": r"answer:\s*(\w+)"}, requires_reasoning=True)
    again = TaskSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert again == spec


def test_metric_binding_direction_validation():
    with pytest.raises(ValueError):
        MetricBinding("accuracy", direction="sideways")


def test_load_registry_dir(qa_catalog, tmp_path):
    for task_id in ("alpha", "beta"):
        doc = _spec(task_id=task_id).to_json()
        (tmp_path / f"{task_id}.json").write_text(json.dumps(doc), encoding="utf-8")
    registry = load_registry_dir(tmp_path, qa_catalog)
    assert registry.task_ids() == ["alpha", "beta"]
