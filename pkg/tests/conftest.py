from __future__ import annotations

import json
from pathlib import Path

import pytest

from tunelab.adapters import mock_trainer_ref
from tunelab.registry import BudgetSpec, MetricBinding, TaskSpec
from tunelab.repository import Catalog, DataSourceRef


def write_jsonl(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def mock_adapter():
    return mock_trainer_ref()


@pytest.fixture
def qa_catalog(tmp_path):
    """Catalog with one QA eval source (8 items) and one training source."""
    eval_rows = [{"q": f"question number {i}", "a": f"answer{i}"} for i in range(8)]
    train_rows = [
        {"instruction": f"please tell me: question number {i}", "input": "", "output": f"answer{i}"}
        for i in range(8)
    ]
    write_jsonl(tmp_path / "eval.jsonl", eval_rows)
    write_jsonl(tmp_path / "train.jsonl", train_rows)
    catalog = Catalog()
    catalog.add(DataSourceRef("qa-eval", str(tmp_path / "eval.jsonl"), format_hint="qa"))
    catalog.add(DataSourceRef("qa-train", str(tmp_path / "train.jsonl"), format_hint="alpaca"))
    return catalog


def make_task(
    task_id: str = "t1",
    sources: tuple[str, ...] = ("qa-eval", "qa-train"),
    eval_source: str = "qa-eval",
    **overrides,
) -> TaskSpec:
    defaults = dict(
        task_id=task_id,
        objective="Answer the question with the exact expected word.",
        domain_tag="qa",
        metrics=(MetricBinding(metric_id="accuracy", direction="higher", primary=True),),
        data_sources=sources,
        budget=BudgetSpec(),
        output_contract="Answer text only.",
        eval_source=eval_source,
    )
    defaults.update(overrides)
    return TaskSpec(**defaults)


@pytest.fixture
def qa_task():
    return make_task()


def demo_fixture_dir() -> Path:
    from importlib import resources

    return Path(str(resources.files("tunelab").joinpath("fixtures", "demo")))
