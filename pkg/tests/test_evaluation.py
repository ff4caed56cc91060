"""Evaluation engine: two-phase protocol, feedback shape, file formats."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tunelab.errors import (
    BudgetExhausted,
    MissingGold,
    RunFinalized,
    RunNotFinalizing,
    TestAlreadyConsumed,
)
from tunelab.evaluation import (
    EvalItem,
    EvaluationProtocol,
    build_eval_items,
    read_gold_file,
    read_predictions_file,
    score_files,
    write_eval_inputs_file,
    write_gold_file,
    write_predictions_file,
)
from tunelab.registry import MetricBinding
from tunelab.repository import Catalog, DataSourceRef

from conftest import make_task, write_jsonl
from oracles import ProtocolModel

VAL_ITEMS = [
    EvalItem("0", "first question", "", "alpha"),
    EvalItem("1", "second question", "", "beta"),
]
TEST_ITEMS = [
    EvalItem("2", "third question", "", "gamma"),
    EvalItem("3", "fourth question", "", "delta"),
]

ERRORS = {
    "RunFinalized": RunFinalized,
    "TestAlreadyConsumed": TestAlreadyConsumed,
    "RunNotFinalizing": RunNotFinalizing,
}


def _protocol(make_task, **kwargs):
    return EvaluationProtocol(make_task(), VAL_ITEMS, TEST_ITEMS, **kwargs)


def _val_preds(correct=2):
    answers = ["alpha" if correct > 0 else "wrong", "beta" if correct > 1 else "wrong"]
    return {"0": answers[0], "1": answers[1]}


def _test_preds():
    return {"2": "gamma", "3": "wrong"}


def test_unlimited_validation_then_single_test():
    protocol = _protocol(make_task)
    for _ in range(3):
        feedback = protocol.submit_validation(_val_preds())
        assert feedback.phase == "validation"
    assert protocol.validation_count == 3
    protocol.begin_finalizing()
    feedback = protocol.submit_final_test(_test_preds())
    assert feedback.phase == "test"
    assert feedback.primary_score == pytest.approx(0.5)
    assert protocol.finalized


def test_test_before_finalize_rejected():
    protocol = _protocol(make_task)
    with pytest.raises(RunNotFinalizing):
        protocol.submit_final_test(_test_preds())


def test_double_test_rejected():
    protocol = _protocol(make_task)
    protocol.begin_finalizing()
    protocol.submit_final_test(_test_preds())
    with pytest.raises(TestAlreadyConsumed):
        protocol.submit_final_test(_test_preds())


def test_validation_after_finalized_rejected():
    protocol = _protocol(make_task)
    protocol.begin_finalizing()
    # finalizing alone still allows validation; consumption closes the run
    protocol.submit_validation(_val_preds())
    protocol.submit_final_test(_test_preds())
    with pytest.raises(RunFinalized):
        protocol.submit_validation(_val_preds())


class _Clock:
    def __init__(self, remaining):
        self._remaining = remaining

    def remaining(self):
        return self._remaining

    def now(self):
        return 123.0


def test_validation_after_deadline_rejected():
    protocol = _protocol(make_task, clock=_Clock(remaining=0.0))
    with pytest.raises(BudgetExhausted):
        protocol.submit_validation(_val_preds())


@given(ops=st.lists(st.sampled_from(["validate", "finalize", "test"]), max_size=12))
@settings(max_examples=400, deadline=None)
def test_random_sequences_match_reference_model(ops):
    protocol = _protocol(make_task)
    model = ProtocolModel()
    for op in ops:
        expected = model.expected_error(op)
        try:
            if op == "validate":
                protocol.submit_validation(_val_preds())
            elif op == "finalize":
                protocol.begin_finalizing()
            else:
                protocol.submit_final_test(_test_preds())
        except (RunFinalized, TestAlreadyConsumed, RunNotFinalizing) as exc:
            assert expected is not None, f"unexpected {type(exc).__name__} for {op} after {ops}"
            assert isinstance(exc, ERRORS[expected])
        else:
            assert expected is None, f"{op} succeeded but model expected {expected}"
            model.apply(op)
        assert protocol.finalizing == model.finalizing
        assert protocol.test_consumed == model.test_consumed


def test_feedback_completeness():
    task = make_task(
        metrics=(
            MetricBinding("accuracy", primary=True),
            MetricBinding("exact-match"),
        )
    )
    protocol = EvaluationProtocol(task, VAL_ITEMS, TEST_ITEMS, seed=5)
    feedback = protocol.submit_validation({"0": "alpha", "1": "nope"})
    assert set(feedback.aggregates) == {"accuracy", "exact-match"}
    assert feedback.primary_metric == "accuracy"
    assert feedback.primary_score == pytest.approx(0.5)
    assert [o.instance_id for o in feedback.per_instance] == ["0", "1"]
    assert feedback.per_instance[0].gold == "alpha"
    assert feedback.per_instance[0].correct is True
    assert feedback.per_instance[1].correct is False
    wrong_ids = {o.instance_id for o in feedback.per_instance if not o.correct}
    assert {o.instance_id for o in feedback.failure_samples} <= wrong_ids
    assert feedback.failure_samples, "incorrect instances must surface failure samples"
    doc = json.loads(json.dumps(feedback.to_json()))
    assert doc["phase"] == "validation"


def test_failure_samples_capped_and_deterministic():
    items = [EvalItem(str(i), f"q{i}", "", "right") for i in range(40)]
    protocol = EvaluationProtocol(make_task(), items, TEST_ITEMS, seed=9)
    preds = {str(i): "wrong" for i in range(40)}
    first = protocol.submit_validation(preds)
    assert len(first.failure_samples) == 10
    protocol2 = EvaluationProtocol(make_task(), items, TEST_ITEMS, seed=9)
    again = protocol2.submit_validation(preds)
    assert [o.instance_id for o in again.failure_samples] == [
        o.instance_id for o in first.failure_samples
    ]


def test_test_feedback_strips_gold():
    protocol = _protocol(make_task)
    protocol.begin_finalizing()
    feedback = protocol.submit_final_test(_test_preds())
    assert all(o.gold is None for o in feedback.per_instance)
    assert feedback.failure_samples == []
    assert feedback.aggregates["accuracy"] == pytest.approx(0.5)


def test_prediction_id_mismatch_raises_missing_gold():
    protocol = _protocol(make_task)
    with pytest.raises(MissingGold):
        protocol.submit_validation({"0": "alpha"})  # missing id 1
    with pytest.raises(MissingGold):
        protocol.submit_validation({"0": "alpha", "1": "beta", "9": "extra"})


def test_answer_extraction_applied_before_scoring():
    task = make_task(answer_extraction="last-line")
    protocol = EvaluationProtocol(task, VAL_ITEMS, TEST_ITEMS)
    feedback = protocol.submit_validation(
        {"0": "thinking...\nalpha", "1": "thinking...\nwrong"}
    )
    assert feedback.primary_score == pytest.approx(0.5)


def test_external_metric_binding(tmp_path):
    task = make_task(
        metrics=(
            MetricBinding("accuracy", primary=True),
            MetricBinding("half", external_cmd=("fake-metric",)),
        )
    )

    def runner(argv):
        assert argv[0] == "fake-metric"
        return 0, json.dumps({"aggregate": 0.5, "per_instance": []})

    protocol = EvaluationProtocol(
        task, VAL_ITEMS, TEST_ITEMS, scratch_dir=tmp_path, external_runner=runner
    )
    feedback = protocol.submit_validation(_val_preds())
    assert feedback.aggregates["half"] == 0.5
    assert (tmp_path / "metric_predictions.jsonl").exists()
    assert (tmp_path / "metric_gold.jsonl").exists()


# -- eval item construction ----------------------------------------------------


def test_build_eval_items_skips_unparsable_and_indexes_survivors(tmp_path):
    rows = [
        {"q": "q0", "a": "a0"},
        {"q": "q1", "a": "a1"},
        {"q": "broken", "a": ""},  # unparsable: no answer
        {"q": "q3", "a": "a3"},
        {"q": "q4", "a": "a4"},
    ]
    write_jsonl(tmp_path / "e.jsonl", rows)
    catalog = Catalog()
    catalog.add(DataSourceRef("qa-eval", str(tmp_path / "e.jsonl"), "qa"))
    task = make_task(data_sources=("qa-eval",))
    items = build_eval_items(catalog, task, [0, 3])
    assert [i.instruction for i in items] == ["q0", "q4"]
    assert [i.instance_id for i in items] == ["0", "3"]
    assert items[1].gold == "a4"


def test_eval_inputs_file_never_carries_gold(tmp_path):
    path = write_eval_inputs_file(tmp_path / "inputs.jsonl", VAL_ITEMS)
    for line in path.read_text().splitlines():
        doc = json.loads(line)
        assert set(doc) == {"instance_id", "instruction", "input"}


# -- file formats ---------------------------------------------------------------


def test_predictions_and_gold_round_trip(tmp_path):
    preds = {"a": "1", "b": "2"}
    golds = {"a": "1", "b": "3"}
    p = write_predictions_file(tmp_path / "p.jsonl", preds)
    g = write_gold_file(tmp_path / "g.jsonl", golds)
    assert read_predictions_file(p) == preds
    assert read_gold_file(g) == golds


def test_score_files(tmp_path):
    write_predictions_file(tmp_path / "p.jsonl", {"a": "x", "b": "y", "c": "z", "d": "w"})
    write_gold_file(tmp_path / "g.jsonl", {"a": "x", "b": "y", "c": "z", "d": "q"})
    assert score_files("accuracy", tmp_path / "p.jsonl", tmp_path / "g.jsonl") == pytest.approx(0.75)


def test_score_files_missing_gold(tmp_path):
    write_predictions_file(tmp_path / "p.jsonl", {"a": "x", "b": "y"})
    write_gold_file(tmp_path / "g.jsonl", {"a": "x"})
    with pytest.raises(MissingGold):
        score_files("accuracy", tmp_path / "p.jsonl", tmp_path / "g.jsonl")
