"""Metrics: worked examples, oracle equivalence, extraction, external protocol.

The full exhaustive sweep (every label-vector pair up to 6 instances and 3
classes) lives in test_acceptance.py; here a smaller exhaustive slice plus
randomized equivalence keeps the signal fast.
"""

from __future__ import annotations

import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tunelab.errors import DuplicateMetricId, MetricFailure, MetricNotRegistered
from tunelab.metrics import (
    MetricRegistry,
    accuracy,
    exact_match,
    extract_answer,
    macro_f1,
    mae,
    run_external_metric,
)

from oracles import oracle_accuracy, oracle_exact_match, oracle_macro_f1, oracle_mae

TOL = 1e-9


def test_accuracy_worked_example():
    result = accuracy(["A", "B", "C", "A"], ["A", "B", "B", "A"])
    assert result.aggregate == pytest.approx(0.75, abs=TOL)
    assert result.correct == (True, True, False, True)


def test_macro_f1_worked_example():
    result = macro_f1(["1", "1", "0"], ["1", "0", "0"])
    assert result.aggregate == pytest.approx(2 / 3, abs=TOL)


def test_mae_worked_example():
    result = mae(["3", "5"], ["3", "4"])
    assert result.aggregate == pytest.approx(0.5, abs=TOL)
    assert result.correct == (True, False)


def test_exact_match_is_verbatim():
    result = exact_match(["a ", "b"], ["a", "b"])
    assert result.aggregate == pytest.approx(0.5, abs=TOL)


def test_accuracy_ignores_case_and_spacing():
    result = accuracy(["  Yes "], ["yes"])
    assert result.aggregate == pytest.approx(1.0, abs=TOL)


def test_mae_penalizes_unparsable_prediction():
    result = mae(["not a number"], ["4"])
    assert result.aggregate == pytest.approx(5.0, abs=TOL)


def test_mae_rejects_unparsable_gold():
    with pytest.raises(MetricFailure):
        mae(["1"], ["not numeric"])


def test_exhaustive_slice_matches_oracles():
    classes = ("0", "1", "2")
    for n in range(1, 5):
        for preds in itertools.product(classes, repeat=n):
            for golds in itertools.product(classes, repeat=n):
                assert abs(accuracy(preds, golds).aggregate - oracle_accuracy(preds, golds)) <= TOL
                assert abs(exact_match(preds, golds).aggregate - oracle_exact_match(preds, golds)) <= TOL
                assert abs(macro_f1(preds, golds).aggregate - oracle_macro_f1(preds, golds)) <= TOL
                assert abs(mae(preds, golds).aggregate - oracle_mae(preds, golds)) <= TOL


_LABELS = st.lists(st.sampled_from(["alpha", "Beta", " gamma ", "0", "-2.5"]), min_size=1, max_size=12)


@given(data=st.data())
@settings(max_examples=300, deadline=None)
def test_randomized_oracle_equivalence(data):
    golds = data.draw(_LABELS)
    preds = data.draw(st.lists(st.sampled_from(["alpha", "Beta", " gamma ", "0", "-2.5"]),
                               min_size=len(golds), max_size=len(golds)))
    assert abs(accuracy(preds, golds).aggregate - oracle_accuracy(preds, golds)) <= TOL
    assert abs(exact_match(preds, golds).aggregate - oracle_exact_match(preds, golds)) <= TOL
    assert abs(macro_f1(preds, golds).aggregate - oracle_macro_f1(preds, golds)) <= TOL


def test_rate_metrics_stay_in_unit_interval():
    for preds, golds in [(["x"], ["y"]), (["x"] * 5, ["x"] * 5), ([], [])]:
        for fn in (accuracy, exact_match, macro_f1):
            value = fn(preds, golds).aggregate
            assert 0.0 <= value <= 1.0


# -- registry -----------------------------------------------------------------


def test_registry_builtins_and_errors():
    registry = MetricRegistry()
    for metric_id in ("accuracy", "exact-match", "macro-f1", "mae"):
        assert registry.has(metric_id)
    with pytest.raises(DuplicateMetricId):
        registry.register("accuracy", accuracy)
    with pytest.raises(MetricNotRegistered):
        registry.get("bleu")
    registry.register("always-one", lambda p, g: accuracy(g, g))
    assert registry.get("always-one")(["a"], ["b"]).aggregate == 1.0


# -- answer extraction ----------------------------------------------------------


def test_extract_answer_modes():
    text = "reasoning line one\nreasoning line two\nFinal answer: 42\n"
    assert extract_answer(text, "full-text") == text.strip()
    assert extract_answer(text, "last-line") == "Final answer: 42"
    assert extract_answer(text, {"regex": r"Final answer:\s*(\d+)"}) == "42"
    assert extract_answer("no match here", {"regex": r"answer:\s*(\d+)"}) == ""
    assert extract_answer("\n\n", "last-line") == ""
    with pytest.raises(ValueError):
        extract_answer("x", "middle-line")


# -- external metric protocol ----------------------------------------------------


def _runner_returning(code, stdout):
    def runner(argv):
        return code, stdout

    return runner


def test_external_metric_happy_path():
    doc = {"aggregate": 0.5, "per_instance": [{"instance_id": "i1", "correct": True}]}
    aggregate, rows = run_external_metric(
        ["metric.sh"], "preds.jsonl", "gold.jsonl", runner=_runner_returning(0, json.dumps(doc))
    )
    assert aggregate == 0.5
    assert rows[0]["instance_id"] == "i1"


def test_external_metric_receives_both_files():
    seen = {}

    def runner(argv):
        seen["argv"] = argv
        return 0, json.dumps({"aggregate": 1.0, "per_instance": []})

    run_external_metric(["python3", "m.py"], "p.jsonl", "g.jsonl", runner=runner)
    assert seen["argv"] == ["python3", "m.py", "p.jsonl", "g.jsonl"]


@pytest.mark.parametrize(
    "code,stdout",
    [
        (3, "{}"),
        (0, "not json"),
        (0, json.dumps({"per_instance": []})),
        (0, json.dumps({"aggregate": "high"})),
        (0, json.dumps({"aggregate": True})),
        (0, json.dumps({"aggregate": 1.0, "per_instance": [{"instance_id": "x"}]})),
    ],
)
def test_external_metric_failures(code, stdout):
    with pytest.raises(MetricFailure):
        run_external_metric(["m"], "p", "g", runner=_runner_returning(code, stdout))


def test_external_metric_real_subprocess(tmp_path):
    script = tmp_path / "metric.py"
    script.write_text(
        "import json, sys\n"
        "preds = [json.loads(l) for l in open(sys.argv[1])]\n"
        "print(json.dumps({'aggregate': len(preds) / 10, 'per_instance': []}))\n",
        encoding="utf-8",
    )
    preds = tmp_path / "p.jsonl"
    preds.write_text('{"instance_id": "a", "output": "x"}\n' * 3, encoding="utf-8")
    gold = tmp_path / "g.jsonl"
    gold.write_text("", encoding="utf-8")
    aggregate, _ = run_external_metric(["python3", str(script)], str(preds), str(gold))
    assert aggregate == pytest.approx(0.3)
