"""Fail-fast gate: the broken-plan corpus plus stage-level unit checks."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from tunelab import mock_trainer
from tunelab.adapters import AdapterDescription, AdapterRef, mock_trainer_ref
from tunelab.events import EventLog, read_events
from tunelab.sandbox import LogicalClock, create_workspace
from tunelab.validator import (
    CONFIG_RANGE,
    MINI_RUN_FAILED,
    TrainingConfig,
    progressive_validate,
    validate_mini_run,
    validate_static,
)

from validation_corpus import CORPUS, STAGE_ORDER, fake_adapter, good_rows, _write_rows

MOCK_DIR = Path(mock_trainer.__file__).parent


def _workspace(tmp_path, name, *mounts):
    return create_workspace(
        tmp_path / "runs", "gate-tests", name, read_only_mounts=[MOCK_DIR, *mounts]
    )


def _event_log(tmp_path, name):
    return EventLog(tmp_path / f"{name}-events.jsonl", run_id="gate-tests", clock=LogicalClock())


@pytest.mark.parametrize("case", CORPUS, ids=lambda c: c.name)
def test_corpus_case_stops_at_earliest_stage(case, tmp_path):
    case_dir = tmp_path / case.name
    kwargs = case.build(case_dir)
    workspace = _workspace(tmp_path, case.name, case_dir)
    log = _event_log(tmp_path, case.name)

    report = progressive_validate(workspace=workspace, event_log=log, **kwargs)

    assert report.verdict == case.expected_verdict
    by_stage = {s.stage: s for s in report.stages}
    assert list(by_stage) == list(STAGE_ORDER)

    for code, (stage, severity) in case.expected.items():
        hits = [d for d in by_stage[stage].diagnostics if d.code == code]
        assert hits, f"{case.name}: expected {code} at {stage}, got {report.to_json()}"
        assert all(d.severity == severity for d in hits)

    if case.earliest_hard_stage is None:
        assert all(s.status == "passed" for s in report.stages)
    else:
        cut = STAGE_ORDER.index(case.earliest_hard_stage)
        for stage_name in STAGE_ORDER[:cut]:
            assert by_stage[stage_name].status == "passed"
        assert by_stage[case.earliest_hard_stage].status == "failed"
        for stage_name in STAGE_ORDER[cut + 1:]:
            assert by_stage[stage_name].status == "skipped"

    events = read_events(log.path)
    launches = [e for e in events if e.event == "process_start"]
    assert all(e.detail.get("purpose") != "full_training" for e in launches)
    if case.expected_verdict == "hard_fail" and case.earliest_hard_stage == "static":
        assert not launches, "static rejection must not spawn any process"
    report_events = [e for e in events if e.event == "validation_report"]
    assert len(report_events) == 1
    assert report_events[0].detail["verdict"] == case.expected_verdict
    expected_codes = sorted(case.expected)
    assert sorted(set(report_events[0].detail["codes"]) & set(expected_codes)) == expected_codes

    assert workspace.path("validation_report.json").is_file()


def test_clean_plan_passes_all_stages(tmp_path):
    case_dir = tmp_path / "clean"
    case_dir.mkdir()
    train = _write_rows(case_dir / "train.jsonl", good_rows())
    workspace = _workspace(tmp_path, "clean", case_dir)
    report = progressive_validate(
        config=TrainingConfig(),
        train_file=train,
        adapter=mock_trainer_ref(),
        workspace=workspace,
    )
    assert report.verdict == "pass"
    assert [s.status for s in report.stages] == ["passed", "passed", "passed"]
    assert report.mini_trajectory, "a clean mini run must yield telemetry"
    assert not report.hard_diagnostics and not report.soft_diagnostics


def test_mini_run_respects_sample_cap(tmp_path):
    case_dir = tmp_path / "cap"
    case_dir.mkdir()
    train = _write_rows(case_dir / "train.jsonl", good_rows(100))
    workspace = _workspace(tmp_path, "cap", case_dir)
    stage, outcome = validate_mini_run(
        TrainingConfig(), train, mock_trainer_ref(), workspace
    )
    assert stage.status == "passed"
    assert outcome.executed
    mini_rows = workspace.path("mini", "train.jsonl").read_text().strip().splitlines()
    assert len(mini_rows) <= 16
    assert len(outcome.trajectory) <= 2


def test_mini_run_timeout_is_hard_failure(tmp_path):
    case_dir = tmp_path / "slow"
    case_dir.mkdir()
    script = case_dir / "adapter_slow.py"
    script.write_text("import time\ntime.sleep(30)\n", encoding="utf-8")
    import sys

    adapter = AdapterRef(argv=(sys.executable, str(script)), name="slow")
    train = _write_rows(case_dir / "train.jsonl", good_rows())
    workspace = _workspace(tmp_path, "slow", case_dir)
    stage, outcome = validate_mini_run(
        TrainingConfig(), train, adapter, workspace, mini_timeout=0.4
    )
    assert stage.status == "failed"
    assert any(d.code == MINI_RUN_FAILED and "timed out" in d.message for d in stage.diagnostics)


def test_static_checks_adapter_declared_ranges(tmp_path):
    description = AdapterDescription.from_json(
        {"name": "m", "modes": ["mini"], "ranges": {"learning_rate": [1e-6, 0.5]}}
    )
    train = _write_rows(tmp_path / "t.jsonl", good_rows())
    # 0.75 passes the built-in (0, 1) check but not the adapter's range
    stage = validate_static(TrainingConfig(learning_rate=0.75), train, description)
    assert stage.status == "failed"
    assert any(
        d.code == CONFIG_RANGE and "adapter-declared" in d.message for d in stage.diagnostics
    )
    stage_ok = validate_static(TrainingConfig(learning_rate=0.3), train, description)
    assert stage_ok.status == "passed"


def test_training_config_violations():
    assert TrainingConfig().violations() == []
    assert TrainingConfig(max_steps=10, epochs=None).violations() == []
    bad = TrainingConfig(
        method="quantum",
        learning_rate=0.0,
        batch_size=0,
        grad_accumulation=0,
        epochs=2,
        max_steps=5,
        sequence_length_cap=0,
        eval_fraction=1.5,
    )
    problems = bad.violations()
    assert len(problems) == 7
    assert TrainingConfig(epochs=None, max_steps=None).violations() == [
        "exactly one of epochs or max_steps must be set"
    ]


def test_training_config_from_json_prefers_max_steps():
    config = TrainingConfig.from_json({"max_steps": 40})
    assert config.max_steps == 40 and config.epochs is None
    assert config.violations() == []
    config2 = TrainingConfig.from_json({"learning_rate": 3e-4, "epochs": 2})
    assert config2.epochs == 2 and config2.max_steps is None
    round_tripped = TrainingConfig.from_json(json.loads(json.dumps(config2.to_json())))
    assert round_tripped == config2


def test_validation_report_round_trips_to_disk(tmp_path):
    case_dir = tmp_path / "io"
    case_dir.mkdir()
    train = _write_rows(case_dir / "train.jsonl", good_rows())
    workspace = _workspace(tmp_path, "io", case_dir)
    report = progressive_validate(
        config=TrainingConfig(learning_rate=0.0),
        train_file=train,
        adapter=mock_trainer_ref(),
        workspace=workspace,
    )
    doc = json.loads(workspace.path("validation_report.json").read_text())
    assert doc["verdict"] == report.verdict == "hard_fail"
    assert [s["status"] for s in doc["stages"]] == ["failed", "skipped", "skipped"]


def test_fake_adapter_helper_builds_runnable_scripts(tmp_path):
    ref = fake_adapter(tmp_path, "exit7")
    assert Path(ref.argv[-1]).is_file()
    assert ref.name == "fake-exit7"
