"""Gateway behavior: templating, retries, rotation, cost, structured repair."""

import json

import pytest

from tunelab.errors import (
    AllEndpointsFailed,
    GatewayError,
    PromptTooLarge,
    SchemaViolation,
    ScriptExhausted,
    SpendLimitExceeded,
)
from tunelab.events import EventLog, read_events
from tunelab.gateway import (
    Completion,
    Endpoint,
    Gateway,
    LlmRequest,
    ScriptedBackend,
    TransientBackendError,
    extract_json_object,
    load_endpoint_config,
    render_template,
    validate_schema,
)
from tunelab.sandbox import BudgetClock, LogicalClock

GOAL_VARS = {"goal": "tune it", "ranges": "lr in [1e-6, 1e-3]"}


def _request(**kwargs):
    defaults = dict(template_id="training_config", variables=dict(GOAL_VARS))
    defaults.update(kwargs)
    return LlmRequest(**defaults)


class _FlakyBackend:
    """Fails the first n sends, then answers; records every endpoint hit."""

    def __init__(self, fail_first: int = 0, text: str = "ok", tokens_consumed: int = 0):
        self.fail_first = fail_first
        self.text = text
        self.tokens_consumed = tokens_consumed
        self.sends = []

    def send(self, prompt, endpoint):
        self.sends.append(endpoint.base_url)
        if len(self.sends) <= self.fail_first:
            raise TransientBackendError("boom", tokens_consumed=self.tokens_consumed)
        inner = ScriptedBackend([self.text])
        return inner.send(prompt, endpoint)


# -- templates --------------------------------------------------------------


def test_render_template_binds_variables():
    text = render_template("training_config", GOAL_VARS)
    assert "tune it" in text
    assert "lr in [1e-6, 1e-3]" in text
    assert "$" not in text


def test_render_unbound_variable_is_error():
    with pytest.raises(GatewayError, match="not bound"):
        render_template("training_config", {"goal": "x"})


def test_unknown_template_is_error():
    with pytest.raises(GatewayError, match="unknown prompt template"):
        render_template("no_such_template", {})


def test_prompt_too_large():
    with pytest.raises(PromptTooLarge, match="cap is 10"):
        render_template("training_config", GOAL_VARS, context_cap=10)


def test_request_render_respects_cap():
    request = _request(context_cap=10)
    gateway = Gateway.scripted(["never reached"])
    with pytest.raises(PromptTooLarge):
        gateway.complete(request)


# -- scripted backend ---------------------------------------------------------


def test_scripted_backend_records_prompts_and_exhausts():
    backend = ScriptedBackend(["one"])
    endpoint = Endpoint(base_url="scripted://local")
    response = backend.send("first prompt", endpoint)
    assert response.text == "one"
    assert backend.prompts == ["first prompt"]
    with pytest.raises(ScriptExhausted, match="after 1 responses"):
        backend.send("second prompt", endpoint)
    assert backend.prompts == ["second prompt"[:]] or backend.prompts[-1] == "second prompt"


def test_scripted_backend_from_file(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(json.dumps(["a", "b"]), encoding="utf-8")
    backend = ScriptedBackend.from_file(path)
    assert backend.responses == ["a", "b"]
    path.write_text(json.dumps({"not": "a list"}), encoding="utf-8")
    with pytest.raises(GatewayError, match="JSON array of strings"):
        ScriptedBackend.from_file(path)


# -- completion and cost --------------------------------------------------------


def test_complete_returns_text_and_recomputable_cost(tmp_path):
    budget = BudgetClock(wall_clock_limit=100.0, clock=LogicalClock())
    log = EventLog(tmp_path / "events.jsonl", run_id="r", clock=LogicalClock())
    reply = "x" * 400
    gateway = Gateway.scripted([reply], budget=budget, event_log=log, unit_cost=0.002)
    request = _request(iteration=3)

    completion = gateway.complete(request)

    assert isinstance(completion, Completion)
    assert completion.text == reply
    assert completion.retries == 0
    prompt = request.render()
    expected_tokens = max(1, len(prompt) // 4) + max(1, len(reply) // 4)
    assert completion.total_tokens == expected_tokens
    expected_cost = expected_tokens / 1000.0 * 0.002
    assert completion.cost == pytest.approx(expected_cost, abs=1e-12)
    assert budget.total_cost() == pytest.approx(expected_cost, abs=1e-12)

    charges = [e for e in read_events(log.path) if e.event == "charge"]
    assert len(charges) == 1
    assert charges[0].iteration == 3
    assert charges[0].detail["memo"] == "llm:training_config"
    assert charges[0].detail["amount"] == pytest.approx(expected_cost, abs=1e-12)


def test_thousand_token_exchange_costs_unit_rate(tmp_path):
    # 2000-char prompt side + 2000-char reply = exactly 1000 tokens.
    budget = BudgetClock(wall_clock_limit=100.0, clock=LogicalClock())
    reply = "y" * 2000
    backend = ScriptedBackend([reply])
    gateway = Gateway(
        endpoints=[Endpoint(base_url="scripted://local", unit_cost=0.002)],
        backend=backend,
        budget=budget,
    )
    request = _request()
    prompt = request.render()
    pad = 2000 - len(prompt) - len("pad") + len(GOAL_VARS["goal"])
    request = _request(variables={**GOAL_VARS, "goal": "z" * (pad + 3)})
    rendered = request.render()
    assert len(rendered) == 2000

    completion = gateway.complete(request)

    assert completion.total_tokens == 1000
    assert completion.cost == pytest.approx(0.002, abs=1e-15)
    assert budget.total_cost() == pytest.approx(0.002, abs=1e-15)


# -- retries and rotation ---------------------------------------------------------


def test_retry_delays_grow_linearly(tmp_path):
    sleeps = []
    backend = _FlakyBackend(fail_first=2)
    log = EventLog(tmp_path / "events.jsonl", run_id="r", clock=LogicalClock())
    gateway = Gateway(
        endpoints=[Endpoint(base_url="http://a")],
        backend=backend,
        event_log=log,
        sleep_fn=sleeps.append,
    )

    completion = gateway.complete(_request())

    assert completion.text == "ok"
    assert completion.retries == 2
    assert sleeps == [2.0, 4.0]
    retry_events = [e for e in read_events(log.path) if e.event == "llm_retry"]
    assert [e.detail["delay"] for e in retry_events] == [2.0, 4.0]
    assert all(e.detail["endpoint"] == "http://a" for e in retry_events)


def test_base_delay_scales_retry_waits():
    sleeps = []
    backend = _FlakyBackend(fail_first=3)
    gateway = Gateway(
        endpoints=[Endpoint(base_url="http://a")],
        backend=backend,
        base_delay=0.5,
        sleep_fn=sleeps.append,
    )
    gateway.complete(_request())
    assert sleeps == [0.5, 1.0, 1.5]


def test_all_endpoints_failed_after_full_exhaustion():
    sleeps = []
    backend = _FlakyBackend(fail_first=10**9)
    gateway = Gateway(
        endpoints=[Endpoint(base_url="http://a"), Endpoint(base_url="http://b")],
        backend=backend,
        sleep_fn=sleeps.append,
    )
    with pytest.raises(AllEndpointsFailed, match="2 endpoint\\(s\\) failed 4 times"):
        gateway.complete(_request())
    # 2 endpoints x 4 attempts each, alternating; the final failure raises
    # instead of sleeping.
    assert len(backend.sends) == 8
    assert backend.sends == ["http://a", "http://b"] * 4
    assert len(sleeps) == 7


def test_round_robin_rotates_across_requests():
    backend = _FlakyBackend(fail_first=0)
    gateway = Gateway(
        endpoints=[Endpoint(base_url="http://a"), Endpoint(base_url="http://b")],
        backend=backend,
        sleep_fn=lambda _d: None,
    )
    for _ in range(3):
        gateway.complete(_request())
    assert backend.sends == ["http://a", "http://b", "http://a"]


def test_failing_endpoint_falls_over_to_healthy_one():
    # Attempt budgets are per request: each request may probe a again, but
    # always lands on b, and a is never probed twice within one request once
    # b keeps answering.
    class _OneSided:
        def __init__(self):
            self.sends = []

        def send(self, prompt, endpoint):
            self.sends.append(endpoint.base_url)
            if endpoint.base_url == "http://a":
                raise TransientBackendError("a is down")
            return ScriptedBackend(["ok"]).send(prompt, endpoint)

    backend = _OneSided()
    gateway = Gateway(
        endpoints=[Endpoint(base_url="http://a"), Endpoint(base_url="http://b")],
        backend=backend,
        sleep_fn=lambda _d: None,
    )
    for _ in range(3):
        completion = gateway.complete(_request())
        assert completion.text == "ok"
        assert completion.retries == 1
    assert backend.sends == ["http://a", "http://b"] * 3


def test_failed_attempt_tokens_still_charged(tmp_path):
    budget = BudgetClock(wall_clock_limit=100.0, clock=LogicalClock())
    log = EventLog(tmp_path / "events.jsonl", run_id="r", clock=LogicalClock())
    backend = _FlakyBackend(fail_first=1, tokens_consumed=500)
    gateway = Gateway(
        endpoints=[Endpoint(base_url="http://a", unit_cost=0.002)],
        backend=backend,
        budget=budget,
        event_log=log,
        sleep_fn=lambda _d: None,
    )
    gateway.complete(_request())
    charges = [e for e in read_events(log.path) if e.event == "charge"]
    memos = [e.detail["memo"] for e in charges]
    assert memos[0] == "llm:training_config:failed_attempt"
    assert charges[0].detail["amount"] == pytest.approx(0.001, abs=1e-15)
    assert memos[1] == "llm:training_config"
    assert budget.total_cost() == pytest.approx(sum(e.detail["amount"] for e in charges), abs=1e-12)


def test_spend_limit_trip_still_records_charge(tmp_path):
    budget = BudgetClock(wall_clock_limit=100.0, spend_limit=0.0001, clock=LogicalClock())
    log = EventLog(tmp_path / "events.jsonl", run_id="r", clock=LogicalClock())
    gateway = Gateway.scripted(["x" * 4000], budget=budget, event_log=log, unit_cost=1.0)
    with pytest.raises(SpendLimitExceeded):
        gateway.complete(_request())
    charges = [e for e in read_events(log.path) if e.event == "charge"]
    assert len(charges) == 1
    assert len(budget.ledger) == 1
    assert budget.ledger[0].amount == pytest.approx(charges[0].detail["amount"], abs=1e-15)


def test_gateway_requires_an_endpoint():
    with pytest.raises(GatewayError, match="at least one endpoint"):
        Gateway(endpoints=[], backend=ScriptedBackend([]))


# -- structured completions -------------------------------------------------------


PLAN_SCHEMA = {"name": "string", "score": "number", "tags": "array", "note": "string?"}


def test_structured_happy_path_preserves_extras():
    reply = json.dumps(
        {"name": "run-a", "score": 0.5, "tags": ["x"], "free_form": {"anything": 1}}
    )
    gateway = Gateway.scripted([f"Here you go:\n{reply}\nDone."])
    payload = gateway.complete_structured(_request(), PLAN_SCHEMA)
    assert payload["name"] == "run-a"
    assert payload["score"] == 0.5
    assert payload.get("note") is None
    assert payload.extras == {"free_form": {"anything": 1}}


def test_structured_repair_quotes_violation_and_schema():
    backend = ScriptedBackend(
        [
            "no json here at all",
            json.dumps({"name": "run-a", "tags": []}),
            json.dumps({"name": "run-a", "score": 1, "tags": []}),
        ]
    )
    gateway = Gateway(
        endpoints=[Endpoint(base_url="scripted://local")],
        backend=backend,
        sleep_fn=lambda _d: None,
    )
    payload = gateway.complete_structured(_request(), PLAN_SCHEMA)
    assert payload["score"] == 1
    assert len(backend.prompts) == 3
    first_repair, second_repair = backend.prompts[1], backend.prompts[2]
    assert "no JSON object found in the reply" in first_repair
    assert json.dumps(PLAN_SCHEMA, sort_keys=True) in first_repair
    assert "missing required field 'score'" in second_repair
    original = _request().render()
    assert original in first_repair and original in second_repair


def test_structured_gives_up_after_two_repairs():
    backend = ScriptedBackend(["bad", "still bad", "worse"])
    gateway = Gateway(
        endpoints=[Endpoint(base_url="scripted://local")],
        backend=backend,
        sleep_fn=lambda _d: None,
    )
    with pytest.raises(SchemaViolation, match="no JSON object found"):
        gateway.complete_structured(_request(), PLAN_SCHEMA)
    assert len(backend.prompts) == 3


def test_structured_repair_attempts_zero_fails_fast():
    backend = ScriptedBackend(["bad"])
    gateway = Gateway(
        endpoints=[Endpoint(base_url="scripted://local")],
        backend=backend,
        sleep_fn=lambda _d: None,
    )
    with pytest.raises(SchemaViolation):
        gateway.complete_structured(_request(), PLAN_SCHEMA, repair_attempts=0)
    assert len(backend.prompts) == 1


# -- JSON extraction and schema checks ---------------------------------------------


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ('{"a": 1}', {"a": 1}),
        ('prose before {"a": {"b": 2}} prose after', {"a": {"b": 2}}),
        ('{"s": "braces } inside { string"}', {"s": "braces } inside { string"}),
        ('{broken then {"ok": true}', {"ok": True}),
        ("no object here", None),
        ("[1, 2, 3]", None),
        ('{"unterminated": ', None),
    ],
)
def test_extract_json_object(text, expected):
    assert extract_json_object(text) == expected


def test_validate_schema_optional_and_types():
    payload, violation = validate_schema({"a": 1}, {"a": "integer", "b": "string?"})
    assert violation == ""
    assert payload.fields == {"a": 1}

    payload, violation = validate_schema({"a": True}, {"a": "number"})
    assert payload is None
    assert "must be a number, got bool" in violation

    payload, violation = validate_schema({"a": "x"}, {"a": "array"})
    assert payload is None
    assert "must be array" in violation

    with pytest.raises(ValueError, match="unknown schema type"):
        validate_schema({}, {"a": "uuid"})


# -- endpoint config ---------------------------------------------------------------


def test_load_endpoint_config(tmp_path, monkeypatch):
    path = tmp_path / "endpoints.json"
    path.write_text(
        json.dumps(
            [
                {"base_url": "http://a", "credential_env_var": "A_KEY", "unit_cost": 0.004},
                {"base_url": "http://b"},
            ]
        ),
        encoding="utf-8",
    )
    endpoints = load_endpoint_config(path)
    assert [e.base_url for e in endpoints] == ["http://a", "http://b"]
    assert endpoints[0].unit_cost == 0.004
    monkeypatch.setenv("A_KEY", "secret")
    assert endpoints[0].credential == "secret"
    assert endpoints[1].credential == ""

    path.write_text("[]", encoding="utf-8")
    with pytest.raises(GatewayError, match="non-empty JSON list"):
        load_endpoint_config(path)
