"""LLM gateway: the only path between the loop and any language model.

Handles endpoint pooling with round-robin rotation, linear-backoff retries,
per-token cost charging against the run ledger, prompt templating, and
structured (JSON) completions with bounded repair. Backends are pluggable;
the scripted backend replays canned responses so whole runs execute offline
and deterministically.

Retry discipline: the j-th retry of a request sleeps j * base_delay before
the next attempt (linear backoff). Attempts rotate across endpoints; once
every endpoint has failed R times the request raises AllEndpointsFailed.
"""

from __future__ import annotations

import json
import os
import string
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

from .errors import (
    AllEndpointsFailed,
    GatewayError,
    PromptTooLarge,
    SchemaViolation,
    ScriptExhausted,
)

DEFAULT_RETRIES_PER_ENDPOINT = 4
DEFAULT_BASE_DELAY = 2.0
DEFAULT_CONTEXT_CAP = 200_000  # rendered prompt characters

TEMPLATE_IDS = ("hypothesis", "data_processing", "training_config", "feedback")


# -- templates -----------------------------------------------------------------


def load_template(template_id: str) -> string.Template:
    try:
        text = resources.files("tunelab").joinpath(f"templates/{template_id}.txt").read_text("utf-8")
    except FileNotFoundError:
        raise GatewayError(f"unknown prompt template: {template_id!r}") from None
    return string.Template(text)


def render_template(
    template_id: str, variables: dict[str, str], context_cap: int = DEFAULT_CONTEXT_CAP
) -> str:
    """Render a prompt; every placeholder must be bound and the result must
    fit the context cap."""
    template = load_template(template_id)
    try:
        rendered = template.substitute(variables)
    except KeyError as exc:
        raise GatewayError(f"template {template_id!r} variable not bound: {exc}") from None
    if len(rendered) > context_cap:
        raise PromptTooLarge(
            f"rendered prompt is {len(rendered)} chars, cap is {context_cap}"
        )
    return rendered


@dataclass(frozen=True)
class LlmRequest:
    template_id: str
    variables: dict[str, str]
    iteration: int = -1
    context_cap: int = DEFAULT_CONTEXT_CAP

    def render(self) -> str:
        return render_template(self.template_id, self.variables, self.context_cap)


# -- endpoints and backends ------------------------------------------------------


@dataclass(frozen=True)
class Endpoint:
    base_url: str
    credential_env_var: str = ""
    unit_cost: float = 0.0  # dollars per 1k tokens
    model: str = ""

    @property
    def credential(self) -> str:
        return os.environ.get(self.credential_env_var, "") if self.credential_env_var else ""


def load_endpoint_config(path: Path | str) -> list[Endpoint]:
    """Endpoint configuration file: a JSON list of
    {base_url, credential_env_var, unit_cost[, model]} objects."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list) or not doc:
        raise GatewayError("endpoint config must be a non-empty JSON list")
    return [
        Endpoint(
            base_url=str(e["base_url"]),
            credential_env_var=str(e.get("credential_env_var", "")),
            unit_cost=float(e.get("unit_cost", 0.0)),
            model=str(e.get("model", "")),
        )
        for e in doc
    ]


@dataclass
class BackendResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


class TransientBackendError(GatewayError):
    """Retryable failure (timeout, 5xx); carries any tokens already consumed."""

    def __init__(self, message: str, tokens_consumed: int = 0) -> None:
        super().__init__(message)
        self.tokens_consumed = tokens_consumed


def _approx_tokens(text: str) -> int:
    # fixed deterministic approximation: 4 chars per token, at least 1
    return max(1, len(text) // 4)


class ScriptedBackend:
    """Replays canned responses in order and records every rendered prompt."""

    def __init__(self, responses: Sequence[str]) -> None:
        self.responses = list(responses)
        self.prompts: list[str] = []
        self._cursor = 0

    def send(self, prompt: str, endpoint: Endpoint) -> BackendResponse:
        self.prompts.append(prompt)
        if self._cursor >= len(self.responses):
            raise ScriptExhausted(
                f"scripted backend exhausted after {len(self.responses)} responses"
            )
        text = self.responses[self._cursor]
        self._cursor += 1
        return BackendResponse(
            text=text,
            prompt_tokens=_approx_tokens(prompt),
            completion_tokens=_approx_tokens(text),
        )

    @classmethod
    def from_file(cls, path: Path | str) -> "ScriptedBackend":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, list) or not all(isinstance(x, str) for x in doc):
            raise GatewayError("scripted fixture must be a JSON array of strings")
        return cls(doc)


class HttpBackend:
    """Chat-completion wire format over HTTP."""

    def __init__(self, timeout: float = 120.0) -> None:
        self.timeout = timeout

    def send(self, prompt: str, endpoint: Endpoint) -> BackendResponse:
        import requests

        headers = {"Content-Type": "application/json"}
        if endpoint.credential:
            headers["Authorization"] = f"Bearer {endpoint.credential}"
        body = {
            "model": endpoint.model or "default",
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            response = requests.post(
                endpoint.base_url.rstrip("/") + "/chat/completions",
                json=body,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.Timeout as exc:
            raise TransientBackendError(f"timeout: {exc}", tokens_consumed=0) from exc
        except requests.ConnectionError as exc:
            raise TransientBackendError(f"connection: {exc}", tokens_consumed=0) from exc
        if response.status_code >= 500:
            raise TransientBackendError(f"server error {response.status_code}")
        if response.status_code != 200:
            raise GatewayError(f"endpoint returned {response.status_code}: {response.text[:200]}")
        doc = response.json()
        usage = doc.get("usage", {})
        text = doc["choices"][0]["message"]["content"]
        return BackendResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", _approx_tokens(prompt))),
            completion_tokens=int(usage.get("completion_tokens", _approx_tokens(text))),
        )


# -- gateway --------------------------------------------------------------------


@dataclass
class Completion:
    text: str
    endpoint: Endpoint
    total_tokens: int
    cost: float
    retries: int


@dataclass
class StructuredPayload:
    """Tolerant-reader result: declared fields plus preserved extras."""

    fields: dict[str, Any]
    extras: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.fields[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.fields.get(key, default)


_JSON_TYPES: dict[str, type | tuple[type, ...]] = {
    "string": str,
    "number": (int, float),
    "integer": int,
    "boolean": bool,
    "object": dict,
    "array": list,
}


def extract_json_object(text: str) -> dict[str, Any] | None:
    """First balanced JSON object in the text, or None."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        doc = json.loads(text[start : i + 1])
                    except json.JSONDecodeError:
                        break
                    return doc if isinstance(doc, dict) else None
        start = text.find("{", start + 1)
    return None


def validate_schema(doc: dict[str, Any], schema: dict[str, str]) -> tuple[StructuredPayload | None, str]:
    """Check required fields and types; unknown fields land in extras."""
    fields: dict[str, Any] = {}
    for name, type_name in schema.items():
        optional = type_name.endswith("?")
        base = type_name.rstrip("?")
        expected = _JSON_TYPES.get(base)
        if expected is None:
            raise ValueError(f"unknown schema type: {type_name!r}")
        if name not in doc:
            if optional:
                continue
            return None, f"missing required field {name!r}"
        value = doc[name]
        if base == "number" and isinstance(value, bool):
            return None, f"field {name!r} must be a number, got bool"
        if not isinstance(value, expected):
            return None, f"field {name!r} must be {base}, got {type(value).__name__}"
        fields[name] = value
    extras = {k: v for k, v in doc.items() if k not in schema}
    return StructuredPayload(fields=fields, extras=extras), ""


class Gateway:
    def __init__(
        self,
        endpoints: Sequence[Endpoint],
        backend: Any = None,
        backend_factory: Callable[[Endpoint], Any] | None = None,
        budget: Any = None,
        event_log: Any = None,
        retries_per_endpoint: int = DEFAULT_RETRIES_PER_ENDPOINT,
        base_delay: float = DEFAULT_BASE_DELAY,
        sleep_fn: Callable[[float], None] | None = None,
    ) -> None:
        if not endpoints:
            raise GatewayError("gateway needs at least one endpoint")
        if backend is None and backend_factory is None:
            backend_factory = lambda _endpoint: HttpBackend()  # noqa: E731
        self.endpoints = list(endpoints)
        self._backends = {
            i: (backend if backend is not None else backend_factory(e))
            for i, e in enumerate(self.endpoints)
        }
        self.budget = budget
        self.event_log = event_log
        self.retries_per_endpoint = retries_per_endpoint
        self.base_delay = base_delay
        if sleep_fn is not None:
            self._sleep = sleep_fn
        elif budget is not None and hasattr(budget.clock, "sleep"):
            self._sleep = budget.clock.sleep
        else:
            self._sleep = time.sleep
        self._cursor = 0

    @classmethod
    def scripted(
        cls,
        responses: Sequence[str] | ScriptedBackend,
        budget: Any = None,
        event_log: Any = None,
        unit_cost: float = 0.0,
    ) -> "Gateway":
        backend = responses if isinstance(responses, ScriptedBackend) else ScriptedBackend(responses)
        return cls(
            endpoints=[Endpoint(base_url="scripted://local", unit_cost=unit_cost)],
            backend=backend,
            budget=budget,
            event_log=event_log,
        )

    def _charge(self, endpoint: Endpoint, tokens: int, memo: str, iteration: int) -> float:
        # The event append sits in a finally block so the ledger and the
        # event stream agree even when the charge trips the spend limit.
        cost = tokens / 1000.0 * endpoint.unit_cost
        try:
            if self.budget is not None:
                self.budget.charge(cost, memo=memo, iteration=iteration)
        finally:
            if self.event_log is not None:
                self.event_log.append("charge", iteration=iteration, amount=cost, memo=memo)
        return cost

    def complete(self, request: LlmRequest) -> Completion:
        prompt = request.render()
        failures = [0] * len(self.endpoints)
        retries = 0
        while True:
            index = self._cursor % len(self.endpoints)
            self._cursor += 1
            if failures[index] >= self.retries_per_endpoint:
                continue  # this endpoint used up its attempts; rotate on
            endpoint = self.endpoints[index]
            try:
                response = self._backends[index].send(prompt, endpoint)
            except TransientBackendError as exc:
                failures[index] += 1
                if exc.tokens_consumed:
                    self._charge(
                        endpoint,
                        exc.tokens_consumed,
                        memo=f"llm:{request.template_id}:failed_attempt",
                        iteration=request.iteration,
                    )
                if all(f >= self.retries_per_endpoint for f in failures):
                    raise AllEndpointsFailed(
                        f"all {len(self.endpoints)} endpoint(s) failed "
                        f"{self.retries_per_endpoint} times: {exc}"
                    ) from exc
                retries += 1
                delay = retries * self.base_delay
                if self.event_log is not None:
                    self.event_log.append(
                        "llm_retry",
                        iteration=request.iteration,
                        delay=delay,
                        endpoint=endpoint.base_url,
                    )
                self._sleep(delay)
                continue
            cost = self._charge(
                endpoint,
                response.total_tokens,
                memo=f"llm:{request.template_id}",
                iteration=request.iteration,
            )
            return Completion(
                text=response.text,
                endpoint=endpoint,
                total_tokens=response.total_tokens,
                cost=cost,
                retries=retries,
            )

    def complete_structured(
        self, request: LlmRequest, schema: dict[str, str], repair_attempts: int = 2
    ) -> StructuredPayload:
        """Completion that must contain a JSON object matching the schema.

        On violation, up to repair_attempts follow-up requests quote the
        violation back to the model; then SchemaViolation.
        """
        violation = ""
        current = request
        for attempt in range(repair_attempts + 1):
            completion = self.complete(current)
            doc = extract_json_object(completion.text)
            if doc is None:
                violation = "no JSON object found in the reply"
            else:
                payload, violation = validate_schema(doc, schema)
                if payload is not None:
                    return payload
            if attempt < repair_attempts:
                current = LlmRequest(
                    template_id="repair",
                    variables={
                        "original": request.render(),
                        "violation": violation,
                        "schema": json.dumps(schema, sort_keys=True),
                    },
                    iteration=request.iteration,
                    context_cap=request.context_cap,
                )
        raise SchemaViolation(f"structured completion still invalid: {violation}")
