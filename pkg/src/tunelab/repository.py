"""Data repository: source catalog, record normalization, split management,
and declarative data strategies with leakage exclusion.

All downstream training data flows through `apply_strategy`, which is the
single place where filter rules, transforms, synthesis, leakage exclusion,
and the sample budget are enforced. Its accounting invariant:

    input_count == retained_count + sum(filtered_by_rule) +
                   excluded_by_leakage + unparsable_count

`retained_count` is the survivor count before budget sampling; the emitted
train set is additionally capped at the strategy's sample budget.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import (
    BudgetExceeded,
    DuplicateSourceId,
    EmptyResult,
    UnparsableFormat,
    UnparsableRecord,
    UnreadableSource,
)

SPLIT_CAP = 100

_WS = re.compile(r"\s+")


def normalization_key(instruction: str, input_text: str = "") -> str:
    """Lowercased, whitespace-collapsed concatenation of instruction + input.

    This is the identity used for duplicate detection and leakage exclusion.
    """
    return _WS.sub(" ", f"{instruction} {input_text}".lower()).strip()


@dataclass(frozen=True)
class DataRecord:
    """One training example in instruction/input/output form."""

    instruction: str
    input: str
    output: str
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def key(self) -> str:
        return normalization_key(self.instruction, self.input)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "instruction": self.instruction,
            "input": self.input,
            "output": self.output,
        }
        if self.meta:
            doc["meta"] = self.meta
        return doc


def normalize(raw: dict[str, Any], format_hint: str) -> DataRecord:
    """Map a raw parsed record into canonical instruction/input/output form.

    Raises UnparsableRecord for records missing the answer text; callers
    skip and count those rather than aborting the scan.
    """
    if not isinstance(raw, dict):
        raise UnparsableRecord(f"record is not a mapping: {raw!r}")
    if format_hint == "alpaca":
        instruction = str(raw.get("instruction", "") or "")
        input_text = str(raw.get("input", "") or "")
        output = str(raw.get("output", "") or "")
    elif format_hint == "qa":
        instruction = str(raw.get("q", "") or "")
        input_text = ""
        output = str(raw.get("a", "") or "")
    else:
        raise UnparsableFormat(f"unknown format hint: {format_hint!r}")
    if not instruction.strip():
        raise UnparsableRecord("record has no instruction/question text")
    if not output.strip():
        raise UnparsableRecord("record has no answer text")
    meta = raw.get("meta") if isinstance(raw.get("meta"), dict) else {}
    return DataRecord(instruction=instruction, input=input_text, output=output, meta=dict(meta))


@dataclass(frozen=True)
class DataSourceRef:
    """Pointer to one on-disk source the catalog can scan."""

    source_id: str
    path: str
    format_hint: str = "alpaca"  # "alpaca" (instruction/input/output) or "qa" (q/a)


@dataclass
class CatalogEntry:
    ref: DataSourceRef
    records: list[dict[str, Any]]  # raw containers; normalization happens per strategy
    record_count: int


class Catalog:
    """In-memory index of scanned sources, keyed by source_id."""

    def __init__(self) -> None:
        self._entries: dict[str, CatalogEntry] = {}

    def add(self, ref: DataSourceRef) -> CatalogEntry:
        if ref.source_id in self._entries:
            raise DuplicateSourceId(ref.source_id)
        path = Path(ref.path)
        if not path.is_file():
            raise UnreadableSource(f"{ref.source_id}: {ref.path} is not a readable file")
        records: list[dict[str, Any]] = []
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise UnreadableSource(f"{ref.source_id}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UnparsableFormat(
                    f"{ref.source_id}: line {lineno} is not valid JSON: {exc}"
                ) from exc
            records.append(doc)
        entry = CatalogEntry(ref=ref, records=records, record_count=len(records))
        self._entries[ref.source_id] = entry
        return entry

    def has(self, source_id: str) -> bool:
        return source_id in self._entries

    def get(self, source_id: str) -> CatalogEntry:
        if source_id not in self._entries:
            raise UnreadableSource(f"unknown source: {source_id}")
        return self._entries[source_id]

    def summary(self) -> dict[str, int]:
        return {sid: e.record_count for sid, e in sorted(self._entries.items())}


def catalog_sources(refs: Iterable[DataSourceRef]) -> Catalog:
    catalog = Catalog()
    for ref in refs:
        catalog.add(ref)
    return catalog


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitManifest:
    """Held-out index sets over a source's filtered instances.

    val and test are disjoint, each of size min(SPLIT_CAP, n // 2), drawn
    without replacement by a seeded shuffle so the manifest is reproducible
    from (n, seed) alone.
    """

    n: int
    seed: int
    val_indices: tuple[int, ...]
    test_indices: tuple[int, ...]

    def to_json(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "seed": self.seed,
            "val_indices": list(self.val_indices),
            "test_indices": list(self.test_indices),
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "SplitManifest":
        return cls(
            n=int(doc["n"]),
            seed=int(doc["seed"]),
            val_indices=tuple(int(i) for i in doc["val_indices"]),
            test_indices=tuple(int(i) for i in doc["test_indices"]),
        )


def make_splits(n: int, seed: int) -> SplitManifest:
    if n < 2:
        raise ValueError(f"need at least 2 instances to split, got {n}")
    size = min(SPLIT_CAP, n // 2)
    indices = list(range(n))
    random.Random(seed).shuffle(indices)
    val = tuple(sorted(indices[:size]))
    test = tuple(sorted(indices[size : 2 * size]))
    return SplitManifest(n=n, seed=seed, val_indices=val, test_indices=test)


# -- strategies ---------------------------------------------------------------

_FILTER_OPS: dict[str, Callable[[str, Any], bool]] = {
    "contains": lambda v, arg: str(arg) in v,
    "not_contains": lambda v, arg: str(arg) not in v,
    "equals": lambda v, arg: v == str(arg),
    "not_equals": lambda v, arg: v != str(arg),
    "min_len": lambda v, arg: len(v) >= int(arg),
    "max_len": lambda v, arg: len(v) <= int(arg),
    "regex": lambda v, arg: re.search(str(arg), v) is not None,
}

_FIELDS = ("instruction", "input", "output")

SAMPLING_MODES = ("uniform", "quality-first", "difficulty-stratified")


def _field_value(record: DataRecord, fieldname: str) -> str:
    if fieldname in _FIELDS:
        return getattr(record, fieldname)
    if fieldname.startswith("meta."):
        return str(record.meta.get(fieldname[5:], ""))
    raise ValueError(f"unknown record field: {fieldname!r}")


@dataclass(frozen=True)
class FilterRule:
    """Declarative predicate over one record field; op from _FILTER_OPS."""

    field: str
    op: str
    value: Any

    def __post_init__(self) -> None:
        if self.op not in _FILTER_OPS:
            raise ValueError(f"unknown filter op: {self.op!r}")
        _field_value(DataRecord("x", "", "x"), self.field)  # validates field name

    def matches(self, record: DataRecord) -> bool:
        return _FILTER_OPS[self.op](_field_value(record, self.field), self.value)

    def describe(self) -> str:
        return f"{self.field} {self.op} {self.value!r}"


@dataclass(frozen=True)
class TransformRule:
    """Declarative record rewrite: template substitution, field mapping,
    or truncation. Transforms are count-neutral."""

    kind: str  # "template" | "map_field" | "truncate"
    field: str = ""
    template: str = ""
    source: str = ""
    max_chars: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("template", "map_field", "truncate"):
            raise ValueError(f"unknown transform kind: {self.kind!r}")
        if self.field not in _FIELDS:
            raise ValueError(f"transforms may only target {_FIELDS}, got {self.field!r}")

    def apply(self, record: DataRecord) -> DataRecord:
        parts = record.to_json()
        parts.setdefault("meta", record.meta)
        if self.kind == "template":
            new_value = self.template.format(
                instruction=record.instruction, input=record.input, output=record.output
            )
        elif self.kind == "map_field":
            new_value = _field_value(record, self.source)
        else:  # truncate
            new_value = _field_value(record, self.field)[: self.max_chars]
        parts[self.field] = new_value
        return DataRecord(
            instruction=parts["instruction"],
            input=parts["input"],
            output=parts["output"],
            meta=dict(parts.get("meta") or {}),
        )


@dataclass(frozen=True)
class SynthesisRequest:
    """Ask the gateway to rewrite targeted records (CoT-style augmentation).

    Every request carries an outcome check; synthesized text failing the
    check is dropped and counted, never silently kept.
    """

    template_id: str
    target: FilterRule  # which retained records to rewrite
    validation_rule: FilterRule

    def __post_init__(self) -> None:
        if self.validation_rule is None:  # defensive; dataclass requires the arg
            raise ValueError("synthesis requests must carry a validation rule")


@dataclass(frozen=True)
class DataStrategy:
    """One iteration's declarative data recipe."""

    source_selection: tuple[str, ...]
    filter_rules: tuple[FilterRule, ...] = ()
    transform_rules: tuple[TransformRule, ...] = ()
    sample_budget: int | None = None
    sampling_mode: str = "uniform"
    synthesis_requests: tuple[SynthesisRequest, ...] = ()

    def __post_init__(self) -> None:
        if not self.source_selection:
            raise ValueError("strategy must select at least one source")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode: {self.sampling_mode!r}")
        if self.sample_budget is not None and self.sample_budget < 1:
            raise ValueError("sample_budget must be positive")

    def to_json(self) -> dict[str, Any]:
        return {
            "source_selection": list(self.source_selection),
            "filter_rules": [
                {"field": r.field, "op": r.op, "value": r.value} for r in self.filter_rules
            ],
            "transform_rules": [
                {
                    "kind": t.kind,
                    "field": t.field,
                    "template": t.template,
                    "source": t.source,
                    "max_chars": t.max_chars,
                }
                for t in self.transform_rules
            ],
            "sample_budget": self.sample_budget,
            "sampling_mode": self.sampling_mode,
            "synthesis_requests": [
                {
                    "template_id": s.template_id,
                    "target": {"field": s.target.field, "op": s.target.op, "value": s.target.value},
                    "validation_rule": {
                        "field": s.validation_rule.field,
                        "op": s.validation_rule.op,
                        "value": s.validation_rule.value,
                    },
                }
                for s in self.synthesis_requests
            ],
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "DataStrategy":
        def _rule(d: dict[str, Any]) -> FilterRule:
            return FilterRule(field=d["field"], op=d["op"], value=d["value"])

        synth = []
        for s in doc.get("synthesis_requests", []) or []:
            if "validation_rule" not in s or not s["validation_rule"]:
                raise ValueError("synthesis request without a validation rule")
            synth.append(
                SynthesisRequest(
                    template_id=s["template_id"],
                    target=_rule(s["target"]),
                    validation_rule=_rule(s["validation_rule"]),
                )
            )
        return cls(
            source_selection=tuple(doc["source_selection"]),
            filter_rules=tuple(_rule(r) for r in doc.get("filter_rules", []) or []),
            transform_rules=tuple(
                TransformRule(
                    kind=t["kind"],
                    field=t.get("field", ""),
                    template=t.get("template", ""),
                    source=t.get("source", ""),
                    max_chars=int(t.get("max_chars", 0)),
                )
                for t in doc.get("transform_rules", []) or []
            ),
            sample_budget=doc.get("sample_budget"),
            sampling_mode=doc.get("sampling_mode", "uniform"),
            synthesis_requests=tuple(synth),
        )


@dataclass
class ProcessingStats:
    """Bookkeeping for one apply_strategy call; conservation is checked
    at construction time so a violated invariant fails loudly."""

    input_count: int
    retained_count: int
    filtered_by_rule: dict[str, int]
    excluded_by_leakage: int
    unparsable_count: int
    emitted_count: int
    synthesized_count: int = 0

    def __post_init__(self) -> None:
        accounted = (
            self.retained_count
            + sum(self.filtered_by_rule.values())
            + self.excluded_by_leakage
            + self.unparsable_count
        )
        if accounted != self.input_count:
            raise AssertionError(
                f"stats conservation violated: input={self.input_count} accounted={accounted}"
            )

    @property
    def retention_ratio(self) -> float:
        return self.retained_count / self.input_count if self.input_count else 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "input_count": self.input_count,
            "retained_count": self.retained_count,
            "filtered_by_rule": dict(self.filtered_by_rule),
            "excluded_by_leakage": self.excluded_by_leakage,
            "unparsable_count": self.unparsable_count,
            "emitted_count": self.emitted_count,
            "synthesized_count": self.synthesized_count,
            "retention_ratio": self.retention_ratio,
        }


@dataclass
class TrainSet:
    records: list[DataRecord]
    stats: ProcessingStats

    def write_jsonl(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
        return path


def _sample(records: list[DataRecord], budget: int, mode: str, seed: int) -> list[DataRecord]:
    """Budget sampling. Artifact definitions:

    uniform: seeded draw without replacement, catalog order preserved.
    quality-first: longest outputs first (length is the quality proxy here),
        stable on catalog order.
    difficulty-stratified: instruction-length terciles, proportional seeded
        draw from each stratum.
    """
    if len(records) <= budget:
        return list(records)
    rng = random.Random(seed)
    if mode == "uniform":
        picked = sorted(rng.sample(range(len(records)), budget))
        return [records[i] for i in picked]
    if mode == "quality-first":
        order = sorted(range(len(records)), key=lambda i: (-len(records[i].output), i))
        return [records[i] for i in sorted(order[:budget])]
    # difficulty-stratified
    order = sorted(range(len(records)), key=lambda i: (len(records[i].instruction), i))
    third = max(1, len(order) // 3)
    strata = [order[:third], order[third : 2 * third], order[2 * third :]]
    strata = [s for s in strata if s]
    quotas = [budget // len(strata)] * len(strata)
    for i in range(budget - sum(quotas)):
        quotas[i % len(strata)] += 1
    picked: list[int] = []
    for stratum, quota in zip(strata, quotas):
        take = min(quota, len(stratum))
        picked.extend(rng.sample(stratum, take))
    # top up from leftovers if a stratum was short
    if len(picked) < budget:
        leftovers = [i for i in order if i not in set(picked)]
        picked.extend(rng.sample(leftovers, budget - len(picked)))
    return [records[i] for i in sorted(picked)]


def apply_strategy(
    strategy: DataStrategy,
    catalog: Catalog,
    exclusion: set[str],
    seed: int,
    max_train_samples: int,
    synthesizer: Callable[[str, DataRecord], str] | None = None,
) -> TrainSet:
    """Materialize a strategy into a train set.

    Pipeline order: normalize -> filter rules (in order) -> transforms ->
    synthesis -> leakage exclusion -> budget sampling. Leakage runs after
    every content rewrite so exclusion applies to the keys actually emitted.

    exclusion must already contain all val/test normalization keys for the
    task; records whose final key lands in it are dropped and counted.

    Raises BudgetExceeded when the strategy asks for more than
    max_train_samples (rejected, never truncated) and EmptyResult when
    nothing survives.
    """
    budget = strategy.sample_budget if strategy.sample_budget is not None else max_train_samples
    if budget > max_train_samples:
        raise BudgetExceeded(
            f"strategy sample_budget {budget} exceeds task cap {max_train_samples}"
        )
    if strategy.synthesis_requests and synthesizer is None:
        raise ValueError("strategy has synthesis requests but no synthesizer was provided")

    input_count = 0
    unparsable = 0
    filtered: dict[str, int] = {}
    survivors: list[DataRecord] = []

    for source_id in strategy.source_selection:
        entry = catalog.get(source_id)
        for raw in entry.records:
            input_count += 1
            try:
                record = normalize(raw, entry.ref.format_hint)
            except UnparsableRecord:
                unparsable += 1
                continue
            dropped = False
            for rule in strategy.filter_rules:
                if not rule.matches(record):
                    name = rule.describe()
                    filtered[name] = filtered.get(name, 0) + 1
                    dropped = True
                    break
            if dropped:
                continue
            for transform in strategy.transform_rules:
                record = transform.apply(record)
            survivors.append(record)

    synthesized = 0
    if strategy.synthesis_requests and synthesizer is not None:
        rewritten: list[DataRecord] = []
        for record in survivors:
            request = next(
                (s for s in strategy.synthesis_requests if s.target.matches(record)), None
            )
            if request is None:
                rewritten.append(record)
                continue
            new_output = synthesizer(request.template_id, record)
            candidate = DataRecord(
                instruction=record.instruction,
                input=record.input,
                output=new_output,
                meta={**record.meta, "synthesized": True},
            )
            if request.validation_rule.matches(candidate):
                synthesized += 1
                rewritten.append(candidate)
            else:
                name = f"synthesis:{request.template_id}"
                filtered[name] = filtered.get(name, 0) + 1
        survivors = rewritten

    leaked = sum(1 for r in survivors if r.key in exclusion)
    survivors = [r for r in survivors if r.key not in exclusion]

    stats = ProcessingStats(
        input_count=input_count,
        retained_count=len(survivors),
        filtered_by_rule=filtered,
        excluded_by_leakage=leaked,
        unparsable_count=unparsable,
        emitted_count=0,
        synthesized_count=synthesized,
    )
    if not survivors:
        err = EmptyResult("strategy retained zero records")
        err.stats = stats  # callers surface the accounting to the validator
        raise err

    emitted = _sample(survivors, budget, strategy.sampling_mode, seed)
    stats.emitted_count = len(emitted)
    return TrainSet(records=emitted, stats=stats)


def load_jsonl_records(path: Path | str) -> list[DataRecord]:
    """Read an instruction/input/output train-set file back into records."""
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        records.append(normalize(json.loads(line), "alpaca"))
    return records
