"""Trainer adapter contract.

An adapter is any executable honoring:

    adapter --config <file> --data <file> --out <dir> [--mini]

plus a `--describe` mode that prints a JSON self-description (legal
parameter ranges, supported modes). After training, <out>/loss.log holds
one line per step, `step <int> train_loss <float> [eval_loss <float>]`,
and <out>/manifest is a JSON artifact descriptor with a predict_cmd the
harness appends <eval_input_file> <predictions_file> to. Exit codes:
0 success, 2 data error, 3 resource error, 4 numerical error.

Adapters advertising a "baseline" mode also accept `--baseline` to emit a
manifest for the untuned model without training.
"""

from __future__ import annotations

import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .analysis import LossPoint

EXIT_OK = 0
EXIT_DATA_ERROR = 2
EXIT_RESOURCE_ERROR = 3
EXIT_NUMERICAL_ERROR = 4

_LOSS_LINE = re.compile(
    r"^step\s+(\d+)\s+train_loss\s+(\S+)(?:\s+eval_loss\s+(\S+))?\s*$"
)


@dataclass(frozen=True)
class AdapterRef:
    """Resolved adapter command; argv is the executable prefix, no shell."""

    argv: tuple[str, ...]
    name: str = "adapter"

    def describe_argv(self) -> list[str]:
        return [*self.argv, "--describe"]

    def train_argv(
        self, config: str, data: str, out: str, mini: bool = False, baseline: bool = False
    ) -> list[str]:
        cmd = [*self.argv, "--config", config, "--data", data, "--out", out]
        if mini:
            cmd.append("--mini")
        if baseline:
            cmd.append("--baseline")
        return cmd


@dataclass
class AdapterDescription:
    name: str
    modes: tuple[str, ...]
    ranges: dict[str, tuple[float, float]]
    raw: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "AdapterDescription":
        ranges = {}
        for key, bounds in (doc.get("ranges") or {}).items():
            if isinstance(bounds, (list, tuple)) and len(bounds) == 2:
                ranges[key] = (float(bounds[0]), float(bounds[1]))
        return cls(
            name=str(doc.get("name", "adapter")),
            modes=tuple(doc.get("modes", [])),
            ranges=ranges,
            raw=doc,
        )


def mock_trainer_ref() -> AdapterRef:
    from . import mock_trainer

    return AdapterRef(argv=(sys.executable, str(Path(mock_trainer.__file__).resolve())), name="mock")


def resolve_adapter(spec: str) -> AdapterRef:
    """Map a CLI --adapter value to a command: "mock", a script, or a binary."""
    if spec == "mock":
        return mock_trainer_ref()
    path = Path(spec)
    if path.suffix == ".py":
        return AdapterRef(argv=(sys.executable, str(path.resolve())), name=path.stem)
    if path.suffix in (".js", ".mjs", ".cjs"):
        return AdapterRef(argv=("node", str(path.resolve())), name=path.stem)
    return AdapterRef(argv=(str(path),), name=path.name or spec)


# -- output parsing -------------------------------------------------------------


def parse_loss_log(path: Path | str) -> list[LossPoint]:
    """Parse <out>/loss.log; raises ValueError on a malformed line."""
    points: list[LossPoint] = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        match = _LOSS_LINE.match(line.strip())
        if not match:
            raise ValueError(f"loss.log line {lineno} is malformed: {line!r}")
        step = int(match.group(1))
        train = float(match.group(2))
        eval_loss = float(match.group(3)) if match.group(3) is not None else None
        points.append(LossPoint(step=step, train_loss=train, eval_loss=eval_loss))
    return points


@dataclass
class Manifest:
    artifact_id: str
    predict_cmd: list[str]
    extras: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path | str) -> "Manifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValueError("manifest must be a JSON object")
        predict_cmd = doc.get("predict_cmd")
        if (
            not isinstance(predict_cmd, list)
            or not predict_cmd
            or not all(isinstance(x, str) for x in predict_cmd)
        ):
            raise ValueError("manifest predict_cmd must be a non-empty list of strings")
        extras = {k: v for k, v in doc.items() if k not in ("artifact_id", "predict_cmd")}
        return cls(
            artifact_id=str(doc.get("artifact_id", "")),
            predict_cmd=list(predict_cmd),
            extras=extras,
        )


def check_adapter_output(out_dir: Path | str) -> list[str]:
    """Contract checker for a finished training directory.

    Returns human-readable problems; empty means the directory conforms.
    Used against the bundled mock and any external adapter alike.
    """
    out = Path(out_dir)
    problems: list[str] = []
    loss_path = out / "loss.log"
    if not loss_path.is_file():
        problems.append("missing loss.log")
    else:
        try:
            points = parse_loss_log(loss_path)
            if not points:
                problems.append("loss.log has no data points")
            else:
                steps = [p.step for p in points]
                if steps != sorted(steps):
                    problems.append("loss.log steps are not non-decreasing")
                if any(not math.isfinite(p.train_loss) for p in points):
                    # a NaN log is still *parsable*; note it for the caller
                    problems.append("loss.log contains non-finite train losses")
        except ValueError as exc:
            problems.append(str(exc))
    manifest_path = out / "manifest"
    if not manifest_path.is_file():
        problems.append("missing manifest")
    else:
        try:
            Manifest.load(manifest_path)
        except (ValueError, json.JSONDecodeError) as exc:
            problems.append(f"manifest invalid: {exc}")
    return problems


def predict_argv(manifest: Manifest, eval_inputs: str, predictions_out: str) -> list[str]:
    return [*manifest.predict_cmd, eval_inputs, predictions_out]


__all__ = [
    "AdapterDescription",
    "AdapterRef",
    "EXIT_DATA_ERROR",
    "EXIT_NUMERICAL_ERROR",
    "EXIT_OK",
    "EXIT_RESOURCE_ERROR",
    "Manifest",
    "check_adapter_output",
    "mock_trainer_ref",
    "parse_loss_log",
    "predict_argv",
    "resolve_adapter",
]
