"""Deterministic mock trainer honoring the adapter contract.

The "model" is a lookup table over normalized training text: at predict
time an eval item is answered with the stored output of the first training
record whose normalized instruction+input *contains* the item's normalized
key, else with a fixed default. Exact-duplicate keys are excluded upstream
by leakage filtering, so coverage comes from richer phrasings that carry
the same content; validation scores are a pure function of that coverage.
The loss curve is a seeded exponential decay with noise, so runs are fully
reproducible without any learning stack.

Deliberately self-contained (stdlib only, no package imports): it runs the
way any external adapter would, as a plain subprocess.

    mock_trainer.py --config <file> --data <file> --out <dir> [--mini]
    mock_trainer.py --describe
    mock_trainer.py --config <file> --data <file> --out <dir> --baseline
    mock_trainer.py --predict <model.json> <eval_inputs.jsonl> <predictions.jsonl>

Exit codes: 0 ok, 2 data error, 3 resource error, 4 numerical error.

Fault injection for validation tests comes from a "mock" object in the
config file: {"loss": "nan"|"explode", "invalid_gradients": true,
"zero_batches": true, "sleep": <seconds>, "exit": <code>}.
"""

from __future__ import annotations

import argparse
import json
import math
import random
import re
import sys
import time
from pathlib import Path

DEFAULT_ANSWER = "unknown"

EXIT_OK = 0
EXIT_DATA_ERROR = 2
EXIT_RESOURCE_ERROR = 3
EXIT_NUMERICAL_ERROR = 4

_WS = re.compile(r"\s+")


def _norm(instruction: str, input_text: str = "") -> str:
    return _WS.sub(" ", f"{instruction} {input_text}".lower()).strip()


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        if isinstance(doc, dict):
            records.append(doc)
    return records


def describe() -> int:
    doc = {
        "name": "mock",
        "modes": ["describe", "mini", "baseline", "predict"],
        "ranges": {
            "learning_rate": [1e-6, 0.5],
            "batch_size": [1, 512],
            "grad_accumulation": [1, 64],
            "epochs": [1, 50],
            "max_steps": [1, 10000],
            "sequence_length_cap": [16, 32768],
            "eval_fraction": [0.01, 0.99],
        },
    }
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def _loss_curve(steps: int, seed: int, learning_rate: float, mock: dict) -> list[tuple[float, float]]:
    """Seeded exponential decay with mild noise; eval tracks train."""
    rng = random.Random(seed)
    start = 2.0 + rng.random()
    rate = min(0.5, max(0.05, learning_rate * 400.0))
    points = []
    for step in range(steps):
        base = start * math.exp(-rate * step)
        noise = (rng.random() - 0.5) * 0.02 * base
        train = max(0.01, base + noise)
        eval_loss = train + 0.05 * start / (step + 1.0)
        points.append((round(train, 6), round(eval_loss, 6)))
    if mock.get("loss") == "nan" and points:
        last = points[-1]
        points[-1] = (float("nan"), last[1])
    elif mock.get("loss") == "explode" and len(points) >= 2:
        prev = points[-2][0]
        points[-1] = (round(prev * 22.5, 6), points[-1][1])
    return points


def train(args: argparse.Namespace, mini: bool) -> int:
    config_path = Path(args.config)
    data_path = Path(args.data)
    out_dir = Path(args.out)
    try:
        config = json.loads(config_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    mock = config.get("mock") or {}
    if mock.get("sleep"):
        time.sleep(float(mock["sleep"]))
    if "exit" in mock:
        return int(mock["exit"])

    try:
        records = _read_jsonl(data_path)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read data: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    if not records:
        print("training set is empty", file=sys.stderr)
        return EXIT_DATA_ERROR

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output dir: {exc}", file=sys.stderr)
        return EXIT_RESOURCE_ERROR

    seed = int(config.get("seed", 0))
    learning_rate = float(config.get("learning_rate", 1e-4))
    batch_size = max(1, int(config.get("batch_size", 8)))

    if mini:
        records = records[:16]
        steps = min(2, max(1, math.ceil(len(records) / batch_size)))
    else:
        epochs = config.get("epochs") or 1
        max_steps = config.get("max_steps")
        steps_per_epoch = max(1, math.ceil(len(records) / batch_size))
        steps = int(max_steps) if max_steps else int(epochs) * steps_per_epoch
        steps = min(steps, 50)  # the curve is synthetic; cap the log size

    curve = _loss_curve(steps, seed=seed, learning_rate=learning_rate, mock=mock)
    if mock.get("zero_batches"):
        curve = []

    with (out_dir / "loss.log").open("w", encoding="utf-8") as fh:
        for step, (train_loss, eval_loss) in enumerate(curve):
            fh.write(f"step {step} train_loss {train_loss} eval_loss {eval_loss}\n")

    numerical_failure = mock.get("invalid_gradients") or mock.get("loss") in ("nan", "explode")
    if not mini or not numerical_failure:
        model = {
            "default": DEFAULT_ANSWER,
            "records": [
                {
                    "text": _norm(str(r.get("instruction", "")), str(r.get("input", ""))),
                    "output": str(r.get("output", "")),
                }
                for r in records
            ],
        }
        model_path = out_dir / "model.json"
        model_path.write_text(json.dumps(model, sort_keys=True), encoding="utf-8")
        manifest = {
            "artifact_id": f"mock-{seed}-{len(records)}",
            "trained_records": len(records),
            "predict_cmd": [
                sys.executable,
                str(Path(__file__).resolve()),
                "--predict",
                str(model_path.resolve()),
            ],
        }
        (out_dir / "manifest").write_text(
            json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
        )

    return EXIT_NUMERICAL_ERROR if numerical_failure else EXIT_OK


def baseline(args: argparse.Namespace) -> int:
    """Untuned model reference: an empty lookup table, default answers only."""
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output dir: {exc}", file=sys.stderr)
        return EXIT_RESOURCE_ERROR
    model_path = out_dir / "model.json"
    model_path.write_text(
        json.dumps({"default": DEFAULT_ANSWER, "records": []}, sort_keys=True), encoding="utf-8"
    )
    manifest = {
        "artifact_id": "mock-baseline",
        "trained_records": 0,
        "predict_cmd": [
            sys.executable,
            str(Path(__file__).resolve()),
            "--predict",
            str(model_path.resolve()),
        ],
    }
    (out_dir / "manifest").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    return EXIT_OK


def predict(model_file: str, eval_file: str, out_file: str) -> int:
    try:
        model = json.loads(Path(model_file).read_text(encoding="utf-8"))
        items = _read_jsonl(Path(eval_file))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read inputs: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR
    default = model.get("default", DEFAULT_ANSWER)
    table = model.get("records", [])
    with Path(out_file).open("w", encoding="utf-8") as fh:
        for item in items:
            key = _norm(str(item.get("instruction", "")), str(item.get("input", "")))
            answer = default
            if key:
                for row in table:
                    if key in row.get("text", ""):
                        answer = row.get("output", default)
                        break
            fh.write(
                json.dumps(
                    {"instance_id": item.get("instance_id"), "output": answer}, sort_keys=True
                )
                + "\n"
            )
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="deterministic mock trainer")
    parser.add_argument("--config")
    parser.add_argument("--data")
    parser.add_argument("--out")
    parser.add_argument("--mini", action="store_true")
    parser.add_argument("--baseline", action="store_true")
    parser.add_argument("--describe", action="store_true")
    parser.add_argument("--predict", nargs=3, metavar=("MODEL", "EVAL", "OUT"))
    args = parser.parse_args(argv)

    if args.describe:
        return describe()
    if args.predict:
        return predict(*args.predict)
    if args.baseline:
        if not args.out:
            parser.error("--baseline requires --out")
        return baseline(args)
    if not (args.config and args.data and args.out):
        parser.error("training requires --config, --data, and --out")
    return train(args, mini=args.mini)


if __name__ == "__main__":
    sys.exit(main())
