"""Command-line front end.

Subcommands:
    run             drive the improvement loop on one or more tasks
    validate        run the fail-fast validation gate on a config + dataset
    score           score a predictions file against a gold file
    report          render a run report from its event stream
    register        check task files against a catalog and list what registers
    check-adapter   probe an adapter for contract compliance
    serve           read-only HTTP facade over tasks and run reports

`tunelab run --demo` exercises the whole loop offline using the bundled
fixture task, a scripted plan sequence, and the built-in mock adapter.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from .adapters import AdapterRef, check_adapter_output, resolve_adapter
from .errors import HarnessError, MissingGold, StorageFailure
from .evaluation import score_files
from .events import read_events, telemetry_from_events
from .gateway import Gateway, ScriptedBackend, load_endpoint_config
from .loop import Runner
from .registry import TaskRegistry, TaskSpec, load_task_file
from .repository import Catalog, DataSourceRef
from .sandbox import LogicalClock, SystemClock, create_workspace
from .validator import TrainingConfig, progressive_validate

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORTED = 2
EXIT_WARNINGS = 10
EXIT_HARD_FAIL = 20


# -- loading ------------------------------------------------------------------


def load_catalog_dir(directory: Path) -> Catalog:
    """Build a catalog from a directory of sources.

    A catalog.json manifest ([{source_id, path, format_hint}]) wins when
    present; otherwise every *.jsonl file registers under its stem with a
    sniffed format hint.
    """
    catalog = Catalog()
    manifest = directory / "catalog.json"
    if manifest.is_file():
        for row in json.loads(manifest.read_text(encoding="utf-8")):
            catalog.add(
                DataSourceRef(
                    source_id=row["source_id"],
                    path=str(directory / row["path"]),
                    format_hint=row.get("format_hint", "alpaca"),
                )
            )
        return catalog
    for path in sorted(directory.glob("*.jsonl")):
        catalog.add(
            DataSourceRef(source_id=path.stem, path=str(path), format_hint=_sniff_hint(path))
        )
    return catalog


def _sniff_hint(path: Path) -> str:
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            return "alpaca"
        if isinstance(doc, dict) and ("q" in doc or "question" in doc):
            return "qa"
        return "alpaca"
    return "alpaca"


def demo_root() -> Path:
    return Path(str(resources.files("tunelab").joinpath("fixtures", "demo")))


def _build_gateway(spec: str) -> Gateway:
    kind, _, arg = spec.partition(":")
    if kind == "scripted":
        if not arg:
            raise HarnessError("scripted gateway needs a file: --llm scripted:<file>")
        return Gateway.scripted(ScriptedBackend.from_file(arg))
    if kind == "endpoints":
        if not arg:
            raise HarnessError("endpoint gateway needs a config: --llm endpoints:<file>")
        return Gateway(endpoints=load_endpoint_config(arg))
    raise HarnessError(f"unknown --llm spec {spec!r}; use scripted:<file> or endpoints:<file>")


# -- run ------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    if args.demo:
        root = demo_root()
        task_files = [root / "task.json"]
        catalog_dir = root / "sources"
        llm_spec = args.llm or f"scripted:{root / 'script.json'}"
        max_iterations = args.max_iterations if args.max_iterations is not None else 5
    else:
        if not args.task:
            print("run: at least one --task file is required (or --demo)", file=sys.stderr)
            return EXIT_CONFIG
        if not args.catalog:
            print("run: --catalog directory is required (or --demo)", file=sys.stderr)
            return EXIT_CONFIG
        if not args.llm:
            print("run: --llm is required (or --demo)", file=sys.stderr)
            return EXIT_CONFIG
        task_files = [Path(t) for t in args.task]
        catalog_dir = Path(args.catalog)
        llm_spec = args.llm
        max_iterations = args.max_iterations

    try:
        catalog = load_catalog_dir(catalog_dir)
        registry = TaskRegistry()
        tasks: list[TaskSpec] = []
        for task_file in task_files:
            spec, raw = load_task_file(task_file)
            registry.register_task(spec, catalog, raw=raw)
            tasks.append(spec)
        adapter = resolve_adapter(args.adapter)
    except (HarnessError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"run: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    worst = EXIT_OK
    for task in tasks:
        try:
            gateway = _build_gateway(llm_spec)
        except (HarnessError, OSError, json.JSONDecodeError) as exc:
            print(f"run: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        clock = LogicalClock() if args.clock == "logical" else SystemClock()
        runner = Runner(
            task=task,
            catalog=catalog,
            adapter=adapter,
            gateway=gateway,
            runs_dir=args.out,
            seed=args.seed,
            clock=clock,
            catalog_dir=catalog_dir,
            wall_clock_limit=args.wall_clock,
            max_train_samples=args.max_samples,
            max_iterations=max_iterations,
            spend_limit=args.spend_limit,
        )
        report = runner.run()
        print(
            f"{report['run_id']}: {report['status']}"
            f" loops={report['telemetry']['loops']}"
            f" best={report['best_score']}"
            f" test={report['final_test']['aggregate'] if report['final_test'] else None}"
        )
        if report["status"] == "aborted":
            worst = max(worst, EXIT_ABORTED)
    return worst


# -- validate --------------------------------------------------------------------


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        config_doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        config = TrainingConfig.from_json(config_doc)
        data_path = Path(args.data)
        adapter = resolve_adapter(args.adapter)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"validate: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    mounts = (Path(adapter.argv[-1]).parent.resolve(), data_path.parent.resolve())
    workspace = create_workspace(args.out, "validate", "check", read_only_mounts=mounts)
    report = progressive_validate(
        config,
        data_path,
        adapter,
        workspace,
        requires_reasoning=args.requires_reasoning,
    )
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    if report.verdict == "hard_fail":
        return EXIT_HARD_FAIL
    if report.verdict == "pass_with_warnings":
        return EXIT_WARNINGS
    return EXIT_OK


# -- score -----------------------------------------------------------------------


def cmd_score(args: argparse.Namespace) -> int:
    try:
        aggregate = score_files(args.metric, args.predictions, args.gold)
    except MissingGold as exc:
        print(f"score: missing gold: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HarnessError, OSError, json.JSONDecodeError) as exc:
        print(f"score: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{aggregate:.6f}")
    return EXIT_OK


# -- report -----------------------------------------------------------------------


def render_report(events_path: Path) -> str:
    events = read_events(events_path)
    telemetry = telemetry_from_events(events)
    lines = []
    for event in events:
        if event.event == "run_started":
            lines.append(
                f"run: {event.run_id} task: {event.detail.get('task_id')} "
                f"seed: {event.detail.get('seed')}"
            )
    lines.append(f"loops: {telemetry['loops']}")
    lines.append(f"improve_rate: {telemetry['improve_rate'] * 100:g}%")
    lines.append(f"effective_iterations: {telemetry['effective_iterations']}")
    lines.append(f"total_cost: ${telemetry['total_cost']:g}")
    for event in events:
        if event.event == "decision":
            score = event.detail.get("score")
            shown = f"{score:.6f}" if isinstance(score, (int, float)) else "-"
            lines.append(f"  iteration {event.iteration}: {event.detail['decision']} score={shown}")
        elif event.event == "best_updated":
            lines.append(f"  best -> iteration {event.iteration} ({event.detail['score']:.6f})")
        elif event.event == "test_submitted":
            lines.append(f"final_test: {event.detail['aggregate']:.6f}")
        elif event.event == "run_finalized":
            lines.append(f"status: {event.detail.get('status')}")
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    target = Path(args.run_dir)
    events_path = target if target.is_file() else target / "events.jsonl"
    try:
        print(render_report(events_path))
    except StorageFailure as exc:
        print(f"report: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"report: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


# -- register ------------------------------------------------------------------------


def cmd_register(args: argparse.Namespace) -> int:
    try:
        catalog = load_catalog_dir(Path(args.catalog))
        registry = TaskRegistry()
        for task_file in args.task_files:
            spec, raw = load_task_file(task_file)
            registry.register_task(spec, catalog, raw=raw)
            print(f"registered: {spec.task_id}")
    except (HarnessError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"register: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


# -- check-adapter ----------------------------------------------------------------------


def cmd_check_adapter(args: argparse.Namespace) -> int:
    try:
        adapter = resolve_adapter(args.adapter)
    except (HarnessError, ValueError) as exc:
        print(f"check-adapter: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = probe_adapter(adapter, Path(args.out))
    if problems:
        for problem in problems:
            print(f"FAIL {problem}")
        return EXIT_CONFIG
    print("ok: describe + mini run + output contract")
    return EXIT_OK


def probe_adapter(adapter: AdapterRef, out_root: Path) -> list[str]:
    """Describe the adapter, run a two-step mini train, check its artifacts."""
    import subprocess

    problems: list[str] = []
    try:
        described = subprocess.run(
            adapter.describe_argv(), capture_output=True, text=True, timeout=60
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        return [f"--describe did not run: {exc}"]
    if described.returncode != 0:
        problems.append(f"--describe exited {described.returncode}")
    else:
        try:
            doc = json.loads(described.stdout)
            if "name" not in doc:
                problems.append("--describe JSON lacks a name")
        except json.JSONDecodeError:
            problems.append("--describe output is not JSON")

    workspace = create_workspace(out_root, "check-adapter", "probe")
    data_path = workspace.path("train.jsonl")
    rows = [
        {"instruction": "say alpha", "input": "", "output": "alpha"},
        {"instruction": "say beta", "input": "", "output": "beta"},
    ]
    data_path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    config_path = workspace.path("config.json")
    config_path.write_text(
        json.dumps(TrainingConfig(epochs=None, max_steps=2).to_json()), encoding="utf-8"
    )
    out_dir = workspace.path("out")
    try:
        ran = subprocess.run(
            adapter.train_argv(str(config_path), str(data_path), str(out_dir), mini=True),
            capture_output=True,
            text=True,
            timeout=120,
        )
    except (OSError, subprocess.TimeoutExpired) as exc:
        problems.append(f"mini run did not complete: {exc}")
        return problems
    if ran.returncode != 0:
        problems.append(f"mini run exited {ran.returncode}: {ran.stderr.strip()[:160]}")
        return problems
    problems.extend(check_adapter_output(out_dir))
    return problems


# -- serve ---------------------------------------------------------------------------------


def build_server(
    host: str,
    port: int,
    registry: TaskRegistry,
    runs_dir: Path,
):
    """ThreadingHTTPServer serving GET /tasks/{id}/{facet} and
    GET /runs/{run_id}/report from the registry and runs directory."""
    from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

    from .errors import UnknownFacet, UnknownTask

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *_: Any) -> None:
            pass  # keep stdout clean; the event log is the audit trail

        def _send(self, status: int, payload: dict[str, Any] | list[Any]) -> None:
            body = json.dumps(payload, indent=2, sort_keys=True).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self) -> None:  # noqa: N802 (http.server API)
            parts = [p for p in self.path.split("/") if p]
            if parts == ["tasks"]:
                self._send(200, registry.task_ids())
                return
            if len(parts) == 2 and parts[0] == "tasks":
                try:
                    self._send(200, json.loads(registry.raw_spec(parts[1])))
                except UnknownTask:
                    self._send(404, {"error": f"unknown task: {parts[1]}"})
                return
            if len(parts) == 3 and parts[0] == "tasks":
                try:
                    self._send(200, registry.query_meta(parts[1], parts[2]))
                except UnknownTask:
                    self._send(404, {"error": f"unknown task: {parts[1]}"})
                except UnknownFacet:
                    self._send(404, {"error": f"unknown facet: {parts[2]}"})
                return
            if len(parts) == 3 and parts[0] == "runs" and parts[2] == "report":
                report_path = runs_dir / parts[1] / "report.json"
                if report_path.is_file():
                    self._send(200, json.loads(report_path.read_text(encoding="utf-8")))
                else:
                    self._send(404, {"error": f"no report for run: {parts[1]}"})
                return
            self._send(404, {"error": f"unknown path: {self.path}"})

    return ThreadingHTTPServer((host, port), Handler)


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        catalog = load_catalog_dir(Path(args.catalog)) if args.catalog else Catalog()
        registry = TaskRegistry()
        for task_file in args.task or []:
            spec, raw = load_task_file(task_file)
            registry.register_task(spec, catalog, raw=raw)
    except (HarnessError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"serve: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    server = build_server(args.host, args.port, registry, Path(args.out))
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tunelab")
    parser.add_argument("--version", action="version", version="%(prog)s 0.1.0")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="drive the improvement loop")
    run.add_argument("--task", action="append", help="task spec file (repeatable)")
    run.add_argument("--catalog", help="directory of data sources")
    run.add_argument("--adapter", default="mock", help="adapter spec (default: mock)")
    run.add_argument("--llm", help="scripted:<file> or endpoints:<file>")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--wall-clock", type=float, default=None, help="seconds")
    run.add_argument("--max-samples", type=int, default=None)
    run.add_argument("--max-iterations", type=int, default=None)
    run.add_argument("--spend-limit", type=float, default=None)
    run.add_argument("--out", default="runs", help="runs directory (default: ./runs)")
    run.add_argument("--clock", choices=("system", "logical"), default="system")
    run.add_argument("--demo", action="store_true", help="use the bundled demo fixtures")
    run.set_defaults(func=cmd_run)

    validate = sub.add_parser("validate", help="run the validation gate")
    validate.add_argument("--config", required=True)
    validate.add_argument("--data", required=True)
    validate.add_argument("--adapter", default="mock")
    validate.add_argument("--out", default="runs")
    validate.add_argument("--requires-reasoning", action="store_true")
    validate.set_defaults(func=cmd_validate)

    score = sub.add_parser("score", help="score predictions offline")
    score.add_argument("--predictions", required=True)
    score.add_argument("--gold", required=True)
    score.add_argument("--metric", default="accuracy")
    score.set_defaults(func=cmd_score)

    report = sub.add_parser("report", help="render a run report from its events")
    report.add_argument("run_dir", help="run directory or events.jsonl path")
    report.set_defaults(func=cmd_report)

    register = sub.add_parser("register", help="validate task files against a catalog")
    register.add_argument("task_files", nargs="+")
    register.add_argument("--catalog", required=True)
    register.set_defaults(func=cmd_register)

    check = sub.add_parser("check-adapter", help="probe an adapter for contract compliance")
    check.add_argument("--adapter", required=True)
    check.add_argument("--out", default="runs")
    check.set_defaults(func=cmd_check_adapter)

    serve = sub.add_parser("serve", help="read-only HTTP facade")
    serve.add_argument("--task", action="append")
    serve.add_argument("--catalog")
    serve.add_argument("--out", default="runs", help="runs directory")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8337)
    serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
