"""Command line entry point: ``gotflow {validate,graph,run,replay,init}``.

Exit codes: 0 success, 1 run-time failure (or validation errors found by
``validate``), 2 usage, validation or environment error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .backends import GenerationSettings, MockBackend, MockScript, OpenAICompatBackend, ReplayBackend
from .bundle import write_bundle
from .dsl import WorkflowSpec, parse_workflow
from .engine import RunConfig, replay_trace, run_workflow
from .errors import GotflowError, ParseError, PathError, RunError, TraceError, WorkflowInvalid
from .graph import Diagnostic, build_graph, export_dot, has_errors, validate_graph

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def check_workflow_text(text: str | bytes) -> tuple[WorkflowSpec | None, list[Diagnostic]]:
    """Parse and validate; a parse failure becomes a single error diagnostic."""
    try:
        spec = parse_workflow(text)
    except ParseError as exc:
        return None, [Diagnostic("error", "parse", exc.message, exc.node_id)]
    return spec, validate_graph(build_graph(spec))


def _read(path: str) -> bytes | None:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        _err(f"error: cannot read {path}: {exc.strerror or exc}")
        return None


def cmd_validate(args: argparse.Namespace) -> int:
    data = _read(args.workflow)
    if data is None:
        return EXIT_USAGE
    _, diags = check_workflow_text(data)
    for d in diags:
        _err(d.format())
    return EXIT_FAILED if has_errors(diags) else EXIT_OK


def cmd_graph(args: argparse.Namespace) -> int:
    data = _read(args.workflow)
    if data is None:
        return EXIT_USAGE
    try:
        spec = parse_workflow(data)
    except ParseError as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    dot = export_dot(build_graph(spec))
    if args.out:
        Path(args.out).write_text(dot, encoding="utf-8")
    else:
        sys.stdout.write(dot)
    return EXIT_OK


def _parse_env(pairs: list[str]) -> dict[str, str]:
    env = dict(os.environ)
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"--env expects KEY=VAL, got {pair!r}")
        env[key] = value
    return env


def _backend(args: argparse.Namespace):
    if args.backend == "mock":
        if not args.script:
            raise ValueError("--backend mock requires --script")
        return MockBackend(MockScript.load(args.script))
    if args.backend == "replay":
        if not args.cassette:
            raise ValueError("--backend replay requires --cassette")
        return ReplayBackend.from_file(args.cassette)
    return OpenAICompatBackend()


def _print_status(spec: WorkflowSpec, status: dict[str, str]) -> None:
    for node in spec.nodes:
        print(f"{status.get(node.id, 'pending')}\t{node.id}")


def cmd_run(args: argparse.Namespace) -> int:
    data = _read(args.workflow)
    if data is None:
        return EXIT_USAGE
    spec, diags = check_workflow_text(data)
    if spec is None or has_errors(diags):
        for d in diags:
            _err(d.format())
        return EXIT_USAGE
    try:
        env = _parse_env(args.env)
        settings = GenerationSettings(args.model, args.temperature, args.max_tokens, args.timeout)
        backend = _backend(args)
    except (ValueError, OSError) as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    config = RunConfig(
        max_concurrency=args.max_concurrency,
        output_dir=args.output_dir,
        env=env,
        settings=settings,
        base_dir=Path(args.workflow).resolve().parent,
    )
    try:
        trace = run_workflow(spec, backend, config)
    except RunError as exc:
        if exc.trace is not None:
            print(f"run_id\t{exc.trace.run_id}")
            _print_status(spec, exc.trace.status)
        _err(f"error: {exc}")
        return EXIT_FAILED
    except PathError as exc:
        _err(f"error: {exc}; pass it with --env {exc.variable}=...")
        return EXIT_USAGE
    except (WorkflowInvalid, GotflowError, OSError, ValueError) as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    print(f"run_id\t{trace.run_id}")
    _print_status(spec, trace.status)
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    if not Path(args.trace).is_file():
        _err(f"error: no trace file at {args.trace}")
        return EXIT_USAGE
    try:
        report = replay_trace(args.trace, args.output_dir)
    except (TraceError, ParseError, OSError) as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    if report.replayed is not None:
        print(f"run_id\t{report.replayed.run_id}")
    for line in report.differences:
        _err(f"mismatch: {line}")
    print("identical" if report.identical else "different")
    return EXIT_OK if report.identical else EXIT_FAILED


def cmd_init(args: argparse.Namespace) -> int:
    try:
        workflow = write_bundle(args.dir)
    except FileExistsError as exc:
        _err(f"error: {exc}; refusing to overwrite")
        return EXIT_USAGE
    root = Path(args.dir).resolve()
    print(workflow)
    _err(f"run it with: gotflow run {workflow} --backend mock --script {workflow.parent / 'mock_yes.json'} --env GF_ROOT={root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gotflow", description="Graph-of-thought workflow engine")
    parser.add_argument("-v", "--verbose", action="store_true", help="log engine activity to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a workflow and print diagnostics")
    p.add_argument("workflow")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("graph", help="export the workflow graph as DOT")
    p.add_argument("workflow")
    p.add_argument("--out", help="write DOT here instead of stdout")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("run", help="execute a workflow")
    p.add_argument("workflow")
    p.add_argument("--backend", choices=("mock", "replay", "http"), default="mock")
    p.add_argument("--script", help="mock script: JSON object of node id -> response ('*' = default)")
    p.add_argument("--cassette", help="cassette file for --backend replay")
    p.add_argument("--max-concurrency", type=int, default=1)
    p.add_argument("--env", action="append", default=[], metavar="KEY=VAL", help="path variable (repeatable)")
    p.add_argument("--output-dir", help="override the workflow's output_dir_path")
    p.add_argument("--model", default=GenerationSettings.model)
    p.add_argument("--temperature", type=float, default=GenerationSettings.temperature)
    p.add_argument("--max-tokens", type=int, default=GenerationSettings.max_tokens)
    p.add_argument("--timeout", type=float, default=GenerationSettings.timeout)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-run a recorded run from its cassette and compare")
    p.add_argument("trace")
    p.add_argument("--output-dir", help="where the replayed run is written (default: next to the original)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("init", help="write the Ads example bundle into an empty directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_init)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
