"""Workflow execution: scheduling, prompt rendering, output binding and routing."""

from __future__ import annotations

import logging
import os
import threading
import uuid
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

from .backends import GenerationSettings, LLMBackend, RecordingBackend, ReplayBackend
from .dsl import (
    Combinator,
    Condition,
    ConditionalRouting,
    FlowNode,
    ForwardPath,
    NodeKind,
    Operator,
    OutputKind,
    ParamKind,
    WorkflowSpec,
    expand_path_variables,
    load_parameter_file,
    parse_workflow,
    path_variables,
    serialize_workflow,
    spec_digest,
)
from .errors import BindingError, EvalError, GotflowError, RenderError, RunError, TraceError, WorkflowInvalid
from .graph import WorkflowGraph, build_graph, has_errors, topological_order, validate_graph
from .store import (
    CASSETTE_FILE,
    TRACE_FILE,
    WORKFLOW_FILE,
    Binding,
    Decision,
    NodeResult,
    RunTrace,
    SkipMarker,
    TraceWriter,
    load_trace,
    sha256_bytes,
    step_lines,
    write_output_file,
)
from .template import ParameterScope, render_template

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    max_concurrency: int = 1
    output_dir: str | os.PathLike | None = None
    env: Mapping[str, str] | None = None  # None means the process environment
    settings: GenerationSettings = field(default_factory=GenerationSettings)
    base_dir: str | os.PathLike | None = None  # relative paths resolve here; default cwd
    record_cassette: bool = True

    def resolved_env(self) -> Mapping[str, str]:
        return dict(os.environ) if self.env is None else self.env


class RunState:
    """Mutable context of one run. Variable writes are single-assignment."""

    def __init__(
        self,
        spec: WorkflowSpec,
        output_dir: Path,
        parameter_files: tuple[Mapping[str, str], ...] = (),
        prompt_paths: Mapping[str, Path] | None = None,
    ) -> None:
        self.spec = spec
        self.output_dir = output_dir
        self.parameter_files = parameter_files
        self.prompt_paths = dict(prompt_paths or {})
        self.variable_store: dict[str, str] = {}
        self.node_status: dict[str, str] = {n.id: "pending" for n in spec.nodes}
        self.frontier: set[str] = set()
        self.declared_writers = {name for n in spec.nodes for name in n.written_variables}
        self._lock = threading.Lock()

    def write_variable(self, name: str, value: str) -> None:
        with self._lock:
            if name in self.variable_store:
                raise BindingError(f"variable '{name}' is already bound")
            self.variable_store[name] = value

    def snapshot(self) -> dict[str, str]:
        with self._lock:
            return dict(self.variable_store)

    def scope_for(self, node: FlowNode) -> ParameterScope:
        literals = {p.name: p.value for p in node.input_parameters if p.kind is ParamKind.LITERAL}
        return ParameterScope(literals, self.snapshot(), self.parameter_files)


# --------------------------------------------------------------------------- conditions

_ASCII_WS = " \t\n\r\x0b\x0c"


def normalize_answer(text: str) -> str:
    text = text.strip(_ASCII_WS)
    if text.endswith("."):
        text = text[:-1]
    return text.casefold()


def evaluate_condition(cond: Condition, state: RunState | Mapping[str, str]) -> bool:
    store = state.variable_store if isinstance(state, RunState) else state
    if cond.composed:
        if cond.combinator is Combinator.ALL:
            return all(evaluate_condition(c, store) for c in cond.children)
        return any(evaluate_condition(c, store) for c in cond.children)
    name = cond.data_source.name
    if name not in store:
        raise EvalError(name)
    left = normalize_answer(store[name])
    right = normalize_answer(cond.operand)
    if cond.operator is Operator.EQUAL:
        return left == right
    if cond.operator is Operator.NOT_EQUAL:
        return left != right
    return right in left


def select_forward_paths(result: bool, paths: tuple[ForwardPath, ...] | list[ForwardPath]) -> list[str]:
    for path in paths:
        if path.condition_result is result:
            return list(path.next_nodes)
    return []


# --------------------------------------------------------------------------- node execution


def bind_outputs(node: FlowNode, response: str, state: RunState) -> list[Binding]:
    bindings: list[Binding] = []
    for out in node.outputs:
        if out.kind is OutputKind.VARIABLE:
            state.write_variable(out.name, response)
            bindings.append(Binding("variable", out.name, value=response))
        else:
            content = response.encode("utf-8")
            try:
                write_output_file(state.output_dir, out.name, content)
            except OSError as exc:
                raise BindingError(f"cannot write output file '{out.name}': {exc}") from exc
            bindings.append(Binding("file", out.name, sha256=sha256_bytes(content), size=len(content)))
    if isinstance(node.routing, ConditionalRouting):
        for name in node.routing.condition.variables():
            if name not in state.declared_writers:
                state.write_variable(name, response)
                bindings.append(Binding("variable", name, value=response, self_bound=True))
    return bindings


def _prompt_path(node: FlowNode, state: RunState) -> Path:
    if node.id in state.prompt_paths:
        return state.prompt_paths[node.id]
    templates = node.prompt_templates
    if len(templates) != 1:
        raise GotflowError(f"node '{node.id}' must have exactly one prompt_template input")
    return Path(templates[0].value)


def execute_node(
    node: FlowNode,
    state: RunState,
    backend: LLMBackend,
    settings: GenerationSettings | None = None,
) -> NodeResult:
    settings = settings or GenerationSettings()
    store = state.snapshot()
    missing = [v for v in node.consumed_variables if v not in store]
    if missing:
        raise RenderError(missing)
    template = _prompt_path(node, state).read_text(encoding="utf-8")
    prompt = render_template(template, state.scope_for(node))
    response = backend.complete(prompt, settings, node_id=node.id)
    bindings = bind_outputs(node, response, state)
    decision = None
    if isinstance(node.routing, ConditionalRouting):
        value = evaluate_condition(node.routing.condition, state)
        decision = Decision(value, tuple(select_forward_paths(value, node.routing.forward_paths)))
    return NodeResult(node.id, prompt, response, tuple(bindings), decision)


# --------------------------------------------------------------------------- runs


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve(path: str, env: Mapping[str, str], base_dir: Path) -> Path:
    p = Path(expand_path_variables(path, env))
    return p if p.is_absolute() else base_dir / p


def referenced_env(spec: WorkflowSpec, env: Mapping[str, str]) -> dict[str, str]:
    paths = [spec.output_dir_path] + [r.file_path for r in spec.parameter_files]
    paths += [p.value for n in spec.nodes for p in n.prompt_templates]
    names = sorted({name for p in paths for name in path_variables(p)})
    return {name: env[name] for name in names if name in env}


def prepare_run(spec: WorkflowSpec, config: RunConfig) -> tuple[WorkflowGraph, Path, tuple[dict[str, str], ...], dict[str, Path]]:
    """Validate and resolve everything a run needs before any node executes.

    Raises :class:`WorkflowInvalid`, :class:`~gotflow.errors.PathError`,
    :class:`~gotflow.errors.ParseError` or ``OSError``.
    """
    graph = build_graph(spec)
    diags = validate_graph(graph)
    if has_errors(diags):
        raise WorkflowInvalid(diags)
    env = config.resolved_env()
    base_dir = Path(config.base_dir) if config.base_dir is not None else Path.cwd()
    output_dir = Path(config.output_dir) if config.output_dir is not None else _resolve(spec.output_dir_path, env, base_dir)
    params = tuple(
        load_parameter_file(_resolve(ref.file_path, env, base_dir).read_bytes()) for ref in spec.parameter_files
    )
    prompts = {n.id: _resolve(n.prompt_templates[0].value, env, base_dir) for n in spec.nodes}
    return graph, output_dir, params, prompts


def run_workflow(spec: WorkflowSpec, backend: LLMBackend, config: RunConfig | None = None) -> RunTrace:
    """Execute ``spec`` and return its completed trace.

    Files land in ``{output_dir}/{run_id}/`` next to ``trace.jsonl``,
    ``cassette.jsonl`` and the canonical ``workflow.json``.
    """
    config = config or RunConfig()
    if config.max_concurrency < 1:
        raise ValueError("max_concurrency must be at least 1")
    graph, output_dir, params, prompts = prepare_run(spec, config)
    if not graph.entry_ids:
        raise RunError("no entry nodes")

    run_id = str(uuid.uuid4())
    run_dir = output_dir / run_id
    run_dir.mkdir(parents=True)
    (run_dir / WORKFLOW_FILE).write_text(serialize_workflow(spec), encoding="utf-8")
    if config.record_cassette:
        backend = RecordingBackend(backend, run_dir / CASSETTE_FILE)

    snapshot: dict[str, Any] = {
        "max_concurrency": config.max_concurrency,
        "output_dir": str(output_dir.resolve()),
        "base_dir": str(Path(config.base_dir).resolve() if config.base_dir is not None else Path.cwd()),
        "env": referenced_env(spec, config.resolved_env()),
        "settings": asdict(config.settings),
    }
    trace = RunTrace(run_id, spec_digest(spec), _now(), snapshot)
    writer = TraceWriter(trace, run_dir / TRACE_FILE)
    state = RunState(spec, run_dir, params, prompts)
    try:
        failure = _schedule(graph, state, backend, config, writer)
    finally:
        trace.status = dict(state.node_status)
    trace.finished = _now()
    if failure is not None:
        node_id, exc = failure
        trace.outcome = "failed"
        trace.error = f"{node_id}: {exc}"
        writer.close()
        raise RunError(f"node '{node_id}' failed: {exc}", node_id=node_id, trace=trace, cause=exc)
    trace.outcome = "succeeded"
    writer.close()
    return trace


def _schedule(
    graph: WorkflowGraph,
    state: RunState,
    backend: LLMBackend,
    config: RunConfig,
    writer: TraceWriter,
) -> tuple[str, BaseException] | None:
    order = {nid: i for i, nid in enumerate(topological_order(graph))}
    incoming: dict[str, list[int]] = {nid: [] for nid in graph.nodes}
    outgoing: dict[str, list[int]] = {nid: [] for nid in graph.nodes}
    for i, e in enumerate(graph.edges):
        incoming[e.target].append(i)
        outgoing[e.source].append(i)
    taken: set[int] = set()
    status = state.node_status

    def resolved(nid: str) -> bool:
        return status[nid] in ("done", "skipped")

    def settle(nid: str) -> None:
        """Decide the fate of ``nid`` once all of its predecessors are resolved."""
        if status[nid] != "pending" or nid in state.frontier:
            return
        if not all(resolved(graph.edges[i].source) for i in incoming[nid]):
            return
        if any(i in taken for i in incoming[nid]):
            state.frontier.add(nid)
            return
        status[nid] = "skipped"
        writer.append_step(SkipMarker(nid))
        for i in outgoing[nid]:
            settle(graph.edges[i].target)

    def finish(result: NodeResult) -> None:
        nid = result.node_id
        status[nid] = "done"
        writer.append_step(result)
        for i in outgoing[nid]:
            edge = graph.edges[i]
            if result.decision is None or edge.kind == ("on_true" if result.decision.condition_value else "on_false"):
                taken.add(i)
        for i in outgoing[nid]:
            settle(graph.edges[i].target)

    state.frontier.update(graph.entry_ids)
    failure: tuple[str, BaseException] | None = None
    running: dict[Future, str] = {}
    with ThreadPoolExecutor(max_workers=config.max_concurrency, thread_name_prefix="gotflow") as pool:
        while True:
            while state.frontier and len(running) < config.max_concurrency and failure is None:
                nid = min(state.frontier, key=order.__getitem__)
                state.frontier.discard(nid)
                status[nid] = "running"
                log.debug("dispatch %s", nid)
                fut = pool.submit(execute_node, graph.nodes[nid], state, backend, config.settings)
                running[fut] = nid
            if not running:
                break
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in sorted(done, key=lambda f: order[running[f]]):
                nid = running.pop(fut)
                try:
                    result = fut.result()
                except Exception as exc:
                    status[nid] = "failed"
                    log.error("node %s failed: %s", nid, exc)
                    if failure is None:
                        failure = (nid, exc)
                    continue
                finish(result)
    if failure is None:
        # only nodes unreachable from every entry remain
        for nid in sorted((n for n, s in status.items() if s == "pending"), key=order.__getitem__):
            status[nid] = "skipped"
            writer.append_step(SkipMarker(nid))
    else:
        for nid in state.frontier:
            status[nid] = "pending"
        state.frontier.clear()
    return failure


# --------------------------------------------------------------------------- replay


@dataclass
class ReplayReport:
    original: RunTrace
    replayed: RunTrace | None
    differences: list[str]

    @property
    def identical(self) -> bool:
        return not self.differences


def replay_trace(trace_path: str | os.PathLike, output_dir: str | os.PathLike | None = None) -> ReplayReport:
    """Re-run a recorded run from its cassette and compare traces and output files."""
    trace_path = Path(trace_path)
    run_dir = trace_path.parent
    original = load_trace(trace_path)
    spec = parse_workflow((run_dir / WORKFLOW_FILE).read_bytes())
    if spec_digest(spec) != original.spec_digest:
        raise TraceError(f"{WORKFLOW_FILE} does not match the trace's spec digest")
    cfg = original.config
    config = RunConfig(
        max_concurrency=cfg.get("max_concurrency", 1),
        output_dir=output_dir if output_dir is not None else cfg.get("output_dir", run_dir.parent),
        env=dict(cfg.get("env") or {}),
        settings=GenerationSettings(**cfg["settings"]) if cfg.get("settings") else GenerationSettings(),
        base_dir=cfg.get("base_dir"),
    )
    backend = ReplayBackend.from_file(run_dir / CASSETTE_FILE)
    differences: list[str] = []

    for step in original.steps:
        for b in step.bindings:
            if b.kind == "file":
                path = run_dir / b.name
                if not path.exists():
                    differences.append(f"original output {b.name} is missing")
                elif sha256_bytes(path.read_bytes()) != b.sha256:
                    differences.append(f"original output {b.name} no longer matches its recorded hash")

    try:
        replayed = run_workflow(spec, backend, config)
    except RunError as exc:
        replayed = exc.trace
        differences.append(f"replay failed: {exc}")
    if replayed is not None:
        a, b = step_lines(original), step_lines(replayed)
        same = a == b if config.max_concurrency == 1 else sorted(a.splitlines()) == sorted(b.splitlines())
        if not same:
            differences.append("replayed step records differ from the original trace")
        if original.status != replayed.status:
            differences.append("final node status differs")
        new_dir = Path(config.output_dir) / replayed.run_id
        for step in replayed.steps:
            for bnd in step.bindings:
                if bnd.kind == "file" and sha256_bytes((new_dir / bnd.name).read_bytes()) != bnd.sha256:
                    differences.append(f"replayed output {bnd.name} does not match its recorded hash")
    return ReplayReport(original, replayed, differences)
