"""Directed thought-graph construction, static checks, ordering and DOT export."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Literal

from .dsl import (
    ConditionalRouting,
    FlowNode,
    NodeKind,
    OutputKind,
    StaticRouting,
    WorkflowSpec,
)
from .errors import CycleError

EdgeKind = Literal["static", "on_true", "on_false"]
Severity = Literal["error", "warning", "info"]


@dataclass(frozen=True)
class Edge:
    source: str
    target: str
    kind: EdgeKind


@dataclass(frozen=True)
class Diagnostic:
    severity: Severity
    code: str
    message: str
    node_id: str | None = None

    def format(self) -> str:
        return f"{self.severity}\t{self.code}\t{self.node_id or '-'}\t{self.message}"


@dataclass(frozen=True)
class WorkflowGraph:
    spec: WorkflowSpec
    nodes: dict[str, FlowNode]
    edges: tuple[Edge, ...]
    entry_ids: tuple[str, ...]
    order_index: dict[str, int] = field(default_factory=dict)

    def successors(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.source == node_id]

    def predecessors(self, node_id: str) -> list[Edge]:
        return [e for e in self.edges if e.target == node_id]


def build_graph(spec: WorkflowSpec) -> WorkflowGraph:
    nodes = {n.id: n for n in spec.nodes}
    edges: list[Edge] = []
    for node in spec.nodes:
        if isinstance(node.routing, StaticRouting):
            edges.extend(Edge(node.id, t, "static") for t in node.routing.next_nodes)
        else:
            for path in node.routing.forward_paths:
                kind: EdgeKind = "on_true" if path.condition_result else "on_false"
                edges.extend(Edge(node.id, t, kind) for t in path.next_nodes)
    targets = {e.target for e in edges}
    entry = tuple(n.id for n in spec.nodes if n.id not in targets)
    index = {n.id: i for i, n in enumerate(spec.nodes)}
    return WorkflowGraph(spec, nodes, tuple(edges), entry, index)


def _adjacency(graph: WorkflowGraph) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {nid: [] for nid in graph.nodes}
    for e in graph.edges:
        if e.target in graph.nodes and e.target not in adj[e.source]:
            adj[e.source].append(e.target)
    return adj


def find_cycle(graph: WorkflowGraph) -> list[str] | None:
    """Return one directed cycle, rotated to start at its earliest-declared node."""
    adj = _adjacency(graph)
    color = {nid: 0 for nid in graph.nodes}  # 0 new, 1 on stack, 2 finished

    for root in graph.nodes:
        if color[root]:
            continue
        stack: list[tuple[str, int]] = [(root, 0)]
        path = [root]
        color[root] = 1
        while stack:
            nid, i = stack[-1]
            if i < len(adj[nid]):
                stack[-1] = (nid, i + 1)
                nxt = adj[nid][i]
                if color[nxt] == 1:
                    cycle = path[path.index(nxt):]
                    start = min(range(len(cycle)), key=lambda k: graph.order_index[cycle[k]])
                    return cycle[start:] + cycle[:start]
                if color[nxt] == 0:
                    color[nxt] = 1
                    stack.append((nxt, 0))
                    path.append(nxt)
            else:
                color[nid] = 2
                stack.pop()
                path.pop()
    return None


def _reachable(graph: WorkflowGraph) -> set[str]:
    adj = _adjacency(graph)
    seen = set(graph.entry_ids)
    todo = list(graph.entry_ids)
    while todo:
        for nxt in adj[todo.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


def validate_graph(graph: WorkflowGraph) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    spec = graph.spec

    for key in spec.extras:
        diags.append(Diagnostic("info", "unknown-key", f"unknown top-level key '{key}' ignored"))

    writers: dict[str, list[str]] = {}
    for node in spec.nodes:
        for key in node.extras:
            diags.append(Diagnostic("info", "unknown-key", f"unknown key '{key}' ignored", node.id))
        for name in node.written_variables:
            writers.setdefault(name, []).append(node.id)

    for node in spec.nodes:
        templates = node.prompt_templates
        if len(templates) != 1:
            diags.append(
                Diagnostic("error", "prompt-template", f"expected exactly one prompt_template input, found {len(templates)}", node.id)
            )
        for out in node.outputs:
            if out.kind is OutputKind.FILE and ("/" in out.name or "\\" in out.name or out.name in (".", "..")):
                diags.append(Diagnostic("error", "file-name", f"output file name '{out.name}' must not contain path separators", node.id))
        for target in node.successors:
            if target not in graph.nodes:
                diags.append(Diagnostic("error", "unknown-target", f"unknown target id '{target}'", node.id))
        if isinstance(node.routing, ConditionalRouting):
            results = Counter(p.condition_result for p in node.routing.forward_paths)
            for flag in (True, False):
                if results[flag] == 0:
                    diags.append(Diagnostic("error", "missing-branch", f"decision maker lacks a condition_result={str(flag).lower()} path", node.id))
                elif results[flag] > 1:
                    diags.append(Diagnostic("error", "duplicate-branch", f"condition_result={str(flag).lower()} declared {results[flag]} times", node.id))
            for name in node.routing.condition.variables():
                if name not in writers:
                    diags.append(
                        Diagnostic(
                            "warning",
                            "condition-self-bound",
                            f"condition variable '{name}' has no writer; the decision maker's response will be bound to it",
                            node.id,
                        )
                    )
        elif node.kind is not NodeKind.EXECUTOR:  # pragma: no cover - parser guarantees this
            diags.append(Diagnostic("error", "routing", "decision maker without condition", node.id))

    self_bound = {
        name
        for node in spec.nodes
        if isinstance(node.routing, ConditionalRouting)
        for name in node.routing.condition.variables()
    }
    for name, ids in writers.items():
        if len(ids) > 1:
            diags.append(Diagnostic("error", "duplicate-writer", f"variable '{name}' is written by {', '.join(ids)}", ids[1]))
    for node in spec.nodes:
        for name in node.consumed_variables:
            if name not in writers and name not in self_bound:
                diags.append(Diagnostic("warning", "unbound-input", f"input variable '{name}' has no writer", node.id))

    cycle = find_cycle(graph)
    if cycle is not None:
        diags.append(Diagnostic("error", "cycle", "directed cycle: " + " -> ".join(cycle + cycle[:1]), cycle[0]))
    if not graph.entry_ids:
        diags.append(Diagnostic("error", "no-entry", "no node has in-degree 0"))
    else:
        reachable = _reachable(graph)
        for node in spec.nodes:
            if node.id not in reachable:
                diags.append(Diagnostic("warning", "unreachable", "node is unreachable from every entry node", node.id))
    return diags


def has_errors(diags: list[Diagnostic]) -> bool:
    return any(d.severity == "error" for d in diags)


def topological_order(graph: WorkflowGraph) -> list[str]:
    """Kahn's algorithm, one wave at a time; each wave sorted by declaration order."""
    adj = _adjacency(graph)
    indegree = {nid: 0 for nid in graph.nodes}
    for targets in adj.values():
        for t in targets:
            indegree[t] += 1
    wave = [nid for nid in graph.nodes if indegree[nid] == 0]
    order: list[str] = []
    while wave:
        wave.sort(key=graph.order_index.__getitem__)
        order.extend(wave)
        nxt = []
        for nid in wave:
            for t in adj[nid]:
                indegree[t] -= 1
                if indegree[t] == 0:
                    nxt.append(t)
        wave = nxt
    if len(order) != len(graph.nodes):
        raise CycleError(find_cycle(graph) or [])
    return order


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def export_dot(graph: WorkflowGraph) -> str:
    lines = ["digraph workflow {"]
    for node in graph.spec.nodes:
        shape = "diamond" if node.kind is NodeKind.DECISION_MAKER else "box"
        lines.append(f"  {_quote(node.id)} [shape={shape}];")
    for e in graph.edges:
        label = {"on_true": ' [label="YES"]', "on_false": ' [label="NO"]'}.get(e.kind, "")
        lines.append(f"  {_quote(e.source)} -> {_quote(e.target)}{label};")
    lines.append("}")
    return "\n".join(lines) + "\n"
