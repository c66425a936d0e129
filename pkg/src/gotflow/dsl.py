"""In-memory model of a workflow document plus its JSON parser and serializer.

The parser accepts the JSON dialect used by hand-written workflow files,
including nodes that repeat the ``"output"`` key. Every entry found under
``input_parameters`` or ``output`` is classified by its ``type`` field, so an
``output_variable`` entry is always an input no matter which array held it.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import ParseError, PathError

__all__ = [
    "NodeKind",
    "ParamKind",
    "OutputKind",
    "Operator",
    "Combinator",
    "ParameterFileRef",
    "InputParameter",
    "OutputBinding",
    "DataSource",
    "Condition",
    "ForwardPath",
    "StaticRouting",
    "ConditionalRouting",
    "FlowNode",
    "WorkflowSpec",
    "parse_workflow",
    "serialize_workflow",
    "spec_digest",
    "load_parameter_file",
    "expand_path_variables",
    "path_variables",
]


class NodeKind(str, Enum):
    EXECUTOR = "executor"
    DECISION_MAKER = "decision_maker"


class ParamKind(str, Enum):
    PROMPT_TEMPLATE = "prompt_template"
    OUTPUT_VARIABLE = "output_variable"
    LITERAL = "literal"


class OutputKind(str, Enum):
    VARIABLE = "variable"
    FILE = "file"


class Operator(str, Enum):
    EQUAL = "equal"
    NOT_EQUAL = "not_equal"
    CONTAINS = "contains"


class Combinator(str, Enum):
    ALL = "all"
    ANY = "any"


@dataclass(frozen=True)
class ParameterFileRef:
    suffix: str
    file_path: str


@dataclass(frozen=True)
class InputParameter:
    """One node input.

    ``value`` holds the template path for ``prompt_template``, the upstream
    variable name for ``output_variable`` (always equal to ``name``), and the
    inline text for ``literal``.
    """

    name: str
    kind: ParamKind
    value: str


@dataclass(frozen=True)
class OutputBinding:
    kind: OutputKind
    name: str


@dataclass(frozen=True)
class DataSource:
    name: str
    kind: str = "output_variable"


@dataclass(frozen=True)
class Condition:
    """Comparison leaf (``composed=False``) or an all/any combinator node."""

    composed: bool
    data_source: DataSource | None = None
    operator: Operator | None = None
    operand: str | None = None
    combinator: Combinator | None = None
    children: tuple["Condition", ...] = ()

    @classmethod
    def leaf(cls, variable: str, operator: Operator | str, operand: str) -> "Condition":
        return cls(False, DataSource(variable), Operator(operator), operand)

    @classmethod
    def compose(cls, combinator: Combinator | str, children: Iterable["Condition"]) -> "Condition":
        return cls(True, combinator=Combinator(combinator), children=tuple(children))

    def variables(self) -> list[str]:
        """Variable names read by this condition, first-occurrence order."""
        if not self.composed:
            return [self.data_source.name]
        seen: list[str] = []
        for child in self.children:
            for name in child.variables():
                if name not in seen:
                    seen.append(name)
        return seen


@dataclass(frozen=True)
class ForwardPath:
    condition_result: bool
    next_nodes: tuple[str, ...]


@dataclass(frozen=True)
class StaticRouting:
    next_nodes: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConditionalRouting:
    condition: Condition
    forward_paths: tuple[ForwardPath, ...]


@dataclass(frozen=True)
class FlowNode:
    id: str
    kind: NodeKind
    input_parameters: tuple[InputParameter, ...] = ()
    outputs: tuple[OutputBinding, ...] = ()
    routing: StaticRouting | ConditionalRouting = StaticRouting()
    description: str = ""
    extras: Mapping[str, Any] = field(default_factory=dict)

    @property
    def prompt_templates(self) -> list[InputParameter]:
        return [p for p in self.input_parameters if p.kind is ParamKind.PROMPT_TEMPLATE]

    @property
    def consumed_variables(self) -> list[str]:
        return [p.value for p in self.input_parameters if p.kind is ParamKind.OUTPUT_VARIABLE]

    @property
    def written_variables(self) -> list[str]:
        return [o.name for o in self.outputs if o.kind is OutputKind.VARIABLE]

    @property
    def successors(self) -> list[str]:
        if isinstance(self.routing, StaticRouting):
            return list(self.routing.next_nodes)
        return [n for path in self.routing.forward_paths for n in path.next_nodes]


@dataclass(frozen=True)
class WorkflowSpec:
    output_dir_path: str
    nodes: tuple[FlowNode, ...]
    parameter_files: tuple[ParameterFileRef, ...] = ()
    extras: Mapping[str, Any] = field(default_factory=dict)

    def node(self, node_id: str) -> FlowNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]


# --------------------------------------------------------------------------- parsing

_ROOT_KEYS = ("output_dir_path", "input_parameters", "flow_items")
_NODE_KEYS = ("id", "description", "type", "input_parameters", "output", "next_nodes", "condition", "forward_paths")


class _Obj(list):
    """JSON object kept as its ordered (key, value) pairs, duplicates included."""

    def get(self, key: str, default: Any = None) -> Any:
        found = default
        for k, v in self:
            if k == key:
                found = v
        return found

    def has(self, key: str) -> bool:
        return any(k == key for k, _ in self)

    def all(self, key: str) -> list[Any]:
        return [v for k, v in self if k == key]


def _plain(value: Any) -> Any:
    if isinstance(value, _Obj):
        out: dict[str, Any] = {}
        for k, v in value:
            out[k] = _plain(v)
        return out
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def _load_json(text: str | bytes) -> Any:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"document is not valid UTF-8 (byte {exc.start})", pos=exc.start) from None
    try:
        return json.loads(text, object_pairs_hook=_Obj)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"malformed JSON at line {exc.lineno} column {exc.colno} (char {exc.pos}): {exc.msg}",
            pos=exc.pos,
            lineno=exc.lineno,
            colno=exc.colno,
        ) from None
    except RecursionError:
        raise ParseError("malformed JSON: nesting too deep") from None


def _where(node_id: str | None) -> str:
    return f"node '{node_id}': " if node_id is not None else ""


def _require(obj: _Obj, key: str, node_id: str | None = None) -> Any:
    if not obj.has(key):
        raise ParseError(f"{_where(node_id)}missing required key '{key}'", key=key, node_id=node_id)
    return obj.get(key)


def _string(value: Any, key: str, node_id: str | None, *, allow_empty: bool = False) -> str:
    if not isinstance(value, str):
        raise ParseError(f"{_where(node_id)}'{key}' must be a string", key=key, node_id=node_id)
    if not allow_empty and not value:
        raise ParseError(f"{_where(node_id)}'{key}' must not be empty", key=key, node_id=node_id)
    return value


def _object(value: Any, what: str, node_id: str | None) -> _Obj:
    if not isinstance(value, _Obj):
        raise ParseError(f"{_where(node_id)}{what} must be a JSON object", node_id=node_id)
    return value


def _array(value: Any, key: str, node_id: str | None) -> list:
    if not isinstance(value, list) or isinstance(value, _Obj):
        raise ParseError(f"{_where(node_id)}'{key}' must be an array", key=key, node_id=node_id)
    return value


def _id_list(value: Any, key: str, node_id: str | None) -> tuple[str, ...]:
    return tuple(_string(v, key, node_id) for v in _array(value, key, node_id))


def _parse_condition(raw: Any, node_id: str) -> Condition:
    obj = _object(raw, "'condition'", node_id)
    composed = obj.get("is_composed", False)
    if not isinstance(composed, bool):
        raise ParseError(f"{_where(node_id)}'is_composed' must be a boolean", key="is_composed", node_id=node_id)
    if composed:
        comb = _string(_require(obj, "combinator", node_id), "combinator", node_id)
        if comb not in {c.value for c in Combinator}:
            raise ParseError(f"{_where(node_id)}unknown combinator '{comb}'", key="combinator", node_id=node_id)
        children = [_parse_condition(c, node_id) for c in _array(_require(obj, "conditions", node_id), "conditions", node_id)]
        if len(children) < 2:
            raise ParseError(f"{_where(node_id)}composed condition needs at least 2 conditions", key="conditions", node_id=node_id)
        return Condition.compose(comb, children)
    source = _object(_require(obj, "data_source", node_id), "'data_source'", node_id)
    src_kind = _string(source.get("type", "output_variable"), "type", node_id)
    if src_kind != "output_variable":
        raise ParseError(f"{_where(node_id)}unknown data_source type '{src_kind}'", key="type", node_id=node_id)
    name = _string(_require(source, "name", node_id), "name", node_id)
    op = _string(_require(obj, "operator", node_id), "operator", node_id)
    if op not in {o.value for o in Operator}:
        raise ParseError(f"{_where(node_id)}unknown operator '{op}'", key="operator", node_id=node_id)
    operand = _string(_require(obj, "operand", node_id), "operand", node_id, allow_empty=True)
    return Condition.leaf(name, op, operand)


def _parse_entries(obj: _Obj, node_id: str) -> tuple[tuple[InputParameter, ...], tuple[OutputBinding, ...]]:
    inputs: list[InputParameter] = []
    outputs: list[OutputBinding] = []
    for key, value in obj:
        if key not in ("input_parameters", "output"):
            continue
        for raw in _array(value, key, node_id):
            entry = _object(raw, f"entry in '{key}'", node_id)
            kind = _string(_require(entry, "type", node_id), "type", node_id)
            name = _string(_require(entry, "name", node_id), "name", node_id)
            if kind == ParamKind.PROMPT_TEMPLATE.value:
                path = _string(_require(entry, "file_path", node_id), "file_path", node_id)
                inputs.append(InputParameter(name, ParamKind.PROMPT_TEMPLATE, path))
            elif kind == ParamKind.OUTPUT_VARIABLE.value:
                inputs.append(InputParameter(name, ParamKind.OUTPUT_VARIABLE, name))
            elif kind == ParamKind.LITERAL.value:
                text = _string(_require(entry, "value", node_id), "value", node_id, allow_empty=True)
                inputs.append(InputParameter(name, ParamKind.LITERAL, text))
            elif kind in (OutputKind.VARIABLE.value, OutputKind.FILE.value):
                outputs.append(OutputBinding(OutputKind(kind), name))
            else:
                raise ParseError(f"{_where(node_id)}unknown parameter type '{kind}'", key="type", node_id=node_id)
    return tuple(inputs), tuple(outputs)


def _parse_node(raw: Any, index: int) -> FlowNode:
    obj = _object(raw, f"flow item #{index}", None)
    node_id = _string(_require(obj, "id"), "id", None)
    kind = _string(_require(obj, "type", node_id), "type", node_id)
    if kind not in {k.value for k in NodeKind}:
        raise ParseError(f"{_where(node_id)}unknown node type '{kind}'", key="type", node_id=node_id)
    description = _string(obj.get("description", ""), "description", node_id, allow_empty=True)
    inputs, outputs = _parse_entries(obj, node_id)

    routing: StaticRouting | ConditionalRouting
    if kind == NodeKind.EXECUTOR.value:
        for key in ("condition", "forward_paths"):
            if obj.has(key):
                raise ParseError(f"{_where(node_id)}executor cannot declare '{key}'", key=key, node_id=node_id)
        routing = StaticRouting(_id_list(obj.get("next_nodes", []), "next_nodes", node_id))
    else:
        if obj.has("next_nodes"):
            raise ParseError(f"{_where(node_id)}decision maker routes through 'forward_paths', not 'next_nodes'", key="next_nodes", node_id=node_id)
        condition = _parse_condition(_require(obj, "condition", node_id), node_id)
        paths = []
        for raw_path in _array(_require(obj, "forward_paths", node_id), "forward_paths", node_id):
            path = _object(raw_path, "forward path", node_id)
            result = _require(path, "condition_result", node_id)
            if not isinstance(result, bool):
                raise ParseError(f"{_where(node_id)}'condition_result' must be a boolean", key="condition_result", node_id=node_id)
            paths.append(ForwardPath(result, _id_list(path.get("next_nodes", []), "next_nodes", node_id)))
        routing = ConditionalRouting(condition, tuple(paths))

    extras = {k: _plain(v) for k, v in obj if k not in _NODE_KEYS}
    return FlowNode(node_id, NodeKind(kind), inputs, outputs, routing, description, extras)


def parse_workflow(text: str | bytes) -> WorkflowSpec:
    """Parse a workflow document. Raises :class:`ParseError` on any defect."""
    root = _object(_load_json(text), "workflow document", None)
    output_dir = _string(_require(root, "output_dir_path"), "output_dir_path", None)

    refs = []
    for raw in _array(root.get("input_parameters", []), "input_parameters", None):
        entry = _object(raw, "workflow input parameter", None)
        refs.append(
            ParameterFileRef(
                _string(_require(entry, "suffix"), "suffix", None),
                _string(_require(entry, "file_path"), "file_path", None),
            )
        )

    items = _array(_require(root, "flow_items"), "flow_items", None)
    if not items:
        raise ParseError("nodes list is empty", key="flow_items")
    nodes = []
    seen: set[str] = set()
    for i, raw in enumerate(items):
        node = _parse_node(raw, i)
        if node.id in seen:
            raise ParseError(f"duplicate node id '{node.id}'", key="id", node_id=node.id)
        seen.add(node.id)
        nodes.append(node)

    extras = {k: _plain(v) for k, v in root if k not in _ROOT_KEYS}
    return WorkflowSpec(output_dir, tuple(nodes), tuple(refs), extras)


# --------------------------------------------------------------------------- serialization


def _condition_json(cond: Condition) -> dict[str, Any]:
    if cond.composed:
        return {
            "is_composed": True,
            "combinator": cond.combinator.value,
            "conditions": [_condition_json(c) for c in cond.children],
        }
    return {
        "is_composed": False,
        "data_source": {"type": cond.data_source.kind, "name": cond.data_source.name},
        "operator": cond.operator.value,
        "operand": cond.operand,
    }


def _input_json(param: InputParameter) -> dict[str, Any]:
    if param.kind is ParamKind.PROMPT_TEMPLATE:
        return {"name": param.name, "type": param.kind.value, "file_path": param.value}
    if param.kind is ParamKind.LITERAL:
        return {"name": param.name, "type": param.kind.value, "value": param.value}
    return {"name": param.name, "type": param.kind.value}


def _node_json(node: FlowNode) -> dict[str, Any]:
    out: dict[str, Any] = {
        "id": node.id,
        "description": node.description,
        "type": node.kind.value,
        "input_parameters": [_input_json(p) for p in node.input_parameters],
        "output": [{"type": o.kind.value, "name": o.name} for o in node.outputs],
    }
    if isinstance(node.routing, StaticRouting):
        out["next_nodes"] = list(node.routing.next_nodes)
    else:
        out["condition"] = _condition_json(node.routing.condition)
        out["forward_paths"] = [
            {"condition_result": p.condition_result, "next_nodes": list(p.next_nodes)}
            for p in node.routing.forward_paths
        ]
    for k, v in node.extras.items():
        out[k] = v
    return out


def serialize_workflow(spec: WorkflowSpec) -> str:
    """Canonical text: fixed key order, two-space indent, trailing newline."""
    doc: dict[str, Any] = {
        "output_dir_path": spec.output_dir_path,
        "input_parameters": [{"suffix": r.suffix, "file_path": r.file_path} for r in spec.parameter_files],
        "flow_items": [_node_json(n) for n in spec.nodes],
    }
    for k, v in spec.extras.items():
        doc[k] = v
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def spec_digest(spec: WorkflowSpec) -> str:
    return hashlib.sha256(serialize_workflow(spec).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------- parameter files and paths


def load_parameter_file(text: str | bytes) -> dict[str, str]:
    """Parse a flat JSON object of string parameters; keys come back sorted."""
    root = _load_json(text)
    if not isinstance(root, _Obj):
        raise ParseError("parameter file root must be a JSON object")
    values: dict[str, str] = {}
    for key, value in root:
        if not isinstance(value, str):
            raise ParseError(f"parameter '{key}' must be a string", key=key)
        values[key] = value
    return {k: values[k] for k in sorted(values)}


_VAR = re.compile(r"\$+\{([A-Za-z_][A-Za-z0-9_]*)\}")
_OPEN = re.compile(r"\$+\{")


def path_variables(path: str) -> list[str]:
    names: list[str] = []
    for m in _VAR.finditer(path):
        if m.group(1) not in names:
            names.append(m.group(1))
    return names


def expand_path_variables(path: str, env: Mapping[str, str]) -> str:
    """Replace each ``${NAME}`` with ``env[NAME]``; ``$${NAME}`` counts as ``${NAME}``."""

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in env:
            raise PathError(name, path)
        value = env[name]
        if "${" in value:
            raise PathError(name, path)
        return value

    result = _VAR.sub(sub, path)
    leftover = _OPEN.search(_VAR.sub("", path))
    if leftover:
        raise PathError(path[leftover.end():].split("}")[0] or "<empty>", path)
    return result
