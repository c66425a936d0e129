"""Run traces (JSON-lines) and node output files.

A trace file holds a header line, one line per executed or skipped node in
the order the engine resolved them, and a footer once the run finishes. Every
line is flushed as it is written, so a crashed run leaves a readable prefix.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

from .errors import SchemaVersionError, TraceError

SCHEMA_VERSION = 1
TRACE_FILE = "trace.jsonl"
CASSETTE_FILE = "cassette.jsonl"
WORKFLOW_FILE = "workflow.json"


@dataclass(frozen=True)
class Binding:
    kind: Literal["variable", "file"]
    name: str
    value: str | None = None  # variable bindings only
    sha256: str | None = None  # file bindings only
    size: int | None = None
    self_bound: bool = False

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "variable":
            d: dict[str, Any] = {"kind": "variable", "name": self.name, "value": self.value}
            if self.self_bound:
                d["self_bound"] = True
            return d
        return {"kind": "file", "name": self.name, "sha256": self.sha256, "size": self.size}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Binding":
        if d["kind"] == "variable":
            return cls("variable", d["name"], value=d["value"], self_bound=d.get("self_bound", False))
        return cls("file", d["name"], sha256=d["sha256"], size=d["size"])


@dataclass(frozen=True)
class Decision:
    condition_value: bool
    next_nodes: tuple[str, ...]


@dataclass(frozen=True)
class NodeResult:
    node_id: str
    rendered_prompt: str
    response: str
    bindings: tuple[Binding, ...] = ()
    decision: Decision | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "record": "step",
            "node_id": self.node_id,
            "rendered_prompt": self.rendered_prompt,
            "response": self.response,
            "bindings": [b.to_dict() for b in self.bindings],
            "decision": None
            if self.decision is None
            else {"condition_value": self.decision.condition_value, "next_nodes": list(self.decision.next_nodes)},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NodeResult":
        dec = d.get("decision")
        return cls(
            d["node_id"],
            d["rendered_prompt"],
            d["response"],
            tuple(Binding.from_dict(b) for b in d["bindings"]),
            None if dec is None else Decision(dec["condition_value"], tuple(dec["next_nodes"])),
        )


@dataclass(frozen=True)
class SkipMarker:
    node_id: str

    def to_dict(self) -> dict[str, Any]:
        return {"record": "skip", "node_id": self.node_id}


@dataclass
class RunTrace:
    run_id: str
    spec_digest: str
    started: str
    config: dict[str, Any] = field(default_factory=dict)
    events: list[NodeResult | SkipMarker] = field(default_factory=list)
    finished: str | None = None
    outcome: str | None = None  # "succeeded" | "failed"; None while open
    status: dict[str, str] = field(default_factory=dict)
    error: str | None = None

    @property
    def steps(self) -> list[NodeResult]:
        return [e for e in self.events if isinstance(e, NodeResult)]

    @property
    def skipped(self) -> list[str]:
        return [e.node_id for e in self.events if isinstance(e, SkipMarker)]

    def executed(self) -> list[str]:
        return [s.node_id for s in self.steps]

    def variables(self) -> dict[str, str]:
        return {b.name: b.value for s in self.steps for b in s.bindings if b.kind == "variable"}

    def header_dict(self) -> dict[str, Any]:
        return {
            "record": "header",
            "schema_version": SCHEMA_VERSION,
            "run_id": self.run_id,
            "spec_digest": self.spec_digest,
            "started": self.started,
            "config": self.config,
        }

    def footer_dict(self) -> dict[str, Any]:
        return {
            "record": "footer",
            "finished": self.finished,
            "outcome": self.outcome,
            "status": self.status,
            "error": self.error,
        }


def _line(record: dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False) + "\n"


def step_lines(trace: RunTrace) -> str:
    """The run-independent part of a trace: step and skip records only."""
    return "".join(_line(e.to_dict()) for e in trace.events)


class TraceWriter:
    """Append-only trace file; each append is flushed before returning."""

    def __init__(self, trace: RunTrace, path: str | os.PathLike) -> None:
        self.trace = trace
        self.path = Path(path)
        self._lock = threading.Lock()
        self._fh = open(self.path, "x", encoding="utf-8", newline="\n")
        self._write(trace.header_dict())

    def _write(self, record: dict[str, Any]) -> None:
        self._fh.write(_line(record))
        self._fh.flush()

    def append_step(self, event: NodeResult | SkipMarker) -> None:
        with self._lock:
            self.trace.events.append(event)
            self._write(event.to_dict())

    def close(self) -> None:
        with self._lock:
            if self._fh.closed:
                return
            self._write(self.trace.footer_dict())
            self._fh.close()


def append_step(writer: TraceWriter, result: NodeResult | SkipMarker) -> None:
    writer.append_step(result)


def dumps_trace(trace: RunTrace) -> str:
    text = _line(trace.header_dict()) + step_lines(trace)
    if trace.outcome is not None:
        text += _line(trace.footer_dict())
    return text


def save_trace(trace: RunTrace, path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_trace(trace))
    return path


def loads_trace(data: bytes | str) -> RunTrace:
    if isinstance(data, str):
        data = data.encode("utf-8")
    trace: RunTrace | None = None
    offset = 0
    for raw in data.splitlines(keepends=True):
        start = offset
        offset += len(raw)
        if not raw.strip():
            continue
        try:
            record = json.loads(raw.decode("utf-8"))
            kind = record["record"]
        except UnicodeDecodeError as exc:
            raise TraceError(f"invalid UTF-8 at byte offset {start + exc.start}", offset=start + exc.start) from None
        except json.JSONDecodeError as exc:
            pos = start + len(raw.decode("utf-8")[: exc.pos].encode("utf-8"))
            raise TraceError(f"malformed trace record at byte offset {pos}: {exc.msg}", offset=pos) from None
        except (KeyError, TypeError):
            raise TraceError(f"trace line at byte offset {start} has no record type", offset=start) from None
        try:
            if trace is None:
                if kind != "header":
                    raise TraceError(f"trace must start with a header (byte offset {start})", offset=start)
                if record.get("schema_version") != SCHEMA_VERSION:
                    raise SchemaVersionError(record.get("schema_version"), SCHEMA_VERSION)
                trace = RunTrace(record["run_id"], record["spec_digest"], record["started"], record.get("config") or {})
            elif kind == "step":
                trace.events.append(NodeResult.from_dict(record))
            elif kind == "skip":
                trace.events.append(SkipMarker(record["node_id"]))
            elif kind == "footer":
                trace.finished = record.get("finished")
                trace.outcome = record.get("outcome")
                trace.status = dict(record.get("status") or {})
                trace.error = record.get("error")
            else:
                raise TraceError(f"unknown record type {kind!r} at byte offset {start}", offset=start)
        except (KeyError, TypeError) as exc:
            raise TraceError(f"incomplete {kind} record at byte offset {start}: missing {exc}", offset=start) from None
    if trace is None:
        raise TraceError("empty trace", offset=0)
    return trace


def load_trace(path: str | os.PathLike) -> RunTrace:
    return loads_trace(Path(path).read_bytes())


def sha256_bytes(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


def write_output_file(output_dir: str | os.PathLike, name: str, content: bytes) -> Path:
    """Write ``content`` to ``output_dir/name`` via a temp file and rename."""
    if not name or "/" in name or "\\" in name or name in (".", ".."):
        raise ValueError(f"output file name {name!r} must be a bare file name")
    directory = Path(output_dir)
    directory.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(content)
        os.replace(tmp, directory / name)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return directory / name
