"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class GotflowError(Exception):
    """Base class for every error raised by this package."""


class ParseError(GotflowError):
    """A DSL or parameter document could not be turned into a spec.

    ``pos``/``lineno``/``colno`` are set for JSON syntax errors; ``key`` and
    ``node_id`` are set when a required field is missing or malformed.
    """

    def __init__(
        self,
        message: str,
        *,
        pos: int | None = None,
        lineno: int | None = None,
        colno: int | None = None,
        key: str | None = None,
        node_id: str | None = None,
    ) -> None:
        super().__init__(message)
        self.message = message
        self.pos = pos
        self.lineno = lineno
        self.colno = colno
        self.key = key
        self.node_id = node_id


class PathError(GotflowError):
    def __init__(self, variable: str, path: str) -> None:
        super().__init__(f"unresolved path variable '{variable}' in {path!r}")
        self.variable = variable
        self.path = path


class CycleError(GotflowError):
    def __init__(self, cycle: list[str]) -> None:
        super().__init__("directed cycle: " + " -> ".join(cycle + cycle[:1]))
        self.cycle = cycle


class UnterminatedPlaceholder(GotflowError):
    def __init__(self, offset: int) -> None:
        super().__init__(f"unterminated placeholder at byte offset {offset}")
        self.offset = offset


class RenderError(GotflowError):
    def __init__(self, missing: list[str]) -> None:
        super().__init__("unresolved template parameters: " + ", ".join(missing))
        self.missing = missing


class NotFound(GotflowError, KeyError):
    def __init__(self, name: str) -> None:
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"parameter not found: {self.name}"


class EvalError(GotflowError):
    def __init__(self, variable: str) -> None:
        super().__init__(f"condition reads missing variable '{variable}'")
        self.variable = variable


class BackendError(GotflowError):
    """Classified LLM backend failure.

    ``kind`` is one of ``timeout``, ``rate_limited``, ``http_status``,
    ``no_rule_matched`` or ``malformed_response``.
    """

    KINDS = ("timeout", "rate_limited", "http_status", "no_rule_matched", "malformed_response")

    def __init__(self, kind: str, message: str = "", status_code: int | None = None) -> None:
        if kind not in self.KINDS:
            raise ValueError(f"unknown backend error kind {kind!r}")
        super().__init__(f"{kind}: {message}" if message else kind)
        self.kind = kind
        self.message = message
        self.status_code = status_code


class BindingError(GotflowError):
    """A variable was written twice or an output file could not be written."""


class TraceError(GotflowError):
    def __init__(self, message: str, *, offset: int | None = None) -> None:
        super().__init__(message)
        self.offset = offset


class SchemaVersionError(TraceError):
    def __init__(self, found: object, expected: int) -> None:
        super().__init__(f"trace schema version {found!r} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class WorkflowInvalid(GotflowError):
    """Raised when a run is requested for a workflow with error diagnostics."""

    def __init__(self, diagnostics: list) -> None:
        errors = [d for d in diagnostics if d.severity == "error"]
        super().__init__(f"workflow has {len(errors)} error diagnostic(s): " + "; ".join(d.message for d in errors))
        self.diagnostics = diagnostics


class RunError(GotflowError):
    """First node failure of a run, with the partial trace attached."""

    def __init__(self, message: str, *, node_id: str | None = None, trace=None, cause: BaseException | None = None) -> None:
        super().__init__(message)
        self.node_id = node_id
        self.trace = trace
        self.cause = cause
