"""``#{name}`` placeholder expansion for prompt templates.

Expansion is single-pass: values are inserted verbatim and never rescanned,
so text produced by an LLM cannot smuggle in new placeholders.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping

from .errors import NotFound, RenderError, UnterminatedPlaceholder

PLACEHOLDER = re.compile(r"#\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class ParameterScope:
    """Layered lookup: node literals, then run variables, then parameter files.

    ``parameter_files`` are given in declaration order; a later file shadows
    an earlier one.
    """

    literals: Mapping[str, str] = field(default_factory=dict)
    variables: Mapping[str, str] = field(default_factory=dict)
    parameter_files: tuple[Mapping[str, str], ...] = ()

    def layers(self) -> Iterator[Mapping[str, str]]:
        yield self.literals
        yield self.variables
        yield from reversed(self.parameter_files)

    def __contains__(self, name: str) -> bool:
        return any(name in layer for layer in self.layers())


def resolve(name: str, scope: ParameterScope) -> str:
    for layer in scope.layers():
        if name in layer:
            return layer[name]
    raise NotFound(name)


def _tokens(template: str) -> Iterator[re.Match]:
    """Yield placeholder matches; raise on a ``#{`` that is never closed.

    A ``#{...}`` whose body is not an identifier is ordinary text.
    """
    pos = 0
    while True:
        start = template.find("#{", pos)
        if start < 0:
            return
        m = PLACEHOLDER.match(template, start)
        if m:
            yield m
            pos = m.end()
            continue
        if template.find("}", start + 2) < 0:
            raise UnterminatedPlaceholder(len(template[:start].encode("utf-8")))
        pos = start + 2


def extract_placeholders(template: str) -> list[str]:
    names: list[str] = []
    for m in _tokens(template):
        if m.group(1) not in names:
            names.append(m.group(1))
    return names


def render_template(template: str, scope: ParameterScope) -> str:
    tokens = list(_tokens(template))
    missing = []
    for m in tokens:
        name = m.group(1)
        if name not in scope and name not in missing:
            missing.append(name)
    if missing:
        raise RenderError(missing)
    parts: list[str] = []
    pos = 0
    for m in tokens:
        parts.append(template[pos:m.start()])
        parts.append(resolve(m.group(1), scope))
        pos = m.end()
    parts.append(template[pos:])
    return "".join(parts)
