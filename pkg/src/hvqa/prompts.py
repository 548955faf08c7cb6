"""Registry of the seven pipeline prompt templates.

Placeholder syntax is a single-brace {name}; names may contain spaces.
Nested or empty braces are rejected when a template is loaded. Built-in
bodies ship as package resources and can be overridden per-template by a
directory of <template_id>.txt files.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import HvqaError

logger = logging.getLogger(__name__)

TEMPLATE_IDS = (
    "summarize",
    "hypothesis",
    "clue",
    "verify",
    "answer",
    "refine_specificity",
    "refine_discriminability",
)

_PLACEHOLDER_RE = re.compile(r"\{([^{}]+)\}")


class PromptError(HvqaError):
    pass


class UnknownTemplate(PromptError):
    def __init__(self, template_id: str):
        super().__init__(f"unknown template {template_id!r}; known: {', '.join(TEMPLATE_IDS)}")


class MissingBinding(PromptError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no binding for placeholder {{{name}}}")


class TemplateSyntaxError(PromptError):
    pass


def _check_braces(template_id: str, body: str) -> None:
    depth = 0
    for pos, ch in enumerate(body):
        if ch == "{":
            if depth:
                raise TemplateSyntaxError(f"{template_id}: nested '{{' at offset {pos}")
            depth = 1
        elif ch == "}":
            if not depth:
                raise TemplateSyntaxError(f"{template_id}: unmatched '}}' at offset {pos}")
            depth = 0
    if depth:
        raise TemplateSyntaxError(f"{template_id}: unclosed '{{'")
    for match in re.finditer(r"\{\}", body):
        raise TemplateSyntaxError(f"{template_id}: empty placeholder at offset {match.start()}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    def __post_init__(self):
        _check_braces(self.template_id, self.body)

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))

    def render(self, bindings: Mapping[str, object]) -> str:
        """Substitute every placeholder literally; extra bindings only warn."""
        extra = set(bindings) - self.placeholders
        if extra:
            logger.warning(
                "template %s: unused bindings %s", self.template_id, sorted(extra)
            )

        def _sub(match: re.Match) -> str:
            name = match.group(1)
            if name not in bindings:
                raise MissingBinding(name)
            return str(bindings[name])

        return _PLACEHOLDER_RE.sub(_sub, self.body)


def _builtin_body(template_id: str) -> str:
    return (
        resources.files("hvqa")
        .joinpath("templates", f"{template_id}.txt")
        .read_text(encoding="utf-8")
    )


class TemplateRegistry:
    """Immutable set of the seven templates, optionally overridden from disk."""

    def __init__(self, overrides_dir: str | Path | None = None):
        templates = {}
        for template_id in TEMPLATE_IDS:
            body = _builtin_body(template_id)
            if overrides_dir is not None:
                candidate = Path(overrides_dir) / f"{template_id}.txt"
                if candidate.exists():
                    body = candidate.read_text(encoding="utf-8")
            templates[template_id] = PromptTemplate(template_id, body)
        self._templates = templates

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise UnknownTemplate(template_id) from None

    def render(self, template_id: str, bindings: Mapping[str, object]) -> str:
        return self.get(template_id).render(bindings)

    def list_placeholders(self, template_id: str) -> frozenset[str]:
        return self.get(template_id).placeholders
