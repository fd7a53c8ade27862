"""Versioned prompt templates: data files with YAML front-matter, a [system]
section, and a [user] section containing {placeholders}."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Mapping

import yaml

PROMPTS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "prompts")


class MissingPlaceholder(ValueError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no value supplied for placeholder {{{name}}}")


class TemplateFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    version: int
    system_text: str
    user_text: str
    required: tuple[str, ...]
    schema_ref: str = ""

    def __post_init__(self):
        for name in self.required:
            if f"{{{name}}}" not in self.user_text:
                raise TemplateFormatError(
                    f"template {self.template_id!r}: required placeholder {{{name}}} absent from user text"
                )


_TOKEN_RE = re.compile(r"\{\{|\}\}|\{([a-zA-Z_][a-zA-Z0-9_]*)\}")


def _substitute(text: str, variables: Mapping[str, object]) -> str:
    def repl(match: re.Match) -> str:
        token = match.group(0)
        if token == "{{":
            return "{"
        if token == "}}":
            return "}"
        name = match.group(1)
        if name not in variables:
            raise MissingPlaceholder(name)
        return str(variables[name])

    return _TOKEN_RE.sub(repl, text)


def render_prompt(template: PromptTemplate, variables: Mapping[str, object]) -> tuple[str, str]:
    """Substitute placeholders in system and user texts.

    Extra keys in variables are ignored; {{ and }} pass through as literal
    braces; an unbound placeholder raises MissingPlaceholder.
    """
    return _substitute(template.system_text, variables), _substitute(template.user_text, variables)


def parse_template(raw: str, source: str = "<string>") -> PromptTemplate:
    body = raw
    meta: dict = {}
    if raw.startswith("---"):
        parts = raw.split("---", 2)
        if len(parts) < 3:
            raise TemplateFormatError(f"{source}: unterminated front-matter")
        meta = yaml.safe_load(parts[1]) or {}
        body = parts[2]

    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in body.splitlines():
        stripped = line.strip()
        if stripped in ("[system]", "[user]"):
            current = stripped[1:-1]
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    if "system" not in sections or "user" not in sections:
        raise TemplateFormatError(f"{source}: template needs [system] and [user] sections")

    return PromptTemplate(
        template_id=str(meta.get("template_id", os.path.splitext(os.path.basename(source))[0])),
        version=int(meta.get("version", 1)),
        system_text="\n".join(sections["system"]).strip(),
        user_text="\n".join(sections["user"]).strip(),
        required=tuple(meta.get("required", [])),
        schema_ref=str(meta.get("schema", "")),
    )


def load_template(path: str) -> PromptTemplate:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_template(fh.read(), source=path)


def builtin_templates() -> dict[str, PromptTemplate]:
    """All templates shipped in the package prompts directory, by id."""
    out = {}
    for fname in sorted(os.listdir(PROMPTS_DIR)):
        if fname.endswith(".prompt"):
            tpl = load_template(os.path.join(PROMPTS_DIR, fname))
            out[tpl.template_id] = tpl
    return out
