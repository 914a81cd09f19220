"""Evidence text: ``Relevant Knowledge:`` header followed by one ``[h|r|t]`` line per edge.

Reserved characters ``\\ | [ ]`` and newline are backslash-escaped inside
fields. The bytes produced here are what a reasoner sees, so the layout is
fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

from graphmem.model import Edge, Triple

logger = logging.getLogger(__name__)

HEADER = "Relevant Knowledge:"
EMPTY_LINE = "[none]"

_ESCAPES = {"\\": "\\\\", "|": "\\|", "[": "\\[", "]": "\\]", "\n": "\\n"}
_UNESCAPES = {"\\": "\\", "|": "|", "[": "[", "]": "]", "n": "\n"}


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class EvidenceText:
    text: str

    def __str__(self) -> str:
        return self.text


def escape_field(s: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in s)


def format_line(t: Triple) -> str:
    return "[" + "|".join(escape_field(f) for f in t.fields()) + "]"


def serialize(edges: Iterable[Edge | Triple]) -> EvidenceText:
    lines = [HEADER]
    for e in edges:
        lines.append(format_line(e.triple if isinstance(e, Edge) else e))
    if len(lines) == 1:
        lines.append(EMPTY_LINE)
    return EvidenceText("\n".join(lines))


def compose_prompt(evidence: EvidenceText | str, question: str) -> str:
    return f"{evidence}\n\nQuestion: {question}\nAnswer:"


def _split_fields(line: str) -> list[str] | None:
    """Split the inside of a bracketed line on unescaped pipes; None on bad escapes."""
    if len(line) < 2 or line[0] != "[" or line[-1] != "]":
        return None
    body = line[1:-1]
    fields = []
    buf: list[str] = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\":
            if i + 1 >= len(body) or body[i + 1] not in _UNESCAPES:
                return None
            buf.append(_UNESCAPES[body[i + 1]])
            i += 2
            continue
        if ch in "[]":
            return None
        if ch == "|":
            fields.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
        i += 1
    fields.append("".join(buf))
    return fields


def parse_line(line: str) -> Triple | None:
    fields = _split_fields(line)
    if fields is None or len(fields) != 3:
        return None
    return Triple(*fields)


def parse_lines(text: str, diagnostics: list[str] | None = None) -> list[Triple]:
    """Parse bracket-pipe lines, skipping blanks and ``[none]``; malformed lines become diagnostics."""
    out = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip() or line == EMPTY_LINE:
            continue
        t = parse_line(line)
        if t is None:
            msg = f"line {lineno}: malformed evidence line {line[:80]!r}"
            logger.warning(msg)
            if diagnostics is not None:
                diagnostics.append(msg)
            continue
        out.append(t)
    return out


def parse(text: EvidenceText | str, diagnostics: list[str] | None = None) -> list[Triple]:
    """Inverse of :func:`serialize`. Raises :class:`ParseError` without the header line."""
    text = str(text)
    head, sep, body = text.partition("\n")
    if head != HEADER:
        raise ParseError("missing 'Relevant Knowledge:' header")
    return parse_lines(body, diagnostics)


def evidence_from_prompt(prompt: str) -> str | None:
    """Recover the evidence block of a prompt built by :func:`compose_prompt`."""
    if not prompt.startswith(HEADER):
        return None
    evidence, sep, _ = prompt.partition("\n\nQuestion: ")
    return evidence if sep else None
