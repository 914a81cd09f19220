"""Per-chunk candidate triple extraction.

Two extractors share one protocol: a rule-based one that inverts the
synthetic corpus templates exactly, and a remote one that asks a
chat-completion service for bracket-pipe lines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

from graphmem.chunker import Chunk, token_spans
from graphmem.model import Triple
from graphmem.serializer import parse_lines
from graphmem.service import ServiceClient

logger = logging.getLogger(__name__)


class Extractor(Protocol):
    def extract(self, chunk: Chunk) -> list[Triple]: ...


DEFAULT_PHRASES = (
    "works at",
    "lives in",
    "was founded by",
    "owns",
    "is married to",
    "was born in",
    "plays for",
    "is managed by",
    "collaborates with",
    "is located in",
    "teaches at",
    "studies at",
    "writes for",
    "sponsors",
    "competes with",
    "supplies",
    "invests in",
    "is allied with",
    "mentors",
    "admires",
    "borrows from",
    "was trained by",
    "reports to",
    "designed",
)


def relation_name(phrase: str) -> str:
    return "_".join(phrase.lower().split())


@dataclass(frozen=True)
class RuleGrammar:
    """Closed set of relation phrases; a matching sentence reads ``<head> <phrase> <tail>.``"""

    phrases: tuple[str, ...] = DEFAULT_PHRASES

    def __post_init__(self) -> None:
        toks = [tuple(p.lower().split()) for p in self.phrases]
        for i, a in enumerate(toks):
            if not a:
                raise ValueError("empty relation phrase")
            for j, b in enumerate(toks):
                if i != j and b[: len(a)] == a:
                    raise ValueError(f"phrase {self.phrases[i]!r} is a prefix of {self.phrases[j]!r}")

    @property
    def relations(self) -> list[str]:
        return [relation_name(p) for p in self.phrases]

    @property
    def vocabulary(self) -> frozenset[str]:
        return frozenset(w for p in self.phrases for w in p.lower().split())

    def phrase_tokens(self) -> list[tuple[tuple[str, ...], str]]:
        # longest first so a shorter phrase never shadows a longer one at the same offset
        pairs = [(tuple(p.lower().split()), relation_name(p)) for p in self.phrases]
        return sorted(pairs, key=lambda p: -len(p[0]))

    def sentence(self, head: str, phrase: str, tail: str) -> str:
        return f"{head} {phrase} {tail}."


def _match_sentence(text: str, spans: Sequence[tuple[str, int, int]], by_first: dict) -> Triple | None:
    words = [s[0].lower() for s in spans]
    for pos in range(1, len(words) - 1):
        for ptoks, rel in by_first.get(words[pos], ()):
            n = len(ptoks)
            if tuple(words[pos : pos + n]) == ptoks and pos + n < len(words):
                head = text[spans[0][1] : spans[pos - 1][2]]
                tail = text[spans[pos + n][1] : spans[-1][2]]
                return Triple(head, rel, tail)
    return None


def rule_extract(chunk: Chunk, grammar: RuleGrammar) -> list[Triple]:
    """Every complete template sentence in the chunk, in document order.

    A leading fragment is skipped unless the chunk starts the document, and
    an unterminated trailing fragment is always skipped, so sentences cut by
    a chunk boundary never produce truncated entities.
    """
    spans = token_spans(chunk.text)
    by_first: dict[str, list] = {}
    for ptoks, rel in grammar.phrase_tokens():
        by_first.setdefault(ptoks[0], []).append((ptoks, rel))
    out = []
    sentence: list[tuple[str, int, int]] = []
    complete_start = chunk.at_document_start
    for tok in spans:
        if tok[0] == ".":
            if complete_start and sentence:
                t = _match_sentence(chunk.text, sentence, by_first)
                if t is not None:
                    out.append(t)
            sentence = []
            complete_start = True
        else:
            sentence.append(tok)
    return out


@dataclass
class RuleExtractor:
    grammar: RuleGrammar = field(default_factory=RuleGrammar)

    def extract(self, chunk: Chunk) -> list[Triple]:
        return rule_extract(chunk, self.grammar)


DEFAULT_PROMPT = (
    "Extract factual (head, relation, tail) triples from the passage below.\n"
    "Write one triple per line as [head|relation|tail] with a snake_case relation, "
    "most confident first, and nothing else.\n\nPassage:\n{chunk}"
)


@dataclass
class RemoteExtractor:
    client: ServiceClient
    prompt_template: str = DEFAULT_PROMPT
    warnings: list[str] = field(default_factory=list)

    def extract(self, chunk: Chunk) -> list[Triple]:
        return remote_extract(chunk, self.client, self.prompt_template, self.warnings)


def remote_extract(
    chunk: Chunk,
    client: ServiceClient,
    prompt_template: str = DEFAULT_PROMPT,
    warnings: list[str] | None = None,
) -> list[Triple]:
    response = client.chat(prompt_template.format(chunk=chunk.text), temperature=0.0)
    diags: list[str] = []
    triples = parse_lines(response, diags)
    if warnings is not None:
        warnings.extend(diags)
    if not triples and response.strip():
        msg = f"chunk {chunk.index}: no parseable triples in service response"
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)
    return triples
