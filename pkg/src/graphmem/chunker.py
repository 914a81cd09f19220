"""Word-level tokenizer and overlapping chunking of long contexts."""

from __future__ import annotations

import re
from dataclasses import dataclass

from graphmem.model import BuildConfig

TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Split into runs of word characters and single punctuation marks."""
    return TOKEN_RE.findall(text)


def token_spans(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(), m.start(), m.end()) for m in TOKEN_RE.finditer(text)]


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def token_count(text: str) -> int:
    return sum(1 for _ in TOKEN_RE.finditer(text))


@dataclass(frozen=True)
class Chunk:
    index: int  # 1-based
    start: int  # token offsets, end exclusive
    end: int
    text: str

    @property
    def token_span(self) -> tuple[int, int]:
        return (self.start, self.end)

    @property
    def at_document_start(self) -> bool:
        return self.start == 0


def chunk_spans(n_tokens: int, cfg: BuildConfig) -> list[tuple[int, int]]:
    if n_tokens == 0:
        return []
    spans = []
    start = 0
    while True:
        end = min(start + cfg.chunk_len, n_tokens)
        spans.append((start, end))
        if end >= n_tokens:
            return spans
        start += cfg.stride


def chunk(text: str, cfg: BuildConfig) -> list[Chunk]:
    """Cut ``text`` into chunks of at most ``chunk_len`` tokens advancing by ``chunk_len - overlap``.

    Chunk text is the original character slice from the first to the last
    token of the span, so surface forms survive untouched.
    """
    spans = token_spans(text)
    out = []
    for i, (s, e) in enumerate(chunk_spans(len(spans), cfg), start=1):
        out.append(Chunk(i, s, e, text[spans[s][1] : spans[e - 1][2]]))
    return out
