"""Core domain types: triples, edges, the capped graph state and build configuration."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

DEFAULT_CHUNK_LEN = 1024
DEFAULT_OVERLAP = 128
DEFAULT_PER_CHUNK_CAP = 32
DEFAULT_GLOBAL_CAP = 150
DEFAULT_FIELD_CAP = 16
DEFAULT_BUDGET = 30

FIELD_SEP = "\x1f"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_EDGE_JUNK = re.compile(r"^\W+|\W+$")


class CanonicalizationError(ValueError):
    """Raised when a surface form normalizes to the empty string."""


def canonicalize_entity(raw: str) -> str:
    """Lowercase, strip non-word characters at both ends, collapse inner whitespace.

    The result is idempotent. Raises :class:`CanonicalizationError` when
    nothing is left, which callers treat as "drop this candidate".
    """
    text = _EDGE_JUNK.sub("", raw.lower())
    text = " ".join(text.split())
    if not text:
        raise CanonicalizationError(f"empty after normalization: {raw!r}")
    return text


def fnv1a_64(data: bytes, seed: int = _FNV_OFFSET) -> int:
    h = seed
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str

    def fields(self) -> tuple[str, str, str]:
        return (self.head, self.relation, self.tail)

    def canonical(self) -> "Triple":
        return Triple(
            canonicalize_entity(self.head),
            canonicalize_entity(self.relation),
            canonicalize_entity(self.tail),
        )


def edge_id(t: Triple) -> int:
    """Stable 64-bit id: FNV-1a over ``h \\x1f r \\x1f t`` of the canonical triple (UTF-8)."""
    c = t.canonical()
    payload = FIELD_SEP.join(c.fields()).encode("utf-8")
    return fnv1a_64(payload)


@dataclass(frozen=True)
class Edge:
    triple: Triple
    edge_id: int
    occurrence_count: int = 1
    first_chunk: int = 0
    insertion_order: int = 0

    @property
    def head(self) -> str:
        return self.triple.head

    @property
    def relation(self) -> str:
        return self.triple.relation

    @property
    def tail(self) -> str:
        return self.triple.tail


@dataclass(frozen=True)
class BuildConfig:
    chunk_len: int = DEFAULT_CHUNK_LEN
    overlap: int = DEFAULT_OVERLAP
    per_chunk_cap: int = DEFAULT_PER_CHUNK_CAP
    global_cap: int = DEFAULT_GLOBAL_CAP
    field_cap: int = DEFAULT_FIELD_CAP

    def __post_init__(self) -> None:
        if not 0 <= self.overlap < self.chunk_len:
            raise ValueError(f"need 0 <= overlap < chunk_len, got {self.overlap}, {self.chunk_len}")
        if self.per_chunk_cap < 1 or self.global_cap < 1 or self.field_cap < 1:
            raise ValueError("per_chunk_cap, global_cap and field_cap must be >= 1")

    @property
    def stride(self) -> int:
        return self.chunk_len - self.overlap

    def to_dict(self) -> dict:
        return {
            "chunk_len": self.chunk_len,
            "overlap": self.overlap,
            "per_chunk_cap": self.per_chunk_cap,
            "global_cap": self.global_cap,
            "field_cap": self.field_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BuildConfig":
        return cls(**{k: int(v) for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class QAInstance:
    id: str
    context: str
    question: str
    answers: tuple[str, ...]
    gold_edge_ids: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise ValueError(f"instance {self.id}: empty question")
        if not self.answers:
            raise ValueError(f"instance {self.id}: no gold answers")
        object.__setattr__(self, "answers", tuple(self.answers))
        if self.gold_edge_ids is not None:
            object.__setattr__(self, "gold_edge_ids", tuple(int(i) for i in self.gold_edge_ids))


class FrozenGraphError(RuntimeError):
    pass


@dataclass
class GraphState:
    """Evolving capped edge set.

    ``edges`` is keyed by edge id and keeps insertion order. ``entity_index``
    maps each canonical head/tail of a present edge to a dense entity id.
    """

    capacity: int = DEFAULT_GLOBAL_CAP
    edges: dict[int, Edge] = field(default_factory=dict)
    entity_index: dict[str, int] = field(default_factory=dict)
    step: int = 0
    next_order: int = 0
    frozen: bool = False

    def __len__(self) -> int:
        return len(self.edges)

    def __iter__(self) -> Iterator[Edge]:
        return iter(self.edges.values())

    def edge_list(self) -> list[Edge]:
        return list(self.edges.values())

    def copy(self) -> "GraphState":
        return replace(self, edges=dict(self.edges), entity_index=dict(self.entity_index), frozen=False)

    def freeze(self) -> "GraphState":
        self.frozen = True
        return self

    def check_writable(self) -> None:
        if self.frozen:
            raise FrozenGraphError("graph state is frozen")

    def reindex(self) -> None:
        index: dict[str, int] = {}
        for e in self.edges.values():
            for name in (e.head, e.tail):
                if name not in index:
                    index[name] = len(index)
        self.entity_index = index

    @classmethod
    def from_edges(cls, edges: Iterable[Edge], capacity: int, step: int = 0) -> "GraphState":
        state = cls(capacity=capacity, step=step)
        for e in edges:
            state.edges[e.edge_id] = e
            state.next_order = max(state.next_order, e.insertion_order + 1)
        state.reindex()
        return state
