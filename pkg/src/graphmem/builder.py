"""Streaming graph construction: per chunk Extract -> Merge -> Filter -> Cap.

The graph never holds more than ``global_cap`` edges after a chunk step, and
at most ``per_chunk_cap`` distinct candidates from one chunk reach Merge.
"""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from graphmem.chunker import Chunk, chunk, tokenize
from graphmem.extraction import Extractor
from graphmem.model import (
    BuildConfig,
    CanonicalizationError,
    Edge,
    GraphState,
    Triple,
    edge_id,
)
from graphmem.serializer import compose_prompt, serialize

RELATION_CHARSET = re.compile(r"[a-z0-9_ ]+")
FILTER_REASONS = ("schema", "field_length", "relation_type", "duplicate")


class CapabilityError(RuntimeError):
    pass


@dataclass
class BuildReport:
    """Counters for one build.

    ``candidates_emitted`` counts candidates admitted past the per-chunk cap;
    those cut by the cap are in ``truncated``. Every admitted candidate ends
    up in exactly one of: a surviving edge, ``merged_duplicates``, a
    ``filtered`` bucket, or ``evicted_by_cap``.
    """

    chunks_processed: int = 0
    candidates_emitted: int = 0
    truncated: int = 0
    merged_duplicates: int = 0
    filtered: dict[str, int] = field(default_factory=lambda: {r: 0 for r in FILTER_REASONS})
    evicted_by_cap: int = 0
    # candidate occurrences that did not end up on a surviving edge
    dropped_occurrences: int = 0

    def accounted(self, n_edges: int) -> int:
        return n_edges + self.merged_duplicates + sum(self.filtered.values()) + self.evicted_by_cap


def truncate_candidates(candidates: Sequence[Triple], cap: int) -> tuple[list[Triple], int]:
    """Keep candidates while fewer than ``cap`` distinct facts are admitted.

    Repeats of an admitted fact ride along without taking a new slot;
    candidates that fail canonicalization each take one.
    """
    seen: set = set()
    kept = []
    for i, t in enumerate(candidates):
        try:
            key = edge_id(t)
        except CanonicalizationError:
            key = ("invalid", i)
        if key in seen:
            kept.append(t)
        elif len(seen) < cap:
            seen.add(key)
            kept.append(t)
    return kept, len(candidates) - len(kept)


def merge(
    state: GraphState, candidates: Iterable[Triple], chunk_index: int = 0, report: BuildReport | None = None
) -> GraphState:
    state = state.copy()
    report = report if report is not None else BuildReport()
    for t in candidates:
        report.candidates_emitted += 1
        try:
            canon = t.canonical()
        except CanonicalizationError:
            report.filtered["schema"] += 1
            report.dropped_occurrences += 1
            continue
        eid = edge_id(canon)
        existing = state.edges.get(eid)
        if existing is not None:
            state.edges[eid] = Edge(
                existing.triple,
                eid,
                existing.occurrence_count + 1,
                existing.first_chunk,
                existing.insertion_order,
            )
            report.merged_duplicates += 1
        else:
            state.edges[eid] = Edge(canon, eid, 1, chunk_index, state.next_order)
            state.next_order += 1
    state.reindex()
    return state


def violation(e: Edge, cfg: BuildConfig) -> str | None:
    if not all(f.strip() for f in e.triple.fields()):
        return "schema"
    if any(len(tokenize(f)) > cfg.field_cap for f in e.triple.fields()):
        return "field_length"
    if not RELATION_CHARSET.fullmatch(e.relation):
        return "relation_type"
    return None


def filter_edges(state: GraphState, cfg: BuildConfig, report: BuildReport | None = None) -> GraphState:
    report = report if report is not None else BuildReport()
    out = state.copy()
    out.edges = {}
    seen = set()
    for eid, e in state.edges.items():
        reason = violation(e, cfg)
        if reason is None and eid in seen:
            reason = "duplicate"
        seen.add(eid)
        if reason is not None:
            report.filtered[reason] += 1
            report.dropped_occurrences += e.occurrence_count
            continue
        out.edges[eid] = e
    assert report.filtered["duplicate"] == 0, "duplicate edge ids survived merge"
    out.reindex()
    return out


def cap(state: GraphState, cfg: BuildConfig, report: BuildReport | None = None) -> GraphState:
    """Evict lowest ``(occurrence_count, -insertion_order)`` edges until at capacity."""
    excess = len(state.edges) - cfg.global_cap
    if excess <= 0:
        return state
    report = report if report is not None else BuildReport()
    victims = heapq.nsmallest(
        excess, state.edges.values(), key=lambda e: (e.occurrence_count, -e.insertion_order)
    )
    out = state.copy()
    for e in victims:
        del out.edges[e.edge_id]
        report.evicted_by_cap += 1
        report.dropped_occurrences += e.occurrence_count
    out.reindex()
    return out


def step(
    state: GraphState,
    chunk_: Chunk,
    extractor: Extractor,
    cfg: BuildConfig,
    report: BuildReport | None = None,
) -> GraphState:
    if chunk_.index != state.step + 1:
        raise ValueError(f"chunk {chunk_.index} out of order, state is at step {state.step}")
    state.check_writable()
    report = report if report is not None else BuildReport()
    candidates, dropped = truncate_candidates(extractor.extract(chunk_), cfg.per_chunk_cap)
    report.truncated += dropped
    merged = merge(state, candidates, chunk_.index, report)
    nxt = cap(filter_edges(merged, cfg, report), cfg, report)
    nxt.step = state.step + 1
    nxt.capacity = cfg.global_cap
    report.chunks_processed += 1
    return nxt


def build(
    x: str, extractor: Extractor, cfg: BuildConfig, question: str | None = None
) -> tuple[GraphState, BuildReport]:
    """Fold :func:`step` over the chunks of ``x`` and freeze the result.

    ``question`` is accepted for signature symmetry and deliberately unused:
    the memory does not depend on what will be asked.
    """
    del question
    state = GraphState(capacity=cfg.global_cap)
    report = BuildReport()
    for c in chunk(x, cfg):
        state = step(state, c, extractor, cfg, report)
    return state.freeze(), report


def stage1_loss(graph: GraphState | Sequence[Edge], question: str, answer: str, reasoner) -> float:
    """Teacher-forced answer negative log-likelihood given the full serialized graph."""
    logprobs = getattr(reasoner, "logprobs", None)
    if logprobs is None or not getattr(reasoner, "supports_logprobs", True):
        raise CapabilityError(f"{type(reasoner).__name__} does not expose token log-probabilities")
    edges = graph.edge_list() if isinstance(graph, GraphState) else list(graph)
    prompt = compose_prompt(serialize(edges), question)
    lp = logprobs(prompt, tokenize(answer))
    total = 0.0
    for v in lp:
        if not math.isfinite(v):
            return math.inf
        total -= v
    return total


__all__ = [
    "BuildReport",
    "CapabilityError",
    "build",
    "cap",
    "filter_edges",
    "merge",
    "stage1_loss",
    "step",
    "truncate_candidates",
]
