"""Frozen reasoner boundary and the end-to-end inference pipeline.

Only the retrieved subgraph, serialized, and the question ever reach a
reasoner. The raw context is consumed by the builder and stops there.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from graphmem.builder import BuildReport, CapabilityError, build
from graphmem.chunker import Chunk, token_count, tokenize
from graphmem.extraction import Extractor, RuleGrammar, rule_extract
from graphmem.latent import EmbedderParams, RetrieverParams, Subgraph, edge_features, retrieve
from graphmem.model import BuildConfig, GraphState, QAInstance, edge_id
from graphmem.serializer import HEADER, compose_prompt, parse, serialize
from graphmem.service import ServiceClient

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"


class Reasoner(Protocol):
    def generate(self, prompt: str) -> str: ...


class PromptTooLongError(ValueError):
    pass


def evidence_edge_ids(prompt: str, grammar: RuleGrammar | None = None) -> set[int]:
    """Edge ids of the facts a prompt exposes.

    Bracket-line evidence is parsed directly; free-text evidence (chunk
    retrieval) goes through the rule extractor.
    """
    evidence = prompt.partition("\n\nQuestion: ")[0]
    if evidence.startswith(HEADER):
        triples = parse(evidence)
    else:
        triples = rule_extract(Chunk(1, 0, token_count(evidence), evidence), grammar or RuleGrammar())
    return {edge_id(t) for t in triples}


def answer_from_ids(ids: set[int], instance: QAInstance) -> str:
    if instance.gold_edge_ids is None:
        raise CapabilityError(f"instance {instance.id} carries no gold edge ids")
    return instance.answers[0] if set(instance.gold_edge_ids) <= ids else UNKNOWN


def mock_answer(subgraph: Subgraph, instance: QAInstance) -> str:
    """Gold answer iff every gold edge is in the subgraph, otherwise ``unknown``."""
    return answer_from_ids(subgraph.edge_ids(), instance)


@dataclass
class MockReasoner:
    """Deterministic reasoner bound to one synthetic instance."""

    instance: QAInstance
    grammar: RuleGrammar = field(default_factory=RuleGrammar)
    prompts: list[str] = field(default_factory=list)

    def generate(self, prompt: str) -> str:
        self.prompts.append(prompt)
        return answer_from_ids(evidence_edge_ids(prompt, self.grammar), self.instance)


@dataclass
class SurrogateReasoner:
    """Differentiable stand-in for a frozen LM.

    Token likelihood mixes a copy distribution over evidence tokens with a
    uniform floor over the vocabulary:
    ``p(a_t) = copy_weight * [a_t in E] / |E| + (1 - copy_weight) / V``.
    The retrieval-side loss ``-log(gold mass + eps)`` lives here too.
    """

    vocab_size: int
    copy_weight: float = 0.9
    eps: float = 1e-9
    supports_logprobs: bool = True

    def _evidence_tokens(self, prompt: str) -> list[str]:
        evidence = prompt.partition("\n\nQuestion: ")[0]
        if not evidence.startswith(HEADER):
            return []
        toks: list[str] = []
        for t in parse(evidence):
            for f in t.fields():
                toks.extend(tokenize(f.lower()))
        return sorted(set(toks))

    def logprobs(self, prompt: str, answer_tokens: Sequence[str]) -> np.ndarray:
        ev = set(self._evidence_tokens(prompt))
        floor = (1.0 - self.copy_weight) / self.vocab_size
        out = np.empty(len(answer_tokens))
        for i, tok in enumerate(answer_tokens):
            p = floor + (self.copy_weight / len(ev) if tok.lower() in ev else 0.0)
            out[i] = math.log(p) if p > 0 else -math.inf
        return out

    def generate(self, prompt: str) -> str:
        ev = self._evidence_tokens(prompt)
        return ev[0] if ev else UNKNOWN

    def loss(self, alpha: np.ndarray, gold: Sequence[int]) -> float:
        from graphmem.trainer import surrogate_loss

        return surrogate_loss(alpha, gold, self.eps)


@dataclass
class RemoteReasoner:
    client: ServiceClient
    max_context_tokens: int = 8192
    supports_logprobs: bool = False
    diagnostics: list[str] = field(default_factory=list)

    def generate(self, prompt: str) -> str:
        return remote_answer(prompt, self.client, self.max_context_tokens, self.diagnostics)

    def logprobs(self, prompt: str, answer_tokens: Sequence[str]) -> np.ndarray:
        if not self.supports_logprobs:
            raise CapabilityError("remote service not configured for token log-probabilities")
        return np.asarray(self.client.token_logprobs(prompt, " " + " ".join(answer_tokens)))


def remote_answer(
    prompt: str, client: ServiceClient, max_context_tokens: int = 8192, diagnostics: list[str] | None = None
) -> str:
    n = token_count(prompt)
    if n > max_context_tokens:
        raise PromptTooLongError(f"prompt has {n} tokens, limit is {max_context_tokens}")
    text = client.chat(prompt, temperature=0.0).strip()
    if not text:
        msg = "reasoner returned an empty completion"
        logger.warning(msg)
        if diagnostics is not None:
            diagnostics.append(msg)
    return text


@dataclass
class Memory:
    """A built graph with its row-aligned embeddings."""

    graph: GraphState
    U: np.ndarray
    features: np.ndarray | None = None
    report: BuildReport | None = None

    @property
    def edges(self):
        return self.graph.edge_list()


def build_memory(x: str, extractor: Extractor, cfg: BuildConfig, ep: EmbedderParams) -> Memory:
    graph, report = build(x, extractor, cfg)
    F = edge_features(graph.edge_list(), ep)
    return Memory(graph, F @ ep.A.T, F, report)


def answer_with_memory(
    memory: Memory, question: str, ep: EmbedderParams, rp: RetrieverParams, reasoner: Reasoner
) -> tuple[str, Subgraph]:
    sub = retrieve(memory.graph, memory.U, question, rp, ep)
    prompt = compose_prompt(serialize(sub.edges), question)
    return reasoner.generate(prompt), sub


def answer(
    x: str,
    q: str,
    extractor: Extractor,
    ep: EmbedderParams,
    rp: RetrieverParams,
    reasoner: Reasoner,
    cfg: BuildConfig | None = None,
) -> tuple[str, Subgraph]:
    """Build memory from ``x``, retrieve for ``q``, and ask the reasoner with the subgraph only."""
    memory = build_memory(x, extractor, cfg or BuildConfig(), ep)
    return answer_with_memory(memory, q, ep, rp, reasoner)
