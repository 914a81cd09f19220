"""Capacity-bounded graph memory with learned budgeted retrieval for long-context QA."""

from graphmem.builder import BuildReport, build
from graphmem.extraction import RuleExtractor, RuleGrammar
from graphmem.latent import EmbedderParams, RetrieverParams, Subgraph, retrieve
from graphmem.model import BuildConfig, Edge, GraphState, QAInstance, Triple, edge_id
from graphmem.reasoner import Memory, MockReasoner, answer, build_memory
from graphmem.serializer import compose_prompt, parse, serialize

__version__ = "0.1.0"

__all__ = [
    "BuildConfig",
    "BuildReport",
    "Edge",
    "EmbedderParams",
    "GraphState",
    "Memory",
    "MockReasoner",
    "QAInstance",
    "RetrieverParams",
    "RuleExtractor",
    "RuleGrammar",
    "Subgraph",
    "Triple",
    "answer",
    "build",
    "build_memory",
    "compose_prompt",
    "edge_id",
    "parse",
    "retrieve",
    "serialize",
]
