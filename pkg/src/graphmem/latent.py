"""Latent view of the memory and budgeted retrieval over it.

Edges and questions are feature-hashed bags of prefixed tokens, L2
normalized, then passed through trainable ``d x d`` maps: ``A`` on the edge
side, ``Q`` on the question side. Relevance is bilinear, ``s_i = v^T W u_i``.
Selection is a hard top-k, and training goes through a temperature softmax
over the same scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from graphmem import _kernels
from graphmem.chunker import tokenize
from graphmem.model import Edge, GraphState, fnv1a_64

DEFAULT_DIM = 64
DEFAULT_TAU = 0.5
DEFAULT_HASH_SEED = 0x5EED


@dataclass
class EmbedderParams:
    d: int = DEFAULT_DIM
    A: np.ndarray | None = None
    hash_seed: int = DEFAULT_HASH_SEED

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ValueError("embedding dimension must be >= 2")
        if self.A is None:
            self.A = np.eye(self.d)
        self.A = np.array(self.A, dtype=np.float64)
        if self.A.shape != (self.d, self.d) or not np.all(np.isfinite(self.A)):
            raise ValueError("edge map must be a finite d x d matrix")

    def copy(self) -> "EmbedderParams":
        return EmbedderParams(self.d, self.A.copy(), self.hash_seed)


@dataclass
class RetrieverParams:
    d: int = DEFAULT_DIM
    W: np.ndarray | None = None
    Q: np.ndarray | None = None
    tau: float = DEFAULT_TAU
    k: int = 30

    def __post_init__(self) -> None:
        if self.W is None:
            self.W = np.eye(self.d)
        if self.Q is None:
            self.Q = np.eye(self.d)
        self.W = np.array(self.W, dtype=np.float64)
        self.Q = np.array(self.Q, dtype=np.float64)
        if self.W.shape != (self.d, self.d) or self.Q.shape != (self.d, self.d):
            raise ValueError("W and Q must be d x d")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        if self.k < 1:
            raise ValueError("budget k must be >= 1")

    def copy(self) -> "RetrieverParams":
        return RetrieverParams(self.d, self.W.copy(), self.Q.copy(), self.tau, self.k)


@dataclass
class SelectionRelaxation:
    z: np.ndarray  # hard 0/1 mask
    alpha: np.ndarray
    s: np.ndarray


@dataclass
class Subgraph:
    """Retrieved evidence; ``indices`` are 0-based rows of the edge list, best first."""

    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    edges: list[Edge] = field(default_factory=list)
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.edges)

    def edge_ids(self) -> set[int]:
        return {e.edge_id for e in self.edges}


@lru_cache(maxsize=1 << 18)
def _slot(token: str, seed: int, d: int) -> tuple[int, float]:
    h = fnv1a_64(seed.to_bytes(8, "little") + token.encode("utf-8"))
    return h % d, (-1.0 if h >> 63 else 1.0)


def hash_features(tokens: Sequence[str], d: int, seed: int) -> np.ndarray:
    """Signed bag-of-tokens hashing into ``d`` buckets, L2 normalized (zero stays zero)."""
    x = np.zeros(d)
    for tok in tokens:
        b, sign = _slot(tok, seed, d)
        x[b] += sign
    norm = np.sqrt(x @ x)
    return x / norm if norm > 0 else x


def edge_tokens(e: Edge) -> list[str]:
    return (
        ["h:" + t for t in tokenize(e.head.lower())]
        + ["r:" + t for t in tokenize(e.relation.lower())]
        + ["t:" + t for t in tokenize(e.tail.lower())]
    )


def edge_features(edges: Sequence[Edge], ep: EmbedderParams) -> np.ndarray:
    """Rows of normalized hashed features, before the trainable edge map."""
    F = np.zeros((len(edges), ep.d))
    for i, e in enumerate(edges):
        F[i] = hash_features(edge_tokens(e), ep.d, ep.hash_seed)
    return F


def embed_edge(e: Edge, ep: EmbedderParams) -> np.ndarray:
    return ep.A @ hash_features(edge_tokens(e), ep.d, ep.hash_seed)


def embed_edges(edges: Sequence[Edge], ep: EmbedderParams) -> np.ndarray:
    return edge_features(edges, ep) @ ep.A.T


def query_features(q: str, ep: EmbedderParams) -> np.ndarray:
    toks = tokenize(q.lower())
    if not toks:
        raise ValueError("question has no tokens")
    return hash_features(["q:" + t for t in toks], ep.d, ep.hash_seed)


def encode_query(q: str, rp: RetrieverParams, ep: EmbedderParams) -> np.ndarray:
    return rp.Q @ query_features(q, ep)


def score(v: np.ndarray, W: np.ndarray, U: np.ndarray) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.size == 0:
        U = U.reshape(0, W.shape[1])
    if v.ndim != 1 or W.shape != (v.shape[0], U.shape[1]):
        raise ValueError(f"shape mismatch: v {v.shape}, W {W.shape}, U {U.shape}")
    return _kernels.bilinear_scores(U, W, v)


def topk(s: np.ndarray, k: int) -> np.ndarray:
    """Indices of at most ``k`` highest scores, best first; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return _kernels.topk_indices(s, k)


def relax(s: np.ndarray, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError("temperature must be positive")
    return _kernels.softmax(s, tau)


def ste_select(s: np.ndarray, k: int, tau: float) -> SelectionRelaxation:
    """Hard mask for the forward/reporting path, softmax weights for the gradient path."""
    s = np.asarray(s, dtype=np.float64)
    z = np.zeros(s.shape[0])
    z[topk(s, k)] = 1.0
    return SelectionRelaxation(z=z, alpha=relax(s, tau), s=s)


def retrieve(
    graph: GraphState | Sequence[Edge],
    U: np.ndarray,
    q: str,
    rp: RetrieverParams,
    ep: EmbedderParams,
) -> Subgraph:
    edges = graph.edge_list() if isinstance(graph, GraphState) else list(graph)
    if len(edges) != len(U):
        raise ValueError(f"embedding rows ({len(U)}) do not match edges ({len(edges)})")
    if not edges:
        return Subgraph()
    s = score(encode_query(q, rp, ep), rp.W, U)
    idx = topk(s, rp.k)
    return Subgraph(indices=idx, edges=[edges[i] for i in idx], scores=s[idx])


# ---------------------------------------------------------------------------
# surrogate loss gradients
# ---------------------------------------------------------------------------


@dataclass
class PackedBatch:
    F: np.ndarray  # stacked edge features of all instances
    offsets: np.ndarray  # instance i owns rows offsets[i]:offsets[i+1]
    G: np.ndarray  # one question feature row per instance
    gold: np.ndarray  # 0/1 per stacked row

    @property
    def size(self) -> int:
        return self.G.shape[0]


def pack_batch(
    features: Sequence[np.ndarray],
    queries: Sequence[np.ndarray],
    golds: Sequence[Sequence[int]],
    pooled: bool = False,
) -> PackedBatch:
    """Stack instances for the batched gradient kernel.

    Each gold row gets its own group label (one answer step per gold edge)
    unless ``pooled``, in which case all gold rows of an instance share one.
    """
    d = queries[0].shape[0] if len(queries) else 0
    sizes = [f.shape[0] for f in features]
    offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum(sizes)
    F = np.concatenate(features) if features else np.zeros((0, d))
    gold = np.zeros(int(offsets[-1]), dtype=np.int64)
    for i, g in enumerate(golds):
        if len(g) == 0:
            raise ValueError(f"instance {i} has no gold edges")
        rows = offsets[i] + np.asarray(g, dtype=np.int64)
        gold[rows] = 1 if pooled else np.arange(1, len(g) + 1)
    return PackedBatch(F, offsets, np.asarray(queries, dtype=np.float64).reshape(len(sizes), d), gold)


def grad_surrogate(
    batch: PackedBatch,
    ep: EmbedderParams,
    rp: RetrieverParams,
    eps: float = 1e-9,
    hard_masks: Sequence[np.ndarray] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean surrogate loss and its exact gradients w.r.t. ``A``, ``W`` and ``Q``.

    Gradients flow only through the softmax weights. ``hard_masks`` is
    accepted so callers can pass the forward selection along, and it has no
    influence on the result.
    """
    del hard_masks
    losses, gA, gW, gQ = _kernels.surrogate_grads(
        batch.F, batch.offsets, batch.G, batch.gold, ep.A, rp.W, rp.Q, rp.tau, eps
    )
    m = max(batch.size, 1)
    return float(losses.sum() / m), {"A": gA / m, "W": gW / m, "Q": gQ / m}


def surrogate_loss_value(batch: PackedBatch, ep: EmbedderParams, rp: RetrieverParams, eps: float = 1e-9) -> float:
    """Loss only, recomputed with plain numpy; used as the finite-difference objective."""
    total = 0.0
    for i in range(batch.size):
        lo, hi = batch.offsets[i], batch.offsets[i + 1]
        s = batch.F[lo:hi] @ ep.A.T @ (rp.W.T @ (rp.Q @ batch.G[i]))
        e = np.exp((s - s.max()) / rp.tau)
        alpha = e / e.sum()
        labels = batch.gold[lo:hi]
        for h in np.unique(labels[labels > 0]):
            total += -np.log(alpha[labels == h].sum() + eps)
    return total / max(batch.size, 1)
