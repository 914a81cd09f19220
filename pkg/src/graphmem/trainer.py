"""Retriever training with a straight-through top-k.

The forward/reporting path selects edges with a hard top-k; parameter
updates follow the softmax relaxation of the same scores. The training
signal is a stand-in for the answer likelihood of a frozen reasoner that
keeps the gradient route loss -> alpha -> scores -> (W, Q, A). By default
every gold edge is its own answer step, ``sum_h -log(alpha_h + eps)``;
``objective="pooled"`` uses ``-log(sum of gold mass + eps)`` instead.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from graphmem.latent import (
    EmbedderParams,
    PackedBatch,
    RetrieverParams,
    edge_features,
    grad_surrogate,
    pack_batch,
    query_features,
    score,
    topk,
)
from graphmem.model import QAInstance

logger = logging.getLogger(__name__)


OBJECTIVES = ("per_hop", "pooled")


class TrainingDivergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 150
    batch_size: int = 16
    seed: int = 0
    builder_steps: int = 1
    joint_steps: int = 4
    eps: float = 1e-9
    objective: str = "per_hop"

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.builder_steps < 0 or self.joint_steps < 0 or self.builder_steps + self.joint_steps == 0:
            raise ValueError("alternation ratio needs a positive component")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    recalls: list[float] = field(default_factory=list)
    baseline_recall: float = float("nan")
    checksum: str = ""

    @property
    def final_recall(self) -> float:
        return self.recalls[-1] if self.recalls else self.baseline_recall

    def to_dict(self) -> dict:
        return {
            "losses": self.losses,
            "recalls": self.recalls,
            "baseline_recall": self.baseline_recall,
            "final_recall": self.final_recall,
            "checksum": self.checksum,
        }


@dataclass
class TrainingExample:
    """One instance prepared for training: pre-map edge features, question features, gold rows."""

    features: np.ndarray
    query: np.ndarray
    gold: np.ndarray  # rows of gold edges that survived building
    n_gold: int  # all gold edges, including ones the builder lost
    question: str = ""


def prepare_example(instance: QAInstance, memory, ep: EmbedderParams) -> TrainingExample:
    ids = [e.edge_id for e in memory.graph.edge_list()]
    row = {eid: i for i, eid in enumerate(ids)}
    gold_ids = instance.gold_edge_ids or ()
    gold = np.array([row[g] for g in gold_ids if g in row], dtype=np.int64)
    F = memory.features if memory.features is not None else edge_features(memory.graph.edge_list(), ep)
    return TrainingExample(F, query_features(instance.question, ep), gold, len(gold_ids), instance.question)


def surrogate_loss(alpha: np.ndarray, gold: Sequence[int], eps: float = 1e-9) -> float:
    """``-log(sum_{i in gold} alpha_i + eps)``."""
    gold = np.asarray(gold, dtype=np.int64)
    if gold.size == 0:
        raise ValueError("gold set is empty")
    if gold.min() < 0 or gold.max() >= len(alpha):
        raise IndexError("gold index out of range")
    return float(-np.log(np.asarray(alpha)[gold].sum() + eps))


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    out = dict(params)
    for name, g in grads.items():
        if name not in params:
            continue
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient for {name}")
        out[name] = params[name] - lr * g
    return out


def instance_recall(ex: TrainingExample, ep: EmbedderParams, rp: RetrieverParams) -> float:
    if ex.n_gold == 0:
        return float("nan")
    if ex.gold.size == 0:
        return 0.0
    s = score(rp.Q @ ex.query, rp.W, ex.features @ ep.A.T)
    picked = set(topk(s, rp.k).tolist())
    return sum(1 for g in ex.gold.tolist() if g in picked) / ex.n_gold


def recall_at_k(examples: Sequence[TrainingExample], ep: EmbedderParams, rp: RetrieverParams) -> float:
    """Mean fraction of gold edges inside the hard top-k, over instances that have gold edges."""
    vals = [instance_recall(ex, ep, rp) for ex in examples if ex.n_gold > 0]
    return float(np.mean(vals)) if vals else float("nan")


def checksum(ep: EmbedderParams, rp: RetrieverParams) -> str:
    h = hashlib.sha256()
    for arr in (ep.A, rp.W, rp.Q):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def _batches(examples: Sequence[TrainingExample], cfg: TrainConfig, rng: np.random.Generator):
    order = rng.permutation(len(examples))
    for lo in range(0, len(order), cfg.batch_size):
        chunk = [examples[i] for i in order[lo : lo + cfg.batch_size]]
        yield pack_batch(
            [e.features for e in chunk],
            [e.query for e in chunk],
            [e.gold for e in chunk],
            pooled=cfg.objective == "pooled",
        )


def restrict_to_selection(batch: PackedBatch, ep: EmbedderParams, rp: RetrieverParams) -> PackedBatch:
    """Keep only each instance's current hard top-k rows (gold labels travel along).

    A gold edge outside the selection leaves its group empty; that group adds
    a constant to the loss and nothing to the gradient.
    """
    feats, golds, queries = [], [], []
    for i in range(batch.size):
        lo, hi = batch.offsets[i], batch.offsets[i + 1]
        F = batch.F[lo:hi]
        idx = np.sort(topk(score(rp.Q @ batch.G[i], rp.W, F @ ep.A.T), rp.k))
        feats.append(F[idx])
        golds.append(batch.gold[lo:hi][idx])
        queries.append(batch.G[i])
    offsets = np.zeros(batch.size + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([f.shape[0] for f in feats])
    return PackedBatch(np.concatenate(feats), offsets, batch.G.copy(), np.concatenate(golds))


def _trainable(examples: Sequence[TrainingExample]) -> list[TrainingExample]:
    usable = [e for e in examples if e.gold.size > 0]
    if not usable:
        raise ValueError("no training example has a gold edge inside its graph")
    return usable


def _check_loss(loss: float, epoch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergence(f"loss became {loss} in epoch {epoch}")


def stage2_train(
    examples: Sequence[TrainingExample],
    ep: EmbedderParams,
    rp: RetrieverParams,
    cfg: TrainConfig,
) -> tuple[RetrieverParams, TrainReport]:
    """Fit ``W`` and ``Q`` with the edge side frozen."""
    rp = rp.copy()
    usable = _trainable(examples)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(baseline_recall=recall_at_k(examples, ep, rp))
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for batch in _batches(usable, cfg, rng):
            loss, grads = grad_surrogate(batch, ep, rp, cfg.eps)
            _check_loss(loss, epoch)
            new = sgd_step({"W": rp.W, "Q": rp.Q}, grads, cfg.lr)
            rp.W, rp.Q = new["W"], new["Q"]
            total += loss * batch.size
            seen += batch.size
        report.losses.append(total / seen)
        report.recalls.append(recall_at_k(examples, ep, rp))
        logger.info("stage2 epoch %d loss %.4f recall@%d %.4f", epoch, report.losses[-1], rp.k, report.recalls[-1])
    report.checksum = checksum(ep, rp)
    return rp, report


def stage3_train(
    examples: Sequence[TrainingExample],
    ep: EmbedderParams,
    rp: RetrieverParams,
    cfg: TrainConfig,
) -> tuple[EmbedderParams, RetrieverParams, TrainReport]:
    """Alternate builder-only steps (``A``) with joint steps (``A``, ``W``, ``Q``).

    Per cycle, ``cfg.builder_steps`` mini-batches update the edge map alone
    against the full-graph loss (every edge is a candidate), and
    ``cfg.joint_steps`` mini-batches update all three maps against the loss
    over the currently retrieved subgraph.
    """
    ep, rp = ep.copy(), rp.copy()
    usable = _trainable(examples)
    rng = np.random.default_rng(cfg.seed)
    cycle = cfg.builder_steps + cfg.joint_steps
    report = TrainReport(baseline_recall=recall_at_k(examples, ep, rp))
    t = 0
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for batch in _batches(usable, cfg, rng):
            builder_step = t % cycle < cfg.builder_steps
            if not builder_step:
                batch = restrict_to_selection(batch, ep, rp)
            loss, grads = grad_surrogate(batch, ep, rp, cfg.eps)
            _check_loss(loss, epoch)
            if builder_step:
                ep.A = sgd_step({"A": ep.A}, grads, cfg.lr)["A"]
            else:
                new = sgd_step({"A": ep.A, "W": rp.W, "Q": rp.Q}, grads, cfg.lr)
                ep.A, rp.W, rp.Q = new["A"], new["W"], new["Q"]
            t += 1
            total += loss * batch.size
            seen += batch.size
        report.losses.append(total / seen)
        report.recalls.append(recall_at_k(examples, ep, rp))
        logger.info("stage3 epoch %d loss %.4f recall@%d %.4f", epoch, report.losses[-1], rp.k, report.recalls[-1])
    report.checksum = checksum(ep, rp)
    return ep, rp, report


def batch_loss(batch: PackedBatch, ep: EmbedderParams, rp: RetrieverParams, eps: float = 1e-9) -> float:
    return grad_surrogate(batch, ep, rp, eps)[0]


__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDivergence",
    "TrainingExample",
    "batch_loss",
    "checksum",
    "instance_recall",
    "prepare_example",
    "recall_at_k",
    "restrict_to_selection",
    "sgd_step",
    "stage2_train",
    "stage3_train",
    "surrogate_loss",
]
