"""Answer metrics, the latency harness, the capacity sweep and structural ablations.

All paradigms in an ablation share one reasoner and one instance set, so the
only thing that differs between rows is which evidence reaches the prompt.
"""

from __future__ import annotations

import csv
import gc
import io
import logging
import re
import string
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from graphmem import _kernels
from graphmem.builder import build
from graphmem.chunker import chunk, tokenize
from graphmem.extraction import Extractor, RuleExtractor, RuleGrammar
from graphmem.latent import EmbedderParams, RetrieverParams, Subgraph, edge_features, hash_features, retrieve
from graphmem.model import BuildConfig, CanonicalizationError, GraphState, QAInstance, canonicalize_entity
from graphmem.reasoner import Memory, MockReasoner, Reasoner, build_memory
from graphmem.serializer import compose_prompt, serialize
from graphmem.synthetic import GenConfig, generate_suite

logger = logging.getLogger(__name__)

PARADIGMS = ("reasoner_only", "full_graph", "bfs", "rag", "learned")
DEFAULT_LENGTHS = (6000, 7000, 8000, 9000, 10000)
DEFAULT_CAPACITIES = (25, 50, 100, 150, 200)
RAG_DIM = 1024
RAG_SEED = 0xC0FFEE

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def normalize_answer(s: str) -> str:
    s = s.lower().translate(_PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _contains(hay: list[str], needle: list[str]) -> bool:
    n = len(needle)
    return any(hay[i : i + n] == needle for i in range(len(hay) - n + 1))


def accuracy_match(prediction: str, golds: Sequence[str]) -> bool:
    """Normalized exact match, or the gold appearing as a contiguous token run of the prediction."""
    if not golds:
        raise ValueError("at least one gold answer is required")
    pred = normalize_answer(prediction).split()
    for g in golds:
        gold = normalize_answer(g).split()
        if gold == pred or (gold and _contains(pred, gold)):
            return True
    return False


def _rouge_tokens(s: str) -> list[str]:
    return s.lower().split()


def rouge_l(prediction: str, gold: str) -> float:
    """Token LCS F1 (whitespace tokens, lowercased)."""
    p, g = _rouge_tokens(prediction), _rouge_tokens(gold)
    if not p or not g:
        return 0.0
    vocab: dict[str, int] = {}
    a = np.array([vocab.setdefault(t, len(vocab)) for t in p], dtype=np.int64)
    b = np.array([vocab.setdefault(t, len(vocab)) for t in g], dtype=np.int64)
    lcs = _kernels.lcs_length(a, b)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(p), lcs / len(g)
    return 2 * prec * rec / (prec + rec)


@dataclass
class MetricReport:
    name: str = ""
    ids: list[str] = field(default_factory=list)
    predictions: list[str] = field(default_factory=list)
    correct: list[bool] = field(default_factory=list)
    rouge: list[float] = field(default_factory=list)
    recall: float = float("nan")

    @property
    def n(self) -> int:
        return len(self.correct)

    @property
    def accuracy(self) -> float:
        return 100.0 * sum(self.correct) / self.n if self.n else float("nan")

    @property
    def mean_rouge_l(self) -> float:
        return 100.0 * float(np.mean(self.rouge)) if self.n else float("nan")

    def add(self, instance: QAInstance, prediction: str) -> None:
        self.ids.append(instance.id)
        self.predictions.append(prediction)
        self.correct.append(accuracy_match(prediction, instance.answers))
        self.rouge.append(max(rouge_l(prediction, g) for g in instance.answers))

    def summary(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "accuracy": self.accuracy,
            "rouge_l": self.mean_rouge_l,
            "recall": self.recall,
        }


def score_predictions(instances: Sequence[QAInstance], predictions: Sequence[str], name: str = "") -> MetricReport:
    if len(instances) != len(predictions):
        raise ValueError("one prediction per instance is required")
    report = MetricReport(name=name)
    for inst, pred in zip(instances, predictions):
        report.add(inst, pred)
    return report


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def _entity_tokens(name: str) -> list[str]:
    try:
        return tokenize(canonicalize_entity(name))
    except CanonicalizationError:
        return []


def bfs_retrieve(graph: GraphState | Sequence, q: str, k: int) -> Subgraph:
    """Breadth-first expansion from the edges whose head or tail is named in ``q``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    edges = sorted(graph.edge_list() if isinstance(graph, GraphState) else list(graph), key=lambda e: e.insertion_order)
    q_toks = tokenize(q.lower())
    named: dict[str, bool] = {}

    def mentioned(name: str) -> bool:
        if name not in named:
            toks = _entity_tokens(name)
            named[name] = bool(toks) and _contains(q_toks, toks)
        return named[name]

    picked = [i for i, e in enumerate(edges) if mentioned(e.head) or mentioned(e.tail)]
    if not picked:
        picked = list(range(min(k, len(edges))))
    chosen: list[int] = picked[:k]
    taken = set(chosen)
    frontier = {n for i in chosen for n in (edges[i].head, edges[i].tail)}
    while len(chosen) < k:
        rnd = [i for i, e in enumerate(edges) if i not in taken and (e.head in frontier or e.tail in frontier)]
        if not rnd:
            break
        rnd = rnd[: k - len(chosen)]
        chosen.extend(rnd)
        taken.update(rnd)
        frontier |= {n for i in rnd for n in (edges[i].head, edges[i].tail)}
    idx = np.array(chosen, dtype=np.int64)
    return Subgraph(indices=idx, edges=[edges[i] for i in chosen], scores=np.zeros(len(chosen)))


def _bag(text: str, d: int, seed: int) -> np.ndarray:
    return hash_features(["w:" + t for t in tokenize(text.lower())], d, seed)


def rag_retrieve(
    x: str,
    q: str,
    k_chunks: int,
    cfg: BuildConfig | None = None,
    d: int = RAG_DIM,
    seed: int = RAG_SEED,
) -> str:
    """Raw text of the ``k_chunks`` chunks most cosine-similar to ``q``, best first."""
    if k_chunks < 1:
        raise ValueError("k_chunks must be >= 1")
    chunks = chunk(x, cfg or BuildConfig())
    if not chunks:
        return ""
    C = np.stack([_bag(c.text, d, seed) for c in chunks])
    s = C @ _bag(q, d, seed)
    order = _kernels.topk_indices(s, k_chunks)
    return "\n\n".join(chunks[i].text for i in order)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


@dataclass
class AblationSetup:
    ep: EmbedderParams
    rp: RetrieverParams
    build_cfg: BuildConfig = field(default_factory=BuildConfig)
    k_chunks: int = 1
    grammar: RuleGrammar = field(default_factory=RuleGrammar)


def paradigm_prompt(
    paradigm: str, instance: QAInstance, memory: Memory, setup: AblationSetup
) -> str:
    q = instance.question
    if paradigm == "reasoner_only":
        return compose_prompt("", q)
    if paradigm == "full_graph":
        return compose_prompt(serialize(memory.edges), q)
    if paradigm == "bfs":
        return compose_prompt(serialize(bfs_retrieve(memory.graph, q, setup.rp.k).edges), q)
    if paradigm == "rag":
        return compose_prompt(rag_retrieve(instance.context, q, setup.k_chunks, setup.build_cfg), q)
    if paradigm == "learned":
        return compose_prompt(serialize(retrieve(memory.graph, memory.U, q, setup.rp, setup.ep).edges), q)
    raise ValueError(f"unknown paradigm {paradigm!r}")


def ablation_suite(
    instances: Sequence[QAInstance],
    memories: Sequence[Memory],
    setup: AblationSetup,
    paradigms: Iterable[str] = PARADIGMS,
    reasoner_factory: Callable[[QAInstance], Reasoner] | None = None,
) -> dict[str, MetricReport]:
    """One report per paradigm over the same instances and the same reasoner."""
    factory = reasoner_factory or (lambda inst: MockReasoner(inst, setup.grammar))
    out: dict[str, MetricReport] = {}
    for name in paradigms:
        report = MetricReport(name=name)
        for inst, mem in zip(instances, memories):
            report.add(inst, factory(inst).generate(paradigm_prompt(name, inst, mem, setup)))
        out[name] = report
        logger.info("ablation %s acc %.2f", name, report.accuracy)
    return out


def evaluate(
    instances: Sequence[QAInstance],
    memories: Sequence[Memory],
    ep: EmbedderParams,
    rp: RetrieverParams,
    reasoner_factory: Callable[[QAInstance], Reasoner] | None = None,
) -> MetricReport:
    """Learned retrieval end to end, plus gold-edge recall through the trainer's own code path."""
    from graphmem.trainer import prepare_example, recall_at_k

    report = ablation_suite(instances, memories, AblationSetup(ep, rp), ("learned",), reasoner_factory)["learned"]
    if all(i.gold_edge_ids for i in instances):
        report.recall = recall_at_k([prepare_example(i, m, ep) for i, m in zip(instances, memories)], ep, rp)
    return report


# ---------------------------------------------------------------------------
# latency and capacity
# ---------------------------------------------------------------------------


@dataclass
class TimingRow:
    length: int
    build_s: float
    answer_s: float
    samples: int
    chunks: float = 0.0
    edges: float = 0.0

    def __post_init__(self) -> None:
        if self.samples <= 0 or self.build_s < 0 or self.answer_s < 0:
            raise ValueError("timing rows need positive samples and non-negative times")


def _best_of(fn: Callable[[], object], repeats: int) -> tuple[float, object]:
    # collector paused while timing, as timeit does
    best, out = float("inf"), None
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            t0 = time.perf_counter()
            out = fn()
            best = min(best, time.perf_counter() - t0)
    finally:
        if was_enabled:
            gc.enable()
    return best, out


def timing_harness(
    lengths: Sequence[int] = DEFAULT_LENGTHS,
    samples: int = 100,
    build_cfg: BuildConfig | None = None,
    rp: RetrieverParams | None = None,
    ep: EmbedderParams | None = None,
    facts_per_doc: int = 200,
    seed: int = 0,
    repeats: int = 3,
    extractor: Extractor | None = None,
) -> list[TimingRow]:
    """Per context length: build time and retrieve+serialize+answer time, measured separately.

    Each phase is timed as the best of ``repeats`` runs to damp scheduler
    noise; the budgets ``M`` and ``k`` stay fixed across lengths.
    """
    build_cfg = build_cfg or BuildConfig()
    ep = ep or EmbedderParams()
    rp = rp or RetrieverParams(ep.d)
    extractor = extractor or RuleExtractor()
    suites: dict[int, list[QAInstance]] = {}
    for n_tok in lengths:
        if n_tok <= 0:
            suites[n_tok] = [
                QAInstance(f"empty-{i}", "", "Which entity?", ("unknown",), ()) for i in range(samples)
            ]
        else:
            facts = max(2, min(facts_per_doc, n_tok // 40))
            gen = GenConfig(seed=seed * 1_000_003 + n_tok, target_tokens=n_tok, facts_per_doc=facts)
            suites[n_tok] = generate_suite(samples, gen, prefix=f"len{n_tok}")
    acc: dict[int, list[tuple[float, float, int, int]]] = {n: [] for n in lengths}
    order = list(lengths)
    # round-robin over lengths with a rotating start so slow drift hits every length alike
    for i in range(samples):
        shift = i % len(order)
        for n_tok in order[shift:] + order[:shift]:
            inst = suites[n_tok][i]
            tb, (graph, _) = _best_of(lambda: build(inst.context, extractor, build_cfg), repeats)
            U = edge_features(graph.edge_list(), ep) @ ep.A.T
            reasoner = MockReasoner(inst)

            def answer_phase() -> str:
                sub = retrieve(graph, U, inst.question, rp, ep)
                return reasoner.generate(compose_prompt(serialize(sub.edges), inst.question))

            ta, _ = _best_of(answer_phase, repeats)
            acc[n_tok].append((tb, ta, graph.step, len(graph)))
    rows = []
    for n_tok in lengths:
        b_t, a_t, n_chunks, n_edges = (np.array(c, dtype=np.float64) for c in zip(*acc[n_tok]))
        row = TimingRow(
            n_tok, float(b_t.mean()), float(a_t.mean()), len(acc[n_tok]),
            float(n_chunks.mean()), float(n_edges.mean()),
        )
        logger.info("timing %d tokens: build %.5fs answer %.5fs", n_tok, row.build_s, row.answer_s)
        rows.append(row)
    return rows


def answer_spread(rows: Sequence[TimingRow]) -> float:
    """(max - min) / min of the per-length answer-phase means."""
    t = [r.answer_s for r in rows if r.length > 0]
    return (max(t) - min(t)) / min(t)


def build_scaling_exponent(rows: Sequence[TimingRow]) -> float:
    """Slope of log(build time) against log(chunk count); 1.0 is linear."""
    pts = [(r.chunks, r.build_s) for r in rows if r.chunks > 0 and r.build_s > 0]
    if len(pts) < 2:
        raise ValueError("need two non-empty rows to fit a slope")
    x, y = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
    return float(np.polyfit(x, y, 1)[0])


def capacity_sweep(
    instances: Sequence[QAInstance],
    capacities: Sequence[int] = DEFAULT_CAPACITIES,
    ep: EmbedderParams | None = None,
    rp: RetrieverParams | None = None,
    build_cfg: BuildConfig | None = None,
    extractor: Extractor | None = None,
) -> dict[int, float]:
    """Mock-reasoner accuracy with learned retrieval for each global capacity."""
    ep = ep or EmbedderParams()
    rp = rp or RetrieverParams(ep.d)
    base = build_cfg or BuildConfig()
    extractor = extractor or RuleExtractor()
    out: dict[int, float] = {}
    for M in capacities:
        cfg = replace(base, global_cap=M, per_chunk_cap=min(base.per_chunk_cap, M))
        memories = [build_memory(i.context, extractor, cfg, ep) for i in instances]
        out[M] = ablation_suite(instances, memories, AblationSetup(ep, rp, cfg), ("learned",))["learned"].accuracy
        logger.info("capacity %d: acc %.2f", M, out[M])
    return out


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------


def to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _cell(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def text_table(rows: Sequence[dict]) -> str:
    if not rows:
        return "(no rows)"
    cols = list(rows[0])
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    line = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
    rule = "  ".join("-" * w for w in widths)
    body = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join([line, rule, *body])


def timing_rows_as_dicts(rows: Sequence[TimingRow]) -> list[dict]:
    return [
        {"length": r.length, "build_s": r.build_s, "answer_s": r.answer_s, "samples": r.samples,
         "chunks": r.chunks, "edges": r.edges}
        for r in rows
    ]
