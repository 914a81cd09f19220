"""On-disk formats: memory files, JSONL datasets, parameter checkpoints, DOT, config.

Every writer goes through :func:`atomic_write`, so a crash leaves either the
old file or the new one, never a torn mix.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from graphmem.latent import EmbedderParams, RetrieverParams, Subgraph
from graphmem.model import BuildConfig, Edge, GraphState, QAInstance, Triple, edge_id

MEMORY_VERSION = 1
CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = "graphmem-params"
ROW_ENCODING = "f64le-base64"


class LoadError(ValueError):
    """A file could not be read back into a consistent state."""


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# memory files
# ---------------------------------------------------------------------------


def _encode_row(row: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(row, dtype="<f8").tobytes()).decode("ascii")


def _decode_row(s: str, d: int) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    if len(raw) != 8 * d:
        raise LoadError(f"embedding row has {len(raw)} bytes, expected {8 * d}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def _digest(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def memory_document(graph: GraphState, U: np.ndarray, cfg: BuildConfig) -> dict:
    edges = sorted(graph.edge_list(), key=lambda e: e.insertion_order)
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] != len(edges):
        raise ValueError(f"embedding matrix {U.shape} does not match {len(edges)} edges")
    order = {e.edge_id: i for i, e in enumerate(graph.edge_list())}
    doc = {
        "version": MEMORY_VERSION,
        "config": cfg.to_dict(),
        "step": graph.step,
        "edges": [
            {
                "h": e.head,
                "r": e.relation,
                "t": e.tail,
                "occurrence_count": e.occurrence_count,
                "first_chunk": e.first_chunk,
                "insertion_order": e.insertion_order,
            }
            for e in edges
        ],
        "embeddings": {
            "d": int(U.shape[1]),
            "encoding": ROW_ENCODING,
            "rows": [_encode_row(U[order[e.edge_id]]) for e in edges],
        },
    }
    doc["checksum"] = _digest(doc)
    return doc


def save_memory(path: str | Path, graph: GraphState, U: np.ndarray, cfg: BuildConfig) -> None:
    if not graph.frozen:
        raise ValueError("only a frozen graph can be saved")
    doc = memory_document(graph, U, cfg)
    atomic_write(path, (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode("utf-8"))


@dataclass
class LoadedMemory:
    graph: GraphState
    U: np.ndarray
    config: BuildConfig


def parse_memory(doc: dict) -> LoadedMemory:
    if not isinstance(doc, dict):
        raise LoadError("memory file must hold a JSON object")
    if doc.get("version") != MEMORY_VERSION:
        raise LoadError(f"unsupported memory version {doc.get('version')!r}")
    if "checksum" in doc and doc["checksum"] != _digest(doc):
        raise LoadError("memory checksum mismatch")
    try:
        cfg = BuildConfig.from_dict(doc["config"])
        emb = doc["embeddings"]
        if emb["encoding"] != ROW_ENCODING:
            raise LoadError(f"unsupported row encoding {emb['encoding']!r}")
        d = int(emb["d"])
        rows = emb["rows"]
        raw_edges = doc["edges"]
        if len(rows) != len(raw_edges):
            raise LoadError(f"{len(rows)} embedding rows for {len(raw_edges)} edges")
        edges = []
        for item in raw_edges:
            t = Triple(item["h"], item["r"], item["t"])
            edges.append(
                Edge(t, edge_id(t), int(item["occurrence_count"]), int(item["first_chunk"]), int(item["insertion_order"]))
            )
        U = np.stack([_decode_row(r, d) for r in rows]) if rows else np.zeros((0, d))
    except LoadError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"malformed memory file: {exc}") from exc
    orders = [e.insertion_order for e in edges]
    if orders != sorted(orders) or len(set(orders)) != len(orders):
        raise LoadError("edges are not in insertion order")
    if len({e.edge_id for e in edges}) != len(edges):
        raise LoadError("duplicate edges in memory file")
    graph = GraphState.from_edges(edges, cfg.global_cap, step=int(doc.get("step", 0))).freeze()
    return LoadedMemory(graph, U, cfg)


def load_memory(path: str | Path) -> LoadedMemory:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read memory file {path}: {exc}") from exc
    return parse_memory(doc)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def instance_to_dict(inst: QAInstance) -> dict:
    out = {"id": inst.id, "context": inst.context, "question": inst.question, "answers": list(inst.answers)}
    if inst.gold_edge_ids is not None:
        # ids are 64-bit unsigned; strings keep them exact in any JSON reader
        out["gold_edge_ids"] = [str(i) for i in inst.gold_edge_ids]
    return out


def instance_from_dict(d: dict) -> QAInstance:
    missing = [k for k in ("id", "context", "question", "answers") if k not in d]
    if missing:
        raise LoadError(f"dataset record lacks {', '.join(missing)}")
    gold = d.get("gold_edge_ids")
    return QAInstance(
        id=str(d["id"]),
        context=d["context"],
        question=d["question"],
        answers=tuple(d["answers"]),
        gold_edge_ids=None if gold is None else tuple(int(g) for g in gold),
    )


def dumps_dataset(instances: Iterable[QAInstance]) -> str:
    return "".join(json.dumps(instance_to_dict(i), ensure_ascii=False) + "\n" for i in instances)


def save_dataset(path: str | Path, instances: Iterable[QAInstance]) -> None:
    atomic_write(path, dumps_dataset(instances).encode("utf-8"))


def load_dataset(path: str | Path) -> list[QAInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(instance_from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise LoadError(f"{path}:{lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# parameter checkpoints: one JSON header line, then raw little-endian doubles
# ---------------------------------------------------------------------------


def checkpoint_bytes(ep: EmbedderParams, rp: RetrieverParams) -> bytes:
    arrays = {"A": ep.A, "W": rp.W, "Q": rp.Q}
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "d": ep.d,
        "hash_seed": ep.hash_seed,
        "tau": rp.tau,
        "k": rp.k,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + blob


def save_checkpoint(path: str | Path, ep: EmbedderParams, rp: RetrieverParams) -> None:
    atomic_write(path, checkpoint_bytes(ep, rp))


def load_checkpoint(path: str | Path) -> tuple[EmbedderParams, RetrieverParams]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    head, sep, blob = data.partition(b"\n")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise LoadError("checkpoint header is not JSON") from exc
    if not sep or header.get("format") != CHECKPOINT_MAGIC:
        raise LoadError("not a parameter checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise LoadError(f"unsupported checkpoint version {header.get('version')!r}")
    if hashlib.sha256(blob).hexdigest() != header.get("sha256"):
        raise LoadError("checkpoint checksum mismatch")
    arrays, pos = {}, 0
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"])) * 8
        if pos + n > len(blob):
            raise LoadError("checkpoint payload is truncated")
        arrays[entry["name"]] = np.frombuffer(blob[pos : pos + n], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        pos += n
    if pos != len(blob):
        raise LoadError("checkpoint payload has trailing bytes")
    d = int(header["d"])
    try:
        ep = EmbedderParams(d, arrays["A"], int(header["hash_seed"]))
        rp = RetrieverParams(d, arrays["W"], arrays["Q"], float(header["tau"]), int(header["k"]))
    except (KeyError, ValueError) as exc:
        raise LoadError(f"inconsistent checkpoint: {exc}") from exc
    return ep, rp


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------


def _dot_quote(s: str) -> str:
    s = s.replace("\\", "\\\\").replace('"', '\\"').replace("\r", "\\r").replace("\n", "\\n")
    return f'"{s}"'


def to_dot(subgraph: Subgraph | Sequence[Edge], name: str = "subgraph") -> str:
    if isinstance(subgraph, Subgraph):
        edges, scores = subgraph.edges, list(subgraph.scores)
    else:
        edges, scores = list(subgraph), []
    nodes: dict[str, str] = {}
    for e in edges:
        for ent in (e.head, e.tail):
            nodes.setdefault(ent, f"n{len(nodes)}")
    lines = [f"digraph {_dot_quote(name)} {{"]
    for ent, nid in nodes.items():
        lines.append(f"  {nid} [label={_dot_quote(ent)}];")
    for i, e in enumerate(edges):
        label = e.relation if i >= len(scores) else f"{e.relation} ({float(scores[i]):.4f})"
        lines.append(f"  {nodes[e.head]} -> {nodes[e.tail]} [label={_dot_quote(label)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_dot(subgraph: Subgraph | Sequence[Edge], path: str | Path, name: str = "subgraph") -> None:
    atomic_write(path, to_dot(subgraph, name).encode("utf-8"))


# ---------------------------------------------------------------------------
# config files: "key = value" per line, '#' starts a comment
# ---------------------------------------------------------------------------


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise LoadError(f"config line {lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def load_config(path: str | Path) -> dict[str, str]:
    try:
        return parse_config(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read config {path}: {exc}") from exc
