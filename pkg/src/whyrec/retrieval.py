"""Training-free dense retrieval of similar users and items for a target pair.

Similarity is cosine over fixed profile embeddings.  Candidates for the user
side are the item's interaction neighbors (minus the target user); the item
side mirrors this with the user's neighbors.  Candidate pools are scanned
exhaustively; they are node neighborhoods and stay small.

Embeddings come from a file, from an embedding endpoint, or from the
deterministic hashing embedder below when neither is available.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .graphstore import GraphError, InteractionGraph, NodeKind, NodeRef

_NORM_TOL = 1e-9


def _normalize(vector: np.ndarray, label: str) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1:
        raise GraphError(f"{label}: embedding must be a flat vector")
    norm = float(np.linalg.norm(vector))
    if norm == 0.0 or not np.isfinite(norm):
        raise GraphError(f"{label}: zero or non-finite embedding vector")
    return vector / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GraphError(f"cosine dims differ: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise GraphError("cosine of a zero-norm vector is undefined")
    return float(a @ b) / (na * nb)


class EmbeddingStore:
    """Unit vectors per node, dim-uniform, immutable after construction."""

    def __init__(self, dim: int, vectors: dict[NodeRef, np.ndarray], source: str):
        if dim < 1:
            raise GraphError("embedding dim must be >= 1")
        self.dim = dim
        self.source = source
        self._vectors: dict[NodeRef, np.ndarray] = {}
        for ref, vec in vectors.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise GraphError(f"{ref}: vector has dim {vec.shape}, store has {dim}")
            if abs(float(np.linalg.norm(vec)) - 1.0) > _NORM_TOL:
                raise GraphError(f"{ref}: vector is not unit length")
            self._vectors[ref] = vec

    def __contains__(self, ref: NodeRef) -> bool:
        return ref in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def vector(self, ref: NodeRef) -> np.ndarray:
        try:
            return self._vectors[ref]
        except KeyError:
            raise GraphError(f"no embedding for node {ref}") from None

    def similarity(self, a: NodeRef, b: NodeRef) -> float:
        # vectors are unit length, so cosine is a plain dot product
        return float(self.vector(a) @ self.vector(b))


# ---------------------------------------------------------------------------
# file format: header {"dim": d} then one {"id", "kind", "vector"} per line


def write_embedding_file(path, dim: int,
                         records: Iterable[tuple[str, str, np.ndarray]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": dim}) + "\n")
        for node_id, kind, vector in records:
            fh.write(json.dumps({
                "id": node_id,
                "kind": kind,
                "vector": [float(x) for x in vector],
            }) + "\n")


def read_embedding_file(path) -> tuple[int, list[dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise GraphError(f"{path}: empty embedding file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise GraphError(f"{path}:1: invalid JSON header") from err
    if "dim" not in header:
        raise GraphError(f"{path}:1: header must declare \"dim\"")
    dim = int(header["dim"])
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as err:
            raise GraphError(f"{path}:{lineno}: invalid JSON") from err
        for key in ("id", "kind", "vector"):
            if key not in rec:
                raise GraphError(f"{path}:{lineno}: missing field {key!r}")
        if len(rec["vector"]) != dim:
            raise GraphError(
                f"{path}:{lineno}: vector has dim {len(rec['vector'])}, header says {dim}"
            )
        records.append(rec)
    return dim, records


def load_embeddings(path, graph: InteractionGraph) -> EmbeddingStore:
    """Read node embeddings, normalize, and require full graph coverage."""
    dim, records = read_embedding_file(path)
    by_id_user = {graph.node_id(NodeRef(NodeKind.USER, k)): k
                  for k in range(graph.user_count)}
    by_id_item = {graph.node_id(NodeRef(NodeKind.ITEM, k)): k
                  for k in range(graph.item_count)}
    vectors: dict[NodeRef, np.ndarray] = {}
    for rec in records:
        kind = rec["kind"]
        if kind == "user":
            if rec["id"] not in by_id_user:
                raise GraphError(f"{path}: unknown user id {rec['id']!r}")
            ref = NodeRef(NodeKind.USER, by_id_user[rec["id"]])
        elif kind == "item":
            if rec["id"] not in by_id_item:
                raise GraphError(f"{path}: unknown item id {rec['id']!r}")
            ref = NodeRef(NodeKind.ITEM, by_id_item[rec["id"]])
        else:
            raise GraphError(f"{path}: kind must be \"user\" or \"item\", got {kind!r}")
        if ref in vectors:
            raise GraphError(f"{path}: duplicate embedding for {rec['id']!r}")
        vectors[ref] = _normalize(rec["vector"], f"{path}: {rec['id']}")
    for ref in graph.all_nodes():
        if ref not in vectors:
            raise GraphError(f"{path}: no embedding for node {graph.node_id(ref)!r}")
    return EmbeddingStore(dim, vectors, source="file")


# ---------------------------------------------------------------------------
# deterministic text embedder (offline fallback)


class HashingTextEmbedder:
    """Seeded feature hashing of word tokens into a fixed-dim unit vector.

    Token buckets and signs come from sha256, so identical texts embed
    identically across runs and machines.  Texts with no tokens map to the
    first basis vector.
    """

    def __init__(self, dim: int = 128):
        if dim < 1:
            raise GraphError("embedding dim must be >= 1")
        self.dim = dim

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in re.findall(r"[a-z0-9]+", text.lower()):
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:8], "big") % self.dim
            sign = 1.0 if digest[8] % 2 == 0 else -1.0
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed_one(t) for t in texts]) if texts else \
            np.zeros((0, self.dim), dtype=np.float64)


def store_from_profiles(graph: InteractionGraph, embedder) -> EmbeddingStore:
    """Embed every node's profile text with any embedder exposing ``embed``."""
    refs = list(graph.all_nodes())
    matrix = np.asarray(embedder.embed([graph.profile(r) for r in refs]),
                        dtype=np.float64)
    if matrix.shape[0] != len(refs):
        raise GraphError("embedder returned the wrong number of vectors")
    dim = matrix.shape[1]
    vectors = {ref: _normalize(matrix[k], f"profile of {ref}")
               for k, ref in enumerate(refs)}
    return EmbeddingStore(dim, vectors, source="hash"
                          if isinstance(embedder, HashingTextEmbedder) else "endpoint")


# ---------------------------------------------------------------------------
# retrieval


@dataclass(frozen=True)
class RetrievalResult:
    user: NodeRef
    item: NodeRef
    users: tuple[tuple[NodeRef, float], ...]
    items: tuple[tuple[NodeRef, float], ...]


def _top_k(store: EmbeddingStore, anchor: NodeRef,
           candidates: Sequence[NodeRef], k: int) -> tuple[tuple[NodeRef, float], ...]:
    scored = [(store.similarity(anchor, c), c) for c in candidates]
    # descending similarity, then ascending node index
    scored.sort(key=lambda sc: (-sc[0], sc[1].index))
    return tuple((c, s) for s, c in scored[:k])


def retrieve(graph: InteractionGraph, store: EmbeddingStore,
             pair: tuple[NodeRef, NodeRef], k: int) -> RetrievalResult:
    """Top-k users among the item's neighbors and items among the user's.

    The target pair itself is excluded from both candidate pools; short
    pools return fewer than k entries and empty pools are not an error.
    """
    if k < 1:
        raise GraphError("k must be >= 1")
    u_ref, i_ref = pair
    graph.require(u_ref, NodeKind.USER)
    graph.require(i_ref, NodeKind.ITEM)
    for ref in (u_ref, i_ref):
        if ref not in store:
            raise GraphError(f"no embedding for query node {graph.node_id(ref)!r}")
    user_pool = [n for n in graph.neighbors(i_ref) if n != u_ref]
    item_pool = [n for n in graph.neighbors(u_ref) if n != i_ref]
    return RetrievalResult(
        user=u_ref,
        item=i_ref,
        users=_top_k(store, u_ref, user_pool, k),
        items=_top_k(store, i_ref, item_pool, k),
    )
