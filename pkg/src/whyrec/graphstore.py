"""Bipartite user-item interaction graph: ingestion, ego-graphs, m-core pruning.

The graph is immutable once built.  Users and items are addressed by
``NodeRef`` (kind + dense index); string ids from dataset files map to dense
indices in file order and travel with the graph so checkpoints and dumps can
be cross-checked against the data they were produced from.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence


class GraphError(ValueError):
    """Malformed dataset files or violated graph invariants."""


class NodeKind(Enum):
    USER = "user"
    ITEM = "item"


class EdgeType(Enum):
    """Direction of traversal over an interaction edge.

    Every stored edge is one interaction; BUYS is the user-to-item direction
    and BOUGHT_BY its reverse.  A canonical (undirected) edge is typed BUYS.
    """

    BUYS = "buys"
    BOUGHT_BY = "bought_by"

    @property
    def reverse(self) -> "EdgeType":
        return EdgeType.BOUGHT_BY if self is EdgeType.BUYS else EdgeType.BUYS


@dataclass(frozen=True, order=True)
class NodeRef:
    """One node: (kind, index) with index dense within its kind."""

    kind: NodeKind
    index: int

    def __post_init__(self) -> None:
        if self.index < 0:
            raise GraphError(f"negative node index {self.index}")

    @property
    def sort_key(self) -> tuple[int, int]:
        return (0 if self.kind is NodeKind.USER else 1, self.index)

    def __repr__(self) -> str:
        return f"{'u' if self.kind is NodeKind.USER else 'i'}{self.index}"


def user(index: int) -> NodeRef:
    return NodeRef(NodeKind.USER, index)


def item(index: int) -> NodeRef:
    return NodeRef(NodeKind.ITEM, index)


class InteractionGraph:
    """Immutable bipartite graph with per-node profiles.

    Adjacency lists are sorted ascending so every iteration order is
    deterministic.  Duplicate interactions collapse to a single edge.
    """

    def __init__(
        self,
        user_count: int,
        item_count: int,
        edges: Iterable[tuple[int, int]],
        user_profiles: Sequence[str] | None = None,
        item_profiles: Sequence[str] | None = None,
        item_titles: Sequence[str] | None = None,
        user_ids: Sequence[str] | None = None,
        item_ids: Sequence[str] | None = None,
    ):
        if user_count <= 0 or item_count <= 0:
            raise GraphError("graph needs at least one user and one item")
        self.user_count = user_count
        self.item_count = item_count

        edge_set = set()
        for u, i in edges:
            if not (0 <= u < user_count):
                raise GraphError(f"edge references unknown user index {u}")
            if not (0 <= i < item_count):
                raise GraphError(f"edge references unknown item index {i}")
            edge_set.add((u, i))
        self._edges = tuple(sorted(edge_set))
        self.edge_count = len(self._edges)

        user_adj: list[list[int]] = [[] for _ in range(user_count)]
        item_adj: list[list[int]] = [[] for _ in range(item_count)]
        for u, i in self._edges:
            user_adj[u].append(i)
            item_adj[i].append(u)
        self._user_adj = tuple(tuple(sorted(ns)) for ns in user_adj)
        self._item_adj = tuple(tuple(sorted(ns)) for ns in item_adj)

        self.user_profiles = self._fixed("user profiles", user_profiles, user_count)
        self.item_profiles = self._fixed("item profiles", item_profiles, item_count)
        self.item_titles = self._fixed("item titles", item_titles, item_count)
        self.user_ids = tuple(user_ids) if user_ids is not None else tuple(
            f"u{k}" for k in range(user_count)
        )
        self.item_ids = tuple(item_ids) if item_ids is not None else tuple(
            f"i{k}" for k in range(item_count)
        )
        if len(self.user_ids) != user_count or len(self.item_ids) != item_count:
            raise GraphError("id mapping length does not match node counts")

    @staticmethod
    def _fixed(what: str, values: Sequence[str] | None, n: int) -> tuple[str, ...]:
        if values is None:
            return ("",) * n
        if len(values) != n:
            raise GraphError(f"{what}: expected {n} entries, got {len(values)}")
        return tuple(values)

    # -- lookups ---------------------------------------------------------

    def contains(self, ref: NodeRef) -> bool:
        n = self.user_count if ref.kind is NodeKind.USER else self.item_count
        return 0 <= ref.index < n

    def require(self, ref: NodeRef, kind: NodeKind | None = None) -> None:
        if kind is not None and ref.kind is not kind:
            raise GraphError(f"expected a {kind.value} node, got {ref!r}")
        if not self.contains(ref):
            raise GraphError(f"node {ref!r} does not exist in this graph")

    def neighbors(self, ref: NodeRef) -> tuple[NodeRef, ...]:
        self.require(ref)
        if ref.kind is NodeKind.USER:
            return tuple(item(i) for i in self._user_adj[ref.index])
        return tuple(user(u) for u in self._item_adj[ref.index])

    def degree(self, ref: NodeRef) -> int:
        self.require(ref)
        adj = self._user_adj if ref.kind is NodeKind.USER else self._item_adj
        return len(adj[ref.index])

    def has_edge(self, u: NodeRef, i: NodeRef) -> bool:
        self.require(u, NodeKind.USER)
        self.require(i, NodeKind.ITEM)
        return i.index in self._user_adj[u.index]

    def edges(self) -> tuple[tuple[int, int], ...]:
        """Canonical edge list as (user index, item index), sorted."""
        return self._edges

    def profile(self, ref: NodeRef) -> str:
        self.require(ref)
        if ref.kind is NodeKind.USER:
            return self.user_profiles[ref.index]
        return self.item_profiles[ref.index]

    def title(self, ref: NodeRef) -> str:
        self.require(ref, NodeKind.ITEM)
        return self.item_titles[ref.index]

    def node_id(self, ref: NodeRef) -> str:
        self.require(ref)
        if ref.kind is NodeKind.USER:
            return self.user_ids[ref.index]
        return self.item_ids[ref.index]

    def all_nodes(self) -> tuple[NodeRef, ...]:
        return tuple(user(k) for k in range(self.user_count)) + tuple(
            item(k) for k in range(self.item_count)
        )

    def mapping_hash(self) -> str:
        """Hash of the string-id mapping, stored alongside checkpoints."""
        blob = json.dumps(
            {"users": list(self.user_ids), "items": list(self.item_ids)},
            separators=(",", ":"),
        ).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class EgoGraph:
    """Edge-centered subgraph around a (user, item) pair.

    Local node ids enumerate the ego's users first, then its items, each
    ascending by global index; hence for every local edge (a, b) with a < b,
    a is the user endpoint.  ``nodes[local] -> global NodeRef`` and ``index``
    are mutually inverse.
    """

    center_user: NodeRef
    center_item: NodeRef
    nodes: tuple[NodeRef, ...]
    adj: tuple[tuple[int, ...], ...]
    hop_limit: int
    index: dict[NodeRef, int] = field(compare=False)

    def n_nodes(self) -> int:
        return len(self.nodes)

    def degree(self, local: int) -> int:
        return len(self.adj[local])

    def kind_of(self, local: int) -> NodeKind:
        return self.nodes[local].kind

    def local(self, ref: NodeRef) -> int:
        try:
            return self.index[ref]
        except KeyError:
            raise GraphError(f"node {ref!r} is not in this ego-graph") from None

    def edge_list(self) -> tuple[tuple[int, int], ...]:
        """Undirected edges as sorted (user_local, item_local) pairs."""
        out = []
        for a, ns in enumerate(self.adj):
            for b in ns:
                if a < b:
                    out.append((a, b))
        return tuple(out)

    def edge_ids(self) -> dict[tuple[int, int], int]:
        return {e: k for k, e in enumerate(self.edge_list())}

    def n_edges(self) -> int:
        return sum(len(ns) for ns in self.adj) // 2

    def validate(self) -> None:
        for ref, local in self.index.items():
            if self.nodes[local] != ref:
                raise GraphError("ego id maps are not mutually inverse")
        for a, ns in enumerate(self.adj):
            for b in ns:
                if self.nodes[a].kind == self.nodes[b].kind:
                    raise GraphError("ego-graph lost bipartiteness")
                if a not in self.adj[b]:
                    raise GraphError("ego adjacency is not symmetric")

    def induced(self, keep: Iterable[int]) -> "EgoGraph":
        """Subgraph on a set of local ids, with local ids reassigned."""
        kept = sorted(set(keep), key=lambda a: self.nodes[a].sort_key)
        refs = tuple(self.nodes[a] for a in kept)
        remap = {a: new for new, a in enumerate(kept)}
        adj = tuple(
            tuple(sorted(remap[b] for b in self.adj[a] if b in remap)) for a in kept
        )
        return EgoGraph(
            center_user=self.center_user,
            center_item=self.center_item,
            nodes=refs,
            adj=adj,
            hop_limit=self.hop_limit,
            index={ref: k for k, ref in enumerate(refs)},
        )

    def without_edge(self, u: NodeRef, i: NodeRef) -> "EgoGraph":
        """Copy with one edge dropped; endpoints stay even if isolated."""
        a, b = self.local(u), self.local(i)
        adj = tuple(
            tuple(x for x in ns if not ((n == a and x == b) or (n == b and x == a)))
            for n, ns in enumerate(self.adj)
        )
        return EgoGraph(
            center_user=self.center_user,
            center_item=self.center_item,
            nodes=self.nodes,
            adj=adj,
            hop_limit=self.hop_limit,
            index=dict(self.index),
        )

    def has_edge(self, u: NodeRef, i: NodeRef) -> bool:
        if u not in self.index or i not in self.index:
            return False
        return self.index[i] in self.adj[self.index[u]]


@dataclass
class ExplanationStore:
    """Ground-truth explanation texts keyed by (user, item) pair."""

    train: list[tuple[NodeRef, NodeRef, str]]
    test: list[tuple[NodeRef, NodeRef, str]]

    def validate(self, graph: InteractionGraph) -> None:
        train_pairs = {(u, i) for u, i, _ in self.train}
        test_pairs = {(u, i) for u, i, _ in self.test}
        overlap = train_pairs & test_pairs
        if overlap:
            raise GraphError(f"train/test explanation pairs overlap: {sorted(overlap)[:3]}")
        for u, i, _ in [*self.train, *self.test]:
            graph.require(u, NodeKind.USER)
            graph.require(i, NodeKind.ITEM)


# ---------------------------------------------------------------------------
# ingestion


def _read_records(path: str | Path) -> Iterable[tuple[int, dict]]:
    path = Path(path)
    if not path.exists():
        raise GraphError(f"dataset file not found: {path}")
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise GraphError(f"{path}:{lineno}: record is not an object")
            yield lineno, rec


def _field(path, lineno, rec: dict, key: str) -> str:
    if key not in rec or not isinstance(rec[key], str):
        raise GraphError(f"{path}:{lineno}: missing or non-string field {key!r}")
    return rec[key]


def ingest_dataset(
    user_file: str | Path,
    item_file: str | Path,
    interaction_file: str | Path,
    explanation_train_file: str | Path | None = None,
    explanation_test_file: str | Path | None = None,
) -> tuple[InteractionGraph, ExplanationStore]:
    """Load line-delimited JSON dataset files into a validated graph.

    Users: {"id", "profile"}; items: {"id", "title", "profile"};
    interactions: {"user", "item"}; explanations: {"user", "item",
    "explanation"}.  String ids map to dense indices in file order.
    """
    user_ids: list[str] = []
    user_profiles: list[str] = []
    user_idx: dict[str, int] = {}
    for lineno, rec in _read_records(user_file):
        uid = _field(user_file, lineno, rec, "id")
        if uid in user_idx:
            raise GraphError(f"{user_file}:{lineno}: duplicate user id {uid!r}")
        user_idx[uid] = len(user_ids)
        user_ids.append(uid)
        user_profiles.append(_field(user_file, lineno, rec, "profile"))

    item_ids: list[str] = []
    item_profiles: list[str] = []
    item_titles: list[str] = []
    item_idx: dict[str, int] = {}
    for lineno, rec in _read_records(item_file):
        iid = _field(item_file, lineno, rec, "id")
        if iid in item_idx:
            raise GraphError(f"{item_file}:{lineno}: duplicate item id {iid!r}")
        item_idx[iid] = len(item_ids)
        item_ids.append(iid)
        item_titles.append(_field(item_file, lineno, rec, "title"))
        item_profiles.append(_field(item_file, lineno, rec, "profile"))

    if not user_ids or not item_ids:
        raise GraphError("dataset has no users or no items")

    edges: list[tuple[int, int]] = []
    for lineno, rec in _read_records(interaction_file):
        uid = _field(interaction_file, lineno, rec, "user")
        iid = _field(interaction_file, lineno, rec, "item")
        if uid not in user_idx:
            raise GraphError(f"{interaction_file}:{lineno}: unknown user id {uid!r}")
        if iid not in item_idx:
            raise GraphError(f"{interaction_file}:{lineno}: unknown item id {iid!r}")
        edges.append((user_idx[uid], item_idx[iid]))
    if not edges:
        raise GraphError("empty interaction set")

    graph = InteractionGraph(
        user_count=len(user_ids),
        item_count=len(item_ids),
        edges=edges,
        user_profiles=user_profiles,
        item_profiles=item_profiles,
        item_titles=item_titles,
        user_ids=user_ids,
        item_ids=item_ids,
    )

    def read_explanations(path) -> list[tuple[NodeRef, NodeRef, str]]:
        if path is None:
            return []
        out = []
        for lineno, rec in _read_records(path):
            uid = _field(path, lineno, rec, "user")
            iid = _field(path, lineno, rec, "item")
            text = _field(path, lineno, rec, "explanation")
            if uid not in user_idx:
                raise GraphError(f"{path}:{lineno}: unknown user id {uid!r}")
            if iid not in item_idx:
                raise GraphError(f"{path}:{lineno}: unknown item id {iid!r}")
            out.append((user(user_idx[uid]), item(item_idx[iid]), text))
        return out

    store = ExplanationStore(
        train=read_explanations(explanation_train_file),
        test=read_explanations(explanation_test_file),
    )
    store.validate(graph)
    return graph, store


# ---------------------------------------------------------------------------
# ego-graph extraction and pruning


def _bfs_ball(graph: InteractionGraph, start: NodeRef, hops: int) -> set[NodeRef]:
    seen = {start}
    frontier = deque([(start, 0)])
    while frontier:
        ref, depth = frontier.popleft()
        if depth == hops:
            continue
        for nb in graph.neighbors(ref):
            if nb not in seen:
                seen.add(nb)
                frontier.append((nb, depth + 1))
    return seen


def ego_graph(graph: InteractionGraph, u: NodeRef, i: NodeRef, hops: int) -> EgoGraph:
    """Induced subgraph on nodes within ``hops`` of either center endpoint."""
    graph.require(u, NodeKind.USER)
    graph.require(i, NodeKind.ITEM)
    if hops < 1:
        raise GraphError(f"hop limit must be >= 1, got {hops}")
    refs = sorted(
        _bfs_ball(graph, u, hops) | _bfs_ball(graph, i, hops),
        key=lambda r: r.sort_key,
    )
    index = {ref: k for k, ref in enumerate(refs)}
    adj = tuple(
        tuple(sorted(index[nb] for nb in graph.neighbors(ref) if nb in index))
        for ref in refs
    )
    ego = EgoGraph(
        center_user=u,
        center_item=i,
        nodes=tuple(refs),
        adj=adj,
        hop_limit=hops,
        index=index,
    )
    ego.validate()
    return ego


def m_core_prune(ego: EgoGraph, m: int) -> EgoGraph:
    """Maximal subgraph where every node has degree >= m.

    Peels low-degree nodes to a fixed point.  If either center node would be
    removed the input is returned unpruned, so an explanation can still be
    attempted for the pair.
    """
    if m < 0:
        raise GraphError(f"degree threshold must be >= 0, got {m}")
    degree = [len(ns) for ns in ego.adj]
    removed = [False] * ego.n_nodes()
    queue = deque(a for a in range(ego.n_nodes()) if degree[a] < m)
    in_queue = set(queue)
    while queue:
        a = queue.popleft()
        in_queue.discard(a)
        if removed[a] or degree[a] >= m:
            continue
        removed[a] = True
        for b in ego.adj[a]:
            if not removed[b]:
                degree[b] -= 1
                if degree[b] < m and b not in in_queue:
                    queue.append(b)
                    in_queue.add(b)
    survivors = [a for a in range(ego.n_nodes()) if not removed[a]]
    if ego.local(ego.center_user) not in survivors or ego.local(ego.center_item) not in survivors:
        return ego
    pruned = ego.induced(survivors)
    pruned.validate()
    return pruned
