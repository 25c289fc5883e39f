"""Edge-mask learning and shortest-path extraction for pair explanations.

For a target (user, item) pair, a soft mask over the ego-graph edges is
trained so that (a) the frozen link predictor still believes the pair when
messages are scaled by sigma(mask), and (b) edges lying on the current best
paths are pushed up while the rest are pushed down.  Paths are then read out
with a bounded-length Dijkstra where an edge traversed into node b costs
-(log sigma(M_e) - log deg(b)); costs are strictly positive, so the search
is sound and the best bounded walk is a simple path.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    FlatAdjacency,
    Tape,
    Tensor,
    make_optimizer,
    stable_log_sigmoid,
    stable_sigmoid,
)
from .gnn import GnnModel
from .graphstore import (
    EdgeType,
    EgoGraph,
    GraphError,
    InteractionGraph,
    NodeKind,
    NodeRef,
    ego_graph,
    m_core_prune,
)


@dataclass
class EdgeMask:
    """One logit per undirected ego edge, in ``ego.edge_list()`` order."""

    ego: EgoGraph
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (self.ego.n_edges(),):
            raise GraphError(
                f"mask covers {self.logits.shape} logits but ego has "
                f"{self.ego.n_edges()} edges"
            )

    def sigma(self) -> np.ndarray:
        return stable_sigmoid(self.logits)

    def edge_index(self, user_local: int, item_local: int) -> int:
        try:
            return self.ego.edge_ids()[(user_local, item_local)]
        except KeyError:
            raise GraphError(
                f"edge ({user_local}, {item_local}) is not in the ego graph"
            ) from None

    def edge_type(self, edge_id: int) -> EdgeType:
        # Undirected edges carry the user-side relation; the reverse
        # direction is its mirror and never double counted.
        if not 0 <= edge_id < len(self.logits):
            raise GraphError(f"edge id {edge_id} out of range")
        return EdgeType.BUYS

    def ids_of_type(self, edge_type: EdgeType) -> tuple[int, ...]:
        if edge_type == EdgeType.BUYS:
            return tuple(range(len(self.logits)))
        return ()


@dataclass(frozen=True)
class MaskLearnConfig:
    steps: int = 200
    lr: float = 0.1
    optimizer: str = "adam"
    refresh_interval: int = 10
    max_path_len: int = 5
    k: int = 2
    exclude_center_edge: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise GraphError("mask learning needs steps >= 1")
        if self.lr <= 0:
            raise GraphError("learning rate must be positive")
        if self.refresh_interval < 1:
            raise GraphError("path refresh interval must be >= 1")
        if self.max_path_len < 1:
            raise GraphError("max path length must be >= 1")
        if self.k < 1:
            raise GraphError("k must be >= 1")


@dataclass(frozen=True)
class ScoredPath:
    """Simple alternating path from the center user to the center item."""

    nodes: tuple[NodeRef, ...]
    edge_ids: tuple[int, ...]
    sigmas: tuple[float, ...]
    score: float

    def __post_init__(self):
        if len(self.nodes) != len(self.edge_ids) + 1:
            raise GraphError("node and edge sequences do not line up")
        for a, b in zip(self.nodes, self.nodes[1:]):
            if a.kind == b.kind:
                raise GraphError("path does not alternate user/item kinds")

    @property
    def length(self) -> int:
        return len(self.edge_ids)


@dataclass(frozen=True)
class PathExplanation:
    user: NodeRef
    item: NodeRef
    paths: tuple[ScoredPath, ...]
    diagnostics: dict = field(compare=False, default_factory=dict)


# ---------------------------------------------------------------------------
# losses


def _slot_edge_map(ego: EgoGraph, adj: FlatAdjacency) -> np.ndarray:
    """Directed slot -> undirected edge id, matching ``adj`` slot order."""
    n_users = sum(1 for ref in ego.nodes if ref.kind == NodeKind.USER)
    edge_ids = ego.edge_ids()
    out = np.empty(adj.n_slots, dtype=np.int64)
    for slot in range(adj.n_slots):
        a, b = int(adj.dst[slot]), int(adj.src[slot])
        key = (a, b) if a < n_users else (b, a)
        out[slot] = edge_ids[key]
    return out


def _ego_rows(ego: EgoGraph) -> tuple[list[int], list[int]]:
    user_rows = [ref.index for ref in ego.nodes if ref.kind == NodeKind.USER]
    item_rows = [ref.index for ref in ego.nodes if ref.kind == NodeKind.ITEM]
    return user_rows, item_rows


def loss_pred_tensor(tape: Tape, model: GnnModel, ego: EgoGraph,
                     logits: Tensor, user_local: int, item_local: int) -> Tensor:
    """-log P(link | masked ego) on the given tape; gradients reach ``logits``."""
    adj = FlatAdjacency.from_lists(ego.adj)
    user_rows, item_rows = _ego_rows(ego)
    weights = None
    if ego.n_edges() > 0:
        weights = tape.gather(tape.sigmoid(logits), _slot_edge_map(ego, adj))
    h = model.encode(tape, adj, user_rows, item_rows, edge_weights=weights)
    logit = model.link_logits(tape, h, [user_local], [item_local])
    return tape.bce_with_logits(logit, np.ones(1))


def loss_pred(model: GnnModel, ego: EgoGraph, mask: EdgeMask,
              pair: tuple[NodeRef, NodeRef]) -> float:
    tape = Tape()
    logits = tape.parameter("logits", mask.logits)
    out = loss_pred_tensor(
        tape, model, ego, logits, ego.local(pair[0]), ego.local(pair[1])
    )
    return float(out.value)


def loss_path_tensor(tape: Tape, logits: Tensor, n_edges: int,
                     path_edges: Sequence[int]) -> Tensor:
    """-(sum of on-path logits - sum of off-path logits); linear in logits."""
    on_path = np.zeros(n_edges, dtype=bool)
    for e in path_edges:
        if not 0 <= e < n_edges:
            raise GraphError(f"path edge {e} outside the ego graph")
        on_path[e] = True
    sign = np.where(on_path, -1.0, 1.0)
    return tape.sum(tape.elementwise_mul(logits, tape.constant(sign)))


def loss_path(mask: EdgeMask, path_edges: Sequence[int]) -> float:
    tape = Tape()
    logits = tape.parameter("logits", mask.logits)
    return float(loss_path_tensor(tape, logits, len(mask.logits), path_edges).value)


# ---------------------------------------------------------------------------
# path scoring and search


def path_score(steps: Sequence[tuple[int, int]], mask: EdgeMask, ego: EgoGraph) -> float:
    """Sum over traversed edges of log sigma(M_e) - log deg(entered node).

    ``steps`` is the directed local-id sequence [(a0,b0), (a1,b1), ...] with
    each b_t == a_{t+1}; degrees are taken in ``ego``.
    """
    if not steps:
        raise GraphError("a path needs at least one edge")
    log_sig = stable_log_sigmoid(mask.logits)
    total = 0.0
    prev_end = steps[0][0]
    for a, b in steps:
        if a != prev_end:
            raise GraphError("edge sequence is not chained")
        user_local, item_local = (a, b) if ego.kind_of(a) == NodeKind.USER else (b, a)
        edge_id = mask.edge_index(user_local, item_local)
        total += float(log_sig[edge_id]) - math.log(ego.degree(b))
        prev_end = b
    return total


def _dijkstra_once(ego: EgoGraph, mask: EdgeMask, banned: set[int],
                   src: int, dst: int, max_len: int):
    """Cheapest walk src -> dst within max_len edges, deterministic ties.

    Returns (local node sequence, edge id sequence) or None.  Edge cost into
    node b is -(log sigma(M_e) - log deg(b)) > 0, so the cheapest bounded
    walk is simple and Dijkstra applies per hop layer.
    """
    n = ego.n_nodes()
    log_sig = stable_log_sigmoid(mask.logits)
    edge_ids = ego.edge_ids()
    n_users = sum(1 for ref in ego.nodes if ref.kind == NodeKind.USER)

    dist = [[math.inf] * (max_len + 1) for _ in range(n)]
    parent: dict[tuple[int, int], tuple[int, int, int]] = {}
    dist[src][0] = 0.0
    # heap keys: cost, then the entered node's (kind, index), then hops
    heap = [(0.0, ego.nodes[src].sort_key, 0, src)]
    while heap:
        d, _, hops, v = heapq.heappop(heap)
        if d > dist[v][hops]:
            continue
        if hops == max_len:
            continue
        for w in ego.adj[v]:
            key = (v, w) if v < n_users else (w, v)
            edge_id = edge_ids[key]
            if edge_id in banned:
                continue
            cost = -(float(log_sig[edge_id]) - math.log(ego.degree(w)))
            nd = d + cost
            if nd < dist[w][hops + 1]:
                dist[w][hops + 1] = nd
                parent[(w, hops + 1)] = (v, hops, edge_id)
                heapq.heappush(heap, (nd, ego.nodes[w].sort_key, hops + 1, w))

    best_hops = None
    for hops in range(1, max_len + 1):
        if dist[dst][hops] < math.inf and (
            best_hops is None or dist[dst][hops] < dist[dst][best_hops]
        ):
            best_hops = hops
    if best_hops is None:
        return None
    nodes = [dst]
    edges = []
    state = (dst, best_hops)
    while state[1] > 0:
        v, hops, edge_id = parent[state]
        nodes.append(v)
        edges.append(edge_id)
        state = (v, hops)
    nodes.reverse()
    edges.reverse()
    return nodes, edges


def extract_paths(ego: EgoGraph, mask: EdgeMask, pair: tuple[NodeRef, NodeRef],
                  k: int, max_len: int) -> list[ScoredPath]:
    """Up to k edge-disjoint top-score paths, best first.

    Each round runs the bounded Dijkstra, then bans the found path's edges
    so the next round must take different edges; stops early when the pair
    becomes disconnected.
    """
    if k < 1 or max_len < 1:
        raise GraphError("k and max_len must be >= 1")
    src, dst = ego.local(pair[0]), ego.local(pair[1])
    sigma = mask.sigma()
    banned: set[int] = set()
    out: list[ScoredPath] = []
    for _ in range(k):
        found = _dijkstra_once(ego, mask, banned, src, dst, max_len)
        if found is None:
            break
        local_nodes, edge_seq = found
        steps = list(zip(local_nodes, local_nodes[1:]))
        out.append(ScoredPath(
            nodes=tuple(ego.nodes[v] for v in local_nodes),
            edge_ids=tuple(edge_seq),
            sigmas=tuple(float(sigma[e]) for e in edge_seq),
            score=path_score(steps, mask, ego),
        ))
        banned.update(edge_seq)
    out.sort(key=lambda p: -p.score)
    return out


# ---------------------------------------------------------------------------
# mask learning


def learn_mask(model: GnnModel, ego: EgoGraph, pair: tuple[NodeRef, NodeRef],
               cfg: MaskLearnConfig) -> tuple[EdgeMask, list[dict]]:
    """Descend on loss_pred + loss_path, re-extracting guide paths every
    ``refresh_interval`` steps.  Returns the final mask and a per-step trace
    of both loss terms."""
    cfg.validate()
    user_local, item_local = ego.local(pair[0]), ego.local(pair[1])
    logits = np.zeros(ego.n_edges(), dtype=np.float64)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    params = {"logits": logits}
    path_edges: list[int] = []
    trace: list[dict] = []
    for step in range(cfg.steps):
        if step % cfg.refresh_interval == 0:
            guide = extract_paths(
                ego, EdgeMask(ego, logits.copy()), pair, cfg.k, cfg.max_path_len
            )
            path_edges = sorted({e for p in guide for e in p.edge_ids})
        tape = Tape()
        logit_t = tape.parameter("logits", logits)
        lp = loss_pred_tensor(tape, model, ego, logit_t, user_local, item_local)
        lpath = loss_path_tensor(tape, logit_t, len(logits), path_edges)
        total = tape.add(lp, lpath)
        if not np.isfinite(total.value):
            raise GraphError(f"mask learning produced a non-finite loss at step {step}")
        grads = tape.backward(total)
        opt.step(params, grads)
        trace.append({
            "step": step,
            "loss_pred": float(lp.value),
            "loss_path": float(lpath.value),
            "loss": float(total.value),
        })
    return EdgeMask(ego, logits), trace


# ---------------------------------------------------------------------------
# end-to-end explanation


def explain(graph: InteractionGraph, model: GnnModel,
            pair: tuple[NodeRef, NodeRef], m: int, hops: int,
            cfg: MaskLearnConfig) -> PathExplanation:
    """Ego extraction, m-core pruning, mask learning, path readout."""
    u_ref, i_ref = pair
    graph.require(u_ref, NodeKind.USER)
    graph.require(i_ref, NodeKind.ITEM)
    ego = ego_graph(graph, u_ref, i_ref, hops)
    pruned = m_core_prune(ego, m)
    working = pruned
    if cfg.exclude_center_edge and pruned.has_edge(u_ref, i_ref):
        working = pruned.without_edge(u_ref, i_ref)
    diagnostics = {
        "ego_nodes": ego.n_nodes(), "ego_edges": ego.n_edges(),
        "pruned_nodes": pruned.n_nodes(), "pruned_edges": pruned.n_edges(),
    }
    if working.n_edges() == 0:
        return PathExplanation(u_ref, i_ref, (), diagnostics)
    mask, trace = learn_mask(model, working, pair, cfg)
    paths = extract_paths(working, mask, pair, cfg.k, cfg.max_path_len)
    diagnostics["final_loss_pred"] = trace[-1]["loss_pred"]
    diagnostics["final_loss_path"] = trace[-1]["loss_path"]
    return PathExplanation(u_ref, i_ref, tuple(paths), diagnostics)


# ---------------------------------------------------------------------------
# dump file: one JSON record per explained pair


def write_explanations(path, graph: InteractionGraph,
                       explanations: Sequence[PathExplanation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for exp in explanations:
            record = {
                "user": graph.node_id(exp.user),
                "item": graph.node_id(exp.item),
                "paths": [
                    {
                        "nodes": [graph.node_id(ref) for ref in p.nodes],
                        "sigma": list(p.sigmas),
                        "score": p.score,
                    }
                    for p in exp.paths
                ],
                "diagnostics": exp.diagnostics,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_explanations(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise GraphError(f"{path}:{lineno}: invalid JSON") from err
            for key in ("user", "item", "paths"):
                if key not in record:
                    raise GraphError(f"{path}:{lineno}: missing field {key!r}")
            out.append(record)
    return out
