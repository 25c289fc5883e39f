"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's own algorithms: m-core by
naive repeated scanning, best paths by exhaustive DFS enumeration, gradients
by central finite differences, AUC by direct pair counting.  Tests compare
library output against these.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from whyrec.autodiff import Tape
from whyrec.graphstore import EgoGraph, InteractionGraph, NodeKind, ego_graph, item, user


# ---------------------------------------------------------------------------
# graph builders


def make_graph(n_users: int, n_items: int, edges, **kwargs) -> InteractionGraph:
    defaults = dict(
        user_profiles=[f"user profile {k}" for k in range(n_users)],
        item_profiles=[f"item profile {k}" for k in range(n_items)],
        item_titles=[f"Title {k}" for k in range(n_items)],
    )
    defaults.update(kwargs)
    return InteractionGraph(n_users, n_items, edges, **defaults)


def random_bipartite(rng: np.random.Generator, max_users: int = 10,
                     max_items: int = 10, density: float = 0.35) -> InteractionGraph:
    n_users = int(rng.integers(1, max_users + 1))
    n_items = int(rng.integers(1, max_items + 1))
    edges = [
        (u, i)
        for u in range(n_users)
        for i in range(n_items)
        if rng.random() < density
    ]
    if not edges:
        edges = [(0, 0)]
    return make_graph(n_users, n_items, edges)


def random_ego(rng: np.random.Generator, max_users: int = 6, max_items: int = 6,
               density: float = 0.5) -> EgoGraph:
    """Random ego whose center pair is connected through the graph."""
    graph = random_bipartite(rng, max_users, max_items, density)
    u0 = user(0)
    # anchor the center item to something reachable so extraction can work
    neighbors = graph.neighbors(u0)
    i0 = neighbors[0] if neighbors else item(0)
    return ego_graph(graph, u0, i0, hops=3)


# ---------------------------------------------------------------------------
# oracles


def mcore_oracle(adj: list[list[int]], m: int) -> set[int]:
    """Fixed point of 'repeatedly drop any node with degree < m', by rescan."""
    alive = set(range(len(adj)))
    changed = True
    while changed:
        changed = False
        for v in sorted(alive):
            degree = sum(1 for w in adj[v] if w in alive)
            if degree < m:
                alive.discard(v)
                changed = True
    return alive


def enumerate_simple_paths(ego: EgoGraph, src: int, dst: int, max_len: int):
    """All simple src->dst paths with at most max_len edges, as local-id lists."""
    out = []
    stack = [(src, [src])]
    while stack:
        node, path = stack.pop()
        if node == dst and len(path) > 1:
            out.append(path)
            continue
        if len(path) > max_len:
            continue
        for nxt in ego.adj[node]:
            if nxt not in path:
                stack.append((nxt, path + [nxt]))
    return out


def path_score_oracle(ego: EgoGraph, logits: np.ndarray, path: list[int]) -> float:
    """Term-by-term rescoring: log sigma(logit) - log deg(entered node)."""
    edge_ids = ego.edge_ids()
    total = 0.0
    for a, b in zip(path, path[1:]):
        key = (a, b) if ego.kind_of(a) == NodeKind.USER else (b, a)
        logit = logits[edge_ids[key]]
        total += -math.log1p(math.exp(-logit)) if logit >= 0 \
            else logit - math.log1p(math.exp(logit))
        total -= math.log(len(ego.adj[b]))
    return total


def numeric_gradients(build_loss, params: dict[str, np.ndarray],
                      epsilon: float = 1e-6) -> dict[str, np.ndarray]:
    """Central finite differences, independent of the library's grad_check."""

    def value_at(values):
        tape = Tape()
        tensors = {k: tape.parameter(k, v) for k, v in values.items()}
        return float(build_loss(tape, tensors).value)

    out = {}
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        grad = np.zeros_like(base)
        flat_grad = grad.reshape(-1)
        flat_base = base.reshape(-1)
        for k in range(flat_base.size):
            bumped = {n: np.array(v, dtype=np.float64) for n, v in params.items()}
            bumped[name].reshape(-1)[k] = flat_base[k] + epsilon
            hi = value_at(bumped)
            bumped[name].reshape(-1)[k] = flat_base[k] - epsilon
            lo = value_at(bumped)
            flat_grad[k] = (hi - lo) / (2.0 * epsilon)
        out[name] = grad
    return out


def max_rel_error(analytic: dict[str, np.ndarray],
                  numeric: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name, num in numeric.items():
        ana = analytic[name]
        err = np.abs(ana - num) / np.maximum(1.0, np.abs(num))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def auc_oracle(labels: np.ndarray, scores: np.ndarray) -> float:
    """Direct pair counting: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos = scores[labels == 1.0]
    neg = scores[labels == 0.0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
