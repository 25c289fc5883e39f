"""Graph encoders over user-item interaction graphs and link-prediction training.

Two encoders share one parameter layout (per-node embedding tables):

* ``rgcn``: each layer mean-aggregates neighbor embeddings through a learned
  relation matrix, adds a learned self-transform, and applies ReLU.
* ``lightgcn``: each layer is a plain weighted mean of neighbor embeddings
  with no transform and no nonlinearity; the final representation averages
  the input layer and every propagation layer.

Both accept optional per-directed-edge weights so a downstream edge-mask
learner can soften the graph without touching this module.  Link scores are
``sigmoid(h_u . h_i)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    Adam,
    AutodiffError,
    FlatAdjacency,
    GradientDescent,
    Tape,
    Tensor,
    stable_sigmoid,
)
from .graphstore import GraphError, InteractionGraph, NodeKind, NodeRef

ENCODERS = ("rgcn", "lightgcn")


@dataclass(frozen=True)
class GnnConfig:
    encoder: str = "rgcn"
    dim: int = 128
    layers: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.encoder not in ENCODERS:
            raise GraphError(f"unknown encoder {self.encoder!r}; expected one of {ENCODERS}")
        if self.dim < 1:
            raise GraphError("embedding dim must be >= 1")
        if self.layers < 1:
            raise GraphError("layer count must be >= 1")


def full_adjacency(graph: InteractionGraph) -> FlatAdjacency:
    """Flattened adjacency over global ids: users first, then items."""
    u, n = graph.user_count, graph.user_count + graph.item_count
    lists: list[list[int]] = [[] for _ in range(n)]
    for user_idx, item_idx in graph.edges():
        lists[user_idx].append(u + item_idx)
        lists[u + item_idx].append(user_idx)
    return FlatAdjacency.from_lists(lists)


class GnnModel:
    """Embedding tables plus (for rgcn) per-layer transform matrices.

    Parameters live in ``params`` as plain arrays so optimizers can update
    them in place; tapes see them through ``encode``.
    """

    def __init__(self, config: GnnConfig, n_users: int, n_items: int,
                 mapping_hash: str | None = None):
        config.validate()
        if n_users < 1 or n_items < 1:
            raise GraphError("model needs at least one user and one item")
        self.config = config
        self.n_users = n_users
        self.n_items = n_items
        self.mapping_hash = mapping_hash
        rng = np.random.default_rng(config.seed)
        bound = 1.0 / np.sqrt(config.dim)
        d = config.dim
        self.params: dict[str, np.ndarray] = {
            "user_emb": rng.uniform(-bound, bound, size=(n_users, d)),
            "item_emb": rng.uniform(-bound, bound, size=(n_items, d)),
        }
        if config.encoder == "rgcn":
            for layer in range(config.layers):
                self.params[f"w_self_{layer}"] = rng.uniform(-bound, bound, size=(d, d))
                self.params[f"w_neigh_{layer}"] = rng.uniform(-bound, bound, size=(d, d))

    @classmethod
    def for_graph(cls, config: GnnConfig, graph: InteractionGraph) -> "GnnModel":
        return cls(config, graph.user_count, graph.item_count, graph.mapping_hash())

    # -- encoding --------------------------------------------------------

    def _base_features(self, tape: Tape, user_rows: np.ndarray, item_rows: np.ndarray,
                       trainable: bool) -> tuple[Tensor, dict[str, Tensor]]:
        registered: dict[str, Tensor] = {}
        if trainable:
            ue = tape.parameter("user_emb", self.params["user_emb"])
            ie = tape.parameter("item_emb", self.params["item_emb"])
            registered["user_emb"] = ue
            registered["item_emb"] = ie
        else:
            ue = tape.constant(self.params["user_emb"])
            ie = tape.constant(self.params["item_emb"])
        parts = []
        if len(user_rows):
            parts.append(tape.gather(ue, user_rows))
        if len(item_rows):
            parts.append(tape.gather(ie, item_rows))
        if not parts:
            raise GraphError("cannot encode an empty node set")
        base = parts[0] if len(parts) == 1 else tape.stack_rows(parts)
        return base, registered

    def encode(
        self,
        tape: Tape,
        adj: FlatAdjacency,
        user_rows: Sequence[int],
        item_rows: Sequence[int],
        edge_weights: Tensor | None = None,
        trainable: bool = False,
    ) -> Tensor:
        """Node representations for the subgraph described by ``adj``.

        Local node v corresponds to ``user_rows[v]`` for v < len(user_rows)
        and to ``item_rows[v - len(user_rows)]`` otherwise; ``adj`` must use
        that same local ordering.  ``edge_weights`` has one entry per
        directed slot of ``adj``.
        """
        user_rows = np.asarray(user_rows, dtype=np.int64)
        item_rows = np.asarray(item_rows, dtype=np.int64)
        if len(user_rows) + len(item_rows) != adj.n_nodes:
            raise GraphError(
                f"adjacency covers {adj.n_nodes} nodes but "
                f"{len(user_rows) + len(item_rows)} rows were supplied"
            )
        h, registered = self._base_features(tape, user_rows, item_rows, trainable)
        cfg = self.config
        if cfg.encoder == "lightgcn":
            total = h
            for _ in range(cfg.layers):
                h = tape.neighbor_aggregate(adj, h, edge_weights)
                total = tape.add(total, h)
            return tape.scale(total, 1.0 / (cfg.layers + 1))
        # rgcn
        for layer in range(cfg.layers):
            if trainable:
                w_self = tape.parameter(f"w_self_{layer}", self.params[f"w_self_{layer}"])
                w_neigh = tape.parameter(f"w_neigh_{layer}", self.params[f"w_neigh_{layer}"])
            else:
                w_self = tape.constant(self.params[f"w_self_{layer}"])
                w_neigh = tape.constant(self.params[f"w_neigh_{layer}"])
            agg = tape.neighbor_aggregate(adj, h, edge_weights)
            h = tape.relu(tape.add(tape.matmul(agg, w_neigh), tape.matmul(h, w_self)))
        return h

    def encode_graph(self, tape: Tape, graph: InteractionGraph,
                     trainable: bool = False) -> Tensor:
        """Representations for every node of the full graph, users first."""
        if graph.user_count != self.n_users or graph.item_count != self.n_items:
            raise GraphError("graph size does not match the model")
        return self.encode(
            tape,
            full_adjacency(graph),
            np.arange(graph.user_count),
            np.arange(graph.item_count),
            trainable=trainable,
        )

    # -- scoring ---------------------------------------------------------

    def link_logits(self, tape: Tape, h: Tensor, user_locals: Sequence[int],
                    item_locals: Sequence[int]) -> Tensor:
        """Dot-product logits for aligned (user, item) local-id pairs."""
        u = np.asarray(user_locals, dtype=np.int64)
        i = np.asarray(item_locals, dtype=np.int64)
        if u.shape != i.shape:
            raise GraphError("user and item index lists must align")
        hu = tape.gather(h, u)
        hi = tape.gather(h, i)
        return tape.row_sum(tape.elementwise_mul(hu, hi))

    def predict_link(self, tape: Tape, h: Tensor, user_local: int, item_local: int) -> Tensor:
        """P(edge) = sigmoid(h_u . h_i) for one local-id pair."""
        return tape.sigmoid(self.link_logits(tape, h, [user_local], [item_local]))

    def score_pairs(self, graph: InteractionGraph,
                    pairs: Sequence[tuple[int, int]]) -> np.ndarray:
        """Link probabilities for (user_idx, item_idx) pairs, no gradients."""
        tape = Tape()
        h = self.encode_graph(tape, graph).value
        out = np.empty(len(pairs), dtype=np.float64)
        offset = graph.user_count
        for k, (user_idx, item_idx) in enumerate(pairs):
            out[k] = stable_sigmoid(np.atleast_1d(h[user_idx] @ h[offset + item_idx]))[0]
        return out


# ---------------------------------------------------------------------------
# link-prediction training


@dataclass(frozen=True)
class LpTrainConfig:
    steps: int = 200
    lr: float = 0.05
    optimizer: str = "adam"
    negatives_per_positive: int = 1
    holdout_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise GraphError("training needs at least one step")
        if self.lr <= 0:
            raise GraphError("learning rate must be positive")
        if self.negatives_per_positive < 1:
            raise GraphError("negatives per positive must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise GraphError("holdout fraction must be in [0, 1)")


@dataclass
class LpTrainReport:
    losses: list[float] = field(default_factory=list)
    holdout_edges: list[tuple[int, int]] = field(default_factory=list)
    holdout_auc: float | None = None


def _sample_negatives(rng: np.random.Generator, positives: list[tuple[int, int]],
                      known: set[tuple[int, int]], n_items: int,
                      per_positive: int) -> list[tuple[int, int]]:
    # Item corruption with rejection; a user connected to every item yields
    # no negatives rather than spinning forever.
    out = []
    for user_idx, _ in positives:
        for _ in range(per_positive):
            for _attempt in range(50):
                j = int(rng.integers(n_items))
                if (user_idx, j) not in known:
                    out.append((user_idx, j))
                    break
    return out


def train_lp(graph: InteractionGraph, model_config: GnnConfig,
             train_config: LpTrainConfig) -> tuple[GnnModel, LpTrainReport]:
    """Fit a model to predict observed edges against sampled non-edges.

    Loss is mean binary cross-entropy over all positives plus freshly
    sampled item-corrupted negatives each step.  When ``holdout_fraction``
    is positive, that share of edges is removed from message passing and
    the loss, and scored afterwards for a ranking-quality report.
    """
    model_config.validate()
    train_config.validate()
    model = GnnModel.for_graph(model_config, graph)
    rng = np.random.default_rng(train_config.seed)

    all_edges = list(graph.edges())
    n_hold = int(round(train_config.holdout_fraction * len(all_edges)))
    if n_hold >= len(all_edges):
        n_hold = len(all_edges) - 1
    order = rng.permutation(len(all_edges))
    holdout = [all_edges[k] for k in order[:n_hold]]
    train_edges = [all_edges[k] for k in order[n_hold:]]
    known = set(all_edges)

    train_graph = graph
    if holdout:
        kept = set(train_edges)
        train_graph = InteractionGraph(
            graph.user_count, graph.item_count,
            [e for e in all_edges if e in kept],
            user_ids=[graph.node_id(NodeRef(NodeKind.USER, k))
                      for k in range(graph.user_count)],
            item_ids=[graph.node_id(NodeRef(NodeKind.ITEM, k))
                      for k in range(graph.item_count)],
        )

    adj = full_adjacency(train_graph)
    offset = graph.user_count
    opt = Adam(train_config.lr) if train_config.optimizer == "adam" \
        else GradientDescent(train_config.lr)
    if train_config.optimizer not in ("adam", "gd", "sgd", "gradient_descent"):
        raise GraphError(f"unknown optimizer {train_config.optimizer!r}")

    report = LpTrainReport(holdout_edges=holdout)
    for _step in range(train_config.steps):
        negatives = _sample_negatives(
            rng, train_edges, known, graph.item_count,
            train_config.negatives_per_positive,
        )
        pairs = train_edges + negatives
        labels = np.array([1.0] * len(train_edges) + [0.0] * len(negatives))
        tape = Tape()
        h = model.encode(
            tape, adj, np.arange(graph.user_count), np.arange(graph.item_count),
            trainable=True,
        )
        logits = model.link_logits(
            tape, h,
            [u for u, _ in pairs],
            [offset + i for _, i in pairs],
        )
        loss = tape.bce_with_logits(logits, labels)
        grads = tape.backward(loss)
        opt.step(model.params, grads)
        report.losses.append(float(loss.value))
        if not np.isfinite(report.losses[-1]):
            raise AutodiffError(f"training diverged at step {_step}")

    if holdout:
        neg = _sample_negatives(rng, holdout, known, graph.item_count, 1)
        scores = model.score_pairs(train_graph, holdout + neg)
        labels = np.array([1.0] * len(holdout) + [0.0] * len(neg))
        report.holdout_auc = auc_from_scores(labels, scores)
    return model, report


def auc_from_scores(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank statistic, ties counted half."""
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1.0]
    neg = scores[labels == 0.0]
    if len(pos) == 0 or len(neg) == 0:
        raise GraphError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks within tied groups
    sorted_scores = scores[order]
    start = 0
    for stop in range(1, len(scores) + 1):
        if stop == len(scores) or sorted_scores[stop] != sorted_scores[start]:
            ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
            start = stop
    rank_sum = float(np.sum(ranks[labels == 1.0]))
    n_pos, n_neg = len(pos), len(neg)
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# checkpoint container
#
# Fixed binary layout so identical models produce identical bytes:
#   magic "WRCK" | u32 version | u64 header length | header JSON | payload
# Header JSON uses sorted keys; payload is the raw little-endian float64
# bytes of every array in header order, integrity-checked by sha256.

_MAGIC = b"WRCK"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: GnnModel, path) -> None:
    names = sorted(model.params)
    payload = b"".join(
        np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names
    )
    header = {
        "arrays": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "config": {
            "dim": model.config.dim,
            "encoder": model.config.encoder,
            "layers": model.config.layers,
            "seed": model.config.seed,
        },
        "mapping_hash": model.mapping_hash,
        "n_items": model.n_items,
        "n_users": model.n_users,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path, graph: InteractionGraph | None = None) -> GnnModel:
    """Restore a model; with ``graph`` given, also verify it matches."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    version = int.from_bytes(raw[4:8], "little")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header_len = int.from_bytes(raw[8:16], "little")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from err
    payload = raw[16 + header_len:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: checkpoint payload is corrupt")
    config = GnnConfig(**header["config"])
    model = GnnModel(config, header["n_users"], header["n_items"], header["mapping_hash"])
    cursor = 0
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f8", count=count, offset=cursor
        ).astype(np.float64).reshape(shape)
        cursor += count * 8
        if spec["name"] not in model.params:
            raise CheckpointError(f"{path}: unexpected array {spec['name']!r}")
        if model.params[spec["name"]].shape != shape:
            raise CheckpointError(f"{path}: array {spec['name']!r} has wrong shape")
        model.params[spec["name"]] = arr
    if cursor != len(payload):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint payload")
    if graph is not None:
        if graph.user_count != model.n_users or graph.item_count != model.n_items:
            raise CheckpointError(
                f"{path}: checkpoint covers {model.n_users} users / "
                f"{model.n_items} items, graph has {graph.user_count} / "
                f"{graph.item_count}"
            )
        if model.mapping_hash != graph.mapping_hash():
            raise CheckpointError(f"{path}: node-id mapping differs from this graph")
    return model
