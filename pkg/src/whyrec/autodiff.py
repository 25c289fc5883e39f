"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every forward operation; ``backward`` replays the records
in reverse and returns one gradient per registered parameter.  The op set is
deliberately small: what message passing, masked prediction losses and path
losses need, nothing more.  All values are 64-bit floats and every op checks
its inputs are finite, so a diverging optimization fails loudly at the op
that produced the first non-finite value.

Tapes are single-use and single-threaded; tensors are immutable once created
and safe to share between tapes as raw arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class AutodiffError(ValueError):
    """Shape mismatch, non-finite input, or tape misuse."""


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def stable_log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log sigma(x) = -softplus(-x)
    return -np.logaddexp(0.0, -x)


@dataclass(frozen=True)
class FlatAdjacency:
    """Flattened neighbor structure for mean-aggregation on a tape.

    One slot per directed edge (receiver, sender); slots are grouped by
    receiver.  ``degree[v]`` is the full neighbor count of v regardless of
    any per-edge weights, matching mean normalization by |N_v|.
    """

    n_nodes: int
    dst: np.ndarray  # receiver node per slot, int64
    src: np.ndarray  # sender node per slot, int64
    degree: np.ndarray  # float64, len n_nodes

    @classmethod
    def from_lists(cls, adj: Sequence[Sequence[int]]) -> "FlatAdjacency":
        dst, src = [], []
        for v, neighbors in enumerate(adj):
            for w in neighbors:
                dst.append(v)
                src.append(w)
        degree = np.array([len(ns) for ns in adj], dtype=np.float64)
        return cls(
            n_nodes=len(adj),
            dst=np.asarray(dst, dtype=np.int64),
            src=np.asarray(src, dtype=np.int64),
            degree=degree,
        )

    @property
    def n_slots(self) -> int:
        return len(self.dst)


class Tensor:
    """Value produced on a tape.  Do not mutate ``value`` after creation."""

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int):
        self.value = value
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)


class Tape:
    """Records forward ops; one backward pass per tape."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        # per node: list of (input_id, vjp) pairs
        self._pulls: list[list[tuple[int, Callable[[np.ndarray], np.ndarray]]]] = []
        self._params: dict[str, int] = {}
        self._consumed = False

    # -- node plumbing ---------------------------------------------------

    def _new(self, value: np.ndarray, pulls) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        node_id = len(self._values)
        self._values.append(value)
        self._pulls.append(pulls)
        return Tensor(value, self, node_id)

    def _check(self, *tensors: Tensor) -> None:
        for t in tensors:
            if t.tape is not self:
                raise AutodiffError("tensor belongs to a different tape")
            if not np.all(np.isfinite(t.value)):
                raise AutodiffError("non-finite input to an operation")

    def constant(self, value) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise AutodiffError("non-finite constant")
        return self._new(value, [])

    def parameter(self, name: str, value) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"parameter {name!r} registered twice")
        t = self.constant(value)
        self._params[name] = t.node_id
        return t

    # -- op set ----------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise AutodiffError(f"matmul shape mismatch {a.shape} x {b.shape}")
        av, bv = a.value, b.value
        return self._new(
            av @ bv,
            [(a.node_id, lambda g: g @ bv.T), (b.node_id, lambda g: av.T @ g)],
        )

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.shape != b.shape:
            raise AutodiffError(f"add shape mismatch {a.shape} vs {b.shape}")
        return self._new(
            a.value + b.value,
            [(a.node_id, lambda g: g), (b.node_id, lambda g: g)],
        )

    def scale(self, a: Tensor, c: float) -> Tensor:
        self._check(a)
        c = float(c)
        return self._new(c * a.value, [(a.node_id, lambda g: c * g)])

    def elementwise_mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.shape != b.shape:
            raise AutodiffError(f"elementwise_mul shape mismatch {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        return self._new(
            av * bv,
            [(a.node_id, lambda g: g * bv), (b.node_id, lambda g: g * av)],
        )

    def relu(self, a: Tensor) -> Tensor:
        self._check(a)
        mask = a.value > 0
        return self._new(np.where(mask, a.value, 0.0), [(a.node_id, lambda g: g * mask)])

    def sigmoid(self, a: Tensor) -> Tensor:
        self._check(a)
        s = stable_sigmoid(a.value)
        return self._new(s, [(a.node_id, lambda g: g * s * (1.0 - s))])

    def log_sigmoid(self, a: Tensor) -> Tensor:
        self._check(a)
        s = stable_sigmoid(a.value)
        return self._new(stable_log_sigmoid(a.value), [(a.node_id, lambda g: g * (1.0 - s))])

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.value.ndim != 1 or a.shape != b.shape:
            raise AutodiffError(f"dot expects equal-length vectors, got {a.shape}, {b.shape}")
        av, bv = a.value, b.value
        return self._new(
            av @ bv,
            [(a.node_id, lambda g: g * bv), (b.node_id, lambda g: g * av)],
        )

    def gather(self, a: Tensor, indices: np.ndarray) -> Tensor:
        """Select rows (or elements of a vector) by index; backward scatters."""
        self._check(a)
        idx = np.asarray(indices, dtype=np.int64)

        def pull(g):
            out = np.zeros_like(a.value)
            np.add.at(out, idx, g)
            return out

        return self._new(a.value[idx], [(a.node_id, pull)])

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        self._check(*parts)
        for p in parts:
            if p.value.ndim != 1:
                raise AutodiffError("concat expects vectors")
        sizes = [p.shape[0] for p in parts]
        offsets = np.cumsum([0, *sizes])
        pulls = []
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            pulls.append((p.node_id, lambda g, s=start, e=stop: g[s:e]))
        return self._new(np.concatenate([p.value for p in parts]), pulls)

    def stack_rows(self, parts: Sequence[Tensor]) -> Tensor:
        """Concatenate 2-D blocks along axis 0; backward slices the cotangent."""
        self._check(*parts)
        for p in parts:
            if p.value.ndim != 2:
                raise AutodiffError("stack_rows expects matrices")
        widths = {p.shape[1] for p in parts}
        if len(widths) > 1:
            raise AutodiffError(f"stack_rows width mismatch: {sorted(widths)}")
        sizes = [p.shape[0] for p in parts]
        offsets = np.cumsum([0, *sizes])
        pulls = []
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            pulls.append((p.node_id, lambda g, s=start, e=stop: g[s:e]))
        return self._new(np.concatenate([p.value for p in parts], axis=0), pulls)

    def row_sum(self, a: Tensor) -> Tensor:
        """Sum each row of a matrix down to a vector."""
        self._check(a)
        if a.value.ndim != 2:
            raise AutodiffError("row_sum expects a matrix")
        cols = a.shape[1]
        return self._new(
            np.sum(a.value, axis=1),
            [(a.node_id, lambda g: np.repeat(g[:, None], cols, axis=1))],
        )

    def neighbor_aggregate(
        self, adj: FlatAdjacency, feats: Tensor, weights: Tensor | None = None
    ) -> Tensor:
        """Per-node mean of (optionally weighted) neighbor feature rows."""
        self._check(feats)
        if feats.value.ndim != 2 or feats.shape[0] != adj.n_nodes:
            raise AutodiffError(
                f"neighbor_aggregate expects ({adj.n_nodes}, d) features, got {feats.shape}"
            )
        inv_deg = 1.0 / np.maximum(adj.degree, 1.0)
        if weights is not None:
            self._check(weights)
            if weights.shape != (adj.n_slots,):
                raise AutodiffError(
                    f"edge weights must have one entry per directed slot "
                    f"({adj.n_slots}), got {weights.shape}"
                )
            w = weights.value
        else:
            w = None

        fv = feats.value
        contrib = fv[adj.src] if w is None else fv[adj.src] * w[:, None]
        out = np.zeros_like(fv)
        np.add.at(out, adj.dst, contrib)
        out *= inv_deg[:, None]

        def pull_feats(g):
            scaled = g * inv_deg[:, None]
            up = scaled[adj.dst] if w is None else scaled[adj.dst] * w[:, None]
            gf = np.zeros_like(fv)
            np.add.at(gf, adj.src, up)
            return gf

        pulls = [(feats.node_id, pull_feats)]
        if weights is not None:
            def pull_weights(g):
                scaled = g * inv_deg[:, None]
                return np.sum(scaled[adj.dst] * fv[adj.src], axis=1)

            pulls.append((weights.node_id, pull_weights))
        return self._new(out, pulls)

    def bce_with_logits(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        """Mean binary cross-entropy; labels are constants in {0, 1}."""
        self._check(logits)
        y = np.asarray(labels, dtype=np.float64)
        if y.shape != logits.shape:
            raise AutodiffError(f"labels shape {y.shape} != logits shape {logits.shape}")
        z = logits.value
        n = max(z.size, 1)
        # BCE = y*softplus(-z) + (1-y)*softplus(z), averaged
        loss = np.mean(y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z))
        s = stable_sigmoid(z)
        return self._new(loss, [(logits.node_id, lambda g: g * (s - y) / n)])

    def sum(self, a: Tensor) -> Tensor:
        self._check(a)
        return self._new(np.sum(a.value), [(a.node_id, lambda g: g * np.ones_like(a.value))])

    def mean(self, a: Tensor) -> Tensor:
        self._check(a)
        n = max(a.value.size, 1)
        return self._new(
            np.mean(a.value), [(a.node_id, lambda g: g * np.ones_like(a.value) / n)]
        )

    # -- backward --------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss for every registered parameter."""
        if loss.tape is not self:
            raise AutodiffError("loss was not produced on this tape")
        if loss.value.shape != ():
            raise AutodiffError(f"loss must be scalar, got shape {loss.value.shape}")
        if self._consumed:
            raise AutodiffError("backward invoked twice on one tape")
        self._consumed = True

        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[loss.node_id] = np.ones((), dtype=np.float64)
        for node_id in range(loss.node_id, -1, -1):
            g = grads[node_id]
            if g is None:
                continue
            for input_id, vjp in self._pulls[node_id]:
                contrib = vjp(g)
                if grads[input_id] is None:
                    grads[input_id] = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    grads[input_id] += contrib
        out = {}
        for name, node_id in self._params.items():
            g = grads[node_id]
            out[name] = (
                np.zeros_like(self._values[node_id]) if g is None else g
            )
        return out


# ---------------------------------------------------------------------------
# numeric gradient checking


def grad_check(
    build_loss: Callable[[Tape, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` must construct a scalar loss on the tape it is given,
    reading parameters only through the supplied tensors.  The relative
    error per entry is |analytic - numeric| / max(1, |numeric|).
    """
    if epsilon <= 0:
        raise AutodiffError("epsilon must be positive")

    def evaluate(values: dict[str, np.ndarray]) -> float:
        tape = Tape()
        tensors = {k: tape.parameter(k, v) for k, v in values.items()}
        loss = build_loss(tape, tensors)
        if not np.isfinite(loss.value):
            raise AutodiffError("non-finite loss during gradient check")
        return float(loss.value)

    tape = Tape()
    tensors = {k: tape.parameter(k, v) for k, v in params.items()}
    analytic = tape.backward(build_loss(tape, tensors))

    worst = 0.0
    for name, base in params.items():
        base = np.asarray(base, dtype=np.float64)
        flat = base.reshape(-1)
        for k in range(flat.size):
            bumped = {n: np.array(v, dtype=np.float64, copy=True) for n, v in params.items()}
            bumped[name].reshape(-1)[k] = flat[k] + epsilon
            hi = evaluate(bumped)
            bumped[name].reshape(-1)[k] = flat[k] - epsilon
            lo = evaluate(bumped)
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(analytic[name].reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizers


class GradientDescent:
    """Plain gradient descent: p <- p - lr * g."""

    def __init__(self, lr: float):
        if lr <= 0:
            raise AutodiffError("learning rate must be positive")
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            value -= self.lr * grads[name]


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise AutodiffError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for name, value in params.items():
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(value))
            v = self._v.setdefault(name, np.zeros_like(value))
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            m_hat = m / (1.0 - b1**self._t)
            v_hat = v / (1.0 - b2**self._t)
            value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name in ("gd", "sgd", "gradient_descent"):
        return GradientDescent(lr)
    raise AutodiffError(f"unknown optimizer {name!r}")
