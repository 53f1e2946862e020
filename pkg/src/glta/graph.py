"""Bipartite interaction graph, LightGCN propagation and BPR pretraining."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .ndgrad import ContractError, DimensionError, Tensor

log = logging.getLogger(__name__)


class InteractionGraph:
    """Users ``0..num_users-1`` and items ``0..num_items-1`` joined by edges.

    ``edges`` is an ``(E, 2)`` int array of (user, item) pairs kept in
    lexicographic order. ``timestamps``, when given, aligns with the caller's
    edge order and is re-sorted alongside the edges.
    """

    def __init__(self, num_users: int, num_items: int, edges, timestamps=None):
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e[:, 0].min() < 0 or e[:, 0].max() >= num_users
                       or e[:, 1].min() < 0 or e[:, 1].max() >= num_items):
            raise ValueError("edge index out of range")
        order = np.lexsort((e[:, 1], e[:, 0]))
        e = e[order]
        if len(e) > 1 and np.any(np.all(e[1:] == e[:-1], axis=1)):
            raise ValueError("duplicate edge")
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.edges = e
        self.edges.setflags(write=False)
        self.timestamps = None
        if timestamps is not None:
            ts = np.asarray(timestamps, dtype=np.float64)[order]
            ts.setflags(write=False)
            self.timestamps = ts
        self.user_adj = _adjacency(e[:, 0], e[:, 1], num_users)
        self.item_adj = _adjacency(e[:, 1], e[:, 0], num_items)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def user_degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.user_adj], dtype=np.int64)

    def item_degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.item_adj], dtype=np.int64)

    def user_items(self, u: int) -> np.ndarray:
        return self.user_adj[u]

    def user_history(self, u: int) -> np.ndarray:
        """Items of user ``u``, oldest first when timestamps exist."""
        items = self.user_adj[u]
        if self.timestamps is None:
            return items
        lo, hi = np.searchsorted(self.edges[:, 0], [u, u + 1])
        ts = self.timestamps[lo:hi]
        return self.edges[lo:hi, 1][np.argsort(ts, kind="stable")]

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_users, self.num_items), dtype=bool)
        a[self.edges[:, 0], self.edges[:, 1]] = True
        return a

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionGraph):
            return NotImplemented
        same_ts = (self.timestamps is None) == (other.timestamps is None) and (
            self.timestamps is None or np.array_equal(self.timestamps, other.timestamps))
        return (self.num_users == other.num_users and self.num_items == other.num_items
                and np.array_equal(self.edges, other.edges) and same_ts)

    def __repr__(self) -> str:
        return f"InteractionGraph(users={self.num_users}, items={self.num_items}, edges={self.num_edges})"


def _adjacency(src, dst, n):
    order = np.argsort(src, kind="stable")
    cuts = np.searchsorted(src[order], np.arange(n + 1))
    dst = dst[order]
    out = [dst[cuts[i]:cuts[i + 1]] for i in range(n)]
    for a in out:
        a.setflags(write=False)
    return out


def normalized_edge_weights(graph: InteractionGraph) -> np.ndarray:
    """1 / sqrt(|N(u)| |N(i)|) per edge."""
    du = graph.user_degree()[graph.edges[:, 0]]
    di = graph.item_degree()[graph.edges[:, 1]]
    return 1.0 / np.sqrt(du.astype(np.float64) * di)


def _aggregate(graph: InteractionGraph, w: np.ndarray, x: Tensor) -> Tensor:
    # one symmetric-normalized hop on the stacked [users; items] matrix
    nu = graph.num_users
    u, i = graph.edges[:, 0], graph.edges[:, 1] + nu
    wcol = w.astype(x.data.dtype)[:, None]

    def hop(v):
        out = np.zeros_like(v)
        np.add.at(out, u, wcol * v[i])
        np.add.at(out, i, wcol * v[u])
        return out

    # the normalized adjacency is symmetric, so the backward hop is the same hop
    return nd.custom_op(hop(x.data), (x,), lambda g: (hop(g),))


def propagate_stacked(graph: InteractionGraph, x0: Tensor, layers: int) -> Tensor:
    """Mean of layer outputs 0..layers for stacked user/item embeddings."""
    if layers < 0:
        raise ValueError("layers must be >= 0")
    w = normalized_edge_weights(graph)
    acc = x0
    cur = x0
    for _ in range(layers):
        cur = _aggregate(graph, w, cur)
        acc = acc + cur
    return acc * (1.0 / (layers + 1))


def lightgcn_propagate(graph: InteractionGraph, e0_u, e0_i, layers: int):
    """LightGCN propagation of layer-0 embeddings; returns (E_u, E_i) arrays.

    A node with no neighbours receives the zero vector at every layer >= 1.
    """
    e0_u = np.asarray(e0_u)
    e0_i = np.asarray(e0_i)
    if e0_u.ndim != 2 or e0_i.ndim != 2 or e0_u.shape[1] != e0_i.shape[1]:
        raise DimensionError(f"embedding widths differ: {e0_u.shape} vs {e0_i.shape}")
    if e0_u.shape[0] != graph.num_users or e0_i.shape[0] != graph.num_items:
        raise DimensionError(
            f"expected {graph.num_users} user rows and {graph.num_items} item rows, "
            f"got {e0_u.shape[0]} and {e0_i.shape[0]}")
    dtype = np.result_type(e0_u.dtype, e0_i.dtype, np.float32)
    x0 = Tensor._wrap(np.concatenate([e0_u, e0_i]).astype(dtype))
    with nd.no_grad():
        out = propagate_stacked(graph, x0, layers).data
    return out[:graph.num_users], out[graph.num_users:]


@dataclass
class GraphConfig:
    d: int = 64
    layers: int = 2
    lr: float = 1e-3
    epochs: int = 200
    neg_samples: int = 1
    l2: float = 1e-5
    batch_size: int = 2048
    init_std: float = 0.1
    seed: int = 0


class GraphEmbeddings:
    """Pretrained user/item matrices; read-only once frozen."""

    def __init__(self, E_u: np.ndarray, E_i: np.ndarray, layers: int,
                 warnings: list[str] | None = None, losses: list[float] | None = None):
        self._frozen = False
        self.E_u = np.ascontiguousarray(E_u, dtype=np.float32)
        self.E_i = np.ascontiguousarray(E_i, dtype=np.float32)
        if self.E_u.shape[1] != self.E_i.shape[1]:
            raise DimensionError(f"E_u {self.E_u.shape} and E_i {self.E_i.shape} widths differ")
        if not (np.all(np.isfinite(self.E_u)) and np.all(np.isfinite(self.E_i))):
            raise nd.NumericDomainError("non-finite graph embedding")
        self.layers = int(layers)
        self.warnings = list(warnings or [])
        self.losses = list(losses or [])

    @property
    def d(self) -> int:
        return self.E_u.shape[1]

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "GraphEmbeddings":
        self.E_u.setflags(write=False)
        self.E_i.setflags(write=False)
        self._frozen = True
        return self

    def __setattr__(self, key, value):
        if getattr(self, "_frozen", False) and key in ("E_u", "E_i", "layers"):
            raise ContractError(f"GraphEmbeddings are frozen; cannot set {key}")
        super().__setattr__(key, value)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.E_u.tobytes())
        h.update(self.E_i.tobytes())
        return h.hexdigest()

    def scores(self) -> np.ndarray:
        return self.E_u @ self.E_i.T


def _sample_negatives(dense: np.ndarray, users: np.ndarray, n_neg: int,
                      rng: np.random.Generator) -> np.ndarray:
    num_items = dense.shape[1]
    neg = rng.integers(0, num_items, size=(len(users), n_neg))
    bad = dense[users[:, None], neg]
    # rejection resampling; a user interacting with every item keeps its draw
    for _ in range(100):
        if not bad.any():
            break
        r, c = np.nonzero(bad)
        neg[r, c] = rng.integers(0, num_items, size=len(r))
        bad = dense[users[:, None], neg]
    return neg


def bpr_pretrain(graph: InteractionGraph, config: GraphConfig | None = None) -> GraphEmbeddings:
    """Train layer-0 embeddings through LightGCN with the BPR loss, then freeze."""
    cfg = config or GraphConfig()
    if graph.num_edges == 0:
        raise ContractError("cannot pretrain on a graph without edges")
    warnings = []
    deg = graph.user_degree()
    for u in np.flatnonzero(deg == 0):
        msg = f"user {int(u)} has no training edges; skipped"
        warnings.append(msg)
        log.warning(msg)

    rng = np.random.default_rng(cfg.seed)
    nu, ni = graph.num_users, graph.num_items
    x0 = nd.parameter(rng.normal(0.0, cfg.init_std, size=(nu + ni, cfg.d)), name="lightgcn.e0")
    state = nd.AdamState(lr=cfg.lr).init_for([x0])
    edges = graph.edges
    dense = graph.dense_adjacency()
    losses = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(edges))
        epoch_loss = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            batch = edges[perm[lo:lo + cfg.batch_size]]
            users = np.repeat(batch[:, 0], cfg.neg_samples)
            pos = np.repeat(batch[:, 1], cfg.neg_samples)
            neg = _sample_negatives(dense, batch[:, 0], cfg.neg_samples, rng).reshape(-1)
            loss = _bpr_loss(graph, x0, cfg, users, pos, neg)
            nd.backward(loss)
            nd.adam_step([x0], state)
            epoch_loss += loss.item() * len(batch)
        losses.append(epoch_loss / len(edges))

    final = x0.data.astype(np.float32)
    with nd.no_grad():
        out = propagate_stacked(graph, Tensor._wrap(final), cfg.layers).data
    emb = GraphEmbeddings(out[:nu], out[nu:], cfg.layers, warnings, losses)
    return emb.freeze()


def _bpr_loss(graph, x0, cfg, users, pos, neg):
    nu = graph.num_users
    out = propagate_stacked(graph, x0, cfg.layers)
    eu = nd.gather_rows(out, users)
    ep = nd.gather_rows(out, pos + nu)
    en = nd.gather_rows(out, neg + nu)
    diff = nd.tsum(eu * ep, axis=1) - nd.tsum(eu * en, axis=1)
    n = len(users)
    loss = nd.tsum(nd.logsigmoid(diff)) * (-1.0 / n)
    if cfg.l2:
        reg = nd.gather_rows(x0, np.concatenate([users, pos + nu, neg + nu]))
        loss = loss + nd.tsum(reg * reg) * (0.5 * cfg.l2 / n)
    return loss


def bpr_loss_value(emb: GraphEmbeddings, users, pos, neg) -> float:
    """Mean BPR loss of final embeddings on given triples (no regulariser)."""
    su = (emb.E_u[users] * emb.E_i[pos]).sum(1) - (emb.E_u[users] * emb.E_i[neg]).sum(1)
    return float(np.mean(np.logaddexp(0.0, -su.astype(np.float64))))
