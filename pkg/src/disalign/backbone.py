"""Collaborative backbone: MF / LightGCN-style propagation trained with BPR.

Node order everywhere is users first, then items, matching the stacked
``(n_users + n_items) x d`` representation returned by :func:`propagate`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


class NegativeSamplingError(RuntimeError):
    pass


@dataclass
class BackboneModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    n_layers: int = 0

    @property
    def d(self):
        return self.user_emb.shape[1]

    @property
    def n_users(self):
        return self.user_emb.shape[0]

    @property
    def n_items(self):
        return self.item_emb.shape[0]

    def stacked(self):
        return np.vstack([self.user_emb, self.item_emb])

    def params(self):
        return {"user_emb": self.user_emb, "item_emb": self.item_emb}

    def copy(self):
        return BackboneModel(self.user_emb.copy(), self.item_emb.copy(), self.n_layers)


@dataclass(frozen=True)
class BipartiteGraph:
    n_users: int
    n_items: int
    user_neighbors: list
    item_neighbors: list
    user_degree: np.ndarray
    item_degree: np.ndarray
    norm_adj: sp.csr_matrix  # D^-1/2 A D^-1/2 over the stacked node set

    @property
    def n_nodes(self):
        return self.n_users + self.n_items


def build_graph(n_users, n_items, users, items):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    order = np.lexsort((items, users))
    users, items = users[order], items[order]
    ub = np.searchsorted(users, np.arange(n_users + 1))
    user_neighbors = [items[ub[u]:ub[u + 1]] for u in range(n_users)]
    iorder = np.lexsort((users, items))
    ib = np.searchsorted(items[iorder], np.arange(n_items + 1))
    item_neighbors = [users[iorder][ib[i]:ib[i + 1]] for i in range(n_items)]
    udeg = np.diff(ub).astype(np.float64)
    ideg = np.diff(ib).astype(np.float64)

    n = n_users + n_items
    rows = np.concatenate([users, items + n_users])
    cols = np.concatenate([items + n_users, users])
    deg = np.concatenate([udeg, ideg])
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return BipartiteGraph(n_users, n_items, user_neighbors, item_neighbors, udeg, ideg, adj)


def graph_from_split(split):
    users, items = split.pairs("train")
    return build_graph(split.n_users, split.n_items, users, items)


def init_backbone(n_users, n_items, d, n_layers=0, seed=0, std=0.1):
    if min(n_users, n_items, d) < 1:
        raise ValueError("n_users, n_items and d must be >= 1")
    rng = np.random.default_rng(seed)
    return BackboneModel(
        user_emb=rng.normal(0.0, std, size=(n_users, d)),
        item_emb=rng.normal(0.0, std, size=(n_items, d)),
        n_layers=int(n_layers),
    )


def propagate_matrix(e0, graph, n_layers):
    """Uniform mean over layers 0..n_layers of ``A_hat^l @ e0``.

    The operator is symmetric, so the same call maps output gradients back
    to base-embedding gradients.
    """
    out = e0.copy()
    cur = e0
    for _ in range(n_layers):
        cur = graph.norm_adj @ cur
        out = out + cur
    return out / (n_layers + 1)


def propagate(model, graph):
    if graph.n_users != model.n_users or graph.n_items != model.n_items:
        raise ValueError("graph and model id spaces differ")
    return propagate_matrix(model.stacked(), graph, model.n_layers)


def score(e, n_users, user, items):
    """Dot-product scores of ``user`` against ``items`` from a stacked matrix."""
    items = np.asarray(items, dtype=np.int64)
    return e[n_users + items] @ e[user]


class BprSampler:
    """Draws (user, pos, neg) triples from a split's train interactions."""

    def __init__(self, split):
        users, items = split.pairs("train")
        if len(users) == 0:
            raise ValueError("train set is empty")
        self.n_items = split.n_items
        self.users = users
        self.items = items
        self._keys = np.sort(users.astype(np.int64) * self.n_items + items)
        counts = np.bincount(users, minlength=split.n_users)
        self._saturated = counts >= self.n_items

    def is_train(self, users, items):
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    def sample(self, batch, rng):
        pick = rng.integers(0, len(self.users), size=batch)
        u = self.users[pick]
        i = self.items[pick]
        j = rng.integers(0, self.n_items, size=batch)
        full = self._saturated[u]
        if full.any():
            raise NegativeSamplingError(f"user {int(u[full][0])} has interacted with every item; no negative exists")
        # every remaining user has a free item, so rejection terminates with probability one
        bad = self.is_train(u, j)
        while bad.any():
            idx = np.flatnonzero(bad)
            j[idx] = rng.integers(0, self.n_items, size=len(idx))
            bad[idx] = self.is_train(u[idx], j[idx])
        return np.stack([u, i, j], axis=1)


def sample_bpr_batch(split, batch, rng):
    return BprSampler(split).sample(batch, rng)


def _log_sigmoid_neg(x):
    # -log(sigmoid(x)) = log1p(exp(-x)), computed without overflow
    return np.logaddexp(0.0, -x)


def bpr_loss_stacked(e, e0, n_users, batch, l2):
    """BPR loss on propagated embeddings ``e``; returns ``(loss, d_e, d_e0_l2)``.

    The l2 term is ``l2 * mean_t(||e0_u||^2 + ||e0_i||^2 + ||e0_j||^2)`` over
    the base rows touched by each triple. ``d_e`` is the gradient w.r.t. the
    propagated matrix; ``d_e0_l2`` is the direct gradient of the l2 term.
    """
    u = batch[:, 0]
    pi = batch[:, 1] + n_users
    nj = batch[:, 2] + n_users
    b = len(batch)
    eu, ei, ej = e[u], e[pi], e[nj]
    x = np.einsum("bd,bd->b", eu, ei - ej)
    loss = _log_sigmoid_neg(x).mean()
    # d/dx of -log sigmoid(x) = -sigmoid(-x)
    g = -0.5 * (1.0 - np.tanh(x / 2.0)) / b
    de = np.zeros_like(e)
    np.add.at(de, u, g[:, None] * (ei - ej))
    np.add.at(de, pi, g[:, None] * eu)
    np.add.at(de, nj, -g[:, None] * eu)

    de0 = np.zeros_like(e0)
    if l2:
        rows = np.concatenate([u, pi, nj])
        sq = (e0[rows] ** 2).sum()
        loss = loss + l2 * sq / b
        np.add.at(de0, rows, 2.0 * l2 * e0[rows] / b)
    return loss, de, de0


def bpr_loss(model, graph, batch, l2=0.0):
    """BPR loss and gradients w.r.t. the base user/item tables (through propagation)."""
    e0 = model.stacked()
    e = propagate_matrix(e0, graph, model.n_layers)
    loss, de, de0 = bpr_loss_stacked(e, e0, model.n_users, batch, l2)
    g0 = propagate_matrix(de, graph, model.n_layers) + de0
    return loss, {"user_emb": g0[: model.n_users], "item_emb": g0[model.n_users:]}
