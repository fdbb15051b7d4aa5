"""Global (Gram-matrix) and local (preference-center) structure alignment."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataio import atomic_write
from .disentangle import normalize_rows, normalize_rows_backward


def global_similarity(e_sh, sample_idx):
    x = e_sh[np.asarray(sample_idx)]
    return x @ x.T


def global_loss(e_sh_c, e_sh_l, sample_idx):
    """Mean squared difference between the two sampled Gram matrices.

    Scaled by ``1 / n_hat**2`` so the weight of this term does not depend on
    the sample size. Returns ``(value, {"sh_c": grad, "sh_l": grad})``.
    """
    idx = np.asarray(sample_idx)
    xc, xl = e_sh_c[idx], e_sh_l[idx]
    n = len(idx)
    diff = xc @ xc.T - xl @ xl.T
    value = float((diff * diff).sum() / (n * n))
    gc = np.zeros_like(e_sh_c)
    gl = np.zeros_like(e_sh_l)
    # sample indices are unique, so plain fancy assignment is safe
    gc[idx] = 4.0 * diff @ xc / (n * n)
    gl[idx] = -4.0 * diff @ xl / (n * n)
    return value, {"sh_c": gc, "sh_l": gl}


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


@dataclass
class PreferenceCenters:
    centers: np.ndarray
    assignment: np.ndarray
    inertia: float
    history: list = field(default_factory=list)  # inertia after each Lloyd iteration

    @property
    def k(self):
        return self.centers.shape[0]


def _sq_dists(x, c):
    d = (x * x).sum(axis=1)[:, None] + (c * c).sum(axis=1)[None, :] - 2.0 * x @ c.T
    return np.maximum(d, 0.0)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt][None, :])[:, 0])
    return x[chosen].copy()


def _repair_empty(x, assign, centers, k):
    """Give every empty cluster the point farthest from its current center."""
    counts = np.bincount(assign, minlength=k)
    for c in np.flatnonzero(counts == 0):
        cost = ((x - centers[assign]) ** 2).sum(axis=1)
        # only steal from clusters that keep at least one member
        cost[counts[assign] <= 1] = -1.0
        p = int(np.argmax(cost))
        counts[assign[p]] -= 1
        assign[p] = c
        counts[c] = 1
        centers[c] = x[p]
    return assign


def _one_hot(assign, k):
    m = np.zeros((k, len(assign)))
    m[assign, np.arange(len(assign))] = 1.0
    return m


def _means(x, assign, k):
    m = _one_hot(assign, k)
    return (m @ x) / m.sum(axis=1)[:, None]


def _lloyd(x, centers, max_iter):
    k = centers.shape[0]
    assign = _repair_empty(x, np.argmin(_sq_dists(x, centers), axis=1), centers, k)
    history = []
    for _ in range(max_iter):
        centers = _means(x, assign, k)
        history.append(float(((x - centers[assign]) ** 2).sum()))
        new = _repair_empty(x, np.argmin(_sq_dists(x, centers), axis=1), centers.copy(), k)
        if np.array_equal(new, assign):
            break
        assign = new
    else:
        centers = _means(x, assign, k)
    return centers, assign, history


def kmeans(x, k, max_iter=50, n_init=4, seed=0):
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts by inertia."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"kmeans needs 1 <= K <= n (got K={k}, n={n})")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers, assign, history = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        inertia = float(((x - centers[assign]) ** 2).sum())
        if best is None or inertia < best.inertia:
            best = PreferenceCenters(centers, assign, inertia, history)
    return best


def centers_from_assignment(x, assignment, k):
    return _means(x, np.asarray(assignment), k)


def dump_centers(pc, path_prefix):
    """Write ``<prefix>_centers.csv`` and ``<prefix>_assignment.csv`` for inspection."""
    with atomic_write(f"{path_prefix}_centers.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["center"] + [f"x{j}" for j in range(pc.centers.shape[1])])
        for c, row in enumerate(pc.centers):
            w.writerow([c] + [repr(float(v)) for v in row])
    with atomic_write(f"{path_prefix}_assignment.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "center"])
        for r, c in enumerate(pc.assignment):
            w.writerow([r, int(c)])


# ---------------------------------------------------------------------------
# adaptive matching and local loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CenterMatching:
    perm: np.ndarray  # C-side center i is matched with L-side center perm[i]
    order: tuple = ()  # (i, j) pairs in the order they were selected


def match_centers(c_c, c_l):
    """Greedy smallest-distance-first bijection between two center sets.

    Repeatedly picks the closest (C, L) pair among centers not yet marked,
    ties going to the lexicographically smallest ``(i, j)``. This is not an
    optimal assignment.
    """
    if c_c.shape != c_l.shape:
        raise ValueError("center sets must have the same shape")
    k = c_c.shape[0]
    dist = np.sqrt(_sq_dists(c_c, c_l))
    dist = np.where(np.isfinite(dist), dist, np.inf)
    perm = np.full(k, -1, dtype=np.int64)
    masked = dist.copy()
    order = []
    for _ in range(k):
        flat = int(np.argmin(masked))  # first minimum in row-major order
        i, j = divmod(flat, k)
        perm[i] = j
        order.append((i, j))
        masked[i, :] = np.inf
        masked[:, j] = np.inf
    return CenterMatching(perm, tuple(order))


def local_loss(c_c, c_l, matching):
    """Local alignment on center matrices, with gradients w.r.t. both center sets."""
    k = c_c.shape[0]
    perm = np.asarray(matching.perm)
    cl = c_l[perm]
    yc, yl = normalize_rows(c_c), normalize_rows(cl)
    s = yc @ yl.T
    diag = np.diag(s)
    value = float(((diag - 1.0) ** 2).sum() / k)
    ds = np.zeros_like(s)
    if k > 1:
        off = s.copy()
        np.fill_diagonal(off, 0.0)
        value += float((off * off).sum() / (k * k - k))
        ds = 2.0 * off / (k * k - k)
    ds[np.diag_indices(k)] = 2.0 * (diag - 1.0) / k
    dyc = ds @ yl
    dyl = ds.T @ yc
    dcc = normalize_rows_backward(c_c, yc, dyc)
    dcl_perm = normalize_rows_backward(cl, yl, dyl)
    dcl = np.zeros_like(c_l)
    dcl[perm] = dcl_perm
    return value, dcc, dcl


def local_loss_reps(e_sh_c, e_sh_l, assign_c, assign_l, matching, k):
    """Local alignment with centers recomputed as means of the (fixed) assignments.

    Returns ``(value, {"sh_c": grad, "sh_l": grad})``; assignments and the
    matching are treated as constants.
    """
    assign_c = np.asarray(assign_c)
    assign_l = np.asarray(assign_l)
    c_c = centers_from_assignment(e_sh_c, assign_c, k)
    c_l = centers_from_assignment(e_sh_l, assign_l, k)
    value, dcc, dcl = local_loss(c_c, c_l, matching)
    cnt_c = np.bincount(assign_c, minlength=k).astype(np.float64)
    cnt_l = np.bincount(assign_l, minlength=k).astype(np.float64)
    return value, {
        "sh_c": (dcc / cnt_c[:, None])[assign_c],
        "sh_l": (dcl / cnt_l[:, None])[assign_l],
    }
