"""Interaction data and embedding matrix I/O, splitting, and synthetic fixtures.

Embedding matrices are plain 2-D numpy arrays. On disk they use the EMB1
binary layout::

    b"EMB1" | version (u8 = 1) | rows (u32 LE) | dim (u32 LE) | rows*dim f32 LE

with a comma-separated text fallback (one row per line).
"""

from __future__ import annotations

import contextlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
_HEADER = struct.Struct("<4sBII")


class DataFormatError(ValueError):
    """Raised for malformed interaction or embedding files."""


class EmptyDatasetError(ValueError):
    pass


@contextlib.contextmanager
def atomic_write(path, mode="w"):
    """Write to a temp file next to ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": ""})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# interactions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Implicit-feedback interactions with dense ids.

    ``users``/``items`` are internal ids; ``user_ids``/``item_ids`` map an
    internal id back to the id found in the source file.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray | None = None
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        if len(self.users) != len(self.items) or len(self.users) != len(self.ratings):
            raise ValueError("users, items and ratings must have equal length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user id out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item id out of range")
        if not np.all(np.isfinite(self.ratings)):
            raise ValueError("ratings must be finite")
        keys = self.users.astype(np.int64) * self.n_items + self.items
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate (user, item) pair")

    def __len__(self):
        return len(self.users)

    @property
    def n_nodes(self):
        return self.n_users + self.n_items


@dataclass(frozen=True)
class SplitDataset:
    base: Dataset
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    split_seed: int

    @property
    def n_users(self):
        return self.base.n_users

    @property
    def n_items(self):
        return self.base.n_items

    def pairs(self, part):
        idx = getattr(self, part)
        return self.base.users[idx], self.base.items[idx]

    def user_items(self, part):
        """List of item-id arrays, one per user, for ``part`` in train/val/test."""
        users, items = self.pairs(part)
        order = np.lexsort((items, users))
        users, items = users[order], items[order]
        bounds = np.searchsorted(users, np.arange(self.n_users + 1))
        return [items[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]


def _parse_interaction_lines(lines, path):
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise DataFormatError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(parts)}")
        try:
            rating = float(parts[2])
            ts = int(parts[3]) if len(parts) == 4 and parts[3] != "" else None
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from None
        if not np.isfinite(rating):
            raise DataFormatError(f"{path}:{lineno}: non-finite rating")
        if not parts[0] or not parts[1]:
            raise DataFormatError(f"{path}:{lineno}: empty id")
        rows.append((parts[0], parts[1], rating, ts, lineno))
    return rows


def _id_sort_key(raw):
    # numeric ids sort numerically, everything else lexically after them
    try:
        return (0, int(raw), "")
    except ValueError:
        return (1, 0, raw)


def load_interactions(path, min_rating=3.0):
    """Read a ``user<TAB>item<TAB>rating[<TAB>ts]`` file and keep rows with rating >= ``min_rating``.

    Ids are densely re-indexed (sorted by original id) after filtering, so
    users or items with no surviving interaction disappear. Ratings are kept
    but downstream code treats every retained row as a positive.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        rows = _parse_interaction_lines(fh, path)
    kept = {}
    for u, i, r, ts, lineno in rows:
        if r < min_rating:
            continue
        if (u, i) in kept:
            raise DataFormatError(f"{path}:{lineno}: duplicate interaction ({u}, {i})")
        kept[(u, i)] = (r, ts)
    if not kept:
        raise EmptyDatasetError(f"{path}: no interactions with rating >= {min_rating}")

    user_ids = sorted({u for u, _ in kept}, key=_id_sort_key)
    item_ids = sorted({i for _, i in kept}, key=_id_sort_key)
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    users = np.fromiter((uidx[u] for u, _ in kept), dtype=np.int64, count=len(kept))
    items = np.fromiter((iidx[i] for _, i in kept), dtype=np.int64, count=len(kept))
    ratings = np.fromiter((r for r, _ in kept.values()), dtype=np.float64, count=len(kept))
    ts_list = [ts for _, ts in kept.values()]
    timestamps = None
    if any(ts is not None for ts in ts_list):
        timestamps = np.array([-1 if ts is None else ts for ts in ts_list], dtype=np.int64)
    return Dataset(
        n_users=len(user_ids),
        n_items=len(item_ids),
        users=users,
        items=items,
        ratings=ratings,
        timestamps=timestamps,
        user_ids=np.array(user_ids, dtype=object),
        item_ids=np.array(item_ids, dtype=object),
    )


def write_interactions(ds, path):
    uid = ds.user_ids if ds.user_ids is not None else np.arange(ds.n_users)
    iid = ds.item_ids if ds.item_ids is not None else np.arange(ds.n_items)
    with atomic_write(path) as fh:
        for k in range(len(ds)):
            fields = [str(uid[ds.users[k]]), str(iid[ds.items[k]]), repr(float(ds.ratings[k]))]
            if ds.timestamps is not None and ds.timestamps[k] >= 0:
                fields.append(str(int(ds.timestamps[k])))
            fh.write("\t".join(fields) + "\n")


def write_id_map(ids, path):
    with atomic_write(path) as fh:
        for k, orig in enumerate(ids):
            fh.write(f"{k}\t{orig}\n")


def read_id_map(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or int(parts[0]) != len(out):
                raise DataFormatError(f"{path}:{lineno}: bad id-map row")
            out.append(parts[1])
    return np.array(out, dtype=object)


def split_dataset(ds, ratios=(3, 1, 1), seed=0):
    """Per-user random train/val/test partition.

    Each user's interactions are shuffled and sliced; val and test get
    ``floor(n * ratio)`` rows and train keeps the remainder. Users with fewer
    than three interactions are kept entirely in train.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise ValueError("ratios must be three positive numbers")
    ratios = ratios / ratios.sum()
    if len(ds) == 0:
        raise EmptyDatasetError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    order = np.argsort(ds.users, kind="stable")
    bounds = np.searchsorted(ds.users[order], np.arange(ds.n_users + 1))
    train, val, test = [], [], []
    for u in range(ds.n_users):
        idx = order[bounds[u]:bounds[u + 1]]
        n = len(idx)
        if n == 0:
            continue
        if n < 3:
            train.append(idx)
            continue
        idx = idx[rng.permutation(n)]
        n_val = int(np.floor(n * ratios[1] + 1e-9))
        n_test = int(np.floor(n * ratios[2] + 1e-9))
        n_train = n - n_val - n_test
        train.append(idx[:n_train])
        val.append(idx[n_train:n_train + n_val])
        test.append(idx[n_train + n_val:])

    def _cat(parts):
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)

    return SplitDataset(ds, _cat(train), _cat(val), _cat(test), int(seed))


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def write_embeddings(m, path):
    """Write EMB1, or comma-separated text when ``path`` ends in ``.csv``/``.txt``; values are stored as float32."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError("embedding matrix must be 2-D")
    if not np.all(np.isfinite(m)):
        raise ValueError("embedding matrix has non-finite entries")
    if Path(path).suffix.lower() in (".csv", ".txt"):
        with atomic_write(path) as fh:
            for row in m.astype(np.float32):
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
        return
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    with atomic_write(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, EMB_VERSION, m.shape[0], m.shape[1]))
        fh.write(payload)


def _load_emb1(blob, path):
    if len(blob) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header at offset {len(blob)}")
    magic, version, rows, dim = _HEADER.unpack_from(blob, 0)
    if magic != EMB_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != EMB_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at offset 4")
    expected = _HEADER.size + 4 * rows * dim
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, file ends at offset {len(blob)}"
        )
    m = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(rows, dim).astype(np.float32)
    bad = np.flatnonzero(~np.isfinite(m.ravel()))
    if len(bad):
        raise DataFormatError(f"{path}: non-finite value at offset {_HEADER.size + 4 * int(bad[0])}")
    return m


def _load_csv(text, path):
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: unparsable CSV row") from None
        if len(rows[-1]) != len(rows[0]):
            raise DataFormatError(f"{path}:{lineno}: ragged row")
    if not rows:
        raise DataFormatError(f"{path}: empty CSV")
    m = np.array(rows, dtype=np.float32)
    if not np.all(np.isfinite(m)):
        r = int(np.flatnonzero(~np.isfinite(m).all(axis=1))[0])
        raise DataFormatError(f"{path}:{r + 1}: non-finite value")
    return m


def load_embeddings(path):
    """Load an EMB1 file (or a CSV fallback) into a float32 ``rows x dim`` array."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == EMB_MAGIC or path.suffix.lower() not in (".csv", ".txt"):
        return _load_emb1(blob, path)
    return _load_csv(blob.decode("utf-8"), path)


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 200
    n_items: int = 100
    latent_dim: int = 8
    llm_dim: int = 32
    shared_signal_scale: float = 1.0
    specific_scale: float = 0.5
    noise_scale: float = 0.1
    interactions_per_user: int = 20
    seed: int = 0
    split_ratios: tuple = field(default=(3, 1, 1))

    def __post_init__(self):
        for name in ("n_users", "n_items", "latent_dim", "llm_dim", "interactions_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("shared_signal_scale", "specific_scale", "noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.interactions_per_user > self.n_items:
            raise ValueError("interactions_per_user cannot exceed n_items")

    def to_dict(self):
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


def synth_dataset(spec):
    """Draw a desk-scale dataset whose two embedding modalities share latent structure.

    Users and items get standard-normal latents ``z``. Each user draws
    ``interactions_per_user`` distinct items with probability proportional to
    ``exp(z_u . z_i)`` (Gumbel top-k). The "LLM side" embedding of every
    node is ``shared * z W + specific * q V + noise * eps`` where ``W`` and
    ``V`` are fixed random maps shared by users and items and ``q`` is an
    independent latent unrelated to interactions.

    Returns ``(split, user_llm, item_llm, (z_users, z_items))``.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.latent_dim
    zu = rng.standard_normal((spec.n_users, k))
    zi = rng.standard_normal((spec.n_items, k))
    scores = zu @ zi.T
    gumbel = rng.gumbel(size=scores.shape)
    top = np.argsort(-(scores + gumbel), axis=1, kind="stable")[:, : spec.interactions_per_user]
    users = np.repeat(np.arange(spec.n_users), spec.interactions_per_user)
    items = top.ravel()
    order = np.lexsort((items, users))
    users, items = users[order], items[order]

    w = rng.standard_normal((k, spec.llm_dim)) / np.sqrt(k)
    v = rng.standard_normal((k, spec.llm_dim)) / np.sqrt(k)
    qu = rng.standard_normal((spec.n_users, k))
    qi = rng.standard_normal((spec.n_items, k))
    eu = rng.standard_normal((spec.n_users, spec.llm_dim))
    ei = rng.standard_normal((spec.n_items, spec.llm_dim))
    user_llm = spec.shared_signal_scale * (zu @ w) + spec.specific_scale * (qu @ v) + spec.noise_scale * eu
    item_llm = spec.shared_signal_scale * (zi @ w) + spec.specific_scale * (qi @ v) + spec.noise_scale * ei

    ds = Dataset(
        n_users=spec.n_users,
        n_items=spec.n_items,
        users=users.astype(np.int64),
        items=items.astype(np.int64),
        ratings=np.full(len(users), 5.0),
        user_ids=np.arange(spec.n_users).astype(object),
        item_ids=np.arange(spec.n_items).astype(object),
    )
    split = split_dataset(ds, spec.split_ratios, seed=spec.seed)
    return split, user_llm.astype(np.float32), item_llm.astype(np.float32), (zu, zi)


def write_manifest(obj, path):
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
