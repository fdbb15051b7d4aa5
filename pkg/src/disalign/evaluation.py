"""All-ranking top-K evaluation and the ablation / sensitivity harnesses."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import atomic_write
from .training import train

logger = logging.getLogger(__name__)

DEFAULT_KS = (5, 10, 20)
ABLATION_VARIANTS = {
    "full": (),
    "w/o or": ("or",),
    "w/o uni": ("uni",),
    "w/o glo": ("glo",),
    "w/o loc": ("loc",),
}
SWEEP_KEYS = {"K": "K", "lambda": "lambda_", "n_hat": "n_hat"}


def rank_items(e, n_users, user, train_items=()):
    """Every non-train item, best first; equal scores fall back to ascending item id."""
    scores = e[n_users:] @ e[user]
    order = np.argsort(-scores, kind="stable")
    if len(train_items):
        keep = np.ones(len(scores), dtype=bool)
        keep[np.asarray(train_items, dtype=np.int64)] = False
        order = order[keep[order]]
    return order


def recall_at_k(ranking, test_items, k):
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("recall is undefined for an empty test set")
    hits = sum(1 for i in ranking[:k] if int(i) in test)
    return hits / len(test)


def ndcg_at_k(ranking, test_items, k):
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("ndcg is undefined for an empty test set")
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranking[:k]) if int(i) in test)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(k, len(test))))
    return dcg / idcg


@dataclass
class MetricsReport:
    recall_at: dict
    ndcg_at: dict
    n_eval_users: int
    per_user: dict = field(default_factory=dict, repr=False)


def evaluate_embeddings(e, split, ks=DEFAULT_KS, part="test"):
    """Mean Recall@K / NDCG@K over users with a nonempty ``part`` set; only train items are excluded."""
    train_items = split.user_items("train")
    target = split.user_items(part)
    users = [u for u in range(split.n_users) if len(target[u])]
    if not users:
        raise ValueError(f"no users with a nonempty {part} set")
    kmax = max(ks)
    rec = {k: [] for k in ks}
    nd = {k: [] for k in ks}
    for u in users:
        ranking = rank_items(e, split.n_users, u, train_items[u])[:kmax]
        for k in ks:
            rec[k].append(recall_at_k(ranking, target[u], k))
            nd[k].append(ndcg_at_k(ranking, target[u], k))
    # math.fsum makes the reduction independent of user order
    return MetricsReport(
        recall_at={k: math.fsum(rec[k]) / len(users) for k in ks},
        ndcg_at={k: math.fsum(nd[k]) / len(users) for k in ks},
        n_eval_users=len(users),
        per_user={"users": users, "recall": rec, "ndcg": nd},
    )


def evaluate(state, split, ks=DEFAULT_KS, part="test"):
    return evaluate_embeddings(state.embeddings(split), split, ks, part)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepEntry:
    variant: str
    delta: dict
    seed: int
    val: MetricsReport
    test: MetricsReport
    seconds: float
    history: dict = field(repr=False, default_factory=dict)


@dataclass
class SweepReport:
    entries: list
    seeds: tuple

    def mean(self, variant, k=20, metric="recall", part="val"):
        vals = [getattr(getattr(e, part), f"{metric}_at")[k] for e in self.entries if e.variant == variant]
        return float(np.mean(vals))

    def stderr(self, variant, k=20, metric="recall", part="val"):
        vals = [getattr(getattr(e, part), f"{metric}_at")[k] for e in self.entries if e.variant == variant]
        return float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0

    def variants(self):
        seen = []
        for e in self.entries:
            if e.variant not in seen:
                seen.append(e.variant)
        return seen


def _run(split, e_l_user, e_l_item, cfg, variant, delta, ks):
    t0 = time.perf_counter()
    state = train(split, e_l_user, e_l_item, cfg)
    e = state.embeddings(split)
    entry = SweepEntry(
        variant=variant,
        delta=delta,
        seed=cfg.seed,
        val=evaluate_embeddings(e, split, ks, "val"),
        test=evaluate_embeddings(e, split, ks, "test"),
        seconds=time.perf_counter() - t0,
        history=state.history,
    )
    logger.info("%s seed=%d val R@20=%.4f (%.1fs)", variant, cfg.seed, entry.val.recall_at.get(20, float("nan")), entry.seconds)
    return entry


def run_ablation(base_cfg, split, e_l_user, e_l_item, seeds=(0, 1, 2, 3, 4), ks=DEFAULT_KS):
    """Full model plus the four single-term removals, over every seed."""
    entries = []
    for variant, dropped in ABLATION_VARIANTS.items():
        for seed in seeds:
            cfg = base_cfg.replace(seed=seed, disabled_terms=tuple(sorted(set(base_cfg.disabled_terms) | set(dropped))))
            entries.append(_run(split, e_l_user, e_l_item, cfg, variant, {"disabled_terms": list(dropped)}, ks))
    return SweepReport(entries, tuple(seeds))


def run_sensitivity(base_cfg, grid, split, e_l_user, e_l_item, seeds=(0, 1, 2, 3, 4), ks=DEFAULT_KS):
    """One run per grid value per seed; ``grid`` maps ``K``/``lambda``/``n_hat`` to value lists."""
    entries = []
    for key, values in grid.items():
        if key not in SWEEP_KEYS:
            raise ValueError(f"sweep key must be one of {sorted(SWEEP_KEYS)}, got {key!r}")
        for value in values:
            for seed in seeds:
                cfg = base_cfg.replace(seed=seed, **{SWEEP_KEYS[key]: value})
                entries.append(_run(split, e_l_user, e_l_item, cfg, f"{key}={value}", {key: value}, ks))
    return SweepReport(entries, tuple(seeds))


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _fmt(x):
    return repr(float(x))


def write_metrics_csv(rows, path):
    """``rows`` is an iterable of ``(variant, seed, MetricsReport)``."""
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "K", "recall", "ndcg"])
        for variant, seed, rep in rows:
            for k in sorted(rep.recall_at):
                w.writerow([variant, seed, k, _fmt(rep.recall_at[k]), _fmt(rep.ndcg_at[k])])


def write_sweep_report(report, path, part="val"):
    write_metrics_csv(((e.variant, e.seed, getattr(e, part)) for e in report.entries), path)


def sweep_curve(report, key, k=20, metric="recall", part="val"):
    """``[(x, mean, stderr)]`` for the grid points of ``key``, in sweep order."""
    out = []
    for variant in report.variants():
        name, _, value = variant.partition("=")
        if name == key:
            out.append((float(value), report.mean(variant, k, metric, part), report.stderr(variant, k, metric, part)))
    return out


def write_sweep_curve(report, key, path, k=20, metric="recall", part="val"):
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "mean", "stderr"])
        for x, m, s in sweep_curve(report, key, k, metric, part):
            w.writerow([_fmt(x), _fmt(m), _fmt(s)])


def random_recall_expectation(n_candidates, n_test, k):
    """Expected Recall@K when the top-K is a uniform draw from ``n_candidates`` items."""
    return min(k, n_candidates) / n_candidates if n_test else 0.0

