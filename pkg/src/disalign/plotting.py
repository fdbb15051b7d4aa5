"""Figures written next to the CSV reports. Rendering uses the Agg backend only."""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_loss_curves(history, path):
    """Per-epoch mean of each loss term; one panel for the base loss, one for the alignment terms."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = range(1, len(history["base"]) + 1)
    ax0.plot(epochs, history["base"], label="base")
    ax0.plot(epochs, history["total"], label="total", linestyle="--")
    ax0.set_xlabel("epoch")
    ax0.set_ylabel("loss")
    ax0.legend()
    for term in ("or", "uni", "glo", "loc"):
        ax1.plot(epochs, history[term], label=term)
    ax1.set_xlabel("epoch")
    ax1.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(report, path, k=20, metric="recall", part="val"):
    variants = report.variants()
    means = [report.mean(v, k, metric, part) for v in variants]
    errs = [report.stderr(v, k, metric, part) for v in variants]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(variants)), means, yerr=errs, capsize=3)
    ax.set_xticks(range(len(variants)), variants)
    ax.set_ylabel(f"{metric}@{k} ({part})")
    lo = min(m - e for m, e in zip(means, errs))
    hi = max(m + e for m, e in zip(means, errs))
    pad = max(hi - lo, 1e-3) * 0.5
    ax.set_ylim(max(0.0, lo - pad), hi + pad)
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(curve, key, path, k=20, metric="recall"):
    """``curve`` is ``[(x, mean, stderr)]`` as produced by ``sweep_curve``."""
    xs = [c[0] for c in curve]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, [c[1] for c in curve], yerr=[c[2] for c in curve], marker="o", capsize=3)
    if len(xs) > 1 and min(xs) > 0 and max(xs) / min(xs) >= 20:
        ax.set_xscale("log")
    ax.set_xlabel(key)
    ax.set_ylabel(f"{metric}@{k}")
    fig.tight_layout()
    return _save(fig, path)


def plot_probe(results, path):
    """Test cross-entropy per seed for both probe arms, with the information gap as a reference line."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    seeds = [r.seed for r in results]
    width = 0.4
    xs = range(len(results))
    ax.bar([x - width / 2 for x in xs], [r.ce_aligned or 0.0 for r in results], width, label="hard_aligned")
    ax.bar([x + width / 2 for x in xs], [r.ce_free or 0.0 for r in results], width, label="disentangled")
    if results:
        ax.axhline(results[0].delta_p, color="k", linestyle=":", label="delta_p")
    ax.set_xticks(list(xs), [str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("test cross-entropy (nats)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
