"""Exact information quantities on small discrete joints, and the alignment-cost probe.

A :class:`JointDistribution` is a table ``p[d, d', y]``. The probe samples
from it, encodes ``d`` and ``d'`` with small MLPs, and fits a linear
softmax head on the representations. The ``hard_aligned`` arm forces the
two representations together with a quadratic penalty; the
``disentangled`` arm only ties the shared halves and keeps a specific half
per side, orthogonalized with the usual per-row cosine penalty.

All entropies are in nats.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .dataio import atomic_write
from .disentangle import init_mlp, mlp_backward, mlp_forward, row_cosine
from .training import AdamState, adam_step

AXES = {"d": 0, "dp": 1, "y": 2}
SCENARIOS = ("max_gap", "zero_gap", "interpolated")
MODES = ("hard_aligned", "disentangled")


@dataclass(frozen=True)
class JointDistribution:
    table: np.ndarray  # p[d, d', y]
    name: str = ""

    def __post_init__(self):
        t = self.table
        if t.ndim != 3 or np.any(t < 0) or abs(t.sum() - 1.0) > 1e-9:
            raise ValueError("joint table must be a nonnegative 3-D array summing to 1")

    @property
    def cardinalities(self):
        return self.table.shape


def build_joint(scenario, alpha=None):
    """Binary ``D = Y`` with ``Y`` uniform; ``D'`` depends on the scenario.

    ``max_gap``: ``D'`` independent uniform. ``zero_gap``: ``D' = Y``.
    ``interpolated``: ``D' = Y`` with probability ``alpha``, otherwise an
    independent uniform bit.
    """
    if scenario == "max_gap":
        alpha = 0.0
    elif scenario == "zero_gap":
        alpha = 1.0
    elif scenario == "interpolated":
        if alpha is None or not (0.0 <= float(alpha) <= 1.0):
            raise ValueError(f"interpolated scenario needs alpha in [0, 1], got {alpha!r}")
        alpha = float(alpha)
    else:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    t = np.zeros((2, 2, 2))
    for y in range(2):
        for dp in range(2):
            t[y, dp, y] = 0.5 * (alpha * (dp == y) + (1.0 - alpha) * 0.5)
    t /= t.sum()
    label = scenario if scenario != "interpolated" else f"interpolated({alpha:g})"
    return JointDistribution(t, label)


def _axes(sel):
    if isinstance(sel, str):
        sel = (sel,)
    return tuple(AXES[s] for s in sel)


def _marginal(table, keep):
    drop = tuple(a for a in range(table.ndim) if a not in keep)
    return table.sum(axis=drop)


def exact_mi(joint, a, b):
    """``I(A; B)`` where ``a`` and ``b`` name axes (``"d"``, ``"dp"``, ``"y"`` or tuples of them)."""
    ax_a, ax_b = _axes(a), _axes(b)
    if set(ax_a) & set(ax_b):
        raise ValueError("mutual information needs disjoint variable groups")
    keep = tuple(sorted(ax_a + ax_b))
    pab = _marginal(joint.table, keep)
    # reshape to (|A|, |B|) in the order of keep
    order = [keep.index(x) for x in ax_a + ax_b]
    pab = np.transpose(pab, order)
    shape_a = int(np.prod([joint.table.shape[x] for x in ax_a]))
    pab = pab.reshape(shape_a, -1)
    pa = pab.sum(axis=1, keepdims=True)
    pb = pab.sum(axis=0, keepdims=True)
    nz = pab > 0
    return float(np.sum(pab[nz] * np.log(pab[nz] / (pa @ pb)[nz])))


def entropy(p):
    p = np.asarray(p).ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def conditional_entropy_y(joint):
    """``H(Y | D, D')``."""
    t = joint.table
    pdd = t.sum(axis=2, keepdims=True)
    nz = t > 0
    cond = np.divide(t, pdd, out=np.zeros_like(t), where=pdd > 0)
    return float(-np.sum(t[nz] * np.log(cond[nz])))


# ---------------------------------------------------------------------------
# learned probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    n_train: int = 20000
    n_test: int = 5000
    dim: int = 4
    hidden: int = 8
    mu: float = 100.0
    or_weight: float = 1.0
    lr: float = 0.01
    steps: int = 300
    seed: int = 0


@dataclass
class ProbeResult:
    scenario: str
    seed: int
    i_d_y: float
    i_dp_y: float
    delta_p: float
    h_y_given_both: float
    ce_aligned: float | None = None
    ce_free: float | None = None
    extras: dict = field(default_factory=dict)


def _cell_counts(joint, n, rng):
    """Empirical counts per (d, d', y) cell for ``n`` i.i.d. draws."""
    flat = joint.table.ravel()
    draws = rng.choice(flat.size, size=n, p=flat / flat.sum())
    return np.bincount(draws, minlength=flat.size).reshape(joint.table.shape).astype(np.float64)


def _softmax_ce(logits, y_counts):
    """Count-weighted cross-entropy, summed over cells; returns (sum CE, d logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    n = y_counts.sum(axis=1, keepdims=True)
    return float(-(y_counts * logp).sum()), p * n - y_counts


class _ProbeModel:
    """Encoders plus linear head, evaluated on unique (d, d') input cells."""

    def __init__(self, shape, mode, cfg, rng):
        n_d, n_dp, n_y = shape
        self.mode = mode
        self.cfg = cfg
        self.nets = {}
        parts = ("c", "l") if mode == "hard_aligned" else ("sp_c", "sh_c", "sp_l", "sh_l")
        for name in parts:
            d_in = n_d if name.endswith("c") else n_dp
            self.nets[name] = init_mlp(d_in, cfg.hidden, cfg.dim, rng)
        width = cfg.dim * len(parts)
        a = np.sqrt(6.0 / (width + n_y))
        self.head = {"W": rng.uniform(-a, a, size=(width, n_y)), "b": np.zeros(n_y)}
        dd = np.array([(d, dp) for d in range(n_d) for dp in range(n_dp)])
        self.x_c = np.eye(n_d)[dd[:, 0]]
        self.x_l = np.eye(n_dp)[dd[:, 1]]
        self.n_y = n_y

    def params(self):
        out = {f"head.{k}": v for k, v in self.head.items()}
        for name, net in self.nets.items():
            for k in ("W1", "b1", "W2", "b2"):
                out[f"{name}.{k}"] = net[k]
        return out

    def loss(self, counts):
        """Mean objective over ``counts`` (``|D| x |D'| x |Y|``) and its gradients."""
        n = counts.sum()
        y_counts = counts.reshape(-1, self.n_y)
        w = y_counts.sum(axis=1)  # samples per input cell
        outs, caches = {}, {}
        for name, net in self.nets.items():
            x = self.x_c if name.endswith("c") else self.x_l
            outs[name], caches[name] = mlp_forward(net, x)
        names = list(self.nets)
        feats = np.hstack([outs[k] for k in names])
        logits = feats @ self.head["W"] + self.head["b"]
        ce_sum, dlogits = _softmax_ce(logits, y_counts)
        ce = ce_sum / n
        dlogits /= n
        grads = {"head.W": feats.T @ dlogits, "head.b": dlogits.sum(axis=0)}
        dfeats = dlogits @ self.head["W"].T
        douts = {k: dfeats[:, i * self.cfg.dim:(i + 1) * self.cfg.dim].copy() for i, k in enumerate(names)}

        a, b = ("c", "l") if self.mode == "hard_aligned" else ("sh_c", "sh_l")
        diff = outs[a] - outs[b]
        penalty = self.cfg.mu * float((w * (diff * diff).sum(axis=1)).sum() / n)
        g = 2.0 * self.cfg.mu * diff * (w / n)[:, None]
        douts[a] += g
        douts[b] -= g

        ortho = 0.0
        if self.mode == "disentangled" and self.cfg.or_weight:
            for side in ("c", "l"):
                cos, dsp, dsh = row_cosine(outs[f"sp_{side}"], outs[f"sh_{side}"])
                ortho += float((w * cos ** 2).sum() / n)
                coef = (self.cfg.or_weight * 2.0 * cos * w / n)[:, None]
                douts[f"sp_{side}"] += coef * dsp
                douts[f"sh_{side}"] += coef * dsh
            ortho *= self.cfg.or_weight

        for name, net in self.nets.items():
            g_net, _ = mlp_backward(net, caches[name], douts[name], need_input_grad=False)
            for k, v in g_net.items():
                grads[f"{name}.{k}"] = v
        return ce + penalty + ortho, ce, grads


def _train_probe(joint, mode, cfg, train_counts, test_counts, rng):
    model = _ProbeModel(joint.table.shape, mode, cfg, rng)
    params = model.params()
    adam = AdamState()
    for _ in range(cfg.steps):
        total, _, grads = model.loss(train_counts)
        if not math.isfinite(total):
            raise RuntimeError(f"probe training diverged in mode {mode}")
        adam_step(params, grads, adam, cfg.lr)
    _, test_ce, _ = model.loss(test_counts)
    return test_ce


def run_probe(joint, mode=None, cfg=ProbeConfig()):
    """Train the requested arm(s) on a sample from ``joint`` and report test cross-entropy.

    ``mode`` is ``"hard_aligned"``, ``"disentangled"``, or ``None`` for both.
    Both arms see the same train/test sample for a given seed.
    """
    modes = MODES if mode is None else (mode,)
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown probe mode {m!r}")
    rng = np.random.default_rng(cfg.seed)
    train_counts = _cell_counts(joint, cfg.n_train, rng)
    test_counts = _cell_counts(joint, cfg.n_test, rng)
    i_d_y = exact_mi(joint, "d", "y")
    i_dp_y = exact_mi(joint, "dp", "y")
    res = ProbeResult(
        scenario=joint.name,
        seed=cfg.seed,
        i_d_y=i_d_y,
        i_dp_y=i_dp_y,
        delta_p=abs(i_d_y - i_dp_y),
        h_y_given_both=conditional_entropy_y(joint),
    )
    init_seeds = np.random.SeedSequence(cfg.seed).spawn(len(MODES))
    for m in modes:
        ce = _train_probe(joint, m, cfg, train_counts, test_counts, np.random.default_rng(init_seeds[MODES.index(m)]))
        if m == "hard_aligned":
            res.ce_aligned = ce
        else:
            res.ce_free = ce
    return res


def write_probe_csv(results, path):
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "mode", "seed", "i_d_y", "i_dp_y", "delta_p", "ce"])
        for r in results:
            for m, ce in (("hard_aligned", r.ce_aligned), ("disentangled", r.ce_free)):
                if ce is None:
                    continue
                w.writerow([r.scenario, m, r.seed, repr(r.i_d_y), repr(r.i_dp_y), repr(r.delta_p), repr(float(ce))])
