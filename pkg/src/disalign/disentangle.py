"""Shared/specific projection encoders and their regularizers.

Every loss here returns ``(value, grads)`` where ``grads`` holds the
gradient w.r.t. each input matrix, so callers can chain them back through
the encoders with :func:`mlp_backward`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

EPS = 1e-12
ENCODER_NAMES = ("sp_c", "sh_c", "sp_l", "sh_l")


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def init_mlp(d_in, d_h, d_out, rng, activation="tanh"):
    """One-hidden-layer MLP with Xavier-uniform weights and zero biases."""

    def xavier(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    return {
        "W1": xavier(d_in, d_h),
        "b1": np.zeros(d_h),
        "W2": xavier(d_h, d_out),
        "b2": np.zeros(d_out),
        "activation": activation,
    }


def _act(z, activation):
    if activation == "tanh":
        return np.tanh(z)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def mlp_forward(net, x):
    """Returns ``(output, cache)``; the cache feeds :func:`mlp_backward`."""
    if x.shape[1] != net["W1"].shape[0]:
        raise ValueError(f"input dim {x.shape[1]} does not match encoder dim {net['W1'].shape[0]}")
    h = _act(x @ net["W1"] + net["b1"], net["activation"])
    return h @ net["W2"] + net["b2"], (x, h)


def mlp_backward(net, cache, dy, need_input_grad=True):
    x, h = cache
    grads = {"W2": h.T @ dy, "b2": dy.sum(axis=0)}
    dh = dy @ net["W2"].T
    da = dh * (1.0 - h * h) if net["activation"] == "tanh" else dh
    grads["W1"] = x.T @ da
    grads["b1"] = da.sum(axis=0)
    dx = da @ net["W1"].T if need_input_grad else None
    return grads, dx


@dataclass
class EncoderSet:
    """The four projection networks, keyed ``sp_c``, ``sh_c``, ``sp_l``, ``sh_l``."""

    nets: dict
    dims: dict

    def params(self):
        out = {}
        for name in ENCODER_NAMES:
            for key in ("W1", "b1", "W2", "b2"):
                out[f"{name}.{key}"] = self.nets[name][key]
        return out

    def copy(self):
        nets = {
            name: {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in net.items()}
            for name, net in self.nets.items()
        }
        return EncoderSet(nets, dict(self.dims))


def init_encoders(d_in_c, d_in_l, d_sp, d_sh, seed=0, d_h=None, activation="tanh"):
    """Build the encoder set; hidden width defaults to each side's input width."""
    if d_sp != d_sh:
        raise ValueError("specific and shared dims must match for the per-row cosine")
    rng = np.random.default_rng(seed)
    h_c = d_h or d_in_c
    h_l = d_h or d_in_l
    nets = {
        "sp_c": init_mlp(d_in_c, h_c, d_sp, rng, activation),
        "sh_c": init_mlp(d_in_c, h_c, d_sh, rng, activation),
        "sp_l": init_mlp(d_in_l, h_l, d_sp, rng, activation),
        "sh_l": init_mlp(d_in_l, h_l, d_sh, rng, activation),
    }
    dims = {"d_in_c": d_in_c, "d_in_l": d_in_l, "d_h_c": h_c, "d_h_l": h_l, "d_sp": d_sp, "d_sh": d_sh}
    return EncoderSet(nets, dims)


@dataclass
class DisentangledReps:
    e_sp_c: np.ndarray
    e_sh_c: np.ndarray
    e_sp_l: np.ndarray
    e_sh_l: np.ndarray
    caches: dict | None = None

    def as_dict(self):
        return {"sp_c": self.e_sp_c, "sh_c": self.e_sh_c, "sp_l": self.e_sp_l, "sh_l": self.e_sh_l}


def encode(enc, e_c, e_l):
    if e_c.shape[0] != e_l.shape[0]:
        raise ValueError(f"row counts differ: {e_c.shape[0]} vs {e_l.shape[0]}")
    outs, caches = {}, {}
    for name in ENCODER_NAMES:
        x = e_c if name.endswith("_c") else e_l
        outs[name], caches[name] = mlp_forward(enc.nets[name], x)
    return DisentangledReps(outs["sp_c"], outs["sh_c"], outs["sp_l"], outs["sh_l"], caches)


def encoders_backward(enc, reps, d_reps):
    """Chain rep gradients into encoder parameter grads and ``d E^C``.

    ``d_reps`` maps encoder name to the gradient of its output (missing
    entries mean zero). The L-side input is frozen, so only ``d_e_c`` is
    returned alongside the parameter grads.
    """
    grads = {}
    d_e_c = None
    for name in ENCODER_NAMES:
        net = enc.nets[name]
        dy = d_reps.get(name)
        if dy is None:
            for key in ("W1", "b1", "W2", "b2"):
                grads[f"{name}.{key}"] = np.zeros_like(net[key])
            continue
        c_side = name.endswith("_c")
        g, dx = mlp_backward(net, reps.caches[name], dy, need_input_grad=c_side)
        for key, val in g.items():
            grads[f"{name}.{key}"] = val
        if c_side:
            d_e_c = dx if d_e_c is None else d_e_c + dx
    return grads, d_e_c


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------


def row_cosine(a, b):
    """Per-row cosine and its gradients; zero-norm rows give 0 with zero gradient."""
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    ok = (na > EPS) & (nb > EPS)
    safe_a = np.where(ok, na, 1.0)
    safe_b = np.where(ok, nb, 1.0)
    dot = (a * b).sum(axis=1)
    cos = np.where(ok, dot / (safe_a * safe_b), 0.0)
    da = np.where(ok[:, None], b / (safe_a * safe_b)[:, None] - cos[:, None] * a / (safe_a ** 2)[:, None], 0.0)
    db = np.where(ok[:, None], a / (safe_a * safe_b)[:, None] - cos[:, None] * b / (safe_b ** 2)[:, None], 0.0)
    return cos, da, db


def orthogonality_loss(reps):
    """Mean squared per-row cosine between specific and shared parts, summed over both sides."""
    value = 0.0
    grads = {}
    for side in ("l", "c"):
        sp, sh = getattr(reps, f"e_sp_{side}"), getattr(reps, f"e_sh_{side}")
        if sp.shape != sh.shape:
            raise ValueError("specific and shared dims must match")
        n = sp.shape[0]
        cos, dsp, dsh = row_cosine(sp, sh)
        value += float((cos ** 2).mean())
        coef = (2.0 * cos / n)[:, None]
        grads[f"sp_{side}"] = coef * dsp
        grads[f"sh_{side}"] = coef * dsh
    return value, grads


def normalize_rows(m):
    n = np.sqrt((m * m).sum(axis=1, keepdims=True))
    zero = n[:, 0] <= EPS
    if zero.any():
        logger.warning("normalize_rows: %d all-zero row(s) left at zero", int(zero.sum()))
    return np.where(zero[:, None], 0.0, m / np.where(zero[:, None], 1.0, n))


def normalize_rows_backward(m, y, dy):
    n = np.sqrt((m * m).sum(axis=1, keepdims=True))
    zero = n[:, 0] <= EPS
    proj = dy - y * (y * dy).sum(axis=1, keepdims=True)
    return np.where(zero[:, None], 0.0, proj / np.where(zero[:, None], 1.0, n))


def _uniformity_side(x):
    """log of the mean Gaussian potential over unordered pairs, with gradient w.r.t. ``x``."""
    n = x.shape[0]
    y = normalize_rows(x)
    sq = (y * y).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (y @ y.T), 0.0)
    k = np.exp(-2.0 * d2)
    np.fill_diagonal(k, 0.0)
    total = 0.5 * k.sum()
    value = float(np.log(total / (n * (n - 1) / 2)))
    w = k / total
    # d value / d y_i = sum_j -2 w_ij * 2 (y_i - y_j)
    dy = -4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
    return value, normalize_rows_backward(x, y, dy)


def uniformity_loss(reps, sample_idx):
    """Uniformity of the row-normalized specific parts on both sides, over ``sample_idx``."""
    sample_idx = np.asarray(sample_idx)
    if len(sample_idx) < 2:
        raise ValueError("uniformity needs at least two sampled rows")
    value = 0.0
    grads = {}
    for side in ("c", "l"):
        sp = getattr(reps, f"e_sp_{side}")
        v, g = _uniformity_side(sp[sample_idx])
        value += v
        if len(np.unique(sample_idx)) != len(sample_idx):
            raise ValueError("uniformity sample indices must be distinct")
        full = np.zeros_like(sp)
        full[sample_idx] = g
        grads[f"sp_{side}"] = full
    return value, grads
