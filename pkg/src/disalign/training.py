"""Joint objective, Adam, the epoch/step training loop, and gradient checking.

Parameters live in two containers (:class:`BackboneModel` base tables and
:class:`EncoderSet` networks). ``all_params`` exposes them as one flat
``name -> ndarray`` dict whose arrays are updated in place by Adam.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import disentangle as dis
from . import structalign as sa
from .dataio import SynthSpec, atomic_write, load_embeddings, synth_dataset, write_embeddings

logger = logging.getLogger(__name__)

TERMS = ("or", "uni", "glo", "loc")
LOG_COLUMNS = ("epoch", "step", "l_base", "l_or", "l_uni", "l_glo", "l_loc", "total")


class TrainingDivergedError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Run configuration. In JSON the trade-off weight is spelled ``lambda``."""

    lambda_: float = 0.1
    lr: float = 1e-3
    epochs: int = 60
    bpr_batch: int = 256
    n_hat: int = 4096
    K: int = 8
    d: int = 32
    d_h: int | None = None
    n_layers: int = 2
    l2: float = 1e-4
    seed: int = 0
    uni_sample: int = 256
    eval_every: int = 0
    disabled_terms: tuple = ()
    kmeans_n_init: int = 4
    kmeans_max_iter: int = 50

    def __post_init__(self):
        self.disabled_terms = tuple(self.disabled_terms)
        checks = [
            (self.lambda_ >= 0, "lambda", "must be >= 0"),
            (self.lr > 0, "lr", "must be > 0"),
            (self.epochs >= 0, "epochs", "must be >= 0"),
            (self.bpr_batch >= 1, "bpr_batch", "must be >= 1"),
            (self.n_hat >= 2, "n_hat", "must be >= 2"),
            (self.K >= 1, "K", "must be >= 1"),
            (self.d >= 1, "d", "must be >= 1"),
            (self.d_h is None or self.d_h >= 1, "d_h", "must be >= 1"),
            (self.n_layers >= 0, "n_layers", "must be >= 0"),
            (self.l2 >= 0, "l2", "must be >= 0"),
            (self.uni_sample >= 2, "uni_sample", "must be >= 2"),
            (self.eval_every >= 0, "eval_every", "must be >= 0"),
            (set(self.disabled_terms) <= set(TERMS), "disabled_terms", f"entries must be in {TERMS}"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"config key {key!r}: {msg}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lambda_")
        d["disabled_terms"] = list(self.disabled_terms)
        return d

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        if "lambda" in raw:
            raw["lambda_"] = raw.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, val in raw.items():
            want = types[key]
            if want in ("int", int) and not (isinstance(val, int) and not isinstance(val, bool)):
                raise ConfigError(f"config key {key!r}: expected integer, got {val!r}")
            if want in ("float", float) and not isinstance(val, (int, float)):
                raise ConfigError(f"config key {key!r}: expected number, got {val!r}")
        return cls(**raw)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @property
    def term_weights(self):
        return {t: (0.0 if t in self.disabled_terms else 1.0) for t in TERMS}


def seed_streams(seed):
    """Independent generator streams for (backbone init, encoder init, bpr, align, kmeans)."""
    names = ("backbone", "encoders", "bpr", "align", "kmeans")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(names)))))


def all_params(model, enc):
    p = dict(model.params())
    p.update(enc.params())
    return p


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update, applied in place to the arrays in ``params``."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# joint objective
# ---------------------------------------------------------------------------


@dataclass
class StepSample:
    """Everything random about one optimization step, drawn up front."""

    batch: np.ndarray
    glo_idx: np.ndarray
    uni_idx: np.ndarray


@dataclass
class EpochStructure:
    """Cluster assignments and center matching, frozen for one epoch."""

    assign_c: np.ndarray
    assign_l: np.ndarray
    matching: sa.CenterMatching
    k: int
    clusters_c: sa.PreferenceCenters | None = None
    clusters_l: sa.PreferenceCenters | None = None


def sample_alignment_indices(n_total, n_hat, rng):
    """Uniform sample without replacement, sorted ascending; ``n_hat`` is clamped to ``n_total``."""
    if n_hat > n_total:
        logger.warning("n_hat=%d exceeds %d rows; clamping", n_hat, n_total)
        n_hat = n_total
    return np.sort(rng.choice(n_total, size=n_hat, replace=False))


def _rep_terms(reps, structure, sample, weights):
    """Values and rep-level gradients of the enabled alignment terms."""
    values, grads = {}, {}
    for t in TERMS:
        if weights[t] == 0.0:
            values[t], grads[t] = 0.0, {}
            continue
        if t == "or":
            values[t], grads[t] = dis.orthogonality_loss(reps)
        elif t == "uni":
            values[t], grads[t] = dis.uniformity_loss(reps, sample.uni_idx)
        elif t == "glo":
            values[t], grads[t] = sa.global_loss(reps.e_sh_c, reps.e_sh_l, sample.glo_idx)
        else:
            values[t], grads[t] = sa.local_loss_reps(
                reps.e_sh_c, reps.e_sh_l, structure.assign_c, structure.assign_l, structure.matching, structure.k
            )
    return values, grads


def _chain(model, graph, enc, reps, d_reps, d_e_c, d_e0):
    """Backpropagate rep grads (and extra ``d E^C`` / ``d E0`` terms) to all parameters."""
    grads, d_e_c_enc = dis.encoders_backward(enc, reps, d_reps)
    total_e_c = d_e_c if d_e_c_enc is None else (d_e_c_enc if d_e_c is None else d_e_c + d_e_c_enc)
    g0 = np.zeros((model.n_users + model.n_items, model.d)) if d_e0 is None else d_e0.copy()
    if total_e_c is not None:
        g0 += bb.propagate_matrix(total_e_c, graph, model.n_layers)
    grads["user_emb"] = g0[: model.n_users]
    grads["item_emb"] = g0[model.n_users:]
    return grads


def evaluate_terms(model, enc, e_l, graph, structure, sample, cfg, per_term_grads=False):
    """Compute every term of the joint objective for one fixed sample.

    Returns ``(total, values, grads)``. With ``per_term_grads`` the third
    item maps each term name (``base`` included) to its own parameter
    gradient instead of the weighted total.
    """
    weights = cfg.term_weights
    e0 = model.stacked()
    e_c = bb.propagate_matrix(e0, graph, model.n_layers)
    l_base, de_c_base, de0_base = bb.bpr_loss_stacked(e_c, e0, model.n_users, sample.batch, cfg.l2)
    reps = dis.encode(enc, e_c, e_l)
    values, rep_grads = _rep_terms(reps, structure, sample, weights)
    values = {"base": float(l_base), **values}
    total = values["base"] + cfg.lambda_ * sum(values[t] for t in TERMS)
    for name, val in values.items():
        if not math.isfinite(val):
            raise TrainingDivergedError(f"loss term {name!r} is not finite ({val})")

    if per_term_grads:
        out = {"base": _chain(model, graph, enc, reps, {}, de_c_base, de0_base)}
        for t in TERMS:
            out[t] = _chain(model, graph, enc, reps, rep_grads[t], None, None)
        return total, values, out

    d_reps = {}
    if cfg.lambda_ > 0:
        for t in TERMS:
            for name, g in rep_grads[t].items():
                scaled = cfg.lambda_ * g
                d_reps[name] = scaled if name not in d_reps else d_reps[name] + scaled
    return total, values, _chain(model, graph, enc, reps, d_reps, de_c_base, de0_base)


def epoch_structure(model, enc, e_l, graph, cfg, rng):
    """Cluster both shared representations and match their centers."""
    e_c = bb.propagate(model, graph)
    reps = dis.encode(enc, e_c, e_l)
    n = reps.e_sh_c.shape[0]
    if cfg.K > n:
        raise ConfigError(f"config key 'K': {cfg.K} clusters for {n} rows")
    seeds = rng.integers(0, 2**63, size=2)
    kc = sa.kmeans(reps.e_sh_c, cfg.K, cfg.kmeans_max_iter, cfg.kmeans_n_init, seed=int(seeds[0]))
    kl = sa.kmeans(reps.e_sh_l, cfg.K, cfg.kmeans_max_iter, cfg.kmeans_n_init, seed=int(seeds[1]))
    matching = sa.match_centers(kc.centers, kl.centers)
    return EpochStructure(kc.assignment, kl.assignment, matching, cfg.K, kc, kl)


def draw_sample(sampler, n_total, cfg, rng_bpr, rng_align):
    batch = sampler.sample(cfg.bpr_batch, rng_bpr)
    glo = sample_alignment_indices(n_total, min(cfg.n_hat, n_total), rng_align)
    uni = sample_alignment_indices(n_total, min(cfg.uni_sample, n_total), rng_align)
    return StepSample(batch, glo, uni)


def joint_loss(backbone, encoders, e_l, split, structure, cfg, rng):
    """One draw of the joint objective ``base + lambda * (or + uni + glo + loc)``.

    ``rng`` drives both the BPR batch and the alignment samples.
    Returns ``(total, per-term values, parameter grads)``.
    """
    graph = bb.graph_from_split(split)
    sample = draw_sample(bb.BprSampler(split), split.n_users + split.n_items, cfg, rng, rng)
    return evaluate_terms(backbone, encoders, e_l, graph, structure, sample, cfg)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainedState:
    backbone: bb.BackboneModel
    encoders: dis.EncoderSet
    cfg: TrainConfig
    history: dict = field(default_factory=lambda: {k: [] for k in ("base", *TERMS, "total")})
    step_log: list = field(default_factory=list)
    epochs: int = 0
    rng_state: dict = field(default_factory=dict)
    eval_log: list = field(default_factory=list)
    structure: EpochStructure | None = None

    def embeddings(self, split):
        return bb.propagate(self.backbone, bb.graph_from_split(split))


def stack_llm(e_l_user, e_l_item):
    return np.vstack([np.asarray(e_l_user, dtype=np.float64), np.asarray(e_l_item, dtype=np.float64)])


def init_state(split, e_l, cfg):
    streams = seed_streams(cfg.seed)
    model = bb.init_backbone(split.n_users, split.n_items, cfg.d, cfg.n_layers, seed=streams["backbone"])
    enc = dis.init_encoders(cfg.d, e_l.shape[1], cfg.d, cfg.d, seed=streams["encoders"], d_h=cfg.d_h)
    return TrainedState(model, enc, cfg), streams


def train(split, e_l_user, e_l_item, cfg, evaluator=None):
    """Run the disentangled-alignment training loop.

    Each epoch recomputes the shared representations, clusters both sides,
    matches centers, then runs ``ceil(n_train / bpr_batch)`` Adam steps on the
    joint objective. ``evaluator(state, epoch)`` is called every
    ``cfg.eval_every`` epochs when given.
    """
    e_l = stack_llm(e_l_user, e_l_item)
    if e_l_user.shape[0] != split.n_users or e_l_item.shape[0] != split.n_items:
        raise ValueError(
            f"LLM embedding rows ({e_l_user.shape[0]}, {e_l_item.shape[0]}) do not match "
            f"dataset ({split.n_users} users, {split.n_items} items)"
        )
    state, streams = init_state(split, e_l, cfg)
    graph = bb.graph_from_split(split)
    sampler = bb.BprSampler(split)
    n_total = split.n_users + split.n_items
    steps_per_epoch = max(1, math.ceil(len(split.train) / cfg.bpr_batch))
    params = all_params(state.backbone, state.encoders)
    adam = AdamState()
    step = 0
    for epoch in range(cfg.epochs):
        structure = epoch_structure(state.backbone, state.encoders, e_l, graph, cfg, streams["kmeans"])
        state.structure = structure
        sums = dict.fromkeys(state.history, 0.0)
        for _ in range(steps_per_epoch):
            sample = draw_sample(sampler, n_total, cfg, streams["bpr"], streams["align"])
            total, values, grads = evaluate_terms(
                state.backbone, state.encoders, e_l, graph, structure, sample, cfg
            )
            if not math.isfinite(total) or abs(total) > 1e6:
                raise TrainingDivergedError(
                    f"total loss {total} at epoch {epoch} step {step}; terms {values}"
                )
            adam_step(params, grads, adam, cfg.lr)
            row = (epoch, step, values["base"], values["or"], values["uni"], values["glo"], values["loc"], total)
            state.step_log.append(row)
            for key in ("base", *TERMS):
                sums[key] += values[key]
            sums["total"] += total
            step += 1
        for key in sums:
            state.history[key].append(sums[key] / steps_per_epoch)
        state.epochs = epoch + 1
        if evaluator is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            state.eval_log.append((epoch + 1, evaluator(state, epoch + 1)))
    state.rng_state = {k: g.bit_generator.state for k, g in streams.items()}
    return state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, params, grads, eps=1e-5, trials=20, rng=None):
    """Worst relative error between analytic ``grads`` and central differences of ``f``.

    ``f()`` evaluates the loss from the current contents of ``params`` (a
    dict of arrays, perturbed in place and restored). ``trials`` random
    coordinates are checked per parameter array. Relative error is
    ``|a - n| / max(|a| + |n|, 1e-8)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        flat = p.reshape(-1)
        coords = rng.choice(flat.size, size=min(trials, flat.size), replace=False)
        for c in coords:
            old = flat[c]
            flat[c] = old + eps
            fp = f()
            flat[c] = old - eps
            fm = f()
            flat[c] = old
            num = (fp - fm) / (2.0 * eps)
            ana = g.reshape(-1)[c]
            err = abs(ana - num) / max(abs(ana) + abs(num), 1e-8)
            worst = max(worst, err)
    return worst


GRADCHECK_TOL = 1e-4


def gradient_suite(seed=0, inject=None, trials=64):
    """Finite-difference check of every loss term on a tiny random instance.

    Eight nodes (5 users, 3 items), ``d=5`` and ``K=3``; clusters and the
    matching are drawn once and then frozen. With ``inject`` set to a term
    name, the largest coordinate of that term's analytic user gradient is
    doubled to confirm the check can fail. Returns ``{term: worst rel err}``.
    """
    spec = SynthSpec(n_users=5, n_items=3, latent_dim=2, llm_dim=6, interactions_per_user=2, seed=seed)
    split, ul, il, _ = synth_dataset(spec)
    cfg = TrainConfig(d=5, K=3, n_layers=2, bpr_batch=6, n_hat=8, uni_sample=8, l2=0.01, seed=seed)
    e_l = stack_llm(ul, il)
    state, streams = init_state(split, e_l, cfg)
    graph = bb.graph_from_split(split)
    structure = epoch_structure(state.backbone, state.encoders, e_l, graph, cfg, streams["kmeans"])
    sample = draw_sample(bb.BprSampler(split), split.n_users + split.n_items, cfg, streams["bpr"], streams["align"])
    params = all_params(state.backbone, state.encoders)
    _, _, grads = evaluate_terms(state.backbone, state.encoders, e_l, graph, structure, sample, cfg, per_term_grads=True)
    if inject is not None:
        if inject not in grads:
            raise ValueError(f"unknown term {inject!r}")
        g = grads[inject]["user_emb"].reshape(-1)
        g[int(np.argmax(np.abs(g)))] *= 2.0
    worst = {}
    for term in ("base", *TERMS):

        def f(term=term):
            return evaluate_terms(state.backbone, state.encoders, e_l, graph, structure, sample, cfg)[1][term]

        worst[term] = grad_check(f, params, grads[term], trials=trials, rng=np.random.default_rng(seed))
    return worst


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def write_loss_log(state, path):
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in state.step_log:
            w.writerow([row[0], row[1], *(repr(float(x)) for x in row[2:])])


def save_checkpoint(state, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(state.backbone.user_emb, out / "user_emb.emb")
    write_embeddings(state.backbone.item_emb, out / "item_emb.emb")
    nets = {}
    for name, net in state.encoders.nets.items():
        nets[name] = {"activation": net["activation"]}
        for key in ("W1", "b1", "W2", "b2"):
            nets[name][key] = {"shape": list(net[key].shape), "values": [float(x) for x in net[key].ravel()]}
    manifest = {
        "config": state.cfg.to_dict(),
        "epochs": state.epochs,
        "n_layers": state.backbone.n_layers,
        "dims": state.encoders.dims,
        "encoders": nets,
        "user_emb": "user_emb.emb",
        "item_emb": "item_emb.emb",
    }
    with atomic_write(out / "checkpoint.json") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir):
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "checkpoint.json").read_text(encoding="utf-8"))
    cfg = TrainConfig.from_dict(manifest["config"])
    model = bb.BackboneModel(
        load_embeddings(ckpt / manifest["user_emb"]).astype(np.float64),
        load_embeddings(ckpt / manifest["item_emb"]).astype(np.float64),
        manifest["n_layers"],
    )
    nets = {}
    for name, net in manifest["encoders"].items():
        nets[name] = {"activation": net["activation"]}
        for key in ("W1", "b1", "W2", "b2"):
            nets[name][key] = np.array(net[key]["values"], dtype=np.float64).reshape(net[key]["shape"])
    enc = dis.EncoderSet(nets, manifest["dims"])
    return TrainedState(model, enc, cfg, epochs=manifest["epochs"])
