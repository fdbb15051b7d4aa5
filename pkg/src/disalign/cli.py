"""Command-line entry point: ``disalign <subcommand> ...``.

Exit codes: 0 on success, 1 when a check fails or training aborts, 2 on
bad input (missing files, malformed data, invalid configuration).
Command-line flags take precedence over keys in ``--config``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, plotting, theoryprobe, training
from .backbone import NegativeSamplingError

logger = logging.getLogger("disalign")

DATA_FILES = {
    "interactions": "interactions.tsv",
    "user_llm": "user_llm.emb",
    "item_llm": "item_llm.emb",
    "user_map": "user_ids.tsv",
    "item_map": "item_ids.tsv",
}

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "lambda_": float,
    "lr": float,
    "epochs": int,
    "bpr_batch": int,
    "n_hat": int,
    "K": int,
    "d": int,
    "n_layers": int,
    "l2": float,
    "uni_sample": int,
}


class InputError(Exception):
    """Raised for problems with user-supplied files or flags (exit code 2)."""


class CheckFailed(Exception):
    """Raised when a verification command finds a problem (exit code 1)."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_data(args):
    """Paths of the interaction file, LLM embeddings and optional id maps."""
    base = Path(args.data) if args.data else None
    paths = {}
    for key, name in DATA_FILES.items():
        explicit = getattr(args, key, None)
        if explicit:
            paths[key] = Path(explicit)
        elif base is not None and ((base / name).exists() or key not in ("user_map", "item_map")):
            paths[key] = base / name
        else:
            paths[key] = None
    for key in ("interactions", "user_llm", "item_llm"):
        if paths[key] is None:
            raise InputError(f"no {key} file given (use --data DIR or --{key.replace('_', '-')})")
        if not paths[key].exists():
            raise InputError(f"{key} file not found: {paths[key]}")
    return paths


def _llm_rows(ids, id_map, path):
    """Row index in an LLM embedding file for each original id."""
    if id_map is not None:
        lookup = {str(v): k for k, v in enumerate(id_map)}
        missing = [i for i in ids if str(i) not in lookup]
        if missing:
            raise InputError(f"id {missing[0]!r} has no row in the id map for {path}")
        return np.array([lookup[str(i)] for i in ids], dtype=np.int64)
    try:
        rows = np.array([int(i) for i in ids], dtype=np.int64)
    except ValueError:
        raise InputError(f"non-integer ids need an id map file to index {path}") from None
    return rows


def load_inputs(args):
    """Load, filter and split the interactions; subset LLM rows to the surviving ids."""
    paths = _resolve_data(args)
    ds = dataio.load_interactions(paths["interactions"], min_rating=args.min_rating)
    split = dataio.split_dataset(ds, seed=args.split_seed)
    mats = []
    for side, ids in (("user", ds.user_ids), ("item", ds.item_ids)):
        key = f"{side}_llm"
        m = dataio.load_embeddings(paths[key])
        id_map = dataio.read_id_map(paths[f"{side}_map"]) if paths[f"{side}_map"] else None
        rows = _llm_rows(ids, id_map, paths[key])
        if rows.min() < 0 or rows.max() >= m.shape[0]:
            raise InputError(f"{paths[key]} has {m.shape[0]} rows but id row {int(rows.max())} is needed")
        mats.append(m[rows])
    return split, mats[0], mats[1]


def build_config(args):
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise InputError(f"{path}: config must be a JSON object")
    cfg = training.TrainConfig.from_dict(raw)
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "disable", None):
        overrides["disabled_terms"] = tuple(sorted(set(cfg.disabled_terms) | set(args.disable)))
    if hasattr(args, "seed") and args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides)


def _add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="directory holding interactions.tsv, user_llm.emb, item_llm.emb")
    g.add_argument("--interactions", help="interaction TSV (overrides --data)")
    g.add_argument("--user-llm", dest="user_llm", help="user LLM embedding file (overrides --data)")
    g.add_argument("--item-llm", dest="item_llm", help="item LLM embedding file (overrides --data)")
    g.add_argument("--user-map", dest="user_map", help="id map for user LLM rows")
    g.add_argument("--item-map", dest="item_map", help="id map for item LLM rows")
    g.add_argument("--min-rating", type=float, default=3.0)
    g.add_argument("--split-seed", type=int, default=0, help="seed of the 3:1:1 split (default 0)")


def _add_train_args(p):
    g = p.add_argument_group("training (overrides --config)")
    g.add_argument("--config", help="JSON run config; keys mirror TrainConfig, with 'lambda' for the weight")
    g.add_argument("--lambda", dest="lambda_", type=float)
    for name, typ in TRAIN_FLAGS.items():
        if name != "lambda_":
            g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    g.add_argument("--disable", action="append", choices=training.TERMS, help="turn off one alignment term")


def _print_metrics(rows):
    print("part,K,recall,ndcg")
    for part, rep in rows:
        for k in sorted(rep.recall_at):
            print(f"{part},{k},{rep.recall_at[k]:.6f},{rep.ndcg_at[k]:.6f}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    spec = dataio.SynthSpec(
        n_users=args.users,
        n_items=args.items,
        latent_dim=args.latent_dim,
        llm_dim=args.llm_dim,
        shared_signal_scale=args.shared_scale,
        specific_scale=args.specific_scale,
        noise_scale=args.noise_scale,
        interactions_per_user=args.interactions_per_user,
        seed=args.seed,
    )
    split, user_llm, item_llm, (zu, zi) = dataio.synth_dataset(spec)
    out = _out_dir(args.out)
    dataio.write_interactions(split.base, out / DATA_FILES["interactions"])
    dataio.write_embeddings(user_llm, out / DATA_FILES["user_llm"])
    dataio.write_embeddings(item_llm, out / DATA_FILES["item_llm"])
    dataio.write_embeddings(zu, out / "truth_users.emb")
    dataio.write_embeddings(zi, out / "truth_items.emb")
    dataio.write_id_map(split.base.user_ids, out / DATA_FILES["user_map"])
    dataio.write_id_map(split.base.item_ids, out / DATA_FILES["item_map"])
    dataio.write_manifest(
        {
            "synth_spec": spec.to_dict(),
            "n_interactions": len(split.base),
            "files": sorted([*DATA_FILES.values(), "truth_users.emb", "truth_items.emb"]),
        },
        out / "manifest.json",
    )
    print(f"wrote {len(split.base)} interactions for {spec.n_users} users and {spec.n_items} items to {out}")
    return 0


def cmd_train(args):
    cfg = build_config(args)
    split, ul, il = load_inputs(args)
    out = _out_dir(args.out)
    state = training.train(split, ul, il, cfg)
    training.write_loss_log(state, out / "loss.csv")
    training.save_checkpoint(state, out / "checkpoint")
    e = state.embeddings(split)
    dataio.write_embeddings(e[: split.n_users], out / "user_final.emb")
    dataio.write_embeddings(e[split.n_users:], out / "item_final.emb")
    reports = [(part, evaluation.evaluate_embeddings(e, split, evaluation.DEFAULT_KS, part)) for part in ("val", "test")]
    evaluation.write_metrics_csv(((part, cfg.seed, rep) for part, rep in reports), out / "metrics.csv")
    dataio.write_manifest({"config": cfg.to_dict(), "split_seed": args.split_seed}, out / "run.json")
    plotting.plot_loss_curves(state.history, out / "loss.png")
    _print_metrics(reports)
    return 0


def _restore(args):
    ckpt = Path(args.checkpoint)
    if not (ckpt / "checkpoint.json").exists():
        raise InputError(f"no checkpoint.json under {ckpt}")
    state = training.load_checkpoint(ckpt)
    split, _, _ = load_inputs(args)
    if state.backbone.n_users != split.n_users or state.backbone.n_items != split.n_items:
        raise InputError(
            f"checkpoint has {state.backbone.n_users} users / {state.backbone.n_items} items, "
            f"data has {split.n_users} / {split.n_items}"
        )
    return state, split


def cmd_eval(args):
    state, split = _restore(args)
    e = state.embeddings(split)
    ks = tuple(args.ks)
    reports = [(part, evaluation.evaluate_embeddings(e, split, ks, part)) for part in args.parts.split(",")]
    out = _out_dir(args.out)
    evaluation.write_metrics_csv(((part, state.cfg.seed, rep) for part, rep in reports), out / "metrics.csv")
    _print_metrics(reports)
    return 0


def cmd_export(args):
    state, split = _restore(args)
    e = state.embeddings(split)
    out = _out_dir(args.out)
    suffix = ".emb" if args.format == "emb" else ".csv"
    dataio.write_embeddings(e[: split.n_users], out / f"user_final{suffix}")
    dataio.write_embeddings(e[split.n_users:], out / f"item_final{suffix}")
    dataio.write_id_map(split.base.user_ids, out / "user_ids.tsv")
    dataio.write_id_map(split.base.item_ids, out / "item_ids.tsv")
    print(f"exported {split.n_users} user and {split.n_items} item rows to {out}")
    return 0


def cmd_gradcheck(args):
    worst = training.gradient_suite(seed=args.seed, inject=args.inject_bug)
    failed = []
    print("term,max_rel_err,status")
    for term, err in worst.items():
        ok = err < training.GRADCHECK_TOL
        print(f"{term},{err:.3e},{'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(term)
    if failed:
        raise CheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return 0


def _seeds(args):
    return tuple(range(args.seed, args.seed + args.n_seeds))


def cmd_ablate(args):
    cfg = build_config(args)
    split, ul, il = load_inputs(args)
    out = _out_dir(args.out)
    report = evaluation.run_ablation(cfg, split, ul, il, seeds=_seeds(args))
    evaluation.write_sweep_report(report, out / "ablation.csv", part="val")
    evaluation.write_sweep_report(report, out / "ablation_test.csv", part="test")
    plotting.plot_ablation(report, out / "ablation.png")
    print("variant,mean_recall20,stderr")
    for v in report.variants():
        print(f"{v},{report.mean(v):.6f},{report.stderr(v):.6f}")
    return 0


def _parse_values(param, text):
    conv = float if param == "lambda" else int
    try:
        return [conv(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"--values for {param} must be comma-separated numbers, got {text!r}") from None


def cmd_sweep(args):
    cfg = build_config(args)
    values = _parse_values(args.param, args.values)
    if not values:
        raise InputError("--values is empty")
    split, ul, il = load_inputs(args)
    out = _out_dir(args.out)
    report = evaluation.run_sensitivity(cfg, {args.param: values}, split, ul, il, seeds=_seeds(args))
    evaluation.write_sweep_report(report, out / "sweep.csv", part="val")
    evaluation.write_sweep_curve(report, args.param, out / "sweep_curve.csv")
    plotting.plot_sweep(evaluation.sweep_curve(report, args.param), args.param, out / "sweep.png")
    print("x,mean_recall20,stderr")
    for x, m, s in evaluation.sweep_curve(report, args.param):
        print(f"{x:g},{m:.6f},{s:.6f}")
    return 0


def cmd_probe(args):
    try:
        joint = theoryprobe.build_joint(args.scenario, args.alpha)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    base = theoryprobe.ProbeConfig()
    overrides = {k: getattr(args, k) for k in ("steps", "lr", "mu") if getattr(args, k) is not None}
    results = []
    for seed in _seeds(args):
        cfg = theoryprobe.ProbeConfig(**{**base.__dict__, **overrides, "seed": seed})
        results.append(theoryprobe.run_probe(joint, None, cfg))
    out = _out_dir(args.out)
    theoryprobe.write_probe_csv(results, out / "probe.csv")
    plotting.plot_probe(results, out / "probe.png")
    print("scenario,seed,delta_p,ce_aligned,ce_free")
    for r in results:
        print(f"{r.scenario},{r.seed},{r.delta_p:.12f},{r.ce_aligned:.6f},{r.ce_free:.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="disalign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with paired LLM-side embeddings")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=100)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--llm-dim", type=int, default=32)
    p.add_argument("--shared-scale", type=float, default=1.0)
    p.add_argument("--specific-scale", type=float, default=0.5)
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.add_argument("--interactions-per-user", type=int, default=20)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and write logs, checkpoint, embeddings and metrics")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate a checkpoint on the val/test split"),
        ("export", cmd_export, "write a checkpoint's propagated embeddings"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_data_args(p)
        p.add_argument("--checkpoint", required=True, help="directory written by 'train' (its checkpoint/ folder)")
        p.add_argument("--out", required=True)
        if name == "eval":
            p.add_argument("--ks", type=_int_list, default=list(evaluation.DEFAULT_KS))
            p.add_argument("--parts", default="val,test")
        else:
            p.add_argument("--format", choices=("emb", "csv"), default="emb")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--seed", type=int, default=0, help="instance seed (default 0)")
    p.add_argument("--inject-bug", choices=("base", *training.TERMS), help="corrupt one term's gradient on purpose")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="full model plus each single-term removal over several seeds")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--seed", type=int, required=True, help="first seed")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sensitivity sweep over K, lambda or n_hat")
    _add_data_args(p)
    _add_train_args(p)
    p.add_argument("--param", choices=sorted(evaluation.SWEEP_KEYS), required=True)
    p.add_argument("--values", required=True, help="comma-separated grid values")
    p.add_argument("--seed", type=int, required=True, help="first seed")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", help="alignment-cost probe on a small discrete joint")
    p.add_argument("--scenario", choices=theoryprobe.SCENARIOS, required=True)
    p.add_argument("--alpha", type=float, help="mixing weight for the interpolated scenario")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mu", type=float, help="alignment penalty weight")
    p.add_argument("--seed", type=int, required=True, help="first seed")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "n_seeds", 1) < 1:
        parser.error("--n-seeds must be >= 1")
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (training.TrainingDivergedError, NegativeSamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (InputError, training.ConfigError, dataio.DataFormatError, dataio.EmptyDatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
