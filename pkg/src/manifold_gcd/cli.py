"""Command-line entry point: ``manifold-gcd <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cluster, model, runner, spectral
from .data import gen_synthetic, load_dataset, load_embeddings, save_dataset, save_embeddings

log = logging.getLogger("manifold_gcd")


class CliError(Exception):
    pass


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _config(args) -> runner.RunConfig:
    cfg = runner.load_config(args.config) if args.config else runner.RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen_data(args) -> dict:
    cfg = _config(args)
    ds = gen_synthetic(cfg.synth)
    save_dataset(ds, args.out)
    return {"dataset": str(args.out), "samples": len(ds.batch), "labeled": int(ds.batch.is_labeled.sum())}


def cmd_train(args) -> dict:
    cfg = _config(args)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
        configs = [dataclasses.replace(cfg.with_seed(s), output_dir=str(Path(args.out) / f"seed_{s}"))
                   for s in seeds]
        runner.train_many(configs)
        return {"runs": [c.output_dir for c in configs]}
    cfg = dataclasses.replace(cfg, output_dir=str(args.out))
    dataset = load_dataset(args.data) if args.data else None
    result = runner.train(cfg, dataset)
    if dataset is None:
        save_dataset(result.dataset, Path(args.out) / "dataset")
    return {"metrics": str(Path(args.out) / "metrics.csv"), "final": result.history[-1]}


def cmd_eval(args) -> dict:
    params = model.load_params(args.checkpoint)
    ds = load_dataset(args.data)
    report = runner.evaluate(params, ds, args.k, args.seed or 0)
    _write_json(Path(args.out) / "evaluation.json", report)
    return report


def cmd_diagnose(args) -> dict:
    z = load_embeddings(args.input)
    rep = spectral.spectral_report(z)
    spectral.write_spectrum(rep, args.out, "spectrum")
    return rep.scalars()


def _embeddings_for(args, ds) -> np.ndarray:
    if args.checkpoint:
        return model.embed(ds.batch.patches, model.load_params(args.checkpoint))[0]
    z = ds.batch.patches.mean(axis=1)
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def cmd_estimate_k(args) -> dict:
    ds = load_dataset(args.data)
    z = _embeddings_for(args, ds)
    k_max = args.k_max if args.k_max is not None else 2 * ds.config.n_classes
    k_min = args.k_min if args.k_min is not None else ds.config.n_classes_known
    est = cluster.estimate_k(z, ds.labeled_idx, ds.true_labels[ds.labeled_idx], k_min, k_max, args.seed or 0)
    report = {
        "k_estimated": est.k, "k_true": ds.config.n_classes,
        "error_rate": abs(est.k - ds.config.n_classes) / ds.config.n_classes,
        "scan": {str(k): {"heldout_acc": a, "silhouette": s} for k, (a, s) in est.scores.items()},
        "seed": args.seed or 0,
    }
    _write_json(Path(args.out) / "estimate_k.json", report)
    return report


def cmd_verify_theory(args) -> dict:
    if args.input:
        z = load_embeddings(args.input)
    elif args.data:
        z = _embeddings_for(args, load_dataset(args.data))
    else:
        raise CliError("verify-theory needs --input or --data")
    report = spectral.verify_theory(z).to_dict()
    _write_json(Path(args.out) / "theory.json", report)
    if not report["passed"]:
        failed = [c["name"] for c in report["claims"] if not c["passed"] and not c["diagnostic"]]
        raise CliError(f"theory checks failed: {','.join(failed)} (report in {args.out})")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manifold-gcd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--quiet", action="store_true")
        if config:
            p.add_argument("--config", default=None, help="flat JSON run configuration")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an encoder and log metrics.csv")
    common(p)
    p.add_argument("--data", default=None, help="dataset directory (default: generate from config)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds run as parallel workers")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="cluster a dataset with a trained encoder")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None, help="cluster count (default: true class count)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="spectral report for an embedding CSV")
    common(p, config=False)
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("estimate-k", help="estimate the number of clusters")
    common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None, help="embed with this encoder instead of mean patches")
    p.add_argument("--k-min", type=int, default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.set_defaults(func=cmd_estimate_k)

    p = sub.add_parser("verify-theory", help="check the capacity/entropy claims on embeddings")
    common(p, config=False)
    p.add_argument("--input", default=None, help="embedding CSV")
    p.add_argument("--data", default=None, help="dataset directory (embedded as below)")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("export-embeddings", help="write encoder embeddings of a dataset as CSV")
    common(p, config=False)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=lambda a: {"embeddings": str(save_embeddings(
        _embeddings_for(a, load_dataset(a.data)), Path(a.out) / "embeddings.csv"))})
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a one-line error
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    if not args.quiet:
        print(json.dumps(result, sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
