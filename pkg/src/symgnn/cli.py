"""Command-line entry point: ``symgnn <subcommand> [flags]``.

Subcommands: sylvester, train, evaluate, ablate, build-graph, gradcheck.
Data sources for ``--data`` are ``ml-100k``, ``synthetic``, ``toy`` or a
directory in the ML-100K layout; relative dataset names resolve under
``$SYMGNN_DATA`` (default ``./data``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from symgnn import datasets
from symgnn.graph_data import GraphData, knn_graph, save_triplets
from symgnn.layers import ConfigError, ModelInputs
from symgnn.sylvester import sylvester_baseline
from symgnn.training import (TrainConfig, evaluate_rmse, gradcheck_config, gradcheck_model, load_checkpoint,
                             model_config_from_dict, run_ablation, save_checkpoint, train, train_repeats)

logger = logging.getLogger("symgnn")


class JsonLines:
    """Append-only line-delimited JSON log; a no-op without a path."""

    def __init__(self, path: Optional[str]):
        self._f = open(path, "a") if path else None

    def __call__(self, record: dict):
        if self._f is not None:
            self._f.write(json.dumps(record, default=float) + "\n")
            self._f.flush()

    def close(self):
        if self._f is not None:
            self._f.close()


def _write_json(path: Optional[str], payload: dict):
    if path:
        Path(path).write_text(json.dumps(payload, indent=2, default=float) + "\n")


def load_data(name: str, k: int = 10, seed: int = 0, split_file: Optional[str] = None) -> GraphData:
    if name == "toy":
        return datasets.toy_bundle()
    if name == "synthetic":
        return datasets.planted_rank2(seed=seed, split_seed=seed)
    if name == "ml-100k":
        return datasets.movielens_bundle(k=k, split_file=split_file)
    path = Path(name)
    if (path / "u.data").exists():
        return datasets.movielens_bundle(path, k=k, split_file=split_file)
    raise FileNotFoundError(f"unknown dataset {name!r}: expected ml-100k, synthetic, toy or an ML-100K directory")


def _read_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    unknown = set(cfg) - {"model_config", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}; use 'model_config' and 'train'")
    return cfg


def _configs(args):
    """Model and train configs from flags, with ``--config`` values taking precedence."""
    file_cfg = _read_config(args.config)
    overrides = {k: v for k, v in (("epochs", args.epochs), ("lr", args.lr), ("batch_rows", args.batch_rows),
                                   ("patience", args.patience)) if v is not None}
    tc = TrainConfig(model=args.model, knn_k=args.k, seed=args.seed, **overrides)
    train_keys = {f.name for f in fields(TrainConfig)}
    extra = file_cfg.get("train", {})
    bad = set(extra) - train_keys
    if bad:
        raise ConfigError(f"unknown train settings {sorted(bad)}")
    tc = replace(tc, **extra)
    mc = dict(file_cfg.get("model_config", {}))
    mc.setdefault("model", tc.model)
    if mc["model"] != tc.model:
        raise ConfigError(f"--model {tc.model} conflicts with config model {mc['model']}")
    return model_config_from_dict(mc), tc


# ---------------------------------------------------------------------------
# subcommands


def cmd_sylvester(args) -> int:
    data = load_data(args.data, k=args.k, seed=args.seed, split_file=args.split_file)
    alphas = (args.alpha,) if args.alpha is not None else tuple(round(0.1 * i, 1) for i in range(1, 10))
    res = sylvester_baseline(data, alphas=alphas, calibration=args.calibration)
    x = res.solution.x
    print(f"alpha={res.alpha} iterations={res.solution.iterations} converged={res.solution.converged} "
          f"residual={res.solution.final_residual:.3e}")
    if max(x.shape) <= 10:
        print(np.array2string(x, precision=6, suppress_small=True))
    print(f"val_rmse={res.val_rmse:.4f} test_rmse={res.test_rmse:.4f}")
    if args.export:
        save_triplets(args.export, x)
    _write_json(args.report, {"model": "sylvester", "seed": args.seed, "alpha": res.alpha,
                              "val_rmse": res.val_rmse, "test_rmse": res.test_rmse,
                              "iterations": res.solution.iterations, "grid": {str(a): v for a, v in res.grid.items()}})
    return 0


def cmd_train(args) -> int:
    mc, tc = _configs(args)
    if tc.model == "sylvester":
        return cmd_sylvester(args)
    data = load_data(args.data, k=tc.knn_k, seed=tc.seed, split_file=args.split_file)
    log = JsonLines(args.log)
    try:
        if args.repeats > 1:
            seeds = [tc.seed + i for i in range(args.repeats)]
            mean, reports = train_repeats(data, mc, tc, seeds, log=log)
            for rep in reports:
                print(json.dumps(rep.summary(), default=float))
            print(f"mean test_rmse over {len(seeds)} seeds: {mean:.4f}")
            _write_json(args.report, {"mean_test_rmse": mean, "runs": [r.summary() for r in reports]})
            return 0
        model, report = train(data, mc, tc, log=log)
    finally:
        log.close()
    print(json.dumps(report.summary(), default=float))
    if args.checkpoint:
        save_checkpoint(args.checkpoint, model)
    if args.embeddings:
        if model.kind != "lowrank":
            raise ConfigError("--embeddings needs --model lowrank")
        model.export_embeddings(ModelInputs.from_data(data), args.embeddings)
    _write_json(args.report, report.summary())
    return 0


def cmd_evaluate(args) -> int:
    data = load_data(args.data, k=args.k, seed=args.seed, split_file=args.split_file)
    mc = None
    if args.config:
        mc = model_config_from_dict(_read_config(args.config).get("model_config", {"model": args.model}))
    model = load_checkpoint(args.checkpoint, data, mc)
    mask = {"train": data.split.train_mask, "val": data.split.val_mask, "test": data.split.test_mask}[args.split]
    score = evaluate_rmse(model, data, mask, ModelInputs.from_data(data))
    print(f"{args.split}_rmse={score:.4f}")
    _write_json(args.report, {"model": model.kind, "split": args.split, "rmse": score,
                              "param_count": model.params.count()})
    return 0


def cmd_ablate(args) -> int:
    mc, tc = _configs(args)
    data = load_data(args.data, k=tc.knn_k, seed=tc.seed, split_file=args.split_file)
    log = JsonLines(args.log)
    try:
        rep = run_ablation(data, mc, tc, variants=args.variants, log=log)
    finally:
        log.close()
    print(rep.table())
    _write_json(args.report, {"model": tc.model, "seed": tc.seed, "variants": rep.rows()})
    return 0


def cmd_build_graph(args) -> int:
    if args.features:
        feats = np.loadtxt(args.features, delimiter=",", ndmin=2)
        net = knn_graph(feats, args.k, metric=args.metric)
    else:
        data = load_data(args.data, k=args.k)
        net = data.net1 if args.side == "users" else data.net2
    a = net.adjacency.tocoo()
    upper = a.row < a.col
    print(f"nodes={a.shape[0]} edges={int(upper.sum())}")
    if args.out:
        with open(args.out, "w") as f:
            f.write("src,dst,weight\n")
            for i, j, w in zip(a.row[upper], a.col[upper], a.data[upper]):
                f.write(f"{i},{j},{w:g}\n")
    return 0


def cmd_gradcheck(args) -> int:
    try:
        n1, n2 = (int(v) for v in args.size.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--size expects NxM, got {args.size!r}")
    data = datasets.toy_instance(n1, n2, seed=args.seed)
    report = gradcheck_model(data, gradcheck_config(args.model), seed=args.seed)
    print(report.table())
    print(f"{'PASS' if report.passed else 'FAIL'} max relative error {report.max_error:.3e} "
          f"(tolerance {report.tolerance:g})")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, model: bool = True):
    p.add_argument("--data", default="ml-100k", help="ml-100k | synthetic | toy | ML-100K directory")
    p.add_argument("--k", type=int, default=10, help="neighbours per node in the k-NN side graphs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-file", default=None, help="CSV of held-out row,col pairs")
    p.add_argument("--report", default=None, help="write a JSON summary here")
    if model:
        p.add_argument("--model", choices=("base", "lowrank", "sylvester"), default="lowrank")
        p.add_argument("--config", default=None, help="JSON with 'model_config' and 'train' sections")


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-rows", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--log", default=None, help="append per-epoch JSON lines here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sylvester", help="solve the linear fixed point and score it")
    _common(p, model=False)
    p.add_argument("--alpha", type=float, default=None, help="fixed alpha; default selects on validation")
    p.add_argument("--calibration", choices=("affine", "clip"), default="affine")
    p.add_argument("--export", default=None, help="write the solution as row,col,rating CSV")
    p.set_defaults(func=cmd_sylvester)

    p = sub.add_parser("train", help="train a model and report test RMSE")
    _common(p)
    _train_flags(p)
    p.add_argument("--repeats", type=int, default=1, help="consecutive seeds to average over")
    p.add_argument("--checkpoint", default=None, help="save trained parameters here")
    p.add_argument("--embeddings", default=None, help="low-rank only: save final user/item embeddings here")
    p.add_argument("--alpha", type=float, default=None, help="alpha when --model sylvester")
    p.add_argument("--calibration", choices=("affine", "clip"), default="affine")
    p.add_argument("--export", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="RMSE of a saved checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train full, G and A variants with one seed")
    _common(p)
    _train_flags(p)
    p.add_argument("--variants", nargs="+", default=["full", "G", "A"], choices=("full", "G", "A"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("build-graph", help="k-NN graph construction")
    p.add_argument("--data", default="ml-100k")
    p.add_argument("--features", default=None, help="numeric CSV; overrides --data")
    p.add_argument("--side", choices=("users", "items"), default="users")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    p.add_argument("--out", default=None, help="edge list CSV")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("gradcheck", help="finite-difference check of a model on a toy instance")
    p.add_argument("--model", choices=("base", "lowrank"), default="lowrank")
    p.add_argument("--size", default="4x5", help="NxM toy rating matrix")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"symgnn {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
