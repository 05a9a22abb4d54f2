"""Command line interface: ``partseg <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime / data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataset import generate_synthetic, load_dataset, read_raster, save_dataset, split_dataset
from .errors import ConfigError
from .evaluation import evaluate
from .experiment import (
    ExperimentConfig,
    load_rows,
    prepare_repeat,
    report,
    run_experiment,
    save_rows,
)
from .metrics import MetricConfig, score_pair
from .network import MultiPathNet, gradient_check, load_checkpoint, save_checkpoint, train
from .optimizer import optimize
from .partition import (
    PartitionFitness,
    best_permutation_agreement,
    decode,
    load_archive,
    read_genotype,
    save_archive,
    write_genotype,
)

log = logging.getLogger("partseg")

SCORE_COLUMNS = ["id", "dice", "sdsc_2mm", "sdsc_4mm", "combined", "base_dice", "mid_dice",
                 "apex_dice", "base_sdsc_2mm", "mid_sdsc_2mm", "apex_sdsc_2mm"]


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.generator = replace(cfg.generator, seed=args.seed)
        cfg.split_seed = args.seed
        cfg.train_cfg = replace(cfg.train_cfg, seed=args.seed)
        cfg.optimizer_cfg = replace(cfg.optimizer_cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg.output_dir = str(args.out)
    cfg.validate()
    return cfg


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _config(args)
    data = generate_synthetic(cfg.generator)
    out = Path(cfg.output_dir)
    save_dataset(data, out / "all")
    parts = split_dataset(data, cfg.split_fractions, cfg.split_seed, cfg.stratify)
    for part in parts:
        save_dataset(part, out / part.split_tag)
    log.info("wrote %d scans (%s) to %s", len(data),
             "/".join(str(len(p)) for p in parts), out)


def _train_parts(data, genes, alpha):
    if genes is None:
        return [list(data)] * alpha
    if len(genes) != len(data):
        raise ConfigError(f"genotype has {len(genes)} genes for {len(data)} scans")
    return [[data[i] for i in idx] for idx in decode(genes, alpha)]


def cmd_train(args) -> None:
    cfg = _config(args)
    data = load_dataset(args.data)
    genes = read_genotype(args.genotype) if args.genotype else None
    alpha = args.alpha if genes is None else max(args.alpha, int(genes.max()))
    net = MultiPathNet(alpha, cfg.seed)
    train(net, _train_parts(data, genes, alpha), cfg.train_cfg,
          callback=lambda e, d, l: log.debug("epoch %d decoder %d loss %.4f", e, d + 1, l))
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "net.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out)
    log.info("saved checkpoint %s", out)


def cmd_optimize(args) -> None:
    cfg = _config(args)
    root = Path(args.data)
    train_set, val_set = load_dataset(root / "train"), load_dataset(root / "validation")
    ocfg = cfg.optimizer_cfg
    if args.budget is not None:
        ocfg = replace(ocfg, eval_budget=args.budget)
    if args.algorithm:
        ocfg = replace(ocfg, algorithm=args.algorithm)
    if args.surrogate:
        ocfg = replace(ocfg, surrogate=args.surrogate)
    out = Path(cfg.output_dir)
    fit = PartitionFitness(train_set, val_set, args.alpha, cfg.train_cfg, cfg.metric_cfg,
                           run_seed=cfg.seed, min_subset_size=ocfg.min_subset_size,
                           report_dir=out / "reports" if args.save_reports else None)
    preload = []
    if args.resume:
        records = load_archive(args.resume)
        fit.preload(records)
        preload = [(r.canonical_genes, r.fitness) for r in records]
    result = optimize(ocfg, fit, len(train_set), args.alpha, preload=preload)
    out.mkdir(parents=True, exist_ok=True)
    result.save_history(out / "history.csv")
    save_archive(fit.archive, out / "archive.jsonl")
    write_genotype(out / "best_genotype.txt", result.best_genes)
    summary = {"best_fitness": result.best_fitness, "n_evaluations": result.n_evaluations,
               "n_trainings": fit.n_trainings,
               "best_genotype": [int(v) for v in result.best_genes]}
    if None not in train_set.hidden_styles:
        summary["recovery"] = best_permutation_agreement(result.best_genes,
                                                         train_set.hidden_styles)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    net = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    rep = evaluate(net, data, cfg.metric_cfg, args.threshold)
    stem = Path(args.out) if args.out else Path(cfg.output_dir) / "report"
    rep.save(stem)
    print(json.dumps(rep.aggregate))


def cmd_experiment(args) -> None:
    cfg = _config(args)
    if args.alphas:
        cfg.alphas = args.alphas
    if args.repeats:
        cfg.n_repeats = args.repeats
    if args.budget is not None:
        cfg.optimizer_cfg = replace(cfg.optimizer_cfg, eval_budget=args.budget)
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    for rep in cfg.repeat_seeds():  # record which scans each repeat used
        d = prepare_repeat(cfg, rep)
        record = {"train": d.train.ids, "validation": d.validation.ids, "test": d.test.ids}
        for n in cfg.train_sizes or []:
            record[f"train_N{n}"] = prepare_repeat(cfg, rep, n).train.ids
        (out / f"split_rep{rep}.json").write_text(json.dumps(record))
    rows = run_experiment(cfg, log=log.info)
    save_rows(rows, out / "rows.jsonl")
    for name, path in report(rows, out).items():
        log.info("%s: %s", name, path)


def cmd_report(args) -> None:
    rows = load_rows(args.rows)
    out = args.out or Path(args.rows).parent
    for name, path in report(rows, out).items():
        print(f"{name}: {path}")


def _mask_files(path: Path) -> dict[str, Path]:
    return {p.name.removesuffix(".pseg").removesuffix(".mask"): p
            for p in sorted(path.glob("*.pseg"))}


def cmd_score_masks(args) -> None:
    cfg = MetricConfig()
    pred, ref = _mask_files(Path(args.pred)), _mask_files(Path(args.ref))
    missing = sorted(set(ref) - set(pred))
    if missing:
        raise ConfigError(f"no prediction for reference mask(s): {missing}")
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for sid in ref:
            row = score_pair(read_raster(pred[sid], sid), read_raster(ref[sid], sid),
                             tuple(args.spacing), cfg)
            w.writerow([sid] + [repr(row[c]) for c in SCORE_COLUMNS[1:]])
    finally:
        if args.out:
            out.close()


def cmd_grad_check(args) -> None:
    errs = []
    for s in range(args.seed or 0, (args.seed or 0) + args.repeats):
        rng = np.random.default_rng(s)
        net = MultiPathNet(args.alpha, seed=s)
        x = rng.random((2, args.size, args.size))
        ref = (rng.random(x.shape) > 0.5).astype(float)
        errs.append(gradient_check(net, x, seed=s, ref=ref))
        print(f"seed {s}: max relative error {errs[-1]:.3e}")
    if max(errs) >= args.tolerance:
        raise RuntimeError(f"gradient check failed: {max(errs):.3e} >= {args.tolerance}")


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="JSON experiment config file")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--out", help=out_help)
        return sp

    sp = common(sub.add_parser("gen-data", help="generate and split a synthetic dataset"))
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train a network on a dataset"), "checkpoint path")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--alpha", type=int, default=1)
    sp.add_argument("--genotype", help="genotype file assigning scans to decoders")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("optimize", help="search the best partition"))
    sp.add_argument("--data", required=True, help="directory with train/ and validation/")
    sp.add_argument("--alpha", type=int, default=2)
    sp.add_argument("--budget", type=int)
    sp.add_argument("--algorithm", choices=["gom_ea", "hill_climber", "random_search"])
    sp.add_argument("--surrogate", choices=["off", "knn"])
    sp.add_argument("--resume", help="archive.jsonl from an earlier run")
    sp.add_argument("--save-reports", action="store_true")
    sp.set_defaults(func=cmd_optimize)

    sp = common(sub.add_parser("evaluate", help="best-of-alpha report for a checkpoint"),
                "report path stem")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("experiment", help="baseline vs optimized, all alphas/repeats"))
    sp.add_argument("--alphas", type=int, nargs="+")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--budget", type=int)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("report", help="tables from saved result rows")
    sp.add_argument("--rows", required=True, help="rows.jsonl written by `experiment`")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("score-masks", help="score predicted masks against references")
    sp.add_argument("--pred", required=True, help="directory of predicted *.pseg masks")
    sp.add_argument("--ref", required=True, help="directory of reference *.pseg masks")
    sp.add_argument("--spacing", type=float, nargs=2, default=(1.0, 1.0))
    sp.add_argument("--out", help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_score_masks)

    sp = sub.add_parser("grad-check", help="finite-difference check of the network")
    sp.add_argument("--alpha", type=int, default=2)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--size", type=int, default=8)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose > 1 else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
