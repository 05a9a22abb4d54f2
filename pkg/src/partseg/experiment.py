"""Experiment harness: baseline vs optimized partitioning, repeated, with reports.

A repeat is identified by an integer ``repeat_seed``.  Everything a repeat
needs (synthetic data, split, initial parameters, training seeds, search
seed) is derived from ``(config seeds, repeat_seed)``, so the baseline and
the optimized run of one ``(alpha, repeat)`` cell see the same data and the
same initial network.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset, GeneratorConfig, generate_synthetic, split_dataset
from .errors import ConfigError
from .evaluation import ScoreReport, evaluate
from .metrics import REGIONS, MetricConfig
from .network import MultiPathNet, TrainConfig, architecture_hash, save_checkpoint, train
from .optimizer import OptimizeResult, OptimizerConfig, optimize
from .partition import (
    FitnessRecord,
    PartitionFitness,
    best_permutation_agreement,
    genotype_seed,
    save_archive,
    write_genotype,
)

CONDITIONS = ("no_partitioning", "optimized")


def acceptance_generator() -> GeneratorConfig:
    return GeneratorConfig(n_scans=40, image_size=(32, 32), n_styles=2, style_region="top_third",
                           style_magnitude_px=3, noise_sigma=0.05, seed=0)


def acceptance_train_cfg() -> TrainConfig:
    return TrainConfig(n_epochs=30, batch_size=4, learning_rate=2e-3)


@dataclass
class ExperimentConfig:
    """Every field maps 1:1 to a key of the JSON config file (nested for sub-configs)."""

    generator: GeneratorConfig = field(default_factory=acceptance_generator)
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0
    stratify: bool = True
    alphas: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    train_sizes: list[int] | None = None  # seeded subsamples of the train split; None = all
    n_repeats: int = 3
    seed: int = 0
    train_cfg: TrainConfig = field(default_factory=acceptance_train_cfg)
    optimizer_cfg: OptimizerConfig = field(default_factory=OptimizerConfig)
    metric_cfg: MetricConfig = field(default_factory=MetricConfig)
    output_dir: str = "runs/experiment"

    def validate(self) -> None:
        if not self.alphas or min(self.alphas) < 1:
            raise ConfigError(f"alphas must be a non-empty list of integers >= 1, "
                              f"got {self.alphas}")
        if self.n_repeats < 1:
            raise ConfigError(f"n_repeats must be >= 1, got {self.n_repeats}")
        self.generator.validate()
        self.optimizer_cfg.validate()
        if len(self.split_fractions) != 3:
            raise ConfigError("split_fractions needs (train, validation, test)")
        if self.train_sizes is not None and (not self.train_sizes or min(self.train_sizes) < 1):
            raise ConfigError(f"train_sizes must be None or integers >= 1, "
                              f"got {self.train_sizes}")

    def repeat_seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.n_repeats)]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        nested = {"generator": GeneratorConfig, "train_cfg": TrainConfig,
                  "optimizer_cfg": OptimizerConfig, "metric_cfg": MetricConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for key, value in raw.items():
            if key in nested:
                sub = nested[key]
                bad = set(value) - {f.name for f in fields(sub)}
                if bad:
                    raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                base = asdict(cls.__dataclass_fields__[key].default_factory())
                base.update(value)
                if key == "generator":
                    base["image_size"] = tuple(base["image_size"])
                    base["spacing"] = tuple(base["spacing"])
                kw[key] = sub(**base)
            elif key == "split_fractions":
                kw[key] = tuple(value)
            else:
                kw[key] = value
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# -- per-repeat setup ----------------------------------------------------------

def _derive(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass
class RepeatData:
    train: Dataset
    validation: Dataset
    test: Dataset
    init_seed: int
    run_seed: int


def prepare_repeat(cfg: ExperimentConfig, repeat_seed: int, n_train: int | None = None
                   ) -> RepeatData:
    """Data and seeds of one repeat; ``n_train`` keeps a seeded subsample of the train split."""
    gen = replace(cfg.generator, seed=_derive(cfg.generator.seed, repeat_seed, 1))
    data = generate_synthetic(gen)
    tr, va, te = split_dataset(data, cfg.split_fractions, _derive(cfg.split_seed, repeat_seed, 2),
                               stratify=cfg.stratify)
    if n_train is not None and n_train != len(tr):
        if n_train > len(tr):
            raise ConfigError(f"train size {n_train} exceeds the {len(tr)} training scans")
        rng = np.random.default_rng(_derive(cfg.split_seed, repeat_seed, 6, n_train))
        tr = tr.subset(np.sort(rng.choice(len(tr), n_train, replace=False)))
    return RepeatData(tr, va, te, init_seed=_derive(cfg.seed, repeat_seed, 3),
                      run_seed=_derive(cfg.seed, repeat_seed, 4))


# -- rows ------------------------------------------------------------------------

@dataclass
class ResultRow:
    alpha: int
    N: int
    condition: str
    repeat: int
    dice: float
    sdsc: dict
    combined: float
    regions: dict
    improvement_pct: float | None = None
    recovery: float | None = None
    genotype: list[int] | None = None
    n_evaluations: int = 0
    network: str = ""

    def flat(self) -> dict:
        out = {"network": self.network, "alpha": self.alpha, "N": self.N,
               "condition": self.condition, "repeat": self.repeat, "dice": self.dice}
        out.update({f"sdsc_{k}": v for k, v in self.sdsc.items()})
        out["combined"] = self.combined
        out.update(self.regions)
        out["improvement_pct"] = self.improvement_pct
        out["recovery"] = self.recovery
        out["n_evaluations"] = self.n_evaluations
        out["genotype"] = " ".join(map(str, self.genotype)) if self.genotype else None
        return out


def _row(report: ScoreReport, cfg: ExperimentConfig, alpha: int, N: int, condition: str,
         repeat: int, **extra) -> ResultRow:
    agg = report.aggregate
    sdsc = {f"{t:g}mm": agg[f"sdsc_{t:g}mm"] for t in cfg.metric_cfg.tolerances_mm}
    regions = {k: agg[k] for k in agg if k.split("_")[0] in REGIONS}
    return ResultRow(alpha, N, condition, repeat, agg["dice"], sdsc, agg["combined"], regions,
                     network=architecture_hash()[:12], **extra)


def run_baseline(cfg: ExperimentConfig, alpha: int, repeat_seed: int,
                 identical_decoders: bool = False, out_dir=None,
                 n_train: int | None = None) -> ResultRow:
    """Every decoder is trained on the whole training set; scored best-of-alpha on test.

    ``identical_decoders`` ties all decoders to one trained path (a degenerate
    check: every variant equals the single-path prediction).
    """
    data = prepare_repeat(cfg, repeat_seed, n_train)
    # same shuffle seed as the fitness of the one-subset genotype, so alpha=1 coincides
    tcfg = replace(cfg.train_cfg, seed=genotype_seed(np.ones(len(data.train)), data.run_seed))
    if identical_decoders:
        # tied decoders: train one path, then replicate its decoder alpha times
        single = train(MultiPathNet(1, data.init_seed), [list(data.train)], tcfg)
        net = MultiPathNet(alpha, data.init_seed, identical_decoders=True)
        net.encoder = single.encoder
        net.decoders = [single.copy().decoders[0] for _ in range(alpha)]
    else:
        net = train(MultiPathNet(alpha, data.init_seed), [list(data.train)] * alpha, tcfg)
    report = evaluate(net, data.test, cfg.metric_cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "test_report")
        save_checkpoint(net, out / "net.ckpt")
    return _row(report, cfg, alpha, len(data.train), "no_partitioning", repeat_seed)


@dataclass
class OptimizedRun:
    row: ResultRow
    search: OptimizeResult
    archive: list[FitnessRecord]


def run_optimized(cfg: ExperimentConfig, alpha: int, repeat_seed: int, out_dir=None,
                  progress: Callable[[int, float], None] | None = None,
                  n_train: int | None = None) -> OptimizedRun:
    """Search partitions on train/validation, retrain the best one, report test scores."""
    if alpha < 2:
        raise ConfigError("run_optimized needs alpha >= 2; use run_baseline for alpha = 1")
    data = prepare_repeat(cfg, repeat_seed, n_train)
    fit = PartitionFitness(data.train, data.validation, alpha, cfg.train_cfg, cfg.metric_cfg,
                           run_seed=data.run_seed, init_seed=data.init_seed,
                           min_subset_size=cfg.optimizer_cfg.min_subset_size)
    fn = fit
    if progress is not None:
        def fn(genes):
            f = fit(genes)
            progress(fit.n_trainings, f)
            return f
    ocfg = replace(cfg.optimizer_cfg, seed=_derive(cfg.optimizer_cfg.seed, repeat_seed, 5))
    result = optimize(ocfg, fn, len(data.train), alpha)
    net = fit.train_net(result.best_genes)
    report = evaluate(net, data.test, cfg.metric_cfg)
    recovery = best_permutation_agreement(result.best_genes, data.train.hidden_styles) \
        if None not in data.train.hidden_styles else None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.save_history(out / "history.csv")
        save_archive(fit.archive, out / "archive.jsonl")
        write_genotype(out / "best_genotype.txt", result.best_genes)
        report.save(out / "test_report")
        save_checkpoint(net, out / "net.ckpt")
    row = _row(report, cfg, alpha, len(data.train), "optimized", repeat_seed,
               recovery=recovery, genotype=[int(v) for v in result.best_genes],
               n_evaluations=result.n_evaluations)
    return OptimizedRun(row, result, fit.archive)


def attach_improvements(rows: Sequence[ResultRow]) -> None:
    """Fill ``improvement_pct`` of optimized rows from the matching baseline row."""
    base = {(r.alpha, r.N, r.repeat): r for r in rows if r.condition == "no_partitioning"}
    for r in rows:
        if r.condition == "optimized":
            b = base.get((r.alpha, r.N, r.repeat))
            r.improvement_pct = None if b is None else pct(r.combined, b.combined)


def pct(ours: float, baseline: float) -> float:
    return 100.0 * (ours - baseline) / baseline


def run_experiment(cfg: ExperimentConfig, log: Callable[[str], None] = lambda s: None
                   ) -> list[ResultRow]:
    cfg.validate()
    out = Path(cfg.output_dir)
    rows = []
    for n in cfg.train_sizes or [None]:
        for alpha in cfg.alphas:
            for rep in cfg.repeat_seeds():
                cell = out / (f"alpha{alpha}_rep{rep}" if n is None
                              else f"N{n}_alpha{alpha}_rep{rep}")
                t0 = time.perf_counter()
                rows.append(run_baseline(cfg, alpha, rep, out_dir=cell / "baseline", n_train=n))
                log(f"N={rows[-1].N} alpha={alpha} repeat={rep} baseline "
                    f"combined={rows[-1].combined:.4f} ({time.perf_counter() - t0:.1f}s)")
                if alpha >= 2:
                    t0 = time.perf_counter()
                    rows.append(run_optimized(cfg, alpha, rep, out_dir=cell / "optimized",
                                              n_train=n).row)
                    log(f"N={rows[-1].N} alpha={alpha} repeat={rep} optimized "
                        f"combined={rows[-1].combined:.4f} recovery={rows[-1].recovery} "
                        f"({time.perf_counter() - t0:.1f}s)")
    attach_improvements(rows)
    return rows


# -- reports -----------------------------------------------------------------------

def round3(x) -> str:
    """Round half-to-even at three decimals on the shortest decimal repr of ``x``."""
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "-"
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def save_rows(rows: Sequence[ResultRow], path) -> None:
    Path(path).write_text("\n".join(json.dumps(asdict(r), sort_keys=True) for r in rows) + "\n")


def load_rows(path) -> list[ResultRow]:
    return [ResultRow(**json.loads(line)) for line in Path(path).read_text().splitlines()
            if line.strip()]


def results_csv(rows: Sequence[ResultRow]) -> str:
    flat = [r.flat() for r in rows]
    keys = list(dict.fromkeys(k for f in flat for k in f))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for f in flat:
        w.writerow(["" if f.get(k) is None else (repr(f[k]) if isinstance(f[k], float) else f[k])
                    for k in keys])
    return buf.getvalue()


def _cells(rows):
    cells: dict[tuple, dict[str, list[ResultRow]]] = {}
    for r in rows:
        cells.setdefault((r.network, r.N, r.alpha), {}).setdefault(r.condition, []).append(r)
    return dict(sorted(cells.items(), key=lambda kv: (kv[0][1], kv[0][2])))


def markdown_table(rows: Sequence[ResultRow]) -> str:
    rows = [replace(r) for r in rows]
    attach_improvements(rows)
    taus = list(rows[0].sdsc)
    metric_cols = ["DSC"] + [f"SDSC-{t.removesuffix('mm')}" for t in taus]
    head = (["network", "N", "α"] + [f"no-part. {c}" for c in metric_cols]
            + [f"ours {c}" for c in metric_cols] + ["improvement %"])
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for (net, N, alpha), cond in _cells(rows).items():
        vals = [net, str(N), str(alpha)]
        for c in CONDITIONS:
            rs = cond.get(c, [])
            vals.append(round3(_mean([r.dice for r in rs])) if rs else "-")
            vals += [round3(_mean([r.sdsc[t] for r in rs])) if rs else "-" for t in taus]
        vals.append(round3(_mean([r.improvement_pct for r in cond.get("optimized", [])])))
        lines.append("| " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"


def region_csv(rows: Sequence[ResultRow]) -> str:
    """Per-region improvement (%) of optimized over baseline, averaged over repeats."""
    base = {(r.alpha, r.N, r.repeat): r for r in rows if r.condition == "no_partitioning"}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "N", "region", "metric", "no_partitioning", "optimized",
                "improvement_pct", "n_repeats"])
    for (net, N, alpha), cond in _cells(rows).items():
        opt = [r for r in cond.get("optimized", []) if (r.alpha, r.N, r.repeat) in base]
        if not opt:
            continue
        keys = [k for k in opt[0].regions]
        for key in keys:
            region, metric = key.split("_", 1)
            b = [base[(r.alpha, r.N, r.repeat)].regions[key] for r in opt]
            o = [r.regions[key] for r in opt]
            imp = [pct(x, y) for x, y in zip(o, b)]
            w.writerow([alpha, N, region, metric, round3(_mean(b)), round3(_mean(o)),
                        round3(_mean(imp)), len(opt)])
    return buf.getvalue()


def region_improvements(rows: Sequence[ResultRow], metric: str = "sdsc_2mm"
                        ) -> dict[tuple[int, int], dict[str, float]]:
    """``{(alpha, repeat): {region: improvement %}}`` for each matched optimized row."""
    base = {(r.alpha, r.N, r.repeat): r for r in rows if r.condition == "no_partitioning"}
    out = {}
    for r in rows:
        b = base.get((r.alpha, r.N, r.repeat))
        if r.condition == "optimized" and b is not None:
            out[(r.alpha, r.repeat)] = {reg: pct(r.regions[f"{reg}_{metric}"],
                                                 b.regions[f"{reg}_{metric}"])
                                        for reg in REGIONS}
    return out


def report(rows: Sequence[ResultRow], output_dir) -> dict[str, Path]:
    """Write results.csv, table.md and regions.csv; returns their paths."""
    rows = list(rows)
    if not rows:
        raise ValueError("report needs at least one result row")
    attach_improvements(rows)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.csv", "table": out / "table.md",
             "regions": out / "regions.csv"}
    paths["results"].write_text(results_csv(rows))
    paths["table"].write_text(markdown_table(rows))
    paths["regions"].write_text(region_csv(rows))
    return paths
