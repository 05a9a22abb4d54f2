"""Partition genotypes and the expensive fitness that trains a network per genotype.

A genotype is a length-N integer vector over ``1..alpha``; position ``i``
holds the decoder subset that training scan ``i`` belongs to.  Relabelling
the subsets gives the same partition, so everything keyed on a genotype
(cache, seeds, archive) uses the first-occurrence canonical form.
"""
from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, DataFormatError
from .evaluation import ScoreReport, evaluate
from .metrics import MetricConfig
from .network import MultiPathNet, TrainConfig, train


def as_genes(genes, alpha: int | None = None) -> np.ndarray:
    g = np.asarray(genes)
    if g.ndim != 1 or g.size == 0:
        raise ValueError(f"genotype must be a non-empty 1D vector, got shape {g.shape}")
    if not np.issubdtype(g.dtype, np.integer):
        if not np.all(np.mod(g, 1) == 0):
            raise ValueError("genes must be integers")
    g = g.astype(np.int64)
    if g.min() < 1 or (alpha is not None and g.max() > alpha):
        bad = g[(g < 1) | ((g > alpha) if alpha is not None else False)]
        raise ValueError(f"gene values must lie in 1..{alpha}, found {bad.tolist()}")
    return g


def canonicalize(genes, alpha: int | None = None) -> np.ndarray:
    """Relabel subsets in order of first occurrence: ``[2,2,1,3] -> [1,1,2,3]``."""
    g = as_genes(genes, alpha)
    _, first = np.unique(g, return_index=True)
    order = np.argsort(first, kind="stable")
    labels = np.unique(g)[order]
    mapping = np.zeros(g.max() + 1, dtype=np.int64)
    mapping[labels] = np.arange(1, len(labels) + 1)
    return mapping[g]


def genes_key(genes) -> tuple[int, ...]:
    return tuple(int(v) for v in canonicalize(genes))


def subset_sizes(genes, alpha: int) -> np.ndarray:
    return np.bincount(np.asarray(genes) - 1, minlength=alpha)[:alpha]


def is_feasible(genes, alpha: int, min_subset_size: int = 1) -> bool:
    return bool(subset_sizes(genes, alpha).min() >= min_subset_size)


def repair(genes, alpha: int, min_subset_size: int = 1, seed=0) -> np.ndarray:
    """Make every label occur at least ``min_subset_size`` times.

    While some label is under-filled, one seeded-random gene of the currently
    largest subset (lowest label on ties) is moved to the smallest under-filled
    label.  Feasible inputs are returned unchanged.
    """
    g = as_genes(genes, alpha).copy()
    if alpha * min_subset_size > g.size:
        raise ConfigError(f"cannot fill {alpha} subsets with >= {min_subset_size} of "
                          f"{g.size} scans")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sizes = subset_sizes(g, alpha)
    while sizes.min() < min_subset_size:
        target = int(np.argmin(sizes)) + 1
        donor = int(np.argmax(sizes)) + 1
        pos = rng.choice(np.flatnonzero(g == donor))
        g[pos] = target
        sizes[donor - 1] -= 1
        sizes[target - 1] += 1
    return g


def decode(genes, alpha: int) -> list[list[int]]:
    """Scan indices of each subset ``P_1 .. P_alpha``."""
    g = as_genes(genes, alpha)
    return [np.flatnonzero(g == k).tolist() for k in range(1, alpha + 1)]


def genotype_seed(genes, run_seed: int) -> int:
    """64-bit seed derived from the canonical genotype, xor-ed with the run seed."""
    key = ",".join(map(str, genes_key(genes))).encode()
    h = int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
    return h ^ (int(run_seed) & 0xFFFFFFFFFFFFFFFF)


def best_permutation_agreement(genes, styles) -> float:
    """Max over label permutations of the fraction of genes equal to the hidden style."""
    from scipy.optimize import linear_sum_assignment

    g = as_genes(genes)
    s = np.asarray(styles, dtype=np.int64)
    if s.shape != g.shape:
        raise ValueError("genes and styles differ in length")
    k = int(max(g.max(), s.max()))
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (g - 1, s - 1), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / g.size)


# -- files -------------------------------------------------------------------

def write_genotype(path, genes) -> None:
    Path(path).write_text(" ".join(str(int(v)) for v in genes) + "\n")


def read_genotype(path) -> np.ndarray:
    text = Path(path).read_text().split()
    try:
        return as_genes([int(t) for t in text])
    except ValueError as exc:
        raise DataFormatError(f"bad genotype file {path}: {exc}") from None


@dataclass
class FitnessRecord:
    canonical_genes: list[int]
    fitness: float
    eval_seed: int
    wall_time: float
    report_path: str | None = None


def save_archive(records: Sequence[FitnessRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def load_archive(path) -> list[FitnessRecord]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(FitnessRecord(**json.loads(line)))
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataFormatError(f"archive line {n}: {exc}") from None
    return out


# -- the expensive objective ---------------------------------------------------

class PartitionFitness:
    """Train-and-validate fitness of a partition genotype, cached by canonical form.

    The network's initial parameters come from ``init_seed`` (shared with the
    no-partitioning baseline); the training shuffle seed is derived from the
    canonical genotype and ``run_seed``.  Calling with two label permutations
    of one partition therefore returns the identical cached value.
    """

    def __init__(self, train_set: Dataset, val_set: Dataset, alpha: int,
                 train_cfg: TrainConfig | None = None, metric_cfg: MetricConfig | None = None,
                 run_seed: int = 0, init_seed: int | None = None, min_subset_size: int = 1,
                 report_dir=None, on_report: Callable[[tuple, ScoreReport], None] | None = None):
        if val_set.split_tag != "validation":
            raise ConfigError(f"fitness must be computed on the validation split, "
                              f"got split_tag={val_set.split_tag!r}")
        if alpha * min_subset_size > len(train_set):
            raise ConfigError(f"min_subset_size*alpha = {alpha * min_subset_size} exceeds "
                              f"N = {len(train_set)}")
        self.train_set = train_set
        self.val_set = val_set
        self.alpha = alpha
        self.train_cfg = train_cfg or TrainConfig()
        self.metric_cfg = metric_cfg or MetricConfig()
        self.run_seed = run_seed
        self.init_seed = run_seed if init_seed is None else init_seed
        self.min_subset_size = min_subset_size
        self.report_dir = Path(report_dir) if report_dir else None
        self.on_report = on_report
        self.cache: dict[tuple, FitnessRecord] = {}
        self.n_trainings = 0
        self._lock = threading.Lock()
        self._images = train_set.images.astype(np.float64)
        self._masks = train_set.masks.astype(np.float64)

    @property
    def n_genes(self) -> int:
        return len(self.train_set)

    @property
    def archive(self) -> list[FitnessRecord]:
        return list(self.cache.values())

    def preload(self, records: Sequence[FitnessRecord]) -> None:
        for r in records:
            self.cache.setdefault(tuple(r.canonical_genes), r)

    def train_net(self, genes) -> MultiPathNet:
        g = as_genes(genes, self.alpha)
        if not is_feasible(g, self.alpha, self.min_subset_size):
            g = repair(g, self.alpha, self.min_subset_size, genotype_seed(g, self.run_seed))
        if not is_feasible(g, self.alpha, self.min_subset_size):
            raise ConfigError("genotype infeasible after repair")
        g = canonicalize(g)
        cfg = TrainConfig(**{**asdict(self.train_cfg), "seed": genotype_seed(g, self.run_seed)})
        net = MultiPathNet(self.alpha, self.init_seed)
        parts = [(self._images[idx], self._masks[idx]) for idx in decode(g, self.alpha)]
        with self._lock:
            self.n_trainings += 1
        return train(net, parts, cfg)

    def __call__(self, genes) -> float:
        g = as_genes(genes, self.alpha)
        if not is_feasible(g, self.alpha, self.min_subset_size):
            g = repair(g, self.alpha, self.min_subset_size, genotype_seed(g, self.run_seed))
        g = canonicalize(g)
        key = tuple(int(v) for v in g)
        with self._lock:
            hit = self.cache.get(key)
        if hit is not None:
            return hit.fitness
        assert self.val_set.split_tag == "validation"
        start = time.perf_counter()
        net = self.train_net(g)
        report = evaluate(net, self.val_set, self.metric_cfg)
        path = None
        if self.report_dir is not None:
            path = str(self.report_dir / ("g" + "".join(map(str, key))))
            report.save(path)
        if self.on_report is not None:
            self.on_report(key, report)
        rec = FitnessRecord(list(key), report.fitness, genotype_seed(key, self.run_seed),
                            time.perf_counter() - start, path)
        with self._lock:
            rec = self.cache.setdefault(key, rec)  # first writer wins
        return rec.fitness
