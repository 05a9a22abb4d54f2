"""Search over categorical genotypes {1..alpha}^N under a hard evaluation budget.

``gom_ea`` is a parameterless population pyramid: every iteration draws a
fresh random solution, optionally climbs it to a local optimum, and then
mixes it with each pyramid level in turn using gene-pool optimal mixing over
a linkage tree learnt from that level.  Solutions that improve during mixing
are promoted to the next level.  An optional k-nearest-neighbour surrogate
ranks alternative donations so that only the most promising are evaluated.

For label-symmetric objectives (partitions) genotypes are compared in
canonical form and donors are relabelled to agree with the receiving
solution before genes are copied.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError
from .partition import canonicalize, is_feasible, repair

ALGORITHMS = ("gom_ea", "hill_climber", "random_search")


@dataclass
class OptimizerConfig:
    algorithm: str = "gom_ea"
    eval_budget: int = 300
    local_search: bool = True
    surrogate: str = "off"
    surrogate_k: int = 5
    screen_fraction: float = 0.5
    min_subset_size: int = 1
    label_symmetric: bool = True
    seed: int = 0

    def validate(self, n_genes: int | None = None, alpha: int | None = None) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.eval_budget < 1:
            raise ConfigError(f"eval_budget must be >= 1, got {self.eval_budget}")
        if self.surrogate not in ("off", "knn"):
            raise ConfigError(f"surrogate must be 'off' or 'knn', got {self.surrogate!r}")
        if not 0 < self.screen_fraction <= 1:
            raise ConfigError(f"screen_fraction must be in (0, 1], got {self.screen_fraction}")
        if self.surrogate_k < 1:
            raise ConfigError(f"surrogate_k must be >= 1, got {self.surrogate_k}")
        if self.min_subset_size < 0:
            raise ConfigError(f"min_subset_size must be >= 0, got {self.min_subset_size}")
        if n_genes is not None and alpha is not None and self.min_subset_size * alpha > n_genes:
            raise ConfigError(f"min_subset_size*alpha = {self.min_subset_size * alpha} "
                              f"exceeds N = {n_genes}")


@dataclass
class HistoryRow:
    eval_index: int
    genotype: tuple[int, ...]
    fitness: float
    best_so_far: float
    wall_time_s: float


@dataclass
class OptimizeResult:
    best_genes: np.ndarray
    best_fitness: float
    history: list[HistoryRow]
    n_evaluations: int
    archive: list[tuple[tuple[int, ...], float]] = field(default_factory=list)

    def save_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eval_index", "canonical_genotype", "fitness", "best_so_far",
                        "wall_time_s"])
            for r in self.history:
                w.writerow([r.eval_index, " ".join(map(str, r.genotype)), repr(r.fitness),
                            repr(r.best_so_far), f"{r.wall_time_s:.6f}"])


class BudgetExhausted(Exception):
    pass


class _Evaluator:
    """Budgeted, cached access to the objective.  Cache hits are free."""

    def __init__(self, fitness_fn, budget: int, symmetric: bool, alpha: int,
                 preload: Sequence[tuple[Sequence[int], float]] = ()):
        self.fitness_fn = fitness_fn
        self.budget = budget
        self.symmetric = symmetric
        self.alpha = alpha
        self.cache: dict[tuple, float] = {}
        self.history: list[HistoryRow] = []
        self.best_key: tuple | None = None
        self.best = -math.inf
        self.start = time.perf_counter()
        for genes, f in preload:
            k = self.key(genes)
            self.cache[k] = float(f)
            if f > self.best:
                self.best, self.best_key = float(f), k

    def key(self, genes) -> tuple:
        g = canonicalize(genes) if self.symmetric else np.asarray(genes)
        return tuple(int(v) for v in g)

    @property
    def used(self) -> int:
        return len(self.history)

    @property
    def exhausted(self) -> bool:
        return self.used >= self.budget

    def __call__(self, genes) -> float:
        k = self.key(genes)
        if k in self.cache:
            return self.cache[k]
        if self.exhausted:
            raise BudgetExhausted
        f = float(self.fitness_fn(np.array(k if self.symmetric else genes, dtype=np.int64)))
        self.cache[k] = f
        if f > self.best:
            self.best, self.best_key = f, k
        self.history.append(HistoryRow(self.used + 1, k, f, self.best,
                                       time.perf_counter() - self.start))
        return f


# -- linkage learning ----------------------------------------------------------

def mutual_information(population: np.ndarray, alpha: int | None = None) -> np.ndarray:
    """Pairwise mutual information (nats) between loci of a categorical population."""
    pop = np.asarray(population, dtype=np.int64)
    if pop.ndim != 2 or pop.shape[0] == 0:
        raise ValueError("population must be a non-empty 2D array")
    alpha = alpha or int(pop.max())
    P, N = pop.shape
    onehot = np.zeros((P, N, alpha))
    onehot[np.arange(P)[:, None], np.arange(N)[None, :], pop - 1] = 1.0
    joint = np.einsum("pia,pjb->ijab", onehot, onehot) / P
    marg = onehot.mean(axis=0)  # N, alpha
    indep = marg[:, None, :, None] * marg[None, :, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(joint > 0, joint * np.log(joint / indep), 0.0)
    mi = terms.sum(axis=(2, 3))
    return np.maximum(mi, 0.0)


def _pair_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def learn_linkage(population, alpha: int | None = None) -> list[tuple[int, ...]]:
    """UPGMA linkage tree over loci by mutual information.

    Returns every non-root cluster (singletons included) as a tuple of
    0-based loci, ordered smallest first; equal sizes keep creation order.
    Ties in similarity merge the pair with the lowest indices.
    """
    pop = np.asarray(population)
    if pop.ndim != 2 or pop.shape[0] == 0:
        raise ValueError("learn_linkage needs a non-empty population")
    N = pop.shape[1]
    mi = mutual_information(pop, alpha)
    clusters: list[tuple[int, ...]] = [(i,) for i in range(N)]
    active = list(range(N))
    sim = {(i, j): mi[i, j] for i in range(N) for j in range(i + 1, N)}
    created = list(clusters)
    while len(active) > 1:
        best, pair = -math.inf, None
        for a_pos, a in enumerate(active):
            for b in active[a_pos + 1:]:
                s = sim[(a, b)]
                if s > best + 1e-12:
                    best, pair = s, (a, b)
        a, b = pair
        merged = tuple(sorted(clusters[a] + clusters[b]))
        new = len(clusters)
        clusters.append(merged)
        na, nb = len(clusters[a]), len(clusters[b])
        active = [c for c in active if c not in (a, b)]
        for c in active:
            sim[(c, new)] = (na * sim[_pair_key(a, c)] + nb * sim[_pair_key(b, c)]) / (na + nb)
        active.append(new)
        created.append(merged)
    non_root = created[:-1] if N > 1 else created
    return sorted(non_root, key=len)


# -- surrogate -----------------------------------------------------------------

def _hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, None, :] != b[None, :, :]).sum(axis=2)


def surrogate_predict(candidates, archive, k: int = 5, canonical: bool = True) -> np.ndarray:
    """Distance-weighted k-NN prediction under Hamming distance.

    ``archive`` holds ``(genes, fitness)`` pairs or objects with
    ``canonical_genes`` and ``fitness``.  Zero-distance neighbours return
    their own (mean) value exactly.
    """
    pairs = [(r.canonical_genes, r.fitness) if hasattr(r, "canonical_genes") else r
             for r in archive]
    if not pairs:
        raise ValueError("surrogate needs a non-empty archive")
    if k < 1:
        raise ValueError("k must be >= 1")
    prep = (lambda g: canonicalize(g)) if canonical else (lambda g: np.asarray(g))
    A = np.array([prep(g) for g, _ in pairs])
    y = np.array([f for _, f in pairs], dtype=np.float64)
    C = np.array([prep(g) for g in candidates])
    D = _hamming_matrix(C, A)
    kk = min(k, len(y))
    preds = np.empty(len(C))
    for i, row in enumerate(D):
        nn = np.argsort(row, kind="stable")[:kk]
        d = row[nn].astype(np.float64)
        if d[0] == 0:
            preds[i] = y[nn[d == 0]].mean()
        else:
            w = 1.0 / d
            preds[i] = float(np.dot(w, y[nn]) / w.sum())
    return preds


def surrogate_screen(candidates, archive, k: int = 5, screen_fraction: float = 0.5,
                     canonical: bool = True) -> list:
    """Keep the top ``screen_fraction`` of candidates by predicted fitness (best first)."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("surrogate_screen needs at least one candidate")
    if not 0 < screen_fraction <= 1:
        raise ValueError(f"screen_fraction must be in (0, 1], got {screen_fraction}")
    if screen_fraction == 1:
        return candidates
    preds = surrogate_predict(candidates, archive, k, canonical)
    n_keep = max(1, math.ceil(screen_fraction * len(candidates)))
    order = np.argsort(-preds, kind="stable")[:n_keep]
    return [candidates[i] for i in order]


# -- variation -------------------------------------------------------------------

def align_labels(donor: np.ndarray, target: np.ndarray, alpha: int) -> np.ndarray:
    """Relabel ``donor`` so that it agrees with ``target`` on as many loci as possible."""
    table = np.zeros((alpha, alpha), dtype=np.int64)
    np.add.at(table, (donor - 1, target - 1), 1)
    rows, cols = linear_sum_assignment(-table)
    mapping = np.empty(alpha, dtype=np.int64)
    mapping[rows] = cols + 1
    return mapping[donor - 1]


def gom_step(parent: np.ndarray, parent_fitness: float, donors: Sequence[np.ndarray],
             linkage: Sequence[Sequence[int]], fitness_fn: Callable, rng: np.random.Generator,
             symmetric: bool = False, alpha: int | None = None,
             surrogate: Callable | None = None) -> tuple[np.ndarray, float]:
    """One pass of gene-pool optimal mixing over every linkage set.

    For each set a random donor's genes are copied over that set; the change
    is kept when the fitness does not decrease.  ``surrogate`` (if given)
    maps a list of candidate genotypes to the subset worth evaluating, best
    first; then several donors are tried per set.
    """
    x = np.array(parent, dtype=np.int64)
    fx = parent_fitness
    donors = [np.asarray(d, dtype=np.int64) for d in donors]
    if not donors:
        return x, fx
    alpha = alpha or int(max(x.max(), max(d.max() for d in donors)))
    for subset in linkage:
        idx = np.asarray(subset, dtype=np.int64)
        if surrogate is None:
            order = [donors[i] for i in rng.permutation(len(donors))]
            candidates = []
            for d in order:
                if symmetric:
                    d = align_labels(d, x, alpha)
                if not np.array_equal(d[idx], x[idx]):
                    y = x.copy()
                    y[idx] = d[idx]
                    candidates.append(y)
                    break
        else:
            seen, candidates = set(), []
            for i in rng.permutation(len(donors)):
                d = align_labels(donors[i], x, alpha) if symmetric else donors[i]
                if np.array_equal(d[idx], x[idx]):
                    continue
                y = x.copy()
                y[idx] = d[idx]
                if tuple(y) not in seen:
                    seen.add(tuple(y))
                    candidates.append(y)
            if candidates:
                candidates = surrogate(candidates)
        for y in candidates:
            fy = fitness_fn(y)
            if fy >= fx:
                x, fx = y, fy
                break
    return x, fx


def hill_climb(x: np.ndarray, fx: float, alpha: int, fitness_fn: Callable,
               rng: np.random.Generator, min_subset_size: int = 0,
               symmetric: bool = False) -> tuple[np.ndarray, float]:
    """First-improvement local search over single-gene changes, to a local optimum."""
    x = x.copy()
    improved = True
    while improved:
        improved = False
        for i in rng.permutation(len(x)):
            for v in rng.permutation(np.arange(1, alpha + 1)):
                if v == x[i]:
                    continue
                y = x.copy()
                y[i] = v
                if min_subset_size and not is_feasible(y, alpha, min_subset_size):
                    continue
                if symmetric and tuple(canonicalize(y)) == tuple(canonicalize(x)):
                    continue
                fy = fitness_fn(y)
                if fy > fx:
                    x, fx, improved = y, fy, True
                    break
    return x, fx


# -- searchers -------------------------------------------------------------------

def _random_genotype(rng, n_genes: int, alpha: int, min_subset_size: int) -> np.ndarray:
    g = rng.integers(1, alpha + 1, size=n_genes)
    if min_subset_size:
        g = repair(g, alpha, min_subset_size, rng)
    return g


@dataclass
class _Level:
    members: list[np.ndarray] = field(default_factory=list)
    fitness: list[float] = field(default_factory=list)
    linkage: list[tuple[int, ...]] | None = None

    def add(self, x: np.ndarray, f: float, symmetric: bool, alpha: int) -> None:
        if symmetric and self.members:
            x = align_labels(x, self.members[0], alpha)
        self.members.append(x)
        self.fitness.append(f)
        self.linkage = None

    def tree(self, alpha: int) -> list[tuple[int, ...]]:
        if self.linkage is None:
            if len(self.members) >= 2:
                self.linkage = learn_linkage(np.array(self.members), alpha)
            else:
                self.linkage = [(i,) for i in range(len(self.members[0]))]
        return self.linkage


def _run_pyramid(ev: _Evaluator, cfg: OptimizerConfig, n_genes: int, alpha: int, rng):
    sym = cfg.label_symmetric
    levels: list[_Level] = []
    in_pyramid: set[tuple] = set()
    screen = None
    if cfg.surrogate == "knn":
        def screen(cands):
            archive = [(k, f) for k, f in ev.cache.items()]
            return surrogate_screen(cands, archive, cfg.surrogate_k, cfg.screen_fraction,
                                    canonical=sym)
    while True:
        x = _random_genotype(rng, n_genes, alpha, cfg.min_subset_size)
        fx = ev(x)
        if cfg.local_search:
            x, fx = hill_climb(x, fx, alpha, ev, rng, cfg.min_subset_size, sym)
        if ev.key(x) not in in_pyramid:
            if not levels:
                levels.append(_Level())
            levels[0].add(x, fx, sym, alpha)
            in_pyramid.add(ev.key(x))
        lvl = 0
        while lvl < len(levels):
            level = levels[lvl]
            before = fx
            donors = [m for m in level.members if ev.key(m) != ev.key(x)]
            x, fx = gom_step(x, fx, donors, level.tree(alpha), _feasible(ev, cfg, alpha), rng,
                             symmetric=sym, alpha=alpha, surrogate=screen)
            if fx > before and ev.key(x) not in in_pyramid:
                if lvl + 1 == len(levels):
                    levels.append(_Level())
                levels[lvl + 1].add(x, fx, sym, alpha)
                in_pyramid.add(ev.key(x))
            lvl += 1


def _feasible(ev: _Evaluator, cfg: OptimizerConfig, alpha: int) -> Callable:
    if not cfg.min_subset_size:
        return ev

    def f(y):
        if not is_feasible(y, alpha, cfg.min_subset_size):
            return -math.inf
        return ev(y)
    return f


def _run_random(ev: _Evaluator, cfg: OptimizerConfig, n_genes: int, alpha: int, rng):
    stale = 0
    while True:
        before = ev.used
        ev(_random_genotype(rng, n_genes, alpha, cfg.min_subset_size))
        stale = stale + 1 if ev.used == before else 0
        if stale > 10_000:  # search space exhausted
            return


def _run_hill_climber(ev: _Evaluator, cfg: OptimizerConfig, n_genes: int, alpha: int, rng):
    stale = 0
    while True:
        before = ev.used
        x = _random_genotype(rng, n_genes, alpha, cfg.min_subset_size)
        hill_climb(x, ev(x), alpha, ev, rng, cfg.min_subset_size, cfg.label_symmetric)
        stale = stale + 1 if ev.used == before else 0
        if stale > 1_000:
            return


_RUNNERS = {"gom_ea": _run_pyramid, "random_search": _run_random,
            "hill_climber": _run_hill_climber}


def optimize(cfg: OptimizerConfig, fitness_fn: Callable, n_genes: int, alpha: int,
             preload: Sequence[tuple[Sequence[int], float]] = ()) -> OptimizeResult:
    """Maximize ``fitness_fn`` over {1..alpha}^n_genes with at most ``eval_budget`` calls.

    ``preload`` seeds the cache with already-evaluated ``(genes, fitness)``
    pairs (e.g. a persisted archive); those cost nothing.
    """
    if cfg.eval_budget < 1:
        raise ConfigError(f"eval_budget must be >= 1, got {cfg.eval_budget}")
    cfg.validate(n_genes, alpha)
    rng = np.random.default_rng(cfg.seed)
    ev = _Evaluator(fitness_fn, cfg.eval_budget, cfg.label_symmetric, alpha, preload)
    try:
        _RUNNERS[cfg.algorithm](ev, cfg, n_genes, alpha, rng)
    except BudgetExhausted:
        pass
    if ev.best_key is None:
        raise RuntimeError("no genotype was evaluated")
    return OptimizeResult(np.array(ev.best_key, dtype=np.int64), ev.best, ev.history,
                          ev.used, list(ev.cache.items()))
