"""scikit-learn style estimators over image arrays.

``X`` is an image stack shaped ``(n, H, W)``; ``y`` a binary mask stack of the
same shape.  Predictions keep every variant: ``predict`` returns
``(n, alpha, H, W)`` binary masks, and ``score`` is the best-of-alpha mean
combined score against ``y``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import Dataset, Scan
from .errors import ConfigError, ShapeError
from .evaluation import THRESHOLD, evaluate_masks
from .metrics import MetricConfig
from .network import MultiPathNet, TrainConfig, train
from .optimizer import OptimizerConfig, optimize
from .partition import PartitionFitness, as_genes, decode

__all__ = ["MultiPathSegmenter", "PartitionSearch", "check_images", "check_masks",
           "check_groups", "to_dataset"]


# -- input validation ------------------------------------------------------------

def check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[0] == 0:
        raise ShapeError(f"expected images shaped (n, H, W), got {X.shape}")
    if X.shape[1] % 4 or X.shape[2] % 4:
        raise ShapeError(f"image height and width must be multiples of 4, got {X.shape[1:]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    return X


def check_masks(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape:
        raise ShapeError(f"masks {y.shape} do not match images {X.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("masks must be binary (0/1)")
    return y.astype(np.uint8)


def check_groups(groups, n: int, alpha: int) -> np.ndarray:
    g = as_genes(groups, alpha)
    if g.size != n:
        raise ShapeError(f"groups has {g.size} entries for {n} samples")
    if np.bincount(g, minlength=alpha + 1)[1:].min() == 0:
        raise ConfigError("every decoder needs at least one sample (empty group)")
    return g


def to_dataset(X, y, split_tag: str = "train", spacing=(1.0, 1.0)) -> Dataset:
    X = check_images(X)
    y = check_masks(y, X)
    width = len(str(len(X) - 1))
    return Dataset(tuple(Scan(f"s{i:0{width}d}", X[i], y[i], spacing) for i in range(len(X))),
                   split_tag)


# -- estimators --------------------------------------------------------------------

class MultiPathSegmenter(BaseEstimator):
    """Shared-encoder network with ``alpha`` decoders, trained per sample group.

    ``fit(X, y, groups)`` gives decoder ``k`` the samples with ``groups == k``;
    without ``groups`` every decoder sees all samples (no partitioning).
    """

    def __init__(self, alpha=1, n_epochs=30, batch_size=4, learning_rate=1e-3,
                 init_seed=0, seed=0, threshold=THRESHOLD, tau_mm=2.0):
        self.alpha = alpha
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.init_seed = init_seed
        self.seed = seed
        self.threshold = threshold
        self.tau_mm = tau_mm

    def _train_cfg(self) -> TrainConfig:
        return TrainConfig(n_epochs=self.n_epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.seed)

    def fit(self, X, y, groups=None):
        X = check_images(X)
        y = check_masks(y, X)
        if self.alpha < 1:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        if groups is None:
            parts = [(X, y)] * self.alpha
        else:
            g = check_groups(groups, len(X), self.alpha)
            parts = [(X[idx], y[idx]) for idx in decode(g, self.alpha)]
        self.net_ = train(MultiPathNet(self.alpha, self.init_seed), parts, self._train_cfg())
        self.image_shape_ = X.shape[1:]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X)
        return np.stack(self.net_.forward(X), axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Best-of-alpha mean combined score."""
        X = check_images(X)
        y = check_masks(y, X)
        masks = self.predict(X)
        report = evaluate_masks(to_dataset(X, y, "test"), [list(m) for m in masks],
                                MetricConfig([self.tau_mm], self.tau_mm))
        return report.fitness


class PartitionSearch(BaseEstimator):
    """Finds the sample partition maximizing best-of-alpha validation score.

    ``fit(X, y, X_val, y_val)`` runs the search, then keeps a segmenter
    trained on the best partition as ``best_estimator_``.
    """

    def __init__(self, alpha=2, eval_budget=300, algorithm="gom_ea", local_search=True,
                 surrogate="off", min_subset_size=1, n_epochs=30, batch_size=4,
                 learning_rate=1e-3, init_seed=0, seed=0, threshold=THRESHOLD):
        self.alpha = alpha
        self.eval_budget = eval_budget
        self.algorithm = algorithm
        self.local_search = local_search
        self.surrogate = surrogate
        self.min_subset_size = min_subset_size
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.init_seed = init_seed
        self.seed = seed
        self.threshold = threshold

    def fit(self, X, y, X_val, y_val):
        train_set = to_dataset(X, y, "train")
        val_set = to_dataset(X_val, y_val, "validation")
        tcfg = TrainConfig(n_epochs=self.n_epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate)
        fit = PartitionFitness(train_set, val_set, self.alpha, tcfg, run_seed=self.seed,
                               init_seed=self.init_seed, min_subset_size=self.min_subset_size)
        ocfg = OptimizerConfig(algorithm=self.algorithm, eval_budget=self.eval_budget,
                               local_search=self.local_search, surrogate=self.surrogate,
                               min_subset_size=self.min_subset_size, seed=self.seed)
        result = optimize(ocfg, fit, len(train_set), self.alpha)
        self.best_genotype_ = result.best_genes
        self.best_fitness_ = result.best_fitness
        self.history_ = result.history
        self.n_evaluations_ = result.n_evaluations
        seg = MultiPathSegmenter(self.alpha, self.n_epochs, self.batch_size, self.learning_rate,
                                 self.init_seed, threshold=self.threshold)
        seg.net_ = fit.train_net(result.best_genes)
        seg.image_shape_ = train_set.images.shape[1:]
        self.best_estimator_ = seg
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "best_estimator_")
        return self.best_estimator_.predict(X)

    def score(self, X, y) -> float:
        check_is_fitted(self, "best_estimator_")
        return self.best_estimator_.score(X, y)
