"""Multi-path segmentation networks trained per dataset partition, with partition search."""
from .dataset import Dataset, GeneratorConfig, Scan, generate_synthetic, split_dataset
from .errors import ConfigError, DataFormatError, ShapeError
from .estimators import MultiPathSegmenter, PartitionSearch
from .evaluation import ScoreReport, evaluate
from .experiment import ExperimentConfig, ResultRow, report, run_baseline, run_optimized
from .metrics import MetricConfig, combined_score, dice, surface_dice
from .network import MultiPathNet, TrainConfig, gradient_check, train
from .optimizer import OptimizerConfig, optimize
from .partition import PartitionFitness, canonicalize, repair

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataFormatError", "Dataset", "ExperimentConfig", "GeneratorConfig",
    "MetricConfig", "MultiPathNet", "MultiPathSegmenter", "OptimizerConfig", "PartitionFitness",
    "PartitionSearch", "ResultRow", "Scan", "ScoreReport", "ShapeError", "TrainConfig",
    "canonicalize", "combined_score", "dice", "evaluate", "generate_synthetic", "gradient_check",
    "optimize", "repair", "report", "run_baseline", "run_optimized", "split_dataset",
    "surface_dice", "train",
]
