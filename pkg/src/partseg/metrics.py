"""Overlap and boundary metrics for binary masks.

Surface Dice treats the boundary of a mask as the set of centres of its
pixels that have at least one 4-neighbour outside the mask (pixels on the
edge of the grid count as boundary).  Distances are Euclidean in millimetres.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .dataset import row_bands
from .errors import ConfigError, ShapeError

REGIONS = ("base", "mid", "apex")
BRUTE_FORCE_MAX_PIXELS = 64 * 64


@dataclass
class MetricConfig:
    tolerances_mm: list[float] = field(default_factory=lambda: [2.0, 4.0])
    combined_tolerance_mm: float = 2.0

    def __post_init__(self):
        self.tolerances_mm = [float(t) for t in self.tolerances_mm]
        if not self.tolerances_mm or min(self.tolerances_mm) <= 0:
            raise ConfigError(f"tolerances_mm must be positive, got {self.tolerances_mm}")
        if self.combined_tolerance_mm not in self.tolerances_mm:
            raise ConfigError(
                f"combined_tolerance_mm ({self.combined_tolerance_mm}) must be one of "
                f"tolerances_mm {self.tolerances_mm}")


@dataclass(frozen=True)
class RegionSplit:
    region: str
    row_range: tuple[int, int]


def _pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    ref = np.asarray(ref).astype(bool)
    if pred.shape != ref.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    return pred, ref


def dice(pred, ref) -> float:
    pred, ref = _pair(pred, ref)
    total = int(pred.sum()) + int(ref.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, ref).sum()) / total


def boundary(mask) -> np.ndarray:
    """Boolean grid of boundary pixels (4-connectivity, grid edge counts as outside)."""
    mask = np.asarray(mask).astype(bool)
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                   border_value=0)
    return mask & ~inner


def _within(src: np.ndarray, dst: np.ndarray, spacing, tau: float, method: str) -> int:
    """How many boundary points of ``src`` lie within ``tau`` mm of boundary ``dst``."""
    if method == "edt":
        dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
        return int((dist[src] <= tau).sum())
    a = np.argwhere(src) * np.asarray(spacing, dtype=np.float64)
    b = np.argwhere(dst) * np.asarray(spacing, dtype=np.float64)
    d2 = cdist(a, b, "sqeuclidean").min(axis=1)
    return int((d2 <= tau * tau).sum())


def surface_dice(pred, ref, spacing=(1.0, 1.0), tau_mm: float = 2.0,
                 method: str = "auto") -> float:
    """Symmetric surface Dice at tolerance ``tau_mm``.

    ``method`` is ``"brute"`` (pairwise distances), ``"edt"`` (Euclidean
    distance transform) or ``"auto"``, which uses brute force up to 64x64.
    """
    pred, ref = _pair(pred, ref)
    if not tau_mm > 0:
        raise ConfigError(f"tau_mm must be positive, got {tau_mm}")
    has_p, has_r = pred.any(), ref.any()
    if not has_p and not has_r:
        return 1.0
    if not has_p or not has_r:
        return 0.0
    if method == "auto":
        method = "brute" if pred.size <= BRUTE_FORCE_MAX_PIXELS else "edt"
    spacing = tuple(float(s) for s in spacing)
    bp, br = boundary(pred), boundary(ref)
    hits = _within(bp, br, spacing, tau_mm, method) + _within(br, bp, spacing, tau_mm, method)
    return hits / (int(bp.sum()) + int(br.sum()))


def combined_score(pred, ref, spacing=(1.0, 1.0), cfg: MetricConfig | None = None) -> float:
    cfg = cfg or MetricConfig()
    return 0.5 * (dice(pred, ref) + surface_dice(pred, ref, spacing, cfg.combined_tolerance_mm))


def region_split(ref) -> list[RegionSplit]:
    """Base/mid/apex row bands of the reference's bounding extent (top to bottom)."""
    ref = np.asarray(ref).astype(bool)
    rows = np.flatnonzero(ref.any(axis=1))
    if rows.size == 0:
        raise ValueError("region_split needs a non-empty reference mask")
    bands = row_bands(int(rows[0]), int(rows[-1]))
    return [RegionSplit(name, band) for name, band in zip(REGIONS, bands)]


def region_metrics(pred, ref, spacing=(1.0, 1.0), tau_mm: float = 2.0
                   ) -> dict[str, dict[str, float]]:
    """Dice and surface Dice restricted to each band's rows."""
    pred, ref = _pair(pred, ref)
    out = {}
    for split in region_split(ref):
        lo, hi = split.row_range
        p, r = pred[lo:hi], ref[lo:hi]
        out[split.region] = {"dice": dice(p, r), "sdsc": surface_dice(p, r, spacing, tau_mm)}
    return out


def score_pair(pred, ref, spacing=(1.0, 1.0), cfg: MetricConfig | None = None) -> dict:
    """All per-pair values: dice, sdsc per tolerance, combined, and per-region values."""
    cfg = cfg or MetricConfig()
    pred, ref = _pair(pred, ref)
    row = {"dice": dice(pred, ref)}
    for tau in cfg.tolerances_mm:
        row[f"sdsc_{tau:g}mm"] = surface_dice(pred, ref, spacing, tau)
    row["combined"] = 0.5 * (row["dice"] + row[f"sdsc_{cfg.combined_tolerance_mm:g}mm"])
    if ref.any():
        regions = region_metrics(pred, ref, spacing, cfg.combined_tolerance_mm)
        for name in REGIONS:
            row[f"{name}_dice"] = regions[name]["dice"]
            row[f"{name}_sdsc_{cfg.combined_tolerance_mm:g}mm"] = regions[name]["sdsc"]
    else:
        for name in REGIONS:
            row[f"{name}_dice"] = float("nan")
            row[f"{name}_sdsc_{cfg.combined_tolerance_mm:g}mm"] = float("nan")
    return row
