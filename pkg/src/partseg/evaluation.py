"""Best-of-alpha scoring of a multi-path network over an evaluation set.

For every scan the network produces one mask per decoder; each is scored
against the reference and the variant with the highest combined score is
kept (ties go to the lowest index).  Aggregates are plain means of the kept
per-scan values.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .metrics import MetricConfig, score_pair

SCHEMA_VERSION = 1
THRESHOLD = 0.5


@dataclass
class ScanScore:
    scan_id: str
    variants: list[dict]
    variant_hashes: list[str]
    selected_variant: int  # 1-based
    selected: dict
    best_by_dice: int
    best_by_sdsc: int


@dataclass
class ScoreReport:
    per_scan: list[ScanScore]
    aggregate: dict = field(default_factory=dict)
    threshold: float = THRESHOLD
    schema_version: int = SCHEMA_VERSION

    @property
    def selected_scores(self) -> dict[str, float]:
        return {s.scan_id: s.selected["combined"] for s in self.per_scan}

    @property
    def fitness(self) -> float:
        return self.aggregate["combined"]

    def to_jsonl(self) -> str:
        lines = []
        for s in self.per_scan:
            rec = {"schema_version": self.schema_version, "threshold": self.threshold}
            rec.update(asdict(s))
            lines.append(json.dumps(rec, sort_keys=True, default=_jsonable))
        return "\n".join(lines) + "\n"

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        keys = ["schema_version", "n_scans"] + list(self.aggregate)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(keys)
        row = {"schema_version": self.schema_version, "n_scans": len(self.per_scan),
               **self.aggregate}
        writer.writerow([_fmt(row[k]) for k in keys])
        return buf.getvalue()

    def save(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        jl, agg = stem.with_suffix(".jsonl"), stem.with_suffix(".csv")
        jl.write_text(self.to_jsonl())
        agg.write_text(self.aggregate_csv())
        return jl, agg


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"cannot serialize {type(v)}")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def mask_hash(mask: np.ndarray) -> str:
    m = np.ascontiguousarray(mask, dtype=np.uint8)
    return hashlib.sha1(str(m.shape).encode() + m.tobytes()).hexdigest()


def _argmax_first(values: Sequence[float]) -> int:
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return best


def score_variants(scan_id: str, masks: Sequence[np.ndarray], ref: np.ndarray, spacing,
                   cfg: MetricConfig) -> ScanScore:
    rows = [score_pair(m, ref, spacing, cfg) for m in masks]
    sdsc_key = f"sdsc_{cfg.combined_tolerance_mm:g}mm"
    sel = _argmax_first([r["combined"] for r in rows])
    return ScanScore(
        scan_id=scan_id,
        variants=rows,
        variant_hashes=[mask_hash(m) for m in masks],
        selected_variant=sel + 1,
        selected=dict(rows[sel]),
        best_by_dice=_argmax_first([r["dice"] for r in rows]) + 1,
        best_by_sdsc=_argmax_first([r[sdsc_key] for r in rows]) + 1,
    )


def aggregate(per_scan: Sequence[ScanScore]) -> dict:
    keys = list(per_scan[0].selected)
    out = {}
    for k in keys:
        vals = [s.selected[k] for s in per_scan]
        out[k] = float(np.mean(vals)) if not all(np.isnan(vals)) else float("nan")
    return out


def evaluate_masks(eval_set: Dataset, variant_masks: Sequence[Sequence[np.ndarray]],
                   cfg: MetricConfig | None = None) -> ScoreReport:
    """Best-of report from precomputed binary masks, ``variant_masks[scan][variant]``."""
    cfg = cfg or MetricConfig()
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    if len(variant_masks) != len(eval_set):
        raise ValueError(f"{len(variant_masks)} mask sets for {len(eval_set)} scans")
    per_scan = [score_variants(s.id, masks, s.reference_mask, s.spacing, cfg)
                for s, masks in zip(eval_set, variant_masks)]
    return ScoreReport(per_scan, aggregate(per_scan))


def predict_masks(net, eval_set: Dataset, threshold: float = THRESHOLD
                  ) -> list[list[np.ndarray]]:
    probs = net.forward(eval_set.images)  # alpha arrays of (B, H, W)
    return [[(p[b] > threshold).astype(np.uint8) for p in probs]
            for b in range(len(eval_set))]


def evaluate(net, eval_set: Dataset, cfg: MetricConfig | None = None,
             threshold: float = THRESHOLD) -> ScoreReport:
    if len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    report = evaluate_masks(eval_set, predict_masks(net, eval_set, threshold), cfg)
    report.threshold = threshold
    return report


def best_of_monotonicity_check(report_k: ScoreReport, report_k_plus: ScoreReport) -> bool:
    """True iff no scan's best-of score dropped when variants were added.

    Requires that every scan's variant set in ``report_k_plus`` contains the
    variants of ``report_k`` (compared by mask fingerprint).
    """
    ids_k = [s.scan_id for s in report_k.per_scan]
    ids_p = [s.scan_id for s in report_k_plus.per_scan]
    if ids_k != ids_p:
        raise ValueError("reports cover different scans")
    for a, b in zip(report_k.per_scan, report_k_plus.per_scan):
        missing = set(a.variant_hashes) - set(b.variant_hashes)
        if missing:
            raise ValueError(f"scan {a.scan_id}: second report lacks {len(missing)} variant(s) "
                             "of the first; it must be a superset")
    return all(b.selected["combined"] >= a.selected["combined"]
               for a, b in zip(report_k.per_scan, report_k_plus.per_scan))
