"""Instance-matching average precision, KS agreement, and report assembly.

AP follows the 101-point interpolated convention: detections are sorted by
descending confidence (ties broken by larger mask area, then lower index),
matched greedily per patch against unmatched gold at the IoU threshold, and
the precision envelope is sampled on a fixed 101-point recall grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .morphometry import FEATURE_NAMES, FeatureRecord

RECALL_GRID = np.linspace(0.0, 1.0, 101)


class Detection(NamedTuple):
    patch_id: str
    mask: np.ndarray
    confidence: float | None = None


class GoldInstance(NamedTuple):
    patch_id: str
    mask: np.ndarray


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Per-detection TP/FP flags in confidence order for one evaluation.

    ``scores`` and ``areas`` are aligned with the flags so results from
    many patches can be pooled and re-sorted globally.
    """

    true_positives: np.ndarray
    scores: np.ndarray
    areas: np.ndarray
    num_gold: int
    iou_threshold: float

    @property
    def false_positives(self) -> np.ndarray:
        return ~self.true_positives


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask dimensions differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _sort_key(confidences, areas):
    # descending confidence, then larger area, then original index
    order = sorted(
        range(len(confidences)),
        key=lambda i: (-confidences[i], -areas[i], i),
    )
    return order


def match_masks(
    det_masks: Sequence[np.ndarray],
    det_confidences: Sequence[float | None],
    gold_masks: Sequence[np.ndarray],
    iou_threshold: float,
) -> MatchResult:
    """Greedy confidence-ordered matching of detections to gold masks.

    Each detection claims the unmatched gold mask of highest IoU at or
    above the threshold; IoU ties resolve to the lowest gold index.
    """
    confs = [1.0 if c is None else float(c) for c in det_confidences]
    areas = [int(np.count_nonzero(m)) for m in det_masks]
    order = _sort_key(confs, areas)
    taken = np.zeros(len(gold_masks), dtype=bool)
    tp = np.zeros(len(det_masks), dtype=bool)
    scores = np.empty(len(det_masks))
    out_areas = np.empty(len(det_masks))
    for rank, i in enumerate(order):
        scores[rank] = confs[i]
        out_areas[rank] = areas[i]
        best_iou = 0.0
        best_j = -1
        for j, gm in enumerate(gold_masks):
            if taken[j]:
                continue
            iou = mask_iou(det_masks[i], gm)
            if iou >= iou_threshold and iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            tp[rank] = True
    return MatchResult(tp, scores, out_areas, len(gold_masks), iou_threshold)


def _ap_from_pooled(tp_flags: np.ndarray, num_gold: int) -> float:
    """101-point interpolated AP (in percent) from globally sorted flags."""
    if num_gold <= 0:
        raise ValueError("average precision is undefined without gold instances")
    if len(tp_flags) == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum(~tp_flags)
    recall = tp_cum / num_gold
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision achievable at or beyond each rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean() * 100.0)


def average_precision(
    detections: Sequence[Detection],
    gold: Sequence[GoldInstance],
    iou_threshold: float,
) -> float:
    """Class-level AP (percentage) over any number of patches."""
    if not gold:
        raise ValueError("average precision is undefined without gold instances")
    gold_by_patch: dict[str, list[np.ndarray]] = {}
    for g in gold:
        gold_by_patch.setdefault(g.patch_id, []).append(g.mask)

    det_by_patch: dict[str, list[Detection]] = {}
    for d in detections:
        det_by_patch.setdefault(d.patch_id, []).append(d)

    flags: list[np.ndarray] = []
    scores: list[np.ndarray] = []
    areas: list[np.ndarray] = []
    for patch_id, dets in det_by_patch.items():
        result = match_masks(
            [d.mask for d in dets],
            [d.confidence for d in dets],
            gold_by_patch.get(patch_id, []),
            iou_threshold,
        )
        flags.append(result.true_positives)
        scores.append(result.scores)
        areas.append(result.areas)
    if flags:
        all_flags = np.concatenate(flags)
        all_scores = np.concatenate(scores)
        all_areas = np.concatenate(areas)
        order = np.lexsort((np.arange(len(all_flags)), -all_areas, -all_scores))
        all_flags = all_flags[order]
    else:
        all_flags = np.zeros(0, dtype=bool)
    return _ap_from_pooled(all_flags, sum(len(v) for v in gold_by_patch.values()))


def ks_statistic(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    """Two-sample Kolmogorov-Smirnov statistic D = sup |F_a - F_b|."""
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("KS statistic needs non-empty samples")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / len(a)
    fb = np.searchsorted(b, pooled, side="right") / len(b)
    return float(np.abs(fa - fb).max())


@dataclass(frozen=True)
class EvalReport:
    """Per-class AP values plus per-feature KS agreement with gold."""

    ap50_nucleus: float
    ap75_nucleus: float
    ap50_cell: float
    ap75_cell: float
    ks: dict[str, float]
    mean_d: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "average_precision": {
                    "ap50_nucleus": self.ap50_nucleus,
                    "ap75_nucleus": self.ap75_nucleus,
                    "ap50_cell": self.ap50_cell,
                    "ap75_cell": self.ap75_cell,
                },
                "kolmogorov_smirnov": self.ks,
                "mean_d": self.mean_d,
            },
            indent=2,
            sort_keys=True,
        ) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        ap = d["average_precision"]
        return cls(
            ap50_nucleus=ap["ap50_nucleus"],
            ap75_nucleus=ap["ap75_nucleus"],
            ap50_cell=ap["ap50_cell"],
            ap75_cell=ap["ap75_cell"],
            ks=dict(d["kolmogorov_smirnov"]),
            mean_d=d["mean_d"],
        )


def feature_ks(features_a: Iterable[FeatureRecord], features_b: Iterable[FeatureRecord]) -> dict[str, float]:
    """KS statistic per feature between two pooled feature populations."""
    rows_a = [rec.values() for rec in features_a]
    rows_b = [rec.values() for rec in features_b]
    if not rows_a or not rows_b:
        raise ValueError("feature KS needs non-empty populations")
    arr_a = np.asarray(rows_a)
    arr_b = np.asarray(rows_b)
    return {
        name: ks_statistic(arr_a[:, k], arr_b[:, k]) for k, name in enumerate(FEATURE_NAMES)
    }


def build_report(
    pred_nucleus: Sequence[Detection],
    pred_cell: Sequence[Detection],
    gold_nucleus: Sequence[GoldInstance],
    gold_cell: Sequence[GoldInstance],
    features_pred: Sequence[FeatureRecord],
    features_gold: Sequence[FeatureRecord],
) -> EvalReport:
    """Assemble the full report: four APs, 17 KS statistics, and their mean."""
    ks = feature_ks(features_pred, features_gold)
    mean_d = float(np.mean(list(ks.values())))
    return EvalReport(
        ap50_nucleus=average_precision(pred_nucleus, gold_nucleus, 0.50),
        ap75_nucleus=average_precision(pred_nucleus, gold_nucleus, 0.75),
        ap50_cell=average_precision(pred_cell, gold_cell, 0.50),
        ap75_cell=average_precision(pred_cell, gold_cell, 0.75),
        ks=ks,
        mean_d=mean_d,
    )


# Reference results for the trained models on this benchmark, kept for
# side-by-side display in reports. These are recorded constants, not
# values this package can recompute.
REFERENCE_AP: dict[str, dict[str, float]] = {
    "QuPath Default": {
        "ap50_nucleus": 22.95, "ap75_nucleus": 6.85, "ap50_cell": 11.12, "ap75_cell": 0.28,
    },
    "QuPath Finetuned": {
        "ap50_nucleus": 35.24, "ap75_nucleus": 11.07, "ap50_cell": 19.46, "ap75_cell": 0.91,
    },
    "Cellpose": {
        "ap50_nucleus": 48.35, "ap75_nucleus": 23.84, "ap50_cell": 31.85, "ap75_cell": 5.61,
    },
    "StarDist": {
        "ap50_nucleus": 70.36, "ap75_nucleus": 47.24, "ap50_cell": 45.33, "ap75_cell": 2.32,
    },
    "Cyto R-CNN": {
        "ap50_nucleus": 78.32, "ap75_nucleus": 42.54, "ap50_cell": 58.65, "ap75_cell": 11.56,
    },
}

REFERENCE_MEAN_D: dict[str, float] = {
    "QuPath Default": 0.22,
    "QuPath Finetuned": 0.25,
    "StarDist": 0.25,
    "Cellpose": 0.23,
    "Cyto R-CNN": 0.15,
}


def format_ap_table(rows: dict[str, dict[str, float]]) -> str:
    """Fixed-width text table of AP values, one row per model."""
    header = f"{'Model':<24}{'AP50 Nucleus':>14}{'AP75 Nucleus':>14}{'AP50 Cell':>12}{'AP75 Cell':>12}"
    lines = [header, "-" * len(header)]
    for name, vals in rows.items():
        lines.append(
            f"{name:<24}"
            f"{vals['ap50_nucleus']:>13.2f}%"
            f"{vals['ap75_nucleus']:>13.2f}%"
            f"{vals['ap50_cell']:>11.2f}%"
            f"{vals['ap75_cell']:>11.2f}%"
        )
    return "\n".join(lines) + "\n"


def format_report(report: EvalReport, model_name: str, include_reference: bool = True) -> str:
    """Human-readable report with the evaluated model next to the reference rows."""
    rows: dict[str, dict[str, float]] = {}
    if include_reference:
        rows.update(REFERENCE_AP)
    rows[model_name] = {
        "ap50_nucleus": report.ap50_nucleus,
        "ap75_nucleus": report.ap75_nucleus,
        "ap50_cell": report.ap50_cell,
        "ap75_cell": report.ap75_cell,
    }
    parts = [format_ap_table(rows), ""]
    parts.append(f"Kolmogorov-Smirnov D per feature for {model_name}:")
    for name in FEATURE_NAMES:
        parts.append(f"  {name:<22}{report.ks[name]:.4f}")
    parts.append(f"  {'mean D':<22}{report.mean_d:.4f}")
    if include_reference:
        ref = ", ".join(f"{k}: {v:.2f}" for k, v in REFERENCE_MEAN_D.items())
        parts.append(f"Reference mean D: {ref}")
    return "\n".join(parts) + "\n"
