"""Point-level action-start detection AP/mAP under temporal offsets.

A prediction counts as a true positive only when its class is correct and
its absolute temporal offset to an unmatched same-video ground truth is
strictly smaller than the evaluation threshold. At most one detection may
match any ground truth. Predictions are matched greedily in rank order:
descending score, ties broken by earlier time and then video id; each
prediction takes the closest still-unmatched compatible ground truth, ties
on distance going to the earlier ground truth.

AP at depth X averages precision at the true positives whose cumulative
recall stays within X, normalized by X * num_gt so a run that is perfect
up to recall X scores 1. Depth 1 is standard non-interpolated AP.
"""

from __future__ import annotations

import csv
from typing import Sequence

import numpy as np

from .core import (ASGroundTruth, ASPrediction, ClassCounts, DataError,
                   EvalConfig, EvalReport)


def rank_predictions(preds: Sequence[ASPrediction]) -> list[ASPrediction]:
    """Score-descending order with the documented deterministic tie-break."""
    return sorted(preds, key=lambda p: (-p.score, p.time, p.video_id))


def match_predictions(preds: Sequence[ASPrediction],
                      gts: Sequence[ASGroundTruth],
                      offset: float) -> np.ndarray:
    """TP/FP flags for the predictions, in rank order."""
    ranked = rank_predictions(preds)
    by_video: dict[tuple[str, int], list[int]] = {}
    for j, gt in enumerate(gts):
        by_video.setdefault((gt.video_id, gt.action_class), []).append(j)
    used = [False] * len(gts)
    flags = np.zeros(len(ranked), dtype=bool)
    for i, p in enumerate(ranked):
        best_j = -1
        best_key = None
        for j in by_video.get((p.video_id, p.action_class), ()):
            if used[j]:
                continue
            dist = abs(p.time - gts[j].as_time)
            if dist >= offset:  # strictly smaller than the threshold
                continue
            key = (dist, gts[j].as_time, j)
            if best_key is None or key < best_key:
                best_key = key
                best_j = j
        if best_j >= 0:
            used[best_j] = True
            flags[i] = True
    return flags


def average_precision(flags: Sequence[bool], num_gt: int,
                      ap_depth: float = 1.0) -> float:
    """AP from ranked TP/FP flags; zero when there is nothing to recall."""
    if not 0.0 < ap_depth <= 1.0:
        raise DataError("ap_depth must be in (0, 1]")
    if num_gt <= 0:
        return 0.0
    limit = ap_depth * num_gt + 1e-9  # tolerate recall==depth in float
    tp = 0
    total = 0.0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            tp += 1
            if tp <= limit:
                total += tp / rank
    return total / (ap_depth * num_gt)


def evaluate(preds: Sequence[ASPrediction], gts: Sequence[ASGroundTruth],
             cfg: EvalConfig, num_classes: int) -> EvalReport:
    """Per-class AP at every offset, mAP per offset, and the average mAP.

    Ambiguous ground truths are dropped up front. Classes with zero ground
    truths keep an AP of 0 in the report but are excluded from the mAP
    averages. Predictions are pooled across videos within each class.
    """
    for p in preds:
        if not 1 <= p.action_class <= num_classes:
            raise DataError(f"prediction has unknown class {p.action_class}")
    for gt in gts:
        if not 1 <= gt.action_class <= num_classes:
            raise DataError(f"ground truth has unknown class {gt.action_class}")
    gts = [g for g in gts if not g.ambiguous]
    preds_by_class: dict[int, list[ASPrediction]] = {}
    gts_by_class: dict[int, list[ASGroundTruth]] = {}
    for p in preds:
        preds_by_class.setdefault(p.action_class, []).append(p)
    for g in gts:
        gts_by_class.setdefault(g.action_class, []).append(g)

    per_class_ap = {}
    counts = {}
    map_per_offset = {}
    for off in cfg.offset_thresholds:
        aps = []
        for c in range(1, num_classes + 1):
            c_preds = preds_by_class.get(c, [])
            c_gts = gts_by_class.get(c, [])
            flags = match_predictions(c_preds, c_gts, off)
            ap = average_precision(flags, len(c_gts), cfg.ap_depth)
            per_class_ap[(c, off)] = ap
            tp = int(flags.sum())
            counts[(c, off)] = ClassCounts(num_gt=len(c_gts), tp=tp,
                                           fp=len(flags) - tp)
            if c_gts:
                aps.append(ap)
        map_per_offset[off] = float(np.mean(aps)) if aps else 0.0
    average_map = float(np.mean([map_per_offset[o]
                                 for o in cfg.offset_thresholds]))
    return EvalReport(per_class_ap=per_class_ap,
                      map_per_offset=map_per_offset,
                      average_map=average_map, counts=counts)


def pr_curve_rows(preds: Sequence[ASPrediction],
                  gts: Sequence[ASGroundTruth], cfg: EvalConfig,
                  num_classes: int) -> list[tuple[float, float, float]]:
    """(offset, recall, precision) walking the pooled ranked predictions.

    Flags come from per-class matching; the walk pools all classes in one
    global rank order against the total ground-truth count.
    """
    gts = [g for g in gts if not g.ambiguous]
    total_gt = len(gts)
    rows = []
    for off in cfg.offset_thresholds:
        scored: list[tuple[ASPrediction, bool]] = []
        for c in range(1, num_classes + 1):
            c_preds = [p for p in preds if p.action_class == c]
            c_gts = [g for g in gts if g.action_class == c]
            flags = match_predictions(c_preds, c_gts, off)
            scored.extend(zip(rank_predictions(c_preds), flags.tolist()))
        scored.sort(key=lambda pf: (-pf[0].score, pf[0].time, pf[0].video_id))
        tp = 0
        for rank, (_, flag) in enumerate(scored, start=1):
            tp += int(flag)
            recall = tp / total_gt if total_gt else 0.0
            rows.append((off, recall, tp / rank))
    return rows


def save_curves(path, rows: Sequence[tuple[float, float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["offset", "recall", "precision"])
        for off, recall, precision in rows:
            writer.writerow([f"{off:g}", f"{recall:.6f}", f"{precision:.6f}"])


REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["per_class_ap", "map_per_offset", "average_map", "counts"],
    "additionalProperties": False,
    "properties": {
        "per_class_ap": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {"type": "number",
                                         "minimum": 0, "maximum": 1},
            },
        },
        "map_per_offset": {
            "type": "object",
            "additionalProperties": {"type": "number",
                                     "minimum": 0, "maximum": 1},
        },
        "average_map": {"type": "number", "minimum": 0, "maximum": 1},
        "counts": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": {
                    "type": "object",
                    "required": ["num_gt", "tp", "fp"],
                    "additionalProperties": False,
                    "properties": {
                        "num_gt": {"type": "integer", "minimum": 0},
                        "tp": {"type": "integer", "minimum": 0},
                        "fp": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
    },
}
