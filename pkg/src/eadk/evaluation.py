"""COCO-style detection metrics: AP at IoU 0.50:0.95, 0.50 and 0.75.

Conventions: greedy score-ordered matching, 101-point interpolated AP,
no area buckets and no crowd regions.  A class with neither ground truth
nor detections is skipped; one with detections but no ground truth
scores 0.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .detector import extract_detections, forward
from .geometry import box_iou, cxcywh_to_xyxy

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
METRICS = ("map_5095", "map_50", "map_75")


@dataclass
class Detection:
    image: int
    cls: int
    score: float
    box: np.ndarray  # corner form


@dataclass
class EvalSummary:
    map_5095: float
    map_50: float
    map_75: float
    per_class: dict = field(default_factory=dict)  # class -> {metric: AP}
    num_detections: int = 0
    num_ground_truth: int = 0

    def as_dict(self):
        return {m: getattr(self, m) for m in METRICS}


@dataclass
class RunAggregate:
    mean: dict
    std: dict
    n_runs: int


def match_detections(det_boxes, det_scores, gt_boxes, iou_thr):
    """TP flags for one image and class; detections are sorted here by score (stable)."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable")
    flags = np.zeros(len(order), dtype=bool)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(order) == 0 or len(gt_boxes) == 0:
        return flags
    ious = box_iou(det_boxes[order], gt_boxes)
    matched = kernels.greedy_match(ious, float(iou_thr))
    flags[order] = matched >= 0
    return flags


def average_precision(flags, scores, n_gt):
    """101-point interpolated AP; None when the class has nothing to score."""
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0:
        return 0.0 if len(flags) else None
    if len(flags) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    points = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(points.mean())


def evaluate(dets_by_image, gts_by_image, num_classes):
    """Score detections against ground truth over a set of images.

    ``dets_by_image[i]`` is a list of ``(class, score, xyxy box)``;
    ``gts_by_image[i]`` is ``(xyxy boxes (M, 4), classes (M,))``.
    """
    per_class = {}
    n_det = sum(len(d) for d in dets_by_image)
    n_gt = sum(len(g[1]) for g in gts_by_image)
    table = np.full((num_classes, len(IOU_THRESHOLDS)), np.nan)
    for c in range(num_classes):
        class_gt = 0
        per_image = []
        for dets, (gboxes, gcls) in zip(dets_by_image, gts_by_image):
            gboxes = np.asarray(gboxes, dtype=np.float64).reshape(-1, 4)
            gmask = np.asarray(gcls) == c
            class_gt += int(gmask.sum())
            mine = [d for d in dets if d[0] == c]
            boxes = np.array([d[2] for d in mine], dtype=np.float64).reshape(-1, 4)
            scores = np.array([d[1] for d in mine], dtype=np.float64)
            order = np.argsort(-scores, kind="stable")
            per_image.append((boxes[order], scores[order], gboxes[gmask]))
        scores_all = np.concatenate([p[1] for p in per_image]) if per_image else np.zeros(0)
        for k, thr in enumerate(IOU_THRESHOLDS):
            flags = np.concatenate(
                [match_detections(b, s, g, thr) for b, s, g in per_image]
            ) if per_image else np.zeros(0, dtype=bool)
            ap = average_precision(flags, scores_all, class_gt)
            if ap is not None:
                table[c, k] = ap
        if not np.all(np.isnan(table[c])):
            per_class[c] = _summarize_row(table[c])
    valid = ~np.isnan(table[:, 0])
    if not valid.any():
        return EvalSummary(0.0, 0.0, 0.0, per_class, n_det, n_gt)
    means = table[valid].mean(axis=0)
    return EvalSummary(float(means.mean()), float(means[0]), float(means[5]), per_class, n_det, n_gt)


def _summarize_row(row):
    return {"map_5095": float(row.mean()), "map_50": float(row[0]), "map_75": float(row[5])}


def aggregate_runs(summaries):
    """Mean and population standard deviation of each metric across runs."""
    if not summaries:
        raise ValueError("need at least one run to aggregate")
    vals = {m: np.array([s[m] if isinstance(s, dict) else getattr(s, m) for s in summaries]) for m in METRICS}
    return RunAggregate(
        {m: float(v.mean()) for m, v in vals.items()},
        {m: float(v.std()) for m, v in vals.items()},
        len(summaries),
    )


# -- glue for detector outputs ---------------------------------------------
def split_ground_truth(split):
    """Per-image (xyxy boxes, classes) from a loaded Split."""
    return [(cxcywh_to_xyxy(b) if len(b) else np.zeros((0, 4)), c) for b, c in zip(split.boxes, split.classes)]


def detections_to_xyxy(dets):
    return [(c, s, cxcywh_to_xyxy(np.clip(b, 0.0, None))) for c, s, b in dets]


# -- CSV ---------------------------------------------------------------------
SUMMARY_HEADER = ["split", "shots", "run_seed", "map_5095", "map_50", "map_75"]
AGGREGATE_HEADER = ["metric", "mean", "std", "n_runs"]


def append_csv(path, header, rows):
    """Append rows, writing the header only when the file is new or empty."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def _fmt(x):
    return f"{x:.6f}" if isinstance(x, float) else x


def aggregate_rows(agg):
    return [[m, agg.mean[m], agg.std[m], agg.n_runs] for m in METRICS]


def predict(weights, table, images, batch_size=25, score_thr=0.0, max_dets=100):
    """Detections (class, score, cxcywh) for each image, computed without taping."""
    out = []
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            res = forward(images[start:start + batch_size], table, weights)
            for b in range(len(res)):
                out.append(extract_detections(res.probs.data[b], res.boxes.data[b], table.layout,
                                              score_thr, max_dets))
    return out


def evaluate_model(weights, table, split, batch_size=25):
    dets = predict(weights, table, split.images, batch_size)
    return evaluate([detections_to_xyxy(d) for d in dets], split_ground_truth(split), table.num_classes)
