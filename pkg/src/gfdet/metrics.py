"""Miss rate vs. false positives per image, and its log average.

Detections are matched greedily in descending score order, each consuming at
most one unmatched ground truth at or above the IoU threshold.  Because a
detection's outcome never depends on lower-scored detections, matching runs
once and every score threshold is a prefix count.  Ignore-flagged ground
truths are neither misses nor matches: detections landing on them are
dropped silently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .detection import Box, Detection, boxes_to_array, iou_matrix


@dataclass
class ImageMatches:
    """One image's matching outcome: scores and TP flags in greedy order."""

    n_gt: int
    scores: np.ndarray
    tp: np.ndarray


@dataclass
class EvalResult:
    curve: list[tuple[float, float]]
    log_avg_miss_rate: float
    per_image: list[tuple[int, int, int]]  # (tp, fp, fn) with every detection kept


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[Box],
    iou_threshold: float = 0.5,
    ignore: Sequence[bool] | None = None,
) -> ImageMatches:
    """Greedy per-image matching, descending score (index breaks ties).

    A detection takes the unmatched real gt of highest IoU >= threshold
    (lowest gt index on IoU ties); failing that, overlap with any ignored gt
    drops it; otherwise it is a false positive.
    """
    flags = (np.array(list(ignore), dtype=bool) if ignore is not None
             else np.zeros(len(gts), dtype=bool))
    if flags.shape[0] != len(gts):
        raise ValueError("ignore flags must align with gts")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    n_real = int((~flags).sum())
    if not dets:
        return ImageMatches(n_real, np.empty(0), np.empty(0, dtype=bool))
    m = (
        iou_matrix(boxes_to_array([d.box for d in dets]), boxes_to_array(gts))
        if gts else np.zeros((len(dets), 0))
    )
    taken = np.zeros(len(gts), dtype=bool)
    scores, tp = [], []
    for i in order:
        row = m[i]
        best, best_iou = -1, 0.0
        for g in range(len(gts)):
            if flags[g] or taken[g] or row[g] < iou_threshold:
                continue
            if best == -1 or row[g] > best_iou:
                best, best_iou = g, row[g]
        if best >= 0:
            taken[best] = True
            scores.append(dets[i].score)
            tp.append(True)
        elif flags.any() and (row[flags] >= iou_threshold).any():
            continue  # landed on an ignore region: dropped
        else:
            scores.append(dets[i].score)
            tp.append(False)
    return ImageMatches(n_real, np.array(scores), np.array(tp, dtype=bool))


def miss_rate_fppi_curve(matches: Sequence[ImageMatches]) -> list[tuple[float, float]]:
    """Lower-envelope (fppi, miss_rate) points over all distinct score cuts.

    fppi = FP / num_images and miss_rate = FN / total_gts at each threshold;
    equal-fppi points collapse to their lowest miss rate.  A detector that
    emitted nothing yields the single point (0, 1).
    """
    if not matches:
        raise ValueError("curve needs at least one image")
    total_gts = sum(m.n_gt for m in matches)
    if total_gts == 0:
        raise ValueError("curve needs at least one non-ignored ground truth")
    num_images = len(matches)
    scores = np.concatenate([m.scores for m in matches])
    tps = np.concatenate([m.tp for m in matches])
    if scores.size == 0:
        return [(0.0, 1.0)]
    desc = np.argsort(-scores, kind="stable")
    scores, tps = scores[desc], tps[desc]
    cum_tp = np.cumsum(tps)
    cum_fp = np.cumsum(~tps)
    # last occurrence of each distinct score = counts with threshold == score
    cut = np.flatnonzero(np.diff(scores) != 0)
    idx = np.append(cut, scores.size - 1)
    envelope: dict[float, float] = {}
    for i in idx:
        fppi = cum_fp[i] / num_images
        mr = (total_gts - cum_tp[i]) / total_gts
        if fppi not in envelope or mr < envelope[fppi]:
            envelope[fppi] = mr
    return sorted(envelope.items())


def log_average_miss_rate(
    curve: Sequence[tuple[float, float]],
    samples: int = 9,
    fppi_range: tuple[float, float] = (1e-2, 1.0),
) -> float:
    """Geometric mean of the miss rate sampled at log-spaced FPPI points.

    Each sample takes the lowest miss rate among curve points with
    fppi <= the sample's FPPI, or 1.0 if the curve has not started yet;
    values are floored at 1e-10 before the log.
    """
    lo, hi = fppi_range
    if not curve:
        raise ValueError("empty curve")
    if not (0 < lo < hi) or samples < 1:
        raise ValueError(f"bad sampling spec ({samples} in [{lo}, {hi}])")
    pts = sorted(curve)
    fppi = np.array([p[0] for p in pts])
    best_mr = np.minimum.accumulate([p[1] for p in pts])
    ref = np.power(10.0, np.linspace(np.log10(lo), np.log10(hi), samples))
    picked = np.ones(samples)
    pos = np.searchsorted(fppi, ref, side="right")
    has = pos > 0
    picked[has] = best_mr[pos[has] - 1]
    return float(np.exp(np.log(np.maximum(picked, 1e-10)).mean()))


def evaluate(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence[Box]],
    ignore_per_image: Sequence[Sequence[bool]] | None = None,
    iou_threshold: float = 0.5,
    samples: int = 9,
    fppi_range: tuple[float, float] = (1e-2, 1.0),
) -> EvalResult:
    """Match every image, then reduce to the curve and its log average."""
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must align per image")
    matches = []
    for i, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        flags = ignore_per_image[i] if ignore_per_image is not None else None
        matches.append(match_detections(dets, gts, iou_threshold, ignore=flags))
    curve = miss_rate_fppi_curve(matches)
    lamr = log_average_miss_rate(curve, samples, fppi_range)
    per_image = [
        (int(m.tp.sum()), int((~m.tp).sum()), m.n_gt - int(m.tp.sum())) for m in matches
    ]
    return EvalResult(curve, lamr, per_image)


def write_curve_csv(curve: Sequence[tuple[float, float]], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["fppi", "miss_rate"])
        for fppi, mr in curve:
            writer.writerow([repr(float(fppi)), repr(float(mr))])
