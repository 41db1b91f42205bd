"""Boxes, anchor matching, offset coding, NMS, and the detection heads.

Boxes are (cx, cy, w, h) in normalized [0,1] image coordinates everywhere;
pixel conversions happen only at file boundaries.  Geometry is continuous:
IoU of two unit-overlap rectangles is area-ratio exact, with no pixel +1s.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Parameter, ShapeError, Tensor, conv2d, he_uniform, flatten_head_maps

NEGATIVE = -1
IGNORE = -2

# Offset variances from the usual box-coding convention.
VARIANCE_CENTER = 0.1
VARIANCE_SIZE = 0.2


@dataclass(frozen=True)
class Box:
    """Center-form rectangle; width and height must be positive."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    score: float


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.w * a.h + b.w * b.h - inter)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    return np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N,4)/(M,4) center-form arrays -> (N,M)."""
    a, b = a.reshape(-1, 4), b.reshape(-1, 4)
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax1[:, None], bx1[None, :]) - np.maximum(ax0[:, None], bx0[None, :])
    ih = np.minimum(ay1[:, None], by1[None, :]) - np.maximum(ay0[:, None], by0[None, :])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def encode_box(anchor: Box, gt: Box,
               variances: tuple[float, float] = (VARIANCE_CENTER, VARIANCE_SIZE)) -> np.ndarray:
    """Ground truth as regression targets relative to an anchor."""
    vc, vs = variances
    return np.array([
        (gt.cx - anchor.cx) / anchor.w / vc,
        (gt.cy - anchor.cy) / anchor.h / vc,
        np.log(gt.w / anchor.w) / vs,
        np.log(gt.h / anchor.h) / vs,
    ])


def decode_box(anchor: Box, offsets: Sequence[float],
               variances: tuple[float, float] = (VARIANCE_CENTER, VARIANCE_SIZE)) -> Box:
    """Exact inverse of encode_box."""
    vc, vs = variances
    tx, ty, tw, th = (float(v) for v in offsets)
    return Box(
        float(anchor.cx + tx * vc * anchor.w),
        float(anchor.cy + ty * vc * anchor.h),
        float(anchor.w * np.exp(tw * vs)),
        float(anchor.h * np.exp(th * vs)),
    )


@dataclass
class Assignment:
    """Per-anchor labels: gt index >= 0 positive, -1 negative, -2 ignore."""

    labels: np.ndarray

    @property
    def n_pos(self) -> int:
        return int((self.labels >= 0).sum())

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def match_anchors(
    anchors: Sequence[Box],
    gts: Sequence[Box],
    iou_threshold: float = 0.5,
    ignore: Sequence[bool] | None = None,
) -> Assignment:
    """Two-rule assignment with deterministic tie-breaks.

    Rule 1: each (non-ignored) ground truth claims its best-IoU anchor,
    greedily over descending IoU, ties to the lower gt then anchor index,
    so a gt with any overlap always gets one positive.  Rule 2: every other
    anchor with IoU >= threshold to some gt goes positive to its best gt.
    Anchors that would only match an ignored gt at threshold are labeled
    ignore so the loss skips them.
    """
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    if not gts:
        return Assignment(labels)
    flags = np.array(list(ignore)) if ignore is not None else np.zeros(len(gts), dtype=bool)
    if flags.shape[0] != len(gts):
        raise ValueError("ignore flags must align with gts")
    m = iou_matrix(boxes_to_array(gts), boxes_to_array(anchors))  # (G, N)
    real = np.flatnonzero(~flags)
    work = m[real].copy() if real.size else np.zeros((0, n))
    for _ in range(real.size):
        flat = int(np.argmax(work))  # row-major: lowest gt, then anchor, wins ties
        g, a = divmod(flat, n)
        if work[g, a] <= 0:
            break
        labels[a] = real[g]
        work[g, :] = -1.0
        work[:, a] = -1.0
    unassigned = labels == NEGATIVE
    if real.size and unassigned.any():
        sub = m[real][:, unassigned]
        best = sub.argmax(axis=0)  # first max -> lowest gt index
        best_iou = sub[best, np.arange(sub.shape[1])]
        hits = best_iou >= iou_threshold
        cols = np.flatnonzero(unassigned)[hits]
        labels[cols] = real[best[hits]]
    if flags.any():
        still_neg = labels == NEGATIVE
        ign = m[flags][:, still_neg].max(axis=0) >= iou_threshold
        labels[np.flatnonzero(still_neg)[ign]] = IGNORE
    return Assignment(labels)


def nms(boxes: Sequence[Box], scores: Sequence[float], iou_threshold: float = 0.45) -> list[int]:
    """Greedy NMS: keep by descending score (index breaks ties), suppress
    any remaining box whose IoU with a kept box exceeds the threshold."""
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must align")
    order = sorted(range(len(boxes)), key=lambda i: (-float(scores[i]), i))
    arr = boxes_to_array(boxes)
    kept: list[int] = []
    for i in order:
        if all(iou_matrix(arr[i], arr[j])[0, 0] <= iou_threshold for j in kept):
            kept.append(i)
    return kept


class DetectionHeads:
    """One 3x3 conv per head map producing anchors_per_loc*(2+4) channels.

    Heads are never shared: a Stacked level's color and thermal maps get
    separate convs.  Entry layout per anchor slot: 2 class logits
    (background, pedestrian) then 4 box offsets.
    """

    ENTRIES = 6

    def __init__(self, specs: Sequence[tuple[str, int, int]],
                 seed: int | np.random.Generator, prefix: str = "heads"):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.specs = [tuple(s) for s in specs]
        self.convs: list[tuple[Parameter, Parameter]] = []
        self.params: list[Parameter] = []
        for name, channels, anchors_per_loc in self.specs:
            out = anchors_per_loc * self.ENTRIES
            w = Parameter(he_uniform(rng, (out, channels, 3, 3)), f"{prefix}.{name}.weight")
            b = Parameter(np.zeros((1, out, 1, 1)), f"{prefix}.{name}.bias")
            self.params.extend([w, b])
            self.convs.append((w, b))

    def apply(self, maps: Sequence[Tensor]) -> list[Tensor]:
        if len(maps) != len(self.convs):
            raise ShapeError(f"{len(self.convs)} heads but {len(maps)} maps")
        return [conv2d(m, w, b, stride=1, padding=1) for m, (w, b) in zip(maps, self.convs)]

    def anchor_table(self, maps: Sequence[Tensor]) -> Tensor:
        """(1, 6, batch*total_anchors, 1) table in anchor enumeration order."""
        return flatten_head_maps(self.apply(maps), entries=self.ENTRIES)

    def implied_anchor_total(self, maps: Sequence[Tensor]) -> int:
        total = 0
        for m, (_, anchors) in zip(maps, [(s[1], s[2]) for s in self.specs]):
            total += m.shape[2] * m.shape[3] * anchors
        return total


def foreground_scores(table: Tensor) -> np.ndarray:
    """Softmax pedestrian probability per table row (no gradient path)."""
    z = table.data[0, 0:2, :, 0]
    return 1.0 / (1.0 + np.exp(z[0] - z[1]))


def predict(
    head_maps: Sequence[Tensor],
    heads: DetectionHeads,
    anchors: Sequence[Box],
    score_threshold: float = 0.05,
    nms_threshold: float = 0.45,
    image_id: str = "",
) -> list[Detection]:
    """Decode one image's head maps into NMS-filtered detections.

    Maps must carry batch size 1 and imply exactly len(anchors) rows.
    """
    for m in head_maps:
        if m.shape[0] != 1:
            raise ShapeError("predict() runs on batch size 1")
    table = heads.anchor_table(head_maps)
    n = table.shape[2]
    if n != len(anchors):
        raise ShapeError(f"head maps imply {n} anchors, got {len(anchors)} anchor boxes")
    scores = foreground_scores(table)
    offsets = table.data[0, 2:6, :, 0].T
    candidates = np.flatnonzero(scores > score_threshold)
    if candidates.size == 0:
        return []
    boxes = [decode_box(anchors[i], offsets[i]) for i in candidates]
    cand_scores = scores[candidates]
    kept = nms(boxes, cand_scores, nms_threshold)
    return [Detection(image_id, boxes[i], float(cand_scores[i])) for i in kept]


def write_detections_csv(dets: Sequence[Detection], path, image_size: tuple[int, int]) -> None:
    """image_id, cx, cy, w, h, score; box fields in pixels."""
    w_px, h_px = image_size
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image_id", "cx", "cy", "w", "h", "score"])
        for d in dets:
            writer.writerow([d.image_id,
                             repr(float(d.box.cx * w_px)), repr(float(d.box.cy * h_px)),
                             repr(float(d.box.w * w_px)), repr(float(d.box.h * h_px)),
                             repr(float(d.score))])
