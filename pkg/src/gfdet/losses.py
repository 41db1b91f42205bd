"""Detection loss: hard-negative-mined classification plus localization.

The classification term reweights the summed positive/negative cross-entropy
by the opposite population's share, L_cls = (N-/(N+ + N-))*L+ + (N+/(N+ + N-))*L-,
with the negatives chosen per mini-batch as the ratio*max(N+,1) highest-loss
background anchors.  Localization is smooth L1 over positive anchors' four
offsets, averaged over N+.  L2 covers weight parameters only.  The total is
alpha*L_cls + beta*L_loc + gamma*L2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    add,
    gather_anchors,
    scalar,
    scale,
    slice_channels,
    smooth_l1_sum,
    softmax_cross_entropy_sum,
    sum_squares,
)
from .detection import Assignment, Box, encode_box, match_anchors

BACKGROUND, PEDESTRIAN = 0, 1


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0
    beta: float = 10.0
    gamma: float = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    """Logged per mini-batch; l_* fields are plain floats."""

    l_cls: float
    l_loc: float
    l2: float
    l_total: float
    n_pos: int
    n_neg: int
    l_pos: float
    l_neg: float


def _is_tensor(x) -> bool:
    return isinstance(x, (Tensor, Parameter))


def per_anchor_background_ce(table: Tensor) -> np.ndarray:
    """Cross-entropy of every table row against the background label.

    This is the ranking key for hard-negative mining; it reads raw data and
    carries no gradient.
    """
    z = table.data[0, 0:2, :, 0]
    m = z.max(axis=0)
    lse = m + np.log(np.exp(z - m).sum(axis=0))
    return lse - z[BACKGROUND]


def select_hard_negatives(
    per_anchor_cls_loss: np.ndarray,
    assignment: Assignment,
    ratio: float = 3.0,
) -> np.ndarray:
    """Indices of the ratio*max(N+,1) highest-loss negative anchors.

    Ties break toward the lower anchor index; the result is capped at the
    number of available negatives and returned in ascending index order.
    """
    loss = np.asarray(per_anchor_cls_loss, dtype=np.float64).reshape(-1)
    if loss.shape[0] != assignment.labels.shape[0]:
        raise ValueError("per-anchor loss and assignment sizes differ")
    if ratio <= 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    negatives = assignment.negative_indices
    k = min(int(ratio * max(assignment.n_pos, 1)), negatives.size)
    if k == 0:
        return np.empty(0, dtype=np.int64)
    ranked = negatives[np.lexsort((negatives, -loss[negatives]))]
    return np.sort(ranked[:k])


def classification_loss(l_pos, l_neg, n_pos: int, n_neg: int):
    """The reweighted two-term cross-entropy; literal, including n_pos=0 -> 0.

    Accepts floats or scalar tensors for l_pos/l_neg and returns the same
    kind.  The batch assembly handles the no-positives case separately.
    """
    if n_pos < 0 or n_neg < 0 or n_pos + n_neg == 0:
        raise ValueError(f"need at least one selected anchor, got N+={n_pos}, N-={n_neg}")
    w_pos = n_neg / (n_pos + n_neg)
    w_neg = n_pos / (n_pos + n_neg)
    if _is_tensor(l_pos) or _is_tensor(l_neg):
        return add(scale(l_pos, w_pos), scale(l_neg, w_neg))
    return w_pos * float(l_pos) + w_neg * float(l_neg)


def smooth_l1(pred, target):
    """Summed elementwise smooth L1: 0.5r^2 for |r|<1, |r|-0.5 beyond."""
    if _is_tensor(pred):
        return smooth_l1_sum(pred, np.asarray(target, dtype=np.float64))
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(r)
    return float(np.where(a < 1.0, 0.5 * r * r, a - 0.5).sum())


def l2_regularization(params: Sequence[Parameter]) -> Tensor:
    """0.5 * sum of squared weight entries; parameters named *.bias stay out."""
    acc: Tensor | None = None
    for p in params:
        if p.name.endswith(".bias"):
            continue
        term = sum_squares(p)
        acc = term if acc is None else add(acc, term)
    return scale(acc, 0.5) if acc is not None else scalar(0.0)


def total_loss(l_cls, l_loc, l2, weights: LossWeights = LossWeights()):
    """alpha*L_cls + beta*L_loc + gamma*L2, same kind as its inputs.

    Any non-finite component is rejected by name so a diverging run fails
    loudly at the step that broke.
    """
    parts = {"L_cls": l_cls, "L_loc": l_loc, "L2": l2}
    for name, value in parts.items():
        v = value.item() if _is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise ValueError(f"non-finite loss component {name} = {v}")
    if any(_is_tensor(v) for v in parts.values()):
        return add(add(scale(l_cls, weights.alpha), scale(l_loc, weights.beta)),
                   scale(l2, weights.gamma))
    return weights.alpha * float(l_cls) + weights.beta * float(l_loc) + weights.gamma * float(l2)


def detection_loss(
    table: Tensor,
    anchors: Sequence[Box],
    gts_per_image: Sequence[Sequence[Box]],
    model_params: Sequence[Parameter],
    weights: LossWeights = LossWeights(),
    ohem_ratio: float = 3.0,
    iou_threshold: float = 0.5,
    ignore_per_image: Sequence[Sequence[bool]] | None = None,
    frozen_negatives: np.ndarray | None = None,
) -> tuple[Tensor, LossBreakdown, np.ndarray]:
    """Assemble the full mini-batch loss from an anchor table.

    ``table`` is the (1, 6, B*N, 1) head output for B images over N anchors;
    matching runs per image, mining and the classification weights pool over
    the whole batch.  ``frozen_negatives`` bypasses mining with a fixed
    selection (finite-difference checks need the selection constant).
    Returns the scalar loss tensor, the logged breakdown, and the selected
    negative rows.
    """
    batch = len(gts_per_image)
    n = len(anchors)
    if batch == 0 or n == 0:
        raise ValueError("need at least one image and one anchor")
    if table.shape != (1, 6, batch * n, 1):
        raise ValueError(f"table shape {table.shape} != (1, 6, {batch * n}, 1)")

    labels = np.full(batch * n, -1, dtype=np.int64)
    pos_rows: list[int] = []
    targets: list[np.ndarray] = []
    for b, gts in enumerate(gts_per_image):
        flags = ignore_per_image[b] if ignore_per_image is not None else None
        assign = match_anchors(anchors, list(gts), iou_threshold, ignore=flags)
        labels[b * n : (b + 1) * n] = assign.labels
        for a in assign.positive_indices:
            pos_rows.append(b * n + int(a))
            targets.append(encode_box(anchors[int(a)], gts[int(assign.labels[a])]))

    pooled = Assignment(labels)
    n_pos = len(pos_rows)
    if frozen_negatives is not None:
        selected = np.asarray(frozen_negatives, dtype=np.int64)
    else:
        selected = select_hard_negatives(per_anchor_background_ce(table), pooled, ohem_ratio)
    n_neg = int(selected.size)

    logits = slice_channels(table, 0, 2)
    if n_pos:
        l_pos = softmax_cross_entropy_sum(
            gather_anchors(logits, np.array(pos_rows)), np.full(n_pos, PEDESTRIAN)
        )
    else:
        l_pos = scalar(0.0)
    if n_neg:
        l_neg = softmax_cross_entropy_sum(
            gather_anchors(logits, selected), np.full(n_neg, BACKGROUND)
        )
    else:
        l_neg = scalar(0.0)

    if n_pos == 0:
        l_cls = l_neg  # no positives: hard negatives enter with coefficient 1
    else:
        l_cls = classification_loss(l_pos, l_neg, n_pos, n_neg)

    if n_pos:
        pred = gather_anchors(slice_channels(table, 2, 6), np.array(pos_rows))
        tgt = np.stack(targets).T.reshape(1, 4, n_pos, 1)
        l_loc = scale(smooth_l1_sum(pred, tgt), 1.0 / max(n_pos, 1))
    else:
        l_loc = scalar(0.0)

    l2 = l2_regularization(model_params)
    total = total_loss(l_cls, l_loc, l2, weights)
    breakdown = LossBreakdown(
        l_cls=l_cls.item(), l_loc=l_loc.item(), l2=l2.item(), l_total=total.item(),
        n_pos=n_pos, n_neg=n_neg, l_pos=l_pos.item(), l_neg=l_neg.item(),
    )
    return total, breakdown, selected
