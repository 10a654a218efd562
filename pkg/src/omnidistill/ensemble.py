"""Turn multi-transform predictions into single hard predictions.

Keypoints: average RoI-local heatmaps, then take the argmax cell.
Boxes: pool the inverse-mapped boxes, suppress with NMS, refine with
score-weighted box voting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import KeypointSchema
from .errors import AlignmentError
from .geometry import Box, Heatmap, Transform, apply_box, invert

__all__ = [
    "Heatmap",
    "ScoredBox",
    "average_heatmaps",
    "decode_keypoints",
    "iou",
    "nms",
    "box_vote",
    "ensemble_boxes",
]


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float
    category_id: int = 1

    def __post_init__(self):
        b = tuple(float(v) for v in self.box)
        if len(b) != 4 or b[0] > b[2] or b[1] > b[3]:
            raise ValueError(f"invalid box {b}")
        object.__setattr__(self, "box", b)
        object.__setattr__(self, "score", float(self.score))


def average_heatmaps(hs: Sequence[Heatmap]) -> Heatmap:
    if not hs:
        raise AlignmentError("no heatmaps to average")
    first = hs[0]
    for h in hs[1:]:
        if h.shape != first.shape:
            raise AlignmentError(f"heatmap shape {h.shape} != {first.shape}")
        if h.roi != first.roi:
            raise AlignmentError(f"heatmap RoI {h.roi} != {first.roi}")
    if len(hs) == 1:
        return first
    total = np.zeros_like(first.channels)
    for h in hs:
        total += h.channels
    return Heatmap(total / len(hs), first.roi)


def decode_keypoints(h: Heatmap, schema: KeypointSchema | None = None) -> list[tuple[tuple[float, float], float]]:
    """Argmax cell centre of every channel, in image coordinates.

    Ties resolve to the first cell in row-major order (``np.argmax``).
    """
    k, gh, gw = h.shape
    if schema is not None and schema.num_keypoints != k:
        raise AlignmentError(f"heatmap has {k} channels, schema has {schema.num_keypoints}")
    x1, y1, x2, y2 = h.roi
    cell_w = (x2 - x1) / gw
    cell_h = (y2 - y1) / gh
    flat = h.channels.reshape(k, -1)
    idx = np.argmax(flat, axis=1)
    out = []
    for c in range(k):
        i, j = divmod(int(idx[c]), gw)
        out.append(((x1 + (j + 0.5) * cell_w, y1 + (i + 0.5) * cell_h), float(flat[c, idx[c]])))
    return out


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(dets: Sequence[ScoredBox], iou_thresh: float = 0.5) -> list[int]:
    """Greedy NMS; returns indices into ``dets`` in keep order.

    A box survives iff its IoU with every already-kept box is below
    ``iou_thresh``.  Ties in score go to the lower index.
    """
    if not 0 < iou_thresh <= 1:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        if all(iou(dets[i].box, dets[j].box) < iou_thresh for j in kept):
            kept.append(i)
    return kept


def box_vote(kept: ScoredBox, pool: Sequence[ScoredBox], vote_thresh: float = 0.5) -> ScoredBox:
    """Refine ``kept`` to the score-weighted mean of its voters.

    Voters are the same-category pool boxes with IoU >= ``vote_thresh``
    against ``kept``.  The score is left untouched.
    """
    voters = [
        d for d in pool
        if d.category_id == kept.category_id and iou(d.box, kept.box) >= vote_thresh
    ]
    if not voters:
        voters = [kept]
    if len(voters) == 1:
        return ScoredBox(voters[0].box, kept.score, kept.category_id)
    # correctly rounded sums make the result independent of voter order
    total = math.fsum(d.score for d in voters)
    if total > 0:
        box = tuple(math.fsum(d.score * d.box[k] for d in voters) / total for k in range(4))
    else:
        box = tuple(math.fsum(d.box[k] for d in voters) / len(voters) for k in range(4))
    return ScoredBox(box, kept.score, kept.category_id)


def ensemble_boxes(
    per_transform: Sequence[tuple[Transform, Sequence[ScoredBox]]],
    nms_thresh: float = 0.5,
    vote_thresh: float = 0.5,
) -> list[ScoredBox]:
    """Union of inverse-mapped boxes, then per-category NMS and voting.

    Output is grouped by ascending category id, in NMS keep order within
    a category.
    """
    pooled: list[ScoredBox] = []
    for t, dets in per_transform:
        back = invert(t)
        pooled.extend(ScoredBox(apply_box(back, d.box), d.score, d.category_id) for d in dets)
    out = []
    for cat in sorted({d.category_id for d in pooled}):
        group = [d for d in pooled if d.category_id == cat]
        for i in nms(group, nms_thresh):
            out.append(box_vote(group[i], group, vote_thresh))
    return out
