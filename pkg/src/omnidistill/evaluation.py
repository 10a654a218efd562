"""COCO-protocol average precision for boxes (IoU) and keypoints (OKS)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datamodel import Dataset, Instance, KeypointSchema
from .ensemble import iou_matrix
from .geometry import box_area

BOXES = "boxes"
KEYPOINTS = "keypoints"

DEFAULT_AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, math.inf),
}


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
    area_ranges: dict = field(default_factory=lambda: dict(DEFAULT_AREA_RANGES))
    max_dets: int = 100
    recall_points: int = 101

    def __post_init__(self):
        ts = tuple(float(t) for t in self.iou_thresholds)
        if not ts or any(not 0 < t <= 1 for t in ts):
            raise ValueError(f"thresholds must lie in (0, 1], got {ts}")
        object.__setattr__(self, "iou_thresholds", ts)
        ranges = {k: (float(lo), float(hi)) for k, (lo, hi) in self.area_ranges.items()}
        if "all" not in ranges:
            raise ValueError("area_ranges must include 'all'")
        object.__setattr__(self, "area_ranges", ranges)

    @property
    def recall_thresholds(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.recall_points)


@dataclass(frozen=True)
class EvalResult:
    """Headline metrics; ``None`` marks a stratum without ground truth."""

    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    per_threshold: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
            "APs": self.ap_small, "APm": self.ap_medium, "APl": self.ap_large,
        }

    def format(self) -> str:
        return "\n".join(
            f"{k:5s} {'undefined' if v is None else f'{v:.4f}'}" for k, v in self.to_dict().items()
        )


def oks(det_keypoints, gt: Instance, schema: KeypointSchema) -> float:
    """Object keypoint similarity of predicted ``(x, y)`` points against ``gt``.

    Mean over labeled GT keypoints of ``exp(-d^2 / (2 * area * kappa^2))``
    with ``area`` the GT box area.  Raises ValueError when the GT has no
    labeled keypoint.
    """
    g = gt.keypoint_array()
    vis = g[:, 2] > 0
    if not vis.any():
        raise ValueError("ground truth has no labeled keypoints")
    d = np.asarray(det_keypoints, dtype=float).reshape(-1, 2)[:, :2]
    kappa = np.asarray(schema.oks_kappas, dtype=float)
    area = box_area(gt.bbox) + np.spacing(1)
    d2 = ((d - g[:, :2]) ** 2).sum(axis=1)
    e = np.exp(-d2 / (2.0 * area * kappa ** 2))
    return float(e[vis].mean())


def oks_matrix(dets: Sequence[Instance], gts: Sequence[Instance], schema: KeypointSchema) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        pts = d.keypoint_array()[:, :2]
        for j, g in enumerate(gts):
            out[i, j] = oks(pts, g, schema)
    return out


def match(sim: np.ndarray, threshold: float, gt_ignore: Optional[Sequence[bool]] = None) -> np.ndarray:
    """Greedy COCO matching.

    Rows of ``sim`` are detections already in descending score order;
    columns are ground truths.  Each detection takes the unmatched GT with
    the highest similarity >= ``threshold`` (first column on ties), and
    prefers non-ignored GTs: an ignored GT is only taken when no
    non-ignored GT qualifies.  Returns the matched GT column per detection,
    -1 for false positives.
    """
    n_det, n_gt = sim.shape
    ignore = np.zeros(n_gt, bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    taken = np.zeros(n_gt, bool)
    out = np.full(n_det, -1, dtype=int)
    for d in range(n_det):
        best, best_sim = -1, -1.0
        for want_ignored in (False, True):
            for g in range(n_gt):
                if taken[g] or ignore[g] != want_ignored:
                    continue
                if sim[d, g] >= threshold and sim[d, g] > best_sim:
                    best, best_sim = g, sim[d, g]
            if best >= 0:
                break
        if best >= 0:
            taken[best] = True
            out[d] = best
    return out


def _in_range(area: float, rng: tuple[float, float]) -> bool:
    return rng[0] <= area < rng[1]


def _interpolated_ap(scores, tps, fps, n_pos: int, recall_thrs: np.ndarray) -> float:
    order = np.argsort(-np.asarray(scores, dtype=float), kind="mergesort")
    tp = np.cumsum(np.asarray(tps, dtype=float)[order])
    fp = np.cumsum(np.asarray(fps, dtype=float)[order])
    if tp.size == 0:
        return 0.0
    rc = tp / n_pos
    pr = tp / np.maximum(tp + fp, np.spacing(1))
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, recall_thrs, side="left")
    q = np.where(idx < len(pr), pr[np.minimum(idx, len(pr) - 1)], 0.0)
    return float(q.mean())


def _per_image(gts: list[Instance], dets: list[Instance], task: str, schema):
    if task == KEYPOINTS:
        gts = [g for g in gts if g.keypoints is not None and g.num_visible > 0]
        dets = [d for d in dets if d.keypoints is not None]
    if task == KEYPOINTS:
        sim = oks_matrix(dets, gts, schema)
    else:
        sim = iou_matrix([d.bbox for d in dets], [g.bbox for g in gts])
    return gts, dets, sim


def evaluate(
    gt: Dataset,
    dets: Dataset,
    task: str = KEYPOINTS,
    config: EvalConfig = EvalConfig(),
    schema: Optional[KeypointSchema] = None,
) -> EvalResult:
    """AP over all categories of ``gt``, thresholds and area strata.

    ``dets`` must contain the same image ids as ``gt`` (missing images
    count as having no detections) and scored instances.
    """
    if task not in (BOXES, KEYPOINTS):
        raise ValueError(f"unknown task {task!r}")
    if task == KEYPOINTS:
        schema = schema or gt.keypoint_schema
        if schema is None:
            raise ValueError("keypoint evaluation needs a keypoint schema")
    det_by_image = {im.image_id: im.instances for im in dets.images}
    thrs = config.iou_thresholds
    recall_thrs = config.recall_thresholds
    # acc[(stratum, cat)] -> (n_pos, scores, tp[T], fp[T]) accumulated in image order
    acc: dict = {}
    for im in gt.images:
        for cid in gt.category_ids:
            g_all = [g for g in im.instances if g.category_id == cid]
            d_all = [d for d in det_by_image.get(im.image_id, ()) if d.category_id == cid]
            order = sorted(range(len(d_all)), key=lambda i: -(d_all[i].score or 0.0))[: config.max_dets]
            d_sorted = [d_all[i] for i in order]
            g_list, d_list, sim = _per_image(g_all, d_sorted, task, schema)
            g_area = np.array([box_area(g.bbox) for g in g_list])
            d_area = np.array([box_area(d.bbox) for d in d_list])
            for name, rng in config.area_ranges.items():
                ignore = np.array([not _in_range(a, rng) for a in g_area], dtype=bool)
                gorder = np.argsort(ignore, kind="mergesort")
                s = sim[:, gorder]
                ign = ignore[gorder]
                entry = acc.setdefault((name, cid), [0, [], [[] for _ in thrs], [[] for _ in thrs]])
                entry[0] += int((~ign).sum())
                entry[1].extend(d.score for d in d_list)
                for ti, t in enumerate(thrs):
                    m = match(s, t, ign)
                    for di, gi in enumerate(m):
                        if gi >= 0:
                            skip = ign[gi]
                        else:
                            skip = not _in_range(d_area[di], rng)
                        entry[2][ti].append(0 if skip else int(gi >= 0))
                        entry[3][ti].append(0 if skip else int(gi < 0))
    per_threshold = {}
    strata = {}
    for name in config.area_ranges:
        rows = []
        for cid in gt.category_ids:
            n_pos, scores, tps, fps = acc.get((name, cid), (0, [], [[] for _ in thrs], [[] for _ in thrs]))
            if n_pos == 0:
                continue
            rows.append([_interpolated_ap(scores, tps[ti], fps[ti], n_pos, recall_thrs) for ti in range(len(thrs))])
        if rows:
            arr = np.array(rows)
            per_threshold[name] = arr.mean(axis=0).tolist()
            strata[name] = float(arr.mean())
        else:
            per_threshold[name] = None
            strata[name] = None

    def at(t):
        if per_threshold["all"] is None:
            return None
        for ti, th in enumerate(thrs):
            if abs(th - t) < 1e-9:
                return per_threshold["all"][ti]
        return None

    return EvalResult(
        ap=strata["all"], ap50=at(0.5), ap75=at(0.75),
        ap_small=strata.get("small"), ap_medium=strata.get("medium"), ap_large=strata.get("large"),
        per_threshold=per_threshold,
    )
