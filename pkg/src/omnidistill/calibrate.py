"""Count-matching thresholds for turning predictions into annotations.

Thresholds are chosen by exact top-n selection rather than a search: the
target count ``n`` is rounded from a labeled-set statistic, candidates are
sorted by (score desc, image id asc, input index asc) and the cut falls
right after the ``n``-th candidate.  A cut stores both the score and the
tiebreak key of the last kept candidate so that applying it keeps exactly
``n`` items even when scores tie across the cut.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .datamodel import (
    Dataset,
    ImageRecord,
    Instance,
    Provenance,
    Source,
    avg_instances_per_image,
    avg_keypoints_per_instance,
)
from .errors import CalibrationError, StatisticsError

# threshold reported when nothing may be kept
SENTINEL = math.nextafter(1.0, 2.0)


@dataclass(frozen=True)
class Cut:
    """Keep a candidate iff its sort key is <= (score, *tiebreak) in sort order.

    ``tiebreak`` is None when every candidate is kept (threshold 0) and
    the threshold alone decides otherwise.
    """

    threshold: float
    tiebreak: Optional[tuple[int, int]] = None

    def keeps(self, score: float, key: tuple[int, int]) -> bool:
        if score > self.threshold:
            return True
        if score < self.threshold:
            return False
        return self.tiebreak is None or key <= self.tiebreak


@dataclass(frozen=True)
class CalibrationResult:
    per_category_score_threshold: dict[int, float]
    keypoint_confidence_threshold: Optional[float] = None
    targets: dict = field(default_factory=dict)
    instance_cuts: dict[int, Cut] = field(default_factory=dict)
    keypoint_cut: Optional[Cut] = None
    per_category: bool = True

    def to_json(self) -> dict:
        return {
            "per_category": self.per_category,
            "per_category_score_threshold": {str(k): v for k, v in sorted(self.per_category_score_threshold.items())},
            "keypoint_confidence_threshold": self.keypoint_confidence_threshold,
            "instance_cuts": {
                str(k): {"threshold": c.threshold, "tiebreak": list(c.tiebreak) if c.tiebreak else None}
                for k, c in sorted(self.instance_cuts.items())
            },
            "keypoint_cut": None if self.keypoint_cut is None else {
                "threshold": self.keypoint_cut.threshold,
                "tiebreak": list(self.keypoint_cut.tiebreak) if self.keypoint_cut.tiebreak else None,
            },
            "targets": self.targets,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CalibrationResult":
        def cut(c):
            if c is None:
                return None
            return Cut(float(c["threshold"]), tuple(c["tiebreak"]) if c.get("tiebreak") else None)

        return cls(
            per_category_score_threshold={int(k): float(v) for k, v in d["per_category_score_threshold"].items()},
            keypoint_confidence_threshold=d.get("keypoint_confidence_threshold"),
            targets=d.get("targets", {}),
            instance_cuts={int(k): cut(v) for k, v in d.get("instance_cuts", {}).items()},
            keypoint_cut=cut(d.get("keypoint_cut")),
            per_category=bool(d.get("per_category", True)),
        )


def top_n_cut(candidates: Sequence[tuple[float, int, int]], n: int) -> Cut:
    """Cut keeping exactly ``min(n, len(candidates))`` of ``(score, a, b)`` triples."""
    if n <= 0 or not candidates:
        return Cut(SENTINEL)
    if n >= len(candidates):
        return Cut(0.0)
    ranked = sorted(candidates, key=lambda c: (-c[0], c[1], c[2]))
    score, a, b = ranked[n - 1]
    return Cut(score, (a, b))


def _round_count(x: float) -> int:
    return int(math.floor(x + 0.5))


def calibrate_instance_thresholds(
    labeled: Dataset,
    predictions: Sequence[tuple[int, object]],
    n_unlabeled_images: int,
    per_category: bool = True,
) -> CalibrationResult:
    """Per-category (or global) detection score thresholds.

    ``predictions`` is a sequence of ``(image_id, pred)`` where ``pred`` has
    ``score`` and ``category_id`` attributes (ScoredBox or Instance).
    """
    if not labeled.images:
        raise CalibrationError("labeled dataset is empty")
    if n_unlabeled_images < 1:
        raise CalibrationError("need at least one unlabeled image")
    cands = [(float(p.score), int(img), i, p.category_id) for i, (img, p) in enumerate(predictions)]
    thresholds, cuts, targets = {}, {}, {}
    if per_category:
        for cid in labeled.category_ids:
            avg = avg_instances_per_image(labeled, cid)
            n = _round_count(avg * n_unlabeled_images)
            cut = top_n_cut([(s, img, i) for s, img, i, c in cands if c == cid], n)
            thresholds[cid], cuts[cid] = cut.threshold, cut
            targets[str(cid)] = {"avg_instances_per_image": avg, "target_count": n}
    else:
        avg = avg_instances_per_image(labeled)
        n = _round_count(avg * n_unlabeled_images)
        cut = top_n_cut([(s, img, i) for s, img, i, _ in cands], n)
        for cid in labeled.category_ids:
            thresholds[cid], cuts[cid] = cut.threshold, cut
        targets["all"] = {"avg_instances_per_image": avg, "target_count": n}
    return CalibrationResult(thresholds, None, {"instances": targets}, cuts, None, per_category)


def calibrate_keypoint_threshold(labeled: Dataset, selected_generated: Sequence[Instance]) -> Cut:
    """Global keypoint-confidence cut matching the labeled keypoints per instance.

    Confidences are ranked by (confidence desc, instance index asc,
    keypoint index asc).
    """
    if not selected_generated:
        raise CalibrationError("no generated instances to calibrate keypoints on")
    try:
        target = avg_keypoints_per_instance(labeled)
    except StatisticsError as e:
        raise CalibrationError(str(e)) from e
    cands = []
    for i, inst in enumerate(selected_generated):
        if inst.keypoint_scores is None:
            raise CalibrationError(f"generated instance {i} has no keypoint confidences")
        cands.extend((c, i, j) for j, c in enumerate(inst.keypoint_scores))
    n = _round_count(target * len(selected_generated))
    return top_n_cut(cands, n)


def select_instances(predictions: Sequence[tuple[int, object]], cal: CalibrationResult) -> list[int]:
    """Indices of predictions surviving the instance cuts, in input order."""
    kept = []
    for i, (img, p) in enumerate(predictions):
        cut = cal.instance_cuts.get(p.category_id)
        if cut is None:
            thr = cal.per_category_score_threshold.get(p.category_id)
            if thr is None:
                raise CalibrationError(f"no threshold for category {p.category_id}")
            cut = Cut(thr)
        if cut.keeps(float(p.score), (int(img), i)):
            kept.append(i)
    return kept


def _as_instance(p) -> Instance:
    if isinstance(p, Instance):
        return p
    return Instance(p.category_id, p.box, p.score)


def apply_keypoint_cut(instances: Sequence[Instance], cut: Cut) -> list[Instance]:
    # tie-break keys count keypointed instances only, as in calibrate_keypoint_threshold
    out = []
    i = -1
    for inst in instances:
        if inst.keypoints is None or inst.keypoint_scores is None:
            out.append(inst)
            continue
        i += 1
        kps = tuple(
            (x, y, 1 if cut.keeps(c, (i, j)) else 0)
            for j, ((x, y, _), c) in enumerate(zip(inst.keypoints, inst.keypoint_scores))
        )
        out.append(replace(inst, keypoints=kps))
    return out


def apply_calibration(
    predictions: Sequence[tuple[int, object]],
    cal: CalibrationResult,
    unlabeled: Dataset,
    categories=None,
) -> Dataset:
    """Generated dataset over ``unlabeled``'s images from the kept predictions.

    Images without surviving predictions stay in the dataset with no
    annotations.  Kept keypoints below the keypoint cut get ``v = 0``.
    """
    idx = select_instances(predictions, cal)
    kept = [_as_instance(predictions[i][1]) for i in idx]
    kept_ids = [int(predictions[i][0]) for i in idx]
    if cal.keypoint_cut is not None:
        kept = apply_keypoint_cut(kept, cal.keypoint_cut)
    elif cal.keypoint_confidence_threshold is not None:
        kept = apply_keypoint_cut(kept, Cut(cal.keypoint_confidence_threshold))
    by_image: dict[int, list[Instance]] = {}
    for img, inst in zip(kept_ids, kept):
        by_image.setdefault(img, []).append(replace(inst, source=Source.GENERATED))
    known = {im.image_id for im in unlabeled.images}
    missing = set(by_image) - known
    if missing:
        raise CalibrationError(f"predictions reference unknown images {sorted(missing)[:5]}")
    images = [
        ImageRecord(im.image_id, im.width, im.height, tuple(by_image.get(im.image_id, ())), im.pixels,
                    Provenance.GENERATED)
        for im in unlabeled.images
    ]
    return Dataset(tuple(images), unlabeled.categories if categories is None else tuple(categories),
                   Provenance.GENERATED)


def calibrate(
    labeled: Dataset,
    predictions: Sequence[tuple[int, object]],
    n_unlabeled_images: int,
    per_category: bool = True,
    keypoints: bool = True,
) -> CalibrationResult:
    """Instance thresholds, then (optionally) the keypoint threshold on the selected instances."""
    cal = calibrate_instance_thresholds(labeled, predictions, n_unlabeled_images, per_category)
    if not keypoints or labeled.keypoint_schema is None:
        return cal
    selected = [_as_instance(predictions[i][1]) for i in select_instances(predictions, cal)]
    # categories without a keypoint schema take no part in the keypoint cut
    selected = [s for s in selected if s.keypoints is not None]
    if not selected or any(s.keypoint_scores is None for s in selected):
        return cal
    cut = calibrate_keypoint_threshold(labeled, selected)
    targets = dict(cal.targets)
    avg = avg_keypoints_per_instance(labeled)
    targets["keypoints"] = {
        "avg_keypoints_per_instance": avg,
        "target_count": _round_count(avg * len(selected)),
    }
    return replace(cal, keypoint_confidence_threshold=cut.threshold, keypoint_cut=cut, targets=targets)


def calibration_report(cal: CalibrationResult, generated: Dataset) -> dict:
    """Chosen thresholds with target and achieved statistics of ``generated``."""
    achieved: dict = {"instances": {}, "keypoints": None}
    n_images = len(generated.images)
    if n_images:
        if cal.per_category:
            for cid in generated.category_ids:
                achieved["instances"][str(cid)] = avg_instances_per_image(generated, cid)
        else:
            achieved["instances"]["all"] = avg_instances_per_image(generated)
        try:
            achieved["keypoints"] = avg_keypoints_per_instance(generated)
        except StatisticsError:
            pass
    return {**cal.to_json(), "achieved": achieved, "n_images": n_images,
            "n_instances": generated.num_instances()}
