"""The four-step data distillation procedure over a pluggable predictor.

1. train a teacher on labeled data,
2. run it on several transforms of each unlabeled image,
3. ensemble the predictions into hard labels selected by count matching,
4. retrain a fresh student on the union of labeled and generated data.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .calibrate import CalibrationResult, apply_calibration, calibrate
from .datamodel import Dataset, ImageRecord, Instance, KeypointSchema, Provenance, Source, merge
from .ensemble import ScoredBox, average_heatmaps, decode_keypoints, ensemble_boxes
from .errors import DistillError, PredictorError
from .evaluation import BOXES, KEYPOINTS, EvalConfig, evaluate
from .geometry import Heatmap, Transform, TransformSet, apply_box, apply_image, build_transforms, flip_heatmap
from .schedule import SchedulePlan

log = logging.getLogger(__name__)


class Predictor(Protocol):
    def propose(self, image: np.ndarray) -> list[ScoredBox]: ...

    def keypoint_heatmap(self, image: np.ndarray, roi) -> Heatmap: ...

    def detect(self, image: np.ndarray) -> list[ScoredBox]: ...


class Trainer(Protocol):
    def fit(self, ds: Dataset, plan: SchedulePlan, seed: int) -> Predictor:
        """Train a freshly initialized predictor."""
        ...


@dataclass(frozen=True)
class DistillConfig:
    transforms: Optional[TransformSet] = None
    nms_thresh: float = 0.5
    vote_thresh: float = 0.5
    per_category: bool = True
    task: str = KEYPOINTS
    swap_flip_channels: bool = True
    workers: int = 1

    def __post_init__(self):
        for name in ("nms_thresh", "vote_thresh"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.task not in (KEYPOINTS, BOXES):
            raise ValueError(f"unknown task {self.task!r}")

    def transforms_for(self, width: int, height: int) -> list[Transform]:
        if self.transforms is None:
            return [Transform.identity()]
        return build_transforms(self.transforms.for_image(width, height))


def multi_transform_keypoints(
    p: Predictor,
    img: np.ndarray,
    cfg: DistillConfig,
    schema: KeypointSchema,
    transforms: Optional[Sequence[Transform]] = None,
) -> list[tuple[ScoredBox, list[tuple[tuple[float, float], float]]]]:
    """Ensembled keypoints for every RoI proposed on the untransformed image."""
    if transforms is None:
        transforms = cfg.transforms_for(img.shape[1], img.shape[0])
    rois = p.propose(img)
    if not rois:
        return []
    pairs = schema.flip_pairs if cfg.swap_flip_channels else ()
    per_roi: list[list[Heatmap]] = [[] for _ in rois]
    for t in transforms:
        timg = apply_image(t, img)
        for r, roi in enumerate(rois):
            h = p.keypoint_heatmap(timg, apply_box(t, roi.box))
            if t.is_mirrored:
                h = flip_heatmap(h, pairs, roi=roi.box)
            else:
                h = Heatmap(h.channels, roi.box)
            per_roi[r].append(h)
    return [(roi, decode_keypoints(average_heatmaps(hs), schema)) for roi, hs in zip(rois, per_roi)]


def multi_transform_boxes(
    p: Predictor,
    img: np.ndarray,
    cfg: DistillConfig,
    transforms: Optional[Sequence[Transform]] = None,
) -> list[ScoredBox]:
    if transforms is None:
        transforms = cfg.transforms_for(img.shape[1], img.shape[0])
    per_t = [(t, p.detect(apply_image(t, img))) for t in transforms]
    return ensemble_boxes(per_t, cfg.nms_thresh, cfg.vote_thresh)


def predict_image(p: Predictor, img: np.ndarray, cfg: DistillConfig, schema: Optional[KeypointSchema]) -> list[Instance]:
    """Multi-transform prediction of one image as scored instances."""
    if cfg.task == BOXES:
        return [Instance(d.category_id, d.box, d.score) for d in multi_transform_boxes(p, img, cfg)]
    out = []
    for roi, kps in multi_transform_keypoints(p, img, cfg, schema):
        out.append(Instance(
            roi.category_id, roi.box, roi.score,
            keypoints=tuple((x, y, 1) for (x, y), _ in kps),
            keypoint_scores=tuple(c for _, c in kps),
        ))
    return out


def _map_images(fn: Callable[[ImageRecord], list[Instance]], images: Sequence[ImageRecord], workers: int):
    def wrapped(im):
        if im.pixels is None:
            raise DistillError(f"image {im.image_id} has no pixels")
        try:
            return fn(im)
        except DistillError:
            raise
        except Exception as e:
            raise PredictorError(im.image_id, e) from e

    if workers <= 1:
        return [wrapped(im) for im in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(wrapped, images))


def predict_dataset(p: Predictor, ds: Dataset, cfg: DistillConfig, schema: Optional[KeypointSchema] = None) -> Dataset:
    """Raw (uncalibrated) predictions for every image of ``ds``."""
    schema = schema or ds.keypoint_schema
    preds = _map_images(lambda im: predict_image(p, im.pixels, cfg, schema), ds.images, cfg.workers)
    images = [ImageRecord(im.image_id, im.width, im.height, tuple(ps)) for im, ps in zip(ds.images, preds)]
    return Dataset(tuple(images), ds.categories, Provenance.GENERATED)


def generate_labels(
    p: Predictor,
    unlabeled: Dataset,
    labeled: Dataset,
    cfg: DistillConfig,
    return_calibration: bool = False,
):
    """Hard labels on ``unlabeled`` from multi-transform inference.

    Two phases: predict every image, then calibrate thresholds on the
    pooled predictions and apply them.  Images left without instances
    stay in the output as background images.
    """
    if not unlabeled.images:
        empty = Dataset((), labeled.categories, Provenance.GENERATED)
        return (empty, None) if return_calibration else empty
    schema = labeled.keypoint_schema
    preds = _map_images(lambda im: predict_image(p, im.pixels, cfg, schema), unlabeled.images, cfg.workers)
    pooled = [(im.image_id, inst) for im, ps in zip(unlabeled.images, preds) for inst in ps]
    cal = calibrate(labeled, pooled, len(unlabeled.images), cfg.per_category, keypoints=cfg.task == KEYPOINTS)
    generated = apply_calibration(pooled, cal, unlabeled, labeled.categories)
    return (generated, cal) if return_calibration else generated


def evaluate_predictor(
    p: Predictor,
    test: Dataset,
    cfg: DistillConfig,
    eval_config: EvalConfig = EvalConfig(),
    task: Optional[str] = None,
):
    task = task or cfg.task
    dets = predict_dataset(p, test, cfg if task == cfg.task else DistillConfig(cfg.transforms, task=task))
    return evaluate(test, dets, task, eval_config)


def distill_round(
    labeled: Dataset,
    unlabeled: Dataset,
    trainer: Trainer,
    cfg: DistillConfig,
    plan: SchedulePlan,
    teacher_plan: Optional[SchedulePlan] = None,
    teacher: Optional[Predictor] = None,
    test: Optional[Dataset] = None,
    seed: int = 0,
    eval_config: EvalConfig = EvalConfig(),
):
    """One teacher -> labels -> student round.

    The student is trained from a fresh initialization, never fine-tuned
    from the teacher.  Pass ``teacher`` to skip step (1).
    """
    if teacher is None:
        teacher = trainer.fit(labeled, teacher_plan or plan, seed)
    generated, cal = generate_labels(teacher, unlabeled, labeled, cfg, return_calibration=True)
    union = merge(labeled, generated)
    student = trainer.fit(union, plan, seed + 1)
    report = {
        "degenerate": not unlabeled.images,
        "n_labeled": len(labeled.images),
        "n_generated_images": len(generated.images),
        "n_generated_instances": generated.num_instances(),
        "calibration": None if cal is None else cal.to_json(),
    }
    if test is not None:
        single = DistillConfig(None, cfg.nms_thresh, cfg.vote_thresh, cfg.per_category, cfg.task)
        report["teacher"] = evaluate_predictor(teacher, test, single, eval_config).to_dict()
        report["student"] = evaluate_predictor(student, test, single, eval_config).to_dict()
    log.info("distill round: %d generated instances on %d images",
             report["n_generated_instances"], report["n_generated_images"])
    return student, report


__all__ = [
    "Predictor",
    "Trainer",
    "DistillConfig",
    "multi_transform_keypoints",
    "multi_transform_boxes",
    "predict_image",
    "predict_dataset",
    "generate_labels",
    "evaluate_predictor",
    "distill_round",
    "Source",
]
