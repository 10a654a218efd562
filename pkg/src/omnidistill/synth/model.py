"""A small trainable two-stage keypoint detector.

Stage one is a fixed blob proposer: smooth, threshold, group nearby
components by dilation and box each group.  Stage two scores every cell
of a ``grid x grid`` RoI-local lattice per keypoint type with a linear
function of the ``patch x patch`` pixel neighbourhood around the cell
centre (raw intensities and their squares) plus a per-cell bias, and
turns the scores into a heatmap with a softmax over cells.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from ..datamodel import Dataset, ImageRecord, Instance, pool_ids
from ..ensemble import ScoredBox, iou
from ..errors import TrainingDivergenceError
from ..geometry import Heatmap, clip_box
from ..schedule import FixedRatio, MixSampler, SchedulePlan, lr_at
from .world import CATEGORY_ID


@dataclass(frozen=True)
class ModelConfig:
    num_keypoints: int = 5
    grid: int = 16
    patch: int = 9
    smooth_sigma: float = 1.0
    threshold: float = 0.22
    group_radius: int = 3
    box_pad: float = 0.5
    min_pixels: int = 3
    score_mass: float = 23.0
    init_std: float = 0.01
    train_on_proposals: bool = True
    match_iou: float = 0.5

    @property
    def num_features(self) -> int:
        return 2 * self.patch * self.patch


class ToyModel:
    """Blob proposer plus logistic-softmax keypoint head.

    ``weights`` has shape ``(K, F)`` and ``bias`` ``(K, grid, grid)``.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), weights=None, bias=None):
        self.config = config
        k, g = config.num_keypoints, config.grid
        self.weights = np.zeros((k, config.num_features)) if weights is None else np.asarray(weights, float)
        self.bias = np.zeros((k, g, g)) if bias is None else np.asarray(bias, float)
        if self.weights.shape != (k, config.num_features) or self.bias.shape != (k, g, g):
            raise ValueError("parameter shapes do not match the model config")

    @classmethod
    def initialize(cls, config: ModelConfig = ModelConfig(), seed: int = 0) -> "ToyModel":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7919])))
        k, g = config.num_keypoints, config.grid
        return cls(config, rng.normal(0, config.init_std, (k, config.num_features)), np.zeros((k, g, g)))

    def copy(self) -> "ToyModel":
        return ToyModel(self.config, self.weights.copy(), self.bias.copy())

    # ---- proposals -------------------------------------------------------

    def propose(self, image: np.ndarray) -> list[ScoredBox]:
        cfg = self.config
        img = np.asarray(image, dtype=float)
        h, w = img.shape
        mask = ndimage.gaussian_filter(img, cfg.smooth_sigma, mode="constant") > cfg.threshold
        r = cfg.group_radius
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        grouped = ndimage.binary_dilation(mask, structure=(xx ** 2 + yy ** 2) <= r * r)
        labels, n = ndimage.label(grouped)
        out = []
        for lab in range(1, n + 1):
            member = mask & (labels == lab)
            if member.sum() < cfg.min_pixels:
                continue
            rows, cols = np.nonzero(member)
            box = clip_box(
                (cols.min() - cfg.box_pad, rows.min() - cfg.box_pad,
                 cols.max() + 1 + cfg.box_pad, rows.max() + 1 + cfg.box_pad), w, h)
            mass = float(img[member].sum())
            out.append(ScoredBox(box, 1.0 - math.exp(-mass / cfg.score_mass), CATEGORY_ID))
        out.sort(key=lambda b: (-b.score, b.box))
        return out

    def detect(self, image: np.ndarray) -> list[ScoredBox]:
        return self.propose(image)

    # ---- keypoint head ---------------------------------------------------

    def features(self, image: np.ndarray, roi) -> np.ndarray:
        """``(grid*grid, F)`` features, one row per cell in row-major order."""
        cfg = self.config
        g, r = cfg.grid, cfg.patch // 2
        img = np.asarray(image, dtype=float)
        padded = np.pad(img, r)
        x1, y1, x2, y2 = roi
        cx = x1 + (np.arange(g) + 0.5) * (x2 - x1) / g
        cy = y1 + (np.arange(g) + 0.5) * (y2 - y1) / g
        col = np.clip(np.floor(cx).astype(int), -r, img.shape[1] - 1 + r) + r
        row = np.clip(np.floor(cy).astype(int), -r, img.shape[0] - 1 + r) + r
        d = np.arange(-r, r + 1)
        rr = (row[:, None] + d[None, :]).clip(0, padded.shape[0] - 1)
        cc = (col[:, None] + d[None, :]).clip(0, padded.shape[1] - 1)
        patches = padded[rr[:, None, :, None], cc[None, :, None, :]].reshape(g * g, -1)
        return np.concatenate([patches, patches ** 2], axis=1)

    def logits(self, feats: np.ndarray) -> np.ndarray:
        """``(K, grid*grid)`` cell scores."""
        return self.weights @ feats.T + self.bias.reshape(self.bias.shape[0], -1)

    def keypoint_heatmap(self, image: np.ndarray, roi) -> Heatmap:
        z = self.logits(self.features(image, roi))
        p = _softmax(z)
        g = self.config.grid
        return Heatmap(p.reshape(-1, g, g), roi)

    # ---- persistence -----------------------------------------------------

    def save(self, path) -> None:
        # through a file handle so numpy does not append ".npz" to the name
        with open(path, "wb") as fh:
            np.savez(fh, weights=self.weights, bias=self.bias, config=json.dumps(asdict(self.config)))

    @classmethod
    def load(cls, path) -> "ToyModel":
        with np.load(path, allow_pickle=False) as z:
            config = ModelConfig(**json.loads(str(z["config"])))
            return cls(config, z["weights"], z["bias"])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def target_cells(inst: Instance, grid: int, roi=None) -> tuple[np.ndarray, np.ndarray]:
    """GT cell index per keypoint and the labeled mask, relative to ``roi``.

    ``roi`` defaults to the instance box; keypoints falling outside it are
    masked out.
    """
    kps = inst.keypoint_array()
    x1, y1, x2, y2 = inst.bbox if roi is None else roi
    u = (kps[:, 0] - x1) / max(x2 - x1, 1e-12)
    v = (kps[:, 1] - y1) / max(y2 - y1, 1e-12)
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    j = np.floor(u * grid).astype(int).clip(0, grid - 1)
    i = np.floor(v * grid).astype(int).clip(0, grid - 1)
    return i * grid + j, (kps[:, 2] > 0) & inside


def loss_and_grad(model: ToyModel, batch: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]):
    """Mean cross-entropy of the GT cells and its gradient.

    ``batch`` holds ``(features, target_cells, labeled_mask)`` triples.
    Returns ``(loss, dW, dB)``; the loss is averaged over labeled
    keypoints in the batch.
    """
    k = model.weights.shape[0]
    dw = np.zeros_like(model.weights)
    db = np.zeros((k, model.bias[0].size))
    total, count = 0.0, 0
    for feats, cells, vis in batch:
        if not vis.any():
            continue
        p = _softmax(model.logits(feats))
        ks = np.nonzero(vis)[0]
        total -= float(np.log(p[ks, cells[ks]] + 1e-300).sum())
        count += len(ks)
        delta = p[ks].copy()
        delta[np.arange(len(ks)), cells[ks]] -= 1.0
        dw[ks] += delta @ feats
        db[ks] += delta
    if count == 0:
        return 0.0, dw, db.reshape(model.bias.shape)
    return total / count, dw / count, (db / count).reshape(model.bias.shape)


def training_rois(model: ToyModel, im: ImageRecord) -> list[tuple[Instance, tuple]]:
    """RoIs the keypoint head trains on: every annotated box, plus the best
    proposal of each instance when it overlaps by IoU >= ``match_iou``."""
    out = []
    keyed = [inst for inst in im.instances if inst.keypoints is not None and inst.num_visible > 0]
    if not keyed:
        return out
    props = model.propose(im.pixels) if model.config.train_on_proposals else []
    for inst in keyed:
        out.append((inst, inst.bbox))
        if props:
            best = max(props, key=lambda p: iou(p.box, inst.bbox))
            if iou(best.box, inst.bbox) >= model.config.match_iou and best.box != inst.bbox:
                out.append((inst, best.box))
    return out


def _image_examples(model: ToyModel, im: ImageRecord):
    out = []
    for inst, roi in training_rois(model, im):
        cells, vis = target_cells(inst, model.config.grid, roi)
        if vis.any():
            out.append((model.features(im.pixels, roi).astype(np.float32), cells, vis))
    return out


def probe_batch(model: ToyModel, ds: Dataset, n_images: int = 8):
    """Fixed examples from the first ``n_images`` images, for monitoring loss."""
    batch = []
    for im in ds.images[:n_images]:
        batch.extend(_image_examples(model, im))
    return batch


def train_toy(model: ToyModel, ds: Dataset, plan: SchedulePlan, sampler: MixSampler, seed: int = 0) -> ToyModel:
    """SGD on the keypoint head over ``plan.total_iters`` minibatches.

    Returns a new model; the input is left untouched.  ``seed`` is unused
    by the updates themselves (the sampler carries the randomness) and is
    kept so training calls are self-describing.
    """
    model = model.copy()
    index = {im.image_id: im for im in ds.images}
    cache: dict[int, list] = {}
    for it in range(plan.total_iters):
        lr = lr_at(it, plan)
        batch = []
        for image_id, _pool in sampler.next_batch(plan.batch_size):
            if image_id not in cache:
                cache[image_id] = _image_examples(model, index[image_id])
            batch.extend(cache[image_id])
        loss, dw, db = loss_and_grad(model, batch)
        if not math.isfinite(loss):
            raise TrainingDivergenceError(f"non-finite loss at iteration {it}")
        model.weights -= lr * dw
        model.bias -= lr * db
        if not (np.isfinite(model.weights).all() and np.isfinite(model.bias).all()):
            raise TrainingDivergenceError(f"non-finite parameters after iteration {it}")
    return model


@dataclass
class ToyTrainer:
    """Fits a freshly initialized :class:`ToyModel` on a (possibly merged) dataset."""

    config: ModelConfig = ModelConfig()

    def fit(self, ds: Dataset, plan: SchedulePlan, seed: int = 0) -> ToyModel:
        lab, gen = pool_ids(ds)
        mix = plan.mix_mode if gen else FixedRatio(1.0)
        if not lab:
            lab, mix = gen, FixedRatio(1.0)
            gen = []
        sampler = MixSampler(lab, gen, mix, seed)
        return train_toy(ToyModel.initialize(self.config, seed), ds, plan, sampler, seed)
