"""Synthetic grayscale scenes of keypointed figures and distractor blobs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..datamodel import Category, Dataset, ImageRecord, Instance, KeypointSchema, Provenance

# template-local keypoint offsets (pixels at scale 1) and blob amplitudes
TEMPLATE_OFFSETS = ((0.0, -6.0), (-5.5, -1.5), (4.5, -2.0), (-3.5, 5.5), (3.0, 6.0))
TEMPLATE_AMPLITUDES = (1.0, 0.8, 0.65, 0.5, 0.35)
KEYPOINT_NAMES = ("apex", "arm_a", "arm_b", "leg_a", "leg_b")
CATEGORY_ID = 1


@dataclass(frozen=True)
class WorldConfig:
    width: int = 64
    height: int = 64
    mean_instances: float = 2.0
    max_instances: int = 4
    offsets: tuple = TEMPLATE_OFFSETS
    amplitudes: tuple = TEMPLATE_AMPLITUDES
    blob_sigma: float = 1.5
    scale_range: tuple = (0.8, 1.25)
    flip_prob: float = 0.5
    mean_distractors: float = 3.0
    distractor_amplitude: tuple = (0.3, 0.9)
    noise_sigma: float = 0.05
    box_pad: float = 3.0
    min_gap: float = 5.0
    kappa: float = 0.1
    keypoint_names: tuple = field(default=KEYPOINT_NAMES)

    @property
    def num_keypoints(self) -> int:
        return len(self.offsets)

    def schema(self) -> KeypointSchema:
        # keypoint identity is carried by blob amplitude, not by side, so a
        # mirrored figure keeps its labels and no channels pair up under flip
        return KeypointSchema(tuple(self.keypoint_names), (), (self.kappa,) * self.num_keypoints)

    def categories(self) -> tuple[Category, ...]:
        return (Category(CATEGORY_ID, "figure", self.schema()),)


def _render_blobs(canvas: np.ndarray, centers, amplitudes, sigma: float) -> None:
    h, w = canvas.shape
    ys = np.arange(h) + 0.5
    xs = np.arange(w) + 0.5
    for (cx, cy), a in zip(centers, amplitudes):
        gx = np.exp(-((xs - cx) ** 2) / (2 * sigma ** 2))
        gy = np.exp(-((ys - cy) ** 2) / (2 * sigma ** 2))
        canvas += a * np.outer(gy, gx)


def _gap(a, b) -> float:
    """Chebyshev distance between two boxes (0 when they intersect)."""
    dx = max(a[0] - b[2], b[0] - a[2], 0.0)
    dy = max(a[1] - b[3], b[1] - a[3], 0.0)
    return max(dx, dy)


def _figure(cfg: WorldConfig, rng: np.random.Generator):
    s = rng.uniform(*cfg.scale_range)
    flip = rng.random() < cfg.flip_prob
    off = np.asarray(cfg.offsets, dtype=float) * s
    if flip:
        off[:, 0] = -off[:, 0]
    lo = off.min(axis=0) - cfg.box_pad
    hi = off.max(axis=0) + cfg.box_pad
    cx = rng.uniform(-lo[0], cfg.width - hi[0])
    cy = rng.uniform(-lo[1], cfg.height - hi[1])
    kps = off + (cx, cy)
    box = (cx + lo[0], cy + lo[1], cx + hi[0], cy + hi[1])
    return kps, box


def render_image(cfg: WorldConfig, rng: np.random.Generator):
    """One image and its figure annotations, drawn from ``rng``."""
    n = min(int(rng.poisson(cfg.mean_instances)), cfg.max_instances)
    figures = []
    for _ in range(n):
        for _attempt in range(50):
            kps, box = _figure(cfg, rng)
            if all(_gap(box, b) >= cfg.min_gap for _, b in figures):
                figures.append((kps, box))
                break
    canvas = np.zeros((cfg.height, cfg.width))
    for kps, _ in figures:
        _render_blobs(canvas, kps, cfg.amplitudes, cfg.blob_sigma)
    n_dis = int(rng.poisson(cfg.mean_distractors))
    if n_dis:
        centers = np.column_stack([rng.uniform(0, cfg.width, n_dis), rng.uniform(0, cfg.height, n_dis)])
        amps = rng.uniform(*cfg.distractor_amplitude, n_dis)
        _render_blobs(canvas, centers, amps, cfg.blob_sigma)
    canvas += rng.normal(0.0, cfg.noise_sigma, canvas.shape)
    pixels = np.clip(canvas, 0.0, 1.0).astype(np.float32)
    instances = tuple(
        Instance(CATEGORY_ID, box, keypoints=tuple((float(x), float(y), 1) for x, y in kps))
        for kps, box in figures
    )
    return pixels, instances


def gen_world(cfg: WorldConfig, n_images: int, seed: int, stream: int = 0, first_id: int = 1) -> Dataset:
    """``n_images`` synthetic images; image ``i`` depends only on ``(seed, stream, i)``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    images = []
    for i in range(n_images):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream, i])))
        pixels, instances = render_image(cfg, rng)
        images.append(ImageRecord(first_id + i, cfg.width, cfg.height, instances, pixels))
    return Dataset(tuple(images), cfg.categories(), Provenance.LABELED)


def template_mass(cfg: WorldConfig) -> float:
    """Integrated intensity of one rendered figure."""
    return float(sum(cfg.amplitudes)) * 2 * np.pi * cfg.blob_sigma ** 2
