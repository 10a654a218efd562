"""Annotated datasets: schema, instances, images, statistics and merging."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import MergeError, SchemaError, StatisticsError
from .geometry import Box, clip_box, validate_flip_pairs


class Source(str, enum.Enum):
    GROUND_TRUTH = "gt"
    GENERATED = "generated"


class Provenance(str, enum.Enum):
    LABELED = "labeled"
    GENERATED = "generated"
    UNION = "union"


@dataclass(frozen=True)
class KeypointSchema:
    names: tuple[str, ...]
    flip_pairs: tuple[tuple[int, int], ...] = ()
    oks_kappas: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        names = tuple(self.names)
        pairs = tuple((int(a), int(b)) for a, b in self.flip_pairs)
        kappas = tuple(float(k) for k in self.oks_kappas) if self.oks_kappas is not None else (0.1,) * len(names)
        if not names:
            raise SchemaError("keypoint schema needs at least one keypoint")
        validate_flip_pairs(pairs, len(names))
        if len(kappas) != len(names):
            raise SchemaError(f"{len(kappas)} OKS constants for {len(names)} keypoints")
        if any(not k > 0 for k in kappas):
            raise SchemaError("OKS constants must be positive")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "flip_pairs", pairs)
        object.__setattr__(self, "oks_kappas", kappas)

    @property
    def num_keypoints(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    keypoints: Optional[KeypointSchema] = None


Keypoint = tuple[float, float, int]


@dataclass(frozen=True)
class Instance:
    """One object annotation or prediction.

    ``keypoints`` holds ``K`` ``(x, y, v)`` triplets with ``v`` in {0, 1};
    ``keypoint_scores`` holds the per-keypoint confidence of generated
    keypoints.
    """

    category_id: int
    bbox: Box
    score: Optional[float] = None
    keypoints: Optional[tuple[Keypoint, ...]] = None
    keypoint_scores: Optional[tuple[float, ...]] = None
    source: Source = Source.GROUND_TRUTH

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        b = self.bbox
        if len(b) != 4 or b[0] > b[2] or b[1] > b[3]:
            raise SchemaError(f"invalid box {b}")
        if self.score is not None:
            s = float(self.score)
            if not 0.0 <= s <= 1.0:
                raise SchemaError(f"score {s} outside [0, 1]")
            object.__setattr__(self, "score", s)
        if self.keypoints is not None:
            kps = []
            for x, y, v in self.keypoints:
                v = int(v)
                if v not in (0, 1):
                    raise SchemaError(f"keypoint visibility must be 0 or 1, got {v}")
                kps.append((float(x), float(y), v) if v else (0.0, 0.0, 0))
            object.__setattr__(self, "keypoints", tuple(kps))
        if self.keypoint_scores is not None:
            ks = tuple(float(c) for c in self.keypoint_scores)
            if self.keypoints is None or len(ks) != len(self.keypoints):
                raise SchemaError("keypoint_scores must match keypoints")
            object.__setattr__(self, "keypoint_scores", ks)
        object.__setattr__(self, "source", Source(self.source))
        if self.source is Source.GENERATED and self.score is None:
            raise SchemaError("generated instances must carry a score")

    @property
    def num_visible(self) -> int:
        if self.keypoints is None:
            return 0
        return sum(v for _, _, v in self.keypoints)

    def keypoint_array(self) -> np.ndarray:
        return np.asarray(self.keypoints, dtype=float).reshape(-1, 3)


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    instances: tuple[Instance, ...] = ()
    pixels: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    provenance: Optional[Provenance] = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SchemaError(f"image {self.image_id} has size {self.width}x{self.height}")
        clipped = tuple(
            inst if clip_box(inst.bbox, self.width, self.height) == inst.bbox
            else replace(inst, bbox=clip_box(inst.bbox, self.width, self.height))
            for inst in self.instances
        )
        object.__setattr__(self, "instances", clipped)
        if self.pixels is not None:
            px = np.asarray(self.pixels, dtype=np.float32)
            if px.shape != (self.height, self.width):
                raise SchemaError(f"image {self.image_id}: pixels {px.shape} != ({self.height}, {self.width})")
            object.__setattr__(self, "pixels", px)
        if self.provenance is not None:
            object.__setattr__(self, "provenance", Provenance(self.provenance))


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...]
    categories: tuple[Category, ...]
    provenance: Provenance = Provenance.LABELED

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        cats = {c.id: c for c in self.categories}
        if len(cats) != len(self.categories):
            raise SchemaError("duplicate category ids")
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate image ids")
        for im in self.images:
            for inst in im.instances:
                cat = cats.get(inst.category_id)
                if cat is None:
                    raise SchemaError(f"image {im.image_id}: unknown category {inst.category_id}")
                if inst.keypoints is not None:
                    k = cat.keypoints.num_keypoints if cat.keypoints else 0
                    if len(inst.keypoints) != k:
                        raise SchemaError(
                            f"image {im.image_id}: {len(inst.keypoints)} keypoints, schema has {k}"
                        )

    def __len__(self):
        return len(self.images)

    @property
    def category_ids(self) -> list[int]:
        return [c.id for c in self.categories]

    def category(self, category_id: int) -> Category:
        for c in self.categories:
            if c.id == category_id:
                return c
        raise KeyError(category_id)

    @property
    def keypoint_schema(self) -> Optional[KeypointSchema]:
        """Schema of the first keypointed category, if any."""
        for c in self.categories:
            if c.keypoints is not None:
                return c.keypoints
        return None

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    def subset(self, n: int) -> "Dataset":
        return replace(self, images=self.images[:n])

    def num_instances(self) -> int:
        return sum(len(im.instances) for im in self.images)


def avg_instances_per_image(ds: Dataset, category_id: Optional[int] = None) -> float:
    """Instances of ``category_id`` (all categories when None) per image."""
    if not ds.images:
        raise StatisticsError("cannot compute statistics of an empty dataset")
    total = sum(
        1 for im in ds.images for inst in im.instances
        if category_id is None or inst.category_id == category_id
    )
    return total / len(ds.images)


def avg_keypoints_per_instance(ds: Dataset) -> float:
    counts = [inst.num_visible for im in ds.images for inst in im.instances if inst.keypoints is not None]
    if not counts:
        raise StatisticsError("dataset has no keypoint-annotated instances")
    return sum(counts) / len(counts)


def keypoint_visibility_rates(ds: Dataset) -> np.ndarray:
    """Fraction of keypointed instances labeling each keypoint type."""
    rows = [inst.keypoint_array()[:, 2] for im in ds.images for inst in im.instances if inst.keypoints is not None]
    if not rows:
        raise StatisticsError("dataset has no keypoint-annotated instances")
    return np.mean(rows, axis=0)


def _tag(images: Sequence[ImageRecord], tag: Provenance) -> list[ImageRecord]:
    return [im if im.provenance is not None else replace(im, provenance=tag) for im in images]


def merge(labeled: Dataset, generated: Dataset) -> Dataset:
    """Union of a labeled and a generated dataset.

    Generated image ids are shifted past the labeled ids when the two id
    sets collide.  Generated annotations are taken as complete: nothing is
    marked as ignore.
    """
    if labeled.categories != generated.categories:
        raise MergeError("labeled and generated datasets have different category tables")
    lab_ids = {im.image_id for im in labeled.images}
    gen = list(generated.images)
    if lab_ids and any(im.image_id in lab_ids for im in gen):
        offset = max(lab_ids) + 1 - min(im.image_id for im in gen)
        gen = [replace(im, image_id=im.image_id + offset) for im in gen]
    images = _tag(labeled.images, Provenance.LABELED) + _tag(gen, Provenance.GENERATED)
    return Dataset(tuple(images), labeled.categories, Provenance.UNION)


def pool_ids(ds: Dataset) -> tuple[list[int], list[int]]:
    """Split image ids of a merged dataset into (labeled, generated) pools."""
    lab, gen = [], []
    for im in ds.images:
        (gen if im.provenance is Provenance.GENERATED else lab).append(im.image_id)
    return lab, gen
