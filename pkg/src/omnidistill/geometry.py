"""Invertible geometric transforms for points, boxes, images and RoI heatmaps.

Coordinates are continuous: an image of size ``W x H`` spans ``[0, W] x [0, H]``
and pixel ``(i, j)`` covers ``[j, j+1] x [i, i+1]``.  Horizontal flip is
``x -> W - x`` so it is an exact involution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ContextError, DegenerateScaleError, SchemaError

Point2 = tuple[float, float]
Box = tuple[float, float, float, float]

IDENTITY = "identity"
HFLIP = "hflip"
SCALE = "scale"
COMPOSITE = "composite"


@dataclass(frozen=True)
class Transform:
    """A geometric transform.

    Build instances with :meth:`identity`, :meth:`hflip`, :meth:`scale` and
    :meth:`compose` rather than the raw constructor.  ``width``/``height``
    are the size of the image the transform is applied to; only HFlip needs
    them.
    """

    kind: str
    factor: float = 1.0
    width: Optional[int] = None
    height: Optional[int] = None
    parts: tuple["Transform", ...] = ()

    def __post_init__(self):
        if self.kind not in (IDENTITY, HFLIP, SCALE, COMPOSITE):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == SCALE and not self.factor > 0:
            raise ValueError(f"scale factor must be positive, got {self.factor}")
        if self.kind == COMPOSITE and not self.parts:
            raise ValueError("composite transform needs at least one part")

    @classmethod
    def identity(cls) -> "Transform":
        return cls(IDENTITY)

    @classmethod
    def hflip(cls, width: Optional[int] = None, height: Optional[int] = None) -> "Transform":
        return cls(HFLIP, width=width, height=height)

    @classmethod
    def scale(cls, factor: float) -> "Transform":
        return cls(SCALE, factor=float(factor))

    @classmethod
    def compose(cls, *parts: "Transform") -> "Transform":
        """Composite applying ``parts`` left to right."""
        return cls(COMPOSITE, parts=tuple(parts))

    @property
    def is_mirrored(self) -> bool:
        """True when the transform contains an odd number of flips."""
        if self.kind == HFLIP:
            return True
        if self.kind == COMPOSITE:
            return sum(p.is_mirrored for p in self.parts) % 2 == 1
        return False

    def __repr__(self):
        if self.kind == IDENTITY:
            return "Identity"
        if self.kind == HFLIP:
            return f"HFlip(W={self.width})"
        if self.kind == SCALE:
            return f"Scale({self.factor:g})"
        return "Composite[" + ", ".join(repr(p) for p in self.parts) + "]"


def _flip_width(t: Transform) -> float:
    if t.width is None:
        raise ContextError("HFlip requires the image width")
    return float(t.width)


def apply_point(t: Transform, p: Point2) -> Point2:
    x, y = float(p[0]), float(p[1])
    if t.kind == IDENTITY:
        return (x, y)
    if t.kind == HFLIP:
        return (_flip_width(t) - x, y)
    if t.kind == SCALE:
        return (t.factor * x, t.factor * y)
    for part in t.parts:
        x, y = apply_point(part, (x, y))
    return (x, y)


def apply_points(t: Transform, pts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`apply_point` over an ``(n, 2)`` array."""
    out = np.array(pts, dtype=float, copy=True).reshape(-1, 2)
    if t.kind == HFLIP:
        out[:, 0] = _flip_width(t) - out[:, 0]
    elif t.kind == SCALE:
        out *= t.factor
    elif t.kind == COMPOSITE:
        for part in t.parts:
            out = apply_points(part, out)
    return out


def invert(t: Transform) -> Transform:
    if t.kind in (IDENTITY, HFLIP):
        return t
    if t.kind == SCALE:
        return Transform.scale(1.0 / t.factor)
    return Transform.compose(*(invert(p) for p in reversed(t.parts)))


def apply_box(t: Transform, b: Box) -> Box:
    x1, y1 = apply_point(t, (b[0], b[1]))
    x2, y2 = apply_point(t, (b[2], b[3]))
    return (min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


def box_area(b: Box) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def clip_box(b: Box, width: float, height: float) -> Box:
    x1 = min(max(b[0], 0.0), width)
    y1 = min(max(b[1], 0.0), height)
    x2 = min(max(b[2], 0.0), width)
    y2 = min(max(b[3], 0.0), height)
    return (x1, y1, max(x1, x2), max(y1, y2))


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def scaled_size(width: int, height: int, factor: float) -> tuple[int, int]:
    return _round_half_up(width * factor), _round_half_up(height * factor)


def _resample_axis(n_out: int, n_in: int, factor: float):
    # destination pixel centre (k + 0.5) maps back to source coordinate (k + 0.5) / factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, factor: float) -> np.ndarray:
    h, w = img.shape[:2]
    new_w, new_h = scaled_size(w, h, factor)
    if new_w < 1 or new_h < 1:
        raise DegenerateScaleError(f"scale {factor} maps {w}x{h} to {new_w}x{new_h}")
    y0, y1, wy = _resample_axis(new_h, h, factor)
    x0, x1, wx = _resample_axis(new_w, w, factor)
    img = np.asarray(img, dtype=float)
    wy = wy[:, None]
    wx = wx[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def apply_image(t: Transform, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.size == 0:
        raise ValueError("image is empty")
    if t.kind == IDENTITY:
        return img.copy()
    if t.kind == HFLIP:
        if t.width is not None and t.width != img.shape[1]:
            raise ContextError(f"HFlip context width {t.width} != image width {img.shape[1]}")
        return img[:, ::-1].copy()
    if t.kind == SCALE:
        return resize_bilinear(img, t.factor)
    for part in t.parts:
        img = apply_image(part, img)
    return img


@dataclass(frozen=True, eq=False)
class Heatmap:
    """``K`` probability grids of shape ``(h, w)`` local to ``roi``."""

    channels: np.ndarray
    roi: Box

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=float)
        if ch.ndim != 3 or ch.shape[1] < 1 or ch.shape[2] < 1:
            raise ValueError(f"heatmap must be (K, h, w), got shape {ch.shape}")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "roi", tuple(float(v) for v in self.roi))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels.shape


def validate_flip_pairs(flip_pairs: Sequence[tuple[int, int]], k: int) -> None:
    seen: set[int] = set()
    for a, b in flip_pairs:
        for idx in (a, b):
            if not 0 <= idx < k:
                raise SchemaError(f"flip pair index {idx} outside [0, {k})")
            if idx in seen:
                raise SchemaError(f"keypoint {idx} appears in more than one flip pair")
            seen.add(idx)
        if a == b:
            raise SchemaError(f"flip pair ({a}, {b}) pairs a keypoint with itself")


def flip_heatmap(h: Heatmap, flip_pairs: Sequence[tuple[int, int]], roi: Optional[Box] = None) -> Heatmap:
    """Mirror every channel's columns and swap paired channels.

    ``roi`` replaces the heatmap's RoI when given (the caller knows the
    RoI in the unflipped frame).
    """
    k = h.channels.shape[0]
    validate_flip_pairs(flip_pairs, k)
    order = list(range(k))
    for a, b in flip_pairs:
        order[a], order[b] = b, a
    mirrored = h.channels[order, :, ::-1].copy()
    return Heatmap(mirrored, h.roi if roi is None else roi)


@dataclass(frozen=True)
class TransformSet:
    """Target shorter-side lengths plus an optional horizontal flip."""

    scales: tuple[float, ...]
    include_flip: bool = True
    reference_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if not scales:
            raise ValueError("TransformSet needs at least one scale")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must be strictly increasing, got {scales}")
        if any(s <= 0 for s in scales):
            raise ValueError("scales must be positive")
        object.__setattr__(self, "scales", scales)

    def for_image(self, width: int, height: int) -> "TransformSet":
        return replace(self, reference_size=(int(width), int(height)))

    def __len__(self):
        return len(self.scales) * (2 if self.include_flip else 1)


def build_transforms(ts: TransformSet) -> list[Transform]:
    """Scales ascending, each unflipped then flipped."""
    if ts.reference_size is None:
        raise ContextError("TransformSet needs a reference image size")
    w, h = ts.reference_size
    shorter = min(w, h)
    out = []
    for s in ts.scales:
        factor = s / shorter
        scale = Transform.scale(factor)
        out.append(scale)
        if ts.include_flip:
            sw, sh = scaled_size(w, h, factor)
            out.append(Transform.compose(scale, Transform.hflip(sw, sh)))
    return out
