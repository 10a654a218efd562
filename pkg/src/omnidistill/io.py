"""COCO-style JSON datasets with an optional binary pixel sidecar.

Layout of a dataset file::

    {"info": {"provenance": "labeled", "pixels": "train.json.pixels"},
     "images": [{"id", "width", "height", "file_name"?, "provenance"?}],
     "annotations": [{"id", "image_id", "category_id", "bbox": [x, y, w, h],
                      "score"?, "keypoints"?: [x1, y1, v1, ...],
                      "keypoint_scores"?, "source"?, "bbox_xyxy"?}],
     "categories": [{"id", "name", "keypoints"?, "flip_pairs"?, "oks_kappas"?}]}

``flip_pairs``, ``oks_kappas``, ``source``, ``keypoint_scores``, image
``provenance`` and ``info`` are extensions; readers that only know plain
COCO ignore them.  ``bbox_xyxy`` is written only when ``x + w`` does not
reproduce the corner exactly in floating point, so reading a file back
always gives the same boxes.

The sidecar holds the pixels of every image: a 16-byte little-endian
header (magic ``ODPX``, width u32, height u32, count u32) followed by
``count`` row-major float32 arrays in image order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .datamodel import Category, Dataset, ImageRecord, Instance, KeypointSchema, Provenance, Source
from .errors import DistillError, InputFormatError

PIXEL_MAGIC = b"ODPX"
_HEADER = struct.Struct("<4sIII")


# ---- to JSON ----------------------------------------------------------------


def _category_json(c: Category) -> dict:
    out: dict[str, Any] = {"id": c.id, "name": c.name}
    if c.keypoints is not None:
        out["keypoints"] = list(c.keypoints.names)
        out["flip_pairs"] = [list(p) for p in c.keypoints.flip_pairs]
        out["oks_kappas"] = list(c.keypoints.oks_kappas)
    return out


def _annotation_json(ann_id: int, image_id: int, inst: Instance) -> dict:
    x1, y1, x2, y2 = inst.bbox
    w, h = x2 - x1, y2 - y1
    out: dict[str, Any] = {
        "id": ann_id, "image_id": image_id, "category_id": inst.category_id, "bbox": [x1, y1, w, h],
    }
    if x1 + w != x2 or y1 + h != y2:
        out["bbox_xyxy"] = [x1, y1, x2, y2]
    if inst.score is not None:
        out["score"] = inst.score
    if inst.keypoints is not None:
        out["keypoints"] = [c for kp in inst.keypoints for c in kp]
    if inst.keypoint_scores is not None:
        out["keypoint_scores"] = list(inst.keypoint_scores)
    out["source"] = inst.source.value
    return out


def dataset_to_json(ds: Dataset, pixels_file: Optional[str] = None) -> dict:
    images, anns = [], []
    for im in ds.images:
        entry: dict[str, Any] = {"id": im.image_id, "width": im.width, "height": im.height}
        if im.provenance is not None:
            entry["provenance"] = im.provenance.value
        images.append(entry)
        for inst in im.instances:
            anns.append(_annotation_json(len(anns) + 1, im.image_id, inst))
    info: dict[str, Any] = {"provenance": ds.provenance.value}
    if pixels_file is not None:
        info["pixels"] = pixels_file
    return {
        "info": info,
        "images": images,
        "annotations": anns,
        "categories": [_category_json(c) for c in ds.categories],
    }


def dumps(obj: dict) -> str:
    """Canonical text form: fixed key order and spacing, trailing newline."""
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


# ---- from JSON --------------------------------------------------------------


class _Field:
    """Reads typed values out of nested JSON, naming the offending path on failure."""

    def __init__(self, source: str):
        self.source = source

    def fail(self, path: str, msg: str):
        raise InputFormatError(f"{self.source}: field {path}: {msg}")

    def get(self, obj: dict, key: str, path: str, kind, required: bool = True):
        if not isinstance(obj, dict):
            self.fail(path, "expected an object")
        if key not in obj:
            if required:
                self.fail(f"{path}.{key}", "missing")
            return None
        return self.check(obj[key], f"{path}.{key}", kind)

    def check(self, v, path: str, kind):
        ok = {
            "int": isinstance(v, int) and not isinstance(v, bool),
            "num": isinstance(v, (int, float)) and not isinstance(v, bool),
            "str": isinstance(v, str),
            "list": isinstance(v, list),
            "obj": isinstance(v, dict),
        }[kind]
        if not ok:
            self.fail(path, f"expected {kind}, got {type(v).__name__}")
        return v

    def numbers(self, v, path: str, length: Optional[int] = None) -> list:
        self.check(v, path, "list")
        for i, x in enumerate(v):
            self.check(x, f"{path}[{i}]", "num")
        if length is not None and len(v) != length:
            self.fail(path, f"expected {length} numbers, got {len(v)}")
        return v


def _parse_category(f: _Field, c, path: str) -> Category:
    f.check(c, path, "obj")
    cid = f.get(c, "id", path, "int")
    name = f.get(c, "name", path, "str")
    names = f.get(c, "keypoints", path, "list", required=False)
    if not names:
        return Category(cid, name)
    pairs = f.get(c, "flip_pairs", path, "list", required=False) or []
    for i, p in enumerate(pairs):
        f.numbers(p, f"{path}.flip_pairs[{i}]", 2)
    kappas = f.get(c, "oks_kappas", path, "list", required=False)
    if kappas is not None:
        f.numbers(kappas, f"{path}.oks_kappas")
    try:
        return Category(cid, name, KeypointSchema(tuple(names), tuple(tuple(p) for p in pairs), kappas))
    except DistillError as e:
        f.fail(path, str(e))


def _parse_annotation(f: _Field, a, path: str) -> tuple[int, Instance]:
    f.check(a, path, "obj")
    image_id = f.get(a, "image_id", path, "int")
    cid = f.get(a, "category_id", path, "int")
    xyxy = a.get("bbox_xyxy") if isinstance(a, dict) else None
    if xyxy is not None:
        box = tuple(f.numbers(xyxy, f"{path}.bbox_xyxy", 4))
    else:
        x, y, w, h = f.numbers(f.get(a, "bbox", path, "list"), f"{path}.bbox", 4)
        box = (x, y, x + w, y + h)
    score = f.get(a, "score", path, "num", required=False)
    flat = f.get(a, "keypoints", path, "list", required=False)
    kps = None
    if flat is not None:
        f.numbers(flat, f"{path}.keypoints")
        if len(flat) % 3:
            f.fail(f"{path}.keypoints", "length is not a multiple of 3")
        kps = tuple((flat[i], flat[i + 1], flat[i + 2]) for i in range(0, len(flat), 3))
    kscores = f.get(a, "keypoint_scores", path, "list", required=False)
    if kscores is not None:
        kscores = tuple(f.numbers(kscores, f"{path}.keypoint_scores"))
    source = f.get(a, "source", path, "str", required=False) or Source.GROUND_TRUTH.value
    try:
        return image_id, Instance(cid, box, score, kps, kscores, Source(source))
    except (DistillError, ValueError) as e:
        f.fail(path, str(e))


def dataset_from_json(obj, source: str = "<dataset>", pixels: Optional[list] = None) -> Dataset:
    """Build a dataset from parsed JSON; ``pixels`` is an optional per-image array list."""
    f = _Field(source)
    f.check(obj, "$", "obj")
    info = f.get(obj, "info", "$", "obj", required=False) or {}
    prov = f.get(info, "provenance", "$.info", "str", required=False) or Provenance.LABELED.value
    cats = tuple(_parse_category(f, c, f"$.categories[{i}]")
                 for i, c in enumerate(f.get(obj, "categories", "$", "list")))
    raw_images = f.get(obj, "images", "$", "list")
    if pixels is not None and len(pixels) != len(raw_images):
        f.fail("$.images", f"{len(raw_images)} images but {len(pixels)} pixel arrays")
    per_image: dict[int, list] = {}
    order = []
    for i, im in enumerate(raw_images):
        path = f"$.images[{i}]"
        iid = f.get(im, "id", path, "int")
        if iid in per_image:
            f.fail(f"{path}.id", f"duplicate image id {iid}")
        per_image[iid] = []
        order.append((iid, f.get(im, "width", path, "int"), f.get(im, "height", path, "int"),
                      f.get(im, "provenance", path, "str", required=False)))
    for i, a in enumerate(f.get(obj, "annotations", "$", "list", required=False) or []):
        image_id, inst = _parse_annotation(f, a, f"$.annotations[{i}]")
        if image_id not in per_image:
            f.fail(f"$.annotations[{i}].image_id", f"unknown image id {image_id}")
        per_image[image_id].append(inst)
    try:
        images = tuple(
            ImageRecord(iid, w, h, tuple(per_image[iid]), None if pixels is None else pixels[k],
                        None if p is None else Provenance(p))
            for k, (iid, w, h, p) in enumerate(order)
        )
        return Dataset(images, cats, Provenance(prov))
    except (DistillError, ValueError) as e:
        raise InputFormatError(f"{source}: {e}") from e


# ---- pixel sidecar ----------------------------------------------------------


def write_pixels(path, arrays) -> None:
    arrays = [np.asarray(a, dtype="<f4") for a in arrays]
    if not arrays:
        raise ValueError("no pixel arrays to write")
    h, w = arrays[0].shape
    if any(a.shape != (h, w) for a in arrays):
        raise ValueError("all images in a pixel file must share one size")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PIXEL_MAGIC, w, h, len(arrays)))
        for a in arrays:
            fh.write(np.ascontiguousarray(a).tobytes())


def read_pixels(path) -> list[np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise InputFormatError(f"{path}: {e.strerror}") from e
    if len(data) < _HEADER.size:
        raise InputFormatError(f"{path}: truncated pixel header")
    magic, w, h, n = _HEADER.unpack_from(data)
    if magic != PIXEL_MAGIC:
        raise InputFormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * w * h * n
    if len(data) != expected:
        raise InputFormatError(f"{path}: expected {expected} bytes for {n} images of {w}x{h}, got {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return [flat[i * w * h:(i + 1) * w * h].reshape(h, w).astype(np.float32) for i in range(n)]


# ---- files ------------------------------------------------------------------


def save_dataset(ds: Dataset, path, pixels: Optional[bool] = None) -> None:
    """Write ``ds`` to ``path``; pixels go to ``<path>.pixels`` when every image has them.

    ``pixels=True`` demands a sidecar, ``False`` suppresses it.
    """
    path = Path(path)
    have = bool(ds.images) and all(im.pixels is not None for im in ds.images)
    if pixels and not have:
        raise ValueError("not every image carries pixels")
    sidecar = None
    if have and pixels is not False:
        sidecar = path.name + ".pixels"
        write_pixels(path.parent / sidecar, [im.pixels for im in ds.images])
    path.write_text(dumps(dataset_to_json(ds, sidecar)))


def load_json(path) -> Any:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InputFormatError(f"{path}: {e.strerror}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InputFormatError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e


def load_dataset(path) -> Dataset:
    obj = load_json(path)
    pixels = None
    info = obj.get("info") if isinstance(obj, dict) else None
    if isinstance(info, dict) and info.get("pixels"):
        pixels = read_pixels(Path(os.path.dirname(os.fspath(path)) or ".") / info["pixels"])
    return dataset_from_json(obj, str(path), pixels)
