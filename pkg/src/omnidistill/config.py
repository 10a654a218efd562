"""Run configuration: JSON files validated against a schema, layered over packaged defaults.

A user file only needs the keys it changes; everything else comes from
``data/defaults.json``.  Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import json
import math
from importlib import resources
from typing import Any, Optional

import jsonschema

from .distill import DistillConfig
from .errors import InputFormatError
from .evaluation import KEYPOINTS, EvalConfig
from .geometry import TransformSet
from .io import load_json
from .synth.experiment import ExperimentSpec
from .synth.model import ModelConfig
from .synth.world import WorldConfig


def _obj(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}
_UNIT = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}
_INT = {"type": "integer"}
_NAT = {"type": "integer", "minimum": 0}
_POSINT = {"type": "integer", "minimum": 1}
_BOOL = {"type": "boolean"}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_PATH = {"type": ["string", "null"]}

SCHEMA = _obj({
    "world": _obj({
        "width": _POSINT, "height": _POSINT,
        "mean_instances": {"type": "number", "minimum": 0}, "max_instances": _NAT,
        "offsets": {"type": "array", "items": _PAIR, "minItems": 1},
        "amplitudes": {"type": "array", "items": _POS, "minItems": 1},
        "keypoint_names": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "blob_sigma": _POS, "scale_range": _PAIR, "flip_prob": _PROB,
        "mean_distractors": {"type": "number", "minimum": 0}, "distractor_amplitude": _PAIR,
        "noise_sigma": {"type": "number", "minimum": 0}, "box_pad": {"type": "number", "minimum": 0},
        "min_gap": {"type": "number", "minimum": 0}, "kappa": _POS,
    }),
    "model": _obj({
        "grid": _POSINT, "patch": {"type": "integer", "minimum": 1, "multipleOf": 1},
        "smooth_sigma": _POS, "threshold": _NUM, "group_radius": _NAT, "box_pad": {"type": "number", "minimum": 0},
        "min_pixels": _POSINT, "score_mass": _POS, "init_std": {"type": "number", "minimum": 0},
        "train_on_proposals": _BOOL, "match_iou": _UNIT,
    }),
    "transforms": _obj({
        "scales": {"type": "array", "items": _POSINT, "minItems": 1},
        "include_flip": _BOOL,
    }),
    "distill": _obj({"nms_thresh": _UNIT, "vote_thresh": _UNIT, "per_category": _BOOL}),
    "schedule": _obj({
        "base_iters": _NAT, "base_lr": _POS,
        "milestones": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "lr_decay": _POS, "batch_size": _POSINT, "labeled_prob": _PROB, "student_multiple": _POS,
    }),
    "eval": _obj({
        "iou_thresholds": {"type": "array", "items": _UNIT, "minItems": 1},
        "area_ranges": {
            "type": "object", "required": ["all"],
            "additionalProperties": {
                "type": "array", "minItems": 2, "maxItems": 2,
                "prefixItems": [_NUM, {"type": ["number", "null"]}],
                "items": {"type": ["number", "null"]},
            },
        },
        "max_dets": _POSINT, "recall_points": {"type": "integer", "minimum": 2},
    }),
    "experiment": _obj({
        "n_labeled": _POSINT, "n_unlabeled": _NAT, "n_test": _POSINT,
        "seeds": {"type": "array", "items": _INT, "minItems": 1},
    }),
    "paths": _obj({"labeled": _PATH, "unlabeled": _PATH, "test": _PATH, "out": _PATH}),
})


def defaults() -> dict:
    text = resources.files("omnidistill").joinpath("data/defaults.json").read_text()
    return json.loads(text)


def _overlay(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "area_ranges":
            out[k] = _overlay(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: Any, source: str = "<config>") -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path)
        raise InputFormatError(f"{source}: field {where}: {e.message}") from None


def resolve(user: Optional[dict] = None, source: str = "<config>") -> dict:
    """Validate ``user`` and layer it over the defaults."""
    user = {} if user is None else user
    validate(user, source)
    cfg = _overlay(defaults(), user)
    validate(cfg, source)
    n_kp = len(cfg["world"]["offsets"])
    if len(cfg["world"]["amplitudes"]) != n_kp or len(cfg["world"]["keypoint_names"]) != n_kp:
        raise InputFormatError(f"{source}: field $.world: offsets, amplitudes and keypoint_names differ in length")
    return cfg


def load_config(path=None) -> dict:
    if path is None:
        return resolve()
    return resolve(load_json(path), str(path))


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v


def world_config(cfg: dict) -> WorldConfig:
    return WorldConfig(**{k: _tuples(v) for k, v in cfg["world"].items()})


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(num_keypoints=len(cfg["world"]["offsets"]), **cfg["model"])


def transform_set(cfg: dict) -> TransformSet:
    t = cfg["transforms"]
    return TransformSet(tuple(t["scales"]), t["include_flip"])


def eval_config(cfg: dict) -> EvalConfig:
    e = cfg["eval"]
    ranges = {k: (lo, math.inf if hi is None else hi) for k, (lo, hi) in e["area_ranges"].items()}
    return EvalConfig(tuple(e["iou_thresholds"]), ranges, e["max_dets"], e["recall_points"])


def distill_config(cfg: dict, task: str = KEYPOINTS, tta: bool = True, workers: int = 1) -> DistillConfig:
    d = cfg["distill"]
    return DistillConfig(transform_set(cfg) if tta else None, d["nms_thresh"], d["vote_thresh"],
                         d["per_category"], task, workers=workers)


def experiment_spec(cfg: dict) -> ExperimentSpec:
    s, x = cfg["schedule"], cfg["experiment"]
    return ExperimentSpec(
        n_labeled=x["n_labeled"], n_unlabeled=x["n_unlabeled"], n_test=x["n_test"], seeds=tuple(x["seeds"]),
        transforms=transform_set(cfg), base_iters=s["base_iters"], base_lr=s["base_lr"],
        milestones=tuple(s["milestones"]), lr_decay=s["lr_decay"], batch_size=s["batch_size"],
        labeled_prob=s["labeled_prob"], student_multiple=s["student_multiple"],
        nms_thresh=cfg["distill"]["nms_thresh"], vote_thresh=cfg["distill"]["vote_thresh"],
        per_category=cfg["distill"]["per_category"],
        world=world_config(cfg), model=model_config(cfg), eval=eval_config(cfg),
    )
