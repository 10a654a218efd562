"""Seeded experiments on the synthetic world.

Each seed draws three disjoint image streams (labeled, unlabeled, test)
and trains several arms:

* ``baseline``  labeled data only, base schedule (also the teacher)
* ``student``   data distillation from the baseline teacher
* ``upper``     labeled + unlabeled with their true labels

Keypoint and box AP on the test stream are reported per arm.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from ..datamodel import Dataset, Provenance, merge
from ..distill import DistillConfig, distill_round, evaluate_predictor, generate_labels
from ..evaluation import BOXES, KEYPOINTS, EvalConfig
from ..geometry import TransformSet
from ..schedule import FixedRatio, RhoRatio, SchedulePlan, plan_iterations
from .model import ModelConfig, ToyModel, ToyTrainer
from .world import WorldConfig, gen_world

log = logging.getLogger(__name__)

LABELED_STREAM, UNLABELED_STREAM, TEST_STREAM = 0, 1, 2


@dataclass(frozen=True)
class ExperimentSpec:
    n_labeled: int = 50
    n_unlabeled: int = 200
    n_test: int = 200
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    transforms: TransformSet = TransformSet((48, 56, 64, 72, 80), True)
    base_iters: int = 6000
    base_lr: float = 2.0
    milestones: tuple[float, ...] = (0.7, 0.9)
    lr_decay: float = 0.1
    batch_size: int = 2
    labeled_prob: float = 0.6
    student_multiple: float = 2.0
    nms_thresh: float = 0.5
    vote_thresh: float = 0.5
    per_category: bool = True
    world: WorldConfig = WorldConfig()
    model: ModelConfig = ModelConfig()
    eval: EvalConfig = EvalConfig()

    def base_plan(self) -> SchedulePlan:
        return SchedulePlan(self.base_iters, self.base_lr, self.milestones, self.lr_decay, FixedRatio(1.0),
                            self.batch_size)

    def student_plan(self, multiple: Optional[float] = None) -> SchedulePlan:
        mix = FixedRatio(self.labeled_prob)
        total = plan_iterations(self.base_iters, mix, self.student_multiple if multiple is None else multiple)
        return self.base_plan().with_iters(total).with_mix(mix)

    def distill_config(self, transforms: Optional[TransformSet] = "default") -> DistillConfig:
        ts = self.transforms if transforms == "default" else transforms
        return DistillConfig(ts, self.nms_thresh, self.vote_thresh, self.per_category, KEYPOINTS)


def make_splits(spec: ExperimentSpec, seed: int):
    labeled = gen_world(spec.world, spec.n_labeled, seed, LABELED_STREAM, first_id=1)
    unlabeled = (
        gen_world(spec.world, spec.n_unlabeled, seed, UNLABELED_STREAM, first_id=100_001)
        if spec.n_unlabeled > 0 else Dataset((), labeled.categories, Provenance.LABELED)
    )
    test = gen_world(spec.world, spec.n_test, seed, TEST_STREAM, first_id=200_001)
    return labeled, unlabeled, test


def strip_labels(ds: Dataset) -> Dataset:
    """Same images with every annotation removed."""
    return replace(ds, images=tuple(replace(im, instances=()) for im in ds.images))


def predict_tta(model, image: np.ndarray, transforms: Optional[TransformSet], schema, task: str = KEYPOINTS):
    """Multi-transform prediction of one test image (``None`` means a single pass)."""
    from ..distill import predict_image

    return predict_image(model, image, DistillConfig(transforms, task=task), schema)


def evaluate_model(model, test: Dataset, spec: ExperimentSpec, tta: bool = False, task: str = KEYPOINTS) -> float:
    cfg = DistillConfig(spec.transforms if tta else None, spec.nms_thresh, spec.vote_thresh, task=task)
    ap = evaluate_predictor(model, test, cfg, spec.eval).ap
    return float(ap) if ap is not None else float("nan")


@dataclass
class SeedContext:
    """Splits, teacher and generated labels of one seed, shared by several arms."""

    seed: int
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset
    teacher: ToyModel
    generated: Dataset
    calibration: object = None


def prepare_seed(spec: ExperimentSpec, seed: int) -> SeedContext:
    labeled, unlabeled, test = make_splits(spec, seed)
    teacher = ToyTrainer(spec.model).fit(labeled, spec.base_plan(), seed)
    generated, cal = generate_labels(teacher, strip_labels(unlabeled), labeled, spec.distill_config(),
                                     return_calibration=True)
    return SeedContext(seed, labeled, unlabeled, test, teacher, generated, cal)


def fit_student(spec: ExperimentSpec, ctx: SeedContext, plan: Optional[SchedulePlan] = None,
                generated: Optional[Dataset] = None) -> ToyModel:
    """Fresh student on labeled + generated data (the second half of a distillation round)."""
    union = merge(ctx.labeled, ctx.generated if generated is None else generated)
    return ToyTrainer(spec.model).fit(union, plan or spec.student_plan(), ctx.seed + 1)


def run_seed(spec: ExperimentSpec, seed: int, tta: bool = True, ctx: Optional[SeedContext] = None) -> dict:
    ctx = ctx or prepare_seed(spec, seed)
    test = ctx.test
    out = {"seed": seed}
    out["baseline"] = evaluate_model(ctx.teacher, test, spec)
    out["box_ap"] = evaluate_model(ctx.teacher, test, spec, task=BOXES)
    if tta:
        out["teacher_tta"] = evaluate_model(ctx.teacher, test, spec, tta=True)
    student = fit_student(spec, ctx)
    out["student"] = evaluate_model(student, test, spec)
    if tta:
        out["student_tta"] = evaluate_model(student, test, spec, tta=True)
    out["n_generated_instances"] = ctx.generated.num_instances()
    if ctx.unlabeled.images:
        upper = ToyTrainer(spec.model).fit(merge(ctx.labeled, ctx.unlabeled), spec.student_plan(), seed + 1)
        out["upper"] = evaluate_model(upper, test, spec)
    else:
        out["upper"] = out["baseline"]
    log.info("seed %d: %s", seed, out)
    return out


def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return {"mean": float(v.mean()), "std": sd, "se": sd / math.sqrt(len(v)), "n": int(len(v))}


def run_experiment(spec: ExperimentSpec, tta: bool = True, contexts: Optional[dict] = None) -> dict:
    contexts = _contexts(spec, contexts)
    per_seed = [run_seed(spec, s, tta, contexts[s]) for s in spec.seeds]
    arms = ["baseline", "student", "upper"] + (["teacher_tta", "student_tta"] if tta else [])
    agg = {arm: summarize([r[arm] for r in per_seed]) for arm in arms}
    agg["box_ap"] = summarize([r["box_ap"] for r in per_seed])
    return {"spec": spec_to_json(spec), "per_seed": per_seed, "aggregate": agg}


def format_table(report: dict) -> str:
    """Three-row summary: labeled only, data distillation, fully supervised."""
    agg = report["aggregate"]
    spec = report["spec"]
    rows = [
        ("labeled", "", agg["baseline"]),
        ("labeled", "unlabeled (DD)", agg["student"]),
        ("labeled+unlabeled (GT)", "", agg["upper"]),
    ]
    lines = [f"{'labeled':24s} {'unlabeled':16s} {'kp AP':>8s} {'std':>7s}"]
    for a, b, s in rows:
        lines.append(f"{a:24s} {b:16s} {100 * s['mean']:8.2f} {100 * s['std']:7.2f}")
    lines.append(f"(n_labeled={spec['n_labeled']}, n_unlabeled={spec['n_unlabeled']}, seeds={len(spec['seeds'])})")
    return "\n".join(lines)


def spec_to_json(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d["seeds"] = list(spec.seeds)
    d["transforms"] = {"scales": list(spec.transforms.scales), "include_flip": spec.transforms.include_flip}
    d["eval"] = {
        "iou_thresholds": list(spec.eval.iou_thresholds),
        "area_ranges": {k: [lo, None if math.isinf(hi) else hi] for k, (lo, hi) in spec.eval.area_ranges.items()},
        "max_dets": spec.eval.max_dets,
        "recall_points": spec.eval.recall_points,
    }
    return d


# ---- ablations --------------------------------------------------------------


def _contexts(spec: ExperimentSpec, contexts: Optional[dict]) -> dict:
    contexts = {} if contexts is None else contexts
    for seed in spec.seeds:
        if seed not in contexts:
            contexts[seed] = prepare_seed(spec, seed)
    return contexts


def iteration_ablation(spec: ExperimentSpec, multiples: Sequence[float] = (1.0, 3.0),
                       contexts: Optional[dict] = None) -> dict:
    """Student AP per iteration multiple, per seed."""
    contexts = _contexts(spec, contexts)
    out = {m: [] for m in multiples}
    for seed in spec.seeds:
        ctx = contexts[seed]
        for m in multiples:
            out[m].append(evaluate_model(fit_student(spec, ctx, spec.student_plan(m)), ctx.test, spec))
    return out


def teacher_sweep(spec: ExperimentSpec, teacher_sizes: Sequence[int] = (5, 10, 20, 50), seed: int = 0) -> dict:
    """Teachers of varying quality (trained on growing labeled subsets), one student each.

    Every student sees the full labeled set plus the teacher's labels.
    Returns teacher APs, student APs and their Spearman rank correlation.
    """
    labeled, unlabeled, test = make_splits(spec, seed)
    trainer = ToyTrainer(spec.model)
    pool = strip_labels(unlabeled)
    teacher_ap, student_ap = [], []
    for n in teacher_sizes:
        teacher = trainer.fit(labeled.subset(n), spec.base_plan(), seed)
        teacher_ap.append(evaluate_model(teacher, test, spec, tta=True))
        student, _ = distill_round(labeled, pool, trainer, spec.distill_config(), spec.student_plan(),
                                   teacher=teacher, seed=seed)
        student_ap.append(evaluate_model(student, test, spec))
    rho = stats.spearmanr(teacher_ap, student_ap).statistic
    return {"teacher_sizes": list(teacher_sizes), "teacher_ap": teacher_ap, "student_ap": student_ap,
            "spearman": float(rho)}


def rho_sweep(spec: ExperimentSpec, rhos: Sequence[float] = (0.25, 0.5, 1.0),
              contexts: Optional[dict] = None) -> dict:
    """Student AP using a fraction rho of the unlabeled pool, 1:rho mixing and (1+rho)x iterations.

    Labels for a fraction of the pool are regenerated, since count matching
    depends on the number of unlabeled images.
    """
    contexts = _contexts(spec, contexts)
    out = {r: [] for r in rhos}
    for seed in spec.seeds:
        ctx = contexts[seed]
        pool = strip_labels(ctx.unlabeled)
        for r in rhos:
            mix = RhoRatio(r)
            plan = spec.base_plan().with_iters(plan_iterations(spec.base_iters, mix)).with_mix(mix)
            n = int(round(r * len(pool.images)))
            generated = ctx.generated if n == len(pool.images) else generate_labels(
                ctx.teacher, pool.subset(n), ctx.labeled, spec.distill_config())
            out[r].append(evaluate_model(fit_student(spec, ctx, plan, generated), ctx.test, spec))
    return out
