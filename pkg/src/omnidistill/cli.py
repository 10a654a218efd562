"""``omnidistill`` command line.

Every subcommand wraps one library operation.  Exit codes: 0 success,
2 malformed input, 3 calibration failure, 4 predictor failure, 1 any other
pipeline error.  Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .calibrate import apply_calibration, calibrate, calibration_report
from .datamodel import merge, pool_ids
from .distill import generate_labels, predict_dataset
from .errors import (
    CalibrationError,
    DistillError,
    InputFormatError,
    MergeError,
    PredictorError,
    SchemaError,
    StatisticsError,
)
from .evaluation import BOXES, KEYPOINTS, evaluate
from .io import dumps, load_dataset, save_dataset
from .schedule import FixedRatio, RhoRatio, SchedulePlan, lr_at, plan_iterations
from .synth import experiment as exp
from .synth.model import ToyModel, ToyTrainer
from .synth.world import gen_world

EXIT_OK, EXIT_OTHER, EXIT_INPUT, EXIT_CALIBRATION, EXIT_PREDICTOR = 0, 1, 2, 3, 4

log = logging.getLogger("omnidistill")


def _emit(args, payload: dict, text: str) -> None:
    print(dumps(payload) if args.json else text, end="" if args.json else "\n")


def _write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def _load_model(path) -> ToyModel:
    try:
        return ToyModel.load(path)
    except (OSError, ValueError, KeyError) as e:
        raise InputFormatError(f"{path}: cannot read model: {e}") from e


# ---- commands ---------------------------------------------------------------


def cmd_synth_world(args, cfg) -> int:
    ds = gen_world(cfgmod.world_config(cfg), args.n, args.seed, args.stream, args.first_id)
    save_dataset(ds, args.out)
    _emit(args, {"images": len(ds.images), "instances": ds.num_instances()},
          f"wrote {len(ds.images)} images with {ds.num_instances()} instances to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    ds = load_dataset(args.data)
    spec = cfgmod.experiment_spec(cfg)
    _, gen = pool_ids(ds)
    plan = spec.student_plan() if gen else spec.base_plan()
    if args.iters is not None:
        plan = plan.with_iters(args.iters)
    model = ToyTrainer(spec.model).fit(ds, plan, args.seed)
    model.save(args.out)
    _emit(args, {"iterations": plan.total_iters, "mixed": bool(gen)},
          f"trained {plan.total_iters} iterations ({'labeled+generated' if gen else 'labeled only'}) -> {args.out}")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    model = _load_model(args.model)
    images = load_dataset(args.images)
    dcfg = cfgmod.distill_config(cfg, args.task, tta=args.tta, workers=args.threads)
    preds = predict_dataset(model, images, dcfg)
    save_dataset(preds, args.out, pixels=False)
    _emit(args, {"images": len(preds.images), "instances": preds.num_instances()},
          f"wrote {preds.num_instances()} predictions on {len(preds.images)} images to {args.out}")
    return EXIT_OK


def _report_path(args) -> Path:
    return Path(args.report) if args.report else Path(str(args.out) + ".report.json")


def cmd_generate(args, cfg) -> int:
    labeled = load_dataset(args.labeled)
    unlabeled = load_dataset(args.unlabeled)
    model = _load_model(args.model)
    dcfg = cfgmod.distill_config(cfg, workers=args.threads)
    generated, cal = generate_labels(model, unlabeled, labeled, dcfg, return_calibration=True)
    save_dataset(generated, args.out)
    report = calibration_report(cal, generated) if cal is not None else {"n_images": 0, "n_instances": 0}
    _write_json(_report_path(args), report)
    _emit(args, report, f"generated {generated.num_instances()} instances on {len(generated.images)} images "
                        f"-> {args.out}")
    return EXIT_OK


def cmd_calibrate(args, cfg) -> int:
    labeled = load_dataset(args.labeled)
    preds = load_dataset(args.predictions)
    pooled = [(im.image_id, inst) for im in preds.images for inst in im.instances]
    if not preds.images:
        raise CalibrationError("prediction file has no images")
    cal = calibrate(labeled, pooled, len(preds.images), cfg["distill"]["per_category"],
                    keypoints=labeled.keypoint_schema is not None)
    generated = apply_calibration(pooled, cal, preds, labeled.categories)
    save_dataset(generated, args.out)
    report = calibration_report(cal, generated)
    _write_json(_report_path(args), report)
    _emit(args, report, "\n".join(
        [f"category {k}: score threshold {v:.6g}" for k, v in report["per_category_score_threshold"].items()]
        + [f"keypoint threshold: {report['keypoint_confidence_threshold']}",
           f"kept {report['n_instances']} instances -> {args.out}"]))
    return EXIT_OK


def cmd_merge(args, cfg) -> int:
    ds = merge(load_dataset(args.labeled), load_dataset(args.generated))
    save_dataset(ds, args.out)
    lab, gen = pool_ids(ds)
    _emit(args, {"labeled_images": len(lab), "generated_images": len(gen)},
          f"merged {len(lab)} labeled and {len(gen)} generated images -> {args.out}")
    return EXIT_OK


def cmd_plan(args, cfg) -> int:
    s = cfg["schedule"]
    prob = s["labeled_prob"] if args.labeled_prob is None else args.labeled_prob
    mode = RhoRatio(args.rho) if args.rho is not None else FixedRatio(prob)
    base = args.base_iters if args.base_iters is not None else s["base_iters"]
    total = plan_iterations(base, mode, args.multiple)
    lr = s["base_lr"] if args.base_lr is None else args.base_lr
    plan = SchedulePlan(total, lr, tuple(s["milestones"]), s["lr_decay"], mode)
    steps = [0] + [m for m in plan.milestone_iters() if m < total]
    lrs = [lr_at(i, plan) for i in steps] if total else []
    payload = {"base_iters": base, "total_iters": total, "labeled_prob": mode.p_labeled,
               "milestone_iters": plan.milestone_iters(), "lr": dict(zip(map(str, steps), lrs))}
    text = "\n".join([f"total iterations: {total}", f"labeled fraction: {mode.p_labeled:g}",
                      f"lr milestones: {', '.join(map(str, plan.milestone_iters()))}"]
                     + [f"  from {i}: lr {lr:g}" for i, lr in zip(steps, lrs)])
    _emit(args, payload, text)
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    gt = load_dataset(args.gt)
    dets = load_dataset(args.dets)
    if dets.categories != gt.categories:
        raise InputFormatError(f"{args.dets}: category table differs from {args.gt}")
    res = evaluate(gt, dets, args.task, cfgmod.eval_config(cfg))
    _emit(args, res.to_dict(), res.format())
    return EXIT_OK


def cmd_experiment(args, cfg) -> int:
    spec = cfgmod.experiment_spec(cfg)
    out = Path(args.out or cfg["paths"]["out"] or "experiment_out")
    out.mkdir(parents=True, exist_ok=True)
    contexts: dict = {}
    report = exp.run_experiment(spec, tta=True, contexts=contexts)
    report["config"] = cfg
    for r in report["per_seed"]:
        _write_json(out / f"seed_{r['seed']}.json", r)
    if args.ablations:
        it = exp.iteration_ablation(spec, contexts=contexts)
        rho = exp.rho_sweep(spec, contexts=contexts)
        report["ablations"] = {
            "iterations": {str(k): v for k, v in it.items()},
            "rho": {str(k): v for k, v in rho.items()},
            "teacher_quality": exp.teacher_sweep(spec, seed=spec.seeds[0]),
        }
    table = exp.format_table(report)
    _write_json(out / "report.json", report)
    (out / "table.txt").write_text(table + "\n")
    _emit(args, report["aggregate"], table)
    return EXIT_OK


# ---- parser -----------------------------------------------------------------


def _global_options(top_level: bool) -> argparse.ArgumentParser:
    # the subcommand copies default to SUPPRESS so they never overwrite a
    # value given before the subcommand name
    def d(v):
        return v if top_level else argparse.SUPPRESS

    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    g.add_argument("--threads", type=int, default=d(1), help="worker threads for inference (default 1)")
    g.add_argument("--json", action="store_true", default=d(False), help="print a JSON report on stdout")
    g.add_argument("--config", default=d(None), help="JSON config layered over the packaged defaults")
    g.add_argument("--verbose", action="store_true", default=d(False), help="log progress to stderr")
    return g


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omnidistill", description=__doc__.splitlines()[0],
                                parents=[_global_options(True)])
    sub = p.add_subparsers(dest="command", required=True)
    common = _global_options(False)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth-world", cmd_synth_world, "render a synthetic dataset")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--stream", type=int, default=0)
    sp.add_argument("--first-id", type=int, default=1)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the toy model on a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iters", type=int)

    sp = add("predict", cmd_predict, "raw predictions on a set of images")
    sp.add_argument("--model", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--task", choices=[KEYPOINTS, BOXES], default=KEYPOINTS)
    sp.add_argument("--tta", action="store_true", help="multi-transform inference")

    sp = add("generate", cmd_generate, "generate calibrated labels on unlabeled images")
    sp.add_argument("--labeled", required=True)
    sp.add_argument("--unlabeled", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")

    sp = add("calibrate", cmd_calibrate, "count-matching thresholds for a prediction file")
    sp.add_argument("--labeled", required=True)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report")

    sp = add("merge", cmd_merge, "union of labeled and generated datasets")
    sp.add_argument("--labeled", required=True)
    sp.add_argument("--generated", required=True)
    sp.add_argument("--out", required=True)

    sp = add("plan", cmd_plan, "retraining iterations and learning-rate steps")
    sp.add_argument("--base-iters", type=int)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--rho", type=float)
    g.add_argument("--multiple", type=float)
    sp.add_argument("--labeled-prob", type=float)
    sp.add_argument("--base-lr", type=float)

    sp = add("eval", cmd_eval, "COCO-style AP of detections against ground truth")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--dets", required=True)
    sp.add_argument("--task", choices=[KEYPOINTS, BOXES], default=KEYPOINTS)

    sp = add("experiment", cmd_experiment, "seeded baseline / distillation / upper-bound runs")
    sp.add_argument("--out")
    sp.add_argument("--ablations", action="store_true", help="also run iteration, rho and teacher sweeps")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config)
        return args.func(args, cfg)
    except (InputFormatError, SchemaError, MergeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (CalibrationError, StatisticsError) as e:
        print(f"calibration error: {e}", file=sys.stderr)
        return EXIT_CALIBRATION
    except PredictorError as e:
        print(f"predictor error: {e}", file=sys.stderr)
        return EXIT_PREDICTOR
    except DistillError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
