"""Shared generators for the test suite: random evaluation scenes and a finite-difference gradient check."""

import numpy as np

from omnidistill.datamodel import Instance
from omnidistill.synth import ModelConfig, ToyModel, WorldConfig, gen_world
from omnidistill.synth.model import loss_and_grad, probe_batch

# filled by the acceptance suite and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def random_scene(rng, n_gt, n_det):
    gts, dets = [], []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 40, 2)
        w, h = rng.uniform(4, 25, 2)
        kps = tuple((float(x + rng.uniform(0, w)), float(y + rng.uniform(0, h)), int(rng.integers(0, 2)))
                    for _ in range(3))
        gts.append(Instance(1, (x, y, x + w, y + h), keypoints=kps))
    for _ in range(n_det):
        if gts and rng.random() < 0.7:
            g = gts[rng.integers(0, len(gts))]
            jitter = rng.normal(0, 2, 4)
            b = np.array(g.bbox) + jitter
            b = (min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3]))
            kps = tuple((float(gx + rng.normal(0, 1.5)), float(gy + rng.normal(0, 1.5)), 1)
                        for gx, gy, _ in g.keypoint_array())
        else:
            x, y = rng.uniform(0, 40, 2)
            b = (x, y, x + rng.uniform(3, 25), y + rng.uniform(3, 25))
            kps = tuple((float(v), float(u), 1) for v, u in rng.uniform(0, 60, (3, 2)))
        dets.append(Instance(1, b, float(rng.random()), keypoints=kps))
    return gts, dets


def numeric_grad(model, batch, eps=1e-6):
    dw = np.zeros_like(model.weights)
    db = np.zeros_like(model.bias)
    for arr, out in ((model.weights, dw), (model.bias, db)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            lp = loss_and_grad(model, batch)[0]
            arr[idx] = old - eps
            lm = loss_and_grad(model, batch)[0]
            arr[idx] = old
            out[idx] = (lp - lm) / (2 * eps)
    return dw, db


def gradient_check_restart(seed):
    """Relative error between analytic and central-difference gradients on a small head."""
    cfg = ModelConfig(grid=4, patch=3)
    rng = np.random.default_rng(seed)
    model = ToyModel(cfg, rng.normal(0, 0.5, (5, cfg.num_features)), rng.normal(0, 0.5, (5, 4, 4)))
    ds = gen_world(WorldConfig(), 3, 100 + seed)
    batch = [(f.astype(float), c, v) for f, c, v in probe_batch(model, ds, 3)]
    _, dw, db = loss_and_grad(model, batch)
    nw, nb = numeric_grad(model, batch)
    num = np.concatenate([nw.ravel(), nb.ravel()])
    ana = np.concatenate([dw.ravel(), db.ravel()])
    return float(np.max(np.abs(num - ana)) / max(np.max(np.abs(num)), 1e-12))
