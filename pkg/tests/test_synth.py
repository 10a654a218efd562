from dataclasses import replace

import numpy as np
import pytest

from omnidistill.datamodel import avg_instances_per_image, merge
from omnidistill.errors import TrainingDivergenceError
from omnidistill.schedule import FixedRatio, MixSampler, SchedulePlan
from omnidistill.synth import ModelConfig, ToyModel, ToyTrainer, WorldConfig, gen_world, train_toy
from omnidistill.synth.experiment import (
    ExperimentSpec,
    iteration_ablation,
    make_splits,
    prepare_seed,
    predict_tta,
    run_seed,
    strip_labels,
    summarize,
)
from omnidistill.geometry import TransformSet
from omnidistill.synth.model import loss_and_grad, probe_batch, target_cells

from helpers import gradient_check_restart


def test_world_deterministic():
    a = gen_world(WorldConfig(), 5, 11)
    b = gen_world(WorldConfig(), 5, 11)
    assert a == b
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x.pixels, y.pixels)
    assert a != gen_world(WorldConfig(), 5, 12)


def test_world_sizes():
    with pytest.raises(ValueError):
        gen_world(WorldConfig(), 0, 0)
    assert len(gen_world(WorldConfig(), 1, 0).images) == 1


def test_world_image_depends_only_on_index():
    long = gen_world(WorldConfig(), 6, 3, stream=1, first_id=10)
    short = gen_world(WorldConfig(), 3, 3, stream=1, first_id=10)
    assert long.images[:3] == short.images


def test_world_mean_instances():
    ds = gen_world(WorldConfig(), 1000, 0)
    assert abs(avg_instances_per_image(ds) - WorldConfig().mean_instances) <= 0.2


def test_boxes_contain_keypoints():
    ds = gen_world(WorldConfig(), 100, 1)
    for im in ds.images:
        assert im.pixels.dtype == np.float32 and im.pixels.shape == (64, 64)
        for inst in im.instances:
            k = inst.keypoint_array()
            x1, y1, x2, y2 = inst.bbox
            assert np.all((k[:, 0] >= x1) & (k[:, 0] <= x2) & (k[:, 1] >= y1) & (k[:, 1] <= y2))


def test_heatmaps_are_distributions():
    m = ToyModel.initialize(ModelConfig(), 0)
    m.weights *= 300
    img = gen_world(WorldConfig(), 1, 0).images[0].pixels
    h = m.keypoint_heatmap(img, (3.2, 5.1, 40.7, 33.3))
    assert h.shape == (5, 16, 16)
    assert np.all(h.channels >= 0)
    np.testing.assert_allclose(h.channels.sum(axis=(1, 2)), 1.0, atol=1e-12)


def test_proposals_scores_in_unit_interval():
    m = ToyModel(ModelConfig())
    for im in gen_world(WorldConfig(), 20, 2).images:
        for b in m.propose(im.pixels):
            assert 0.0 <= b.score <= 1.0


def test_target_cells_masks_outside_roi():
    ds = gen_world(WorldConfig(), 5, 3)
    inst = next(i for im in ds.images for i in im.instances)
    cells, vis = target_cells(inst, 16)
    assert vis.all() and np.all((cells >= 0) & (cells < 256))
    x1, y1, x2, y2 = inst.bbox
    _, vis_half = target_cells(inst, 16, (x1, y1, (x1 + x2) / 2, y2))
    assert not vis_half.all()


def test_gradient_check_single():
    assert gradient_check_restart(0) < 1e-4


def test_zero_iterations_unchanged():
    ds = gen_world(WorldConfig(), 4, 0)
    m = ToyModel.initialize(ModelConfig(), 1)
    out = train_toy(m, ds, SchedulePlan(0), MixSampler([im.image_id for im in ds.images], [], FixedRatio(1.0)))
    np.testing.assert_array_equal(out.weights, m.weights)
    np.testing.assert_array_equal(out.bias, m.bias)
    assert out is not m


def test_training_reduces_probe_loss():
    ds = gen_world(WorldConfig(), 50, 5)
    m = ToyModel.initialize(ModelConfig(), 0)
    plan = SchedulePlan(2000, 2.0, mix_mode=FixedRatio(1.0))
    trained = train_toy(m, ds, plan, MixSampler([im.image_id for im in ds.images], [], FixedRatio(1.0), 0))
    probe = probe_batch(m, ds)
    before = loss_and_grad(m, probe)[0]
    after = loss_and_grad(trained, probe)[0]
    assert after <= 0.7 * before


def test_divergence_detected():
    ds = gen_world(WorldConfig(), 4, 0)
    bad = np.full_like(ds.images[0].pixels, np.nan)
    ds = replace(ds, images=tuple(replace(im, pixels=bad) for im in ds.images))
    plan = SchedulePlan(20, 1.0, mix_mode=FixedRatio(1.0))
    with pytest.raises(TrainingDivergenceError):
        ToyTrainer().fit(ds, plan, 0)


def test_training_is_seed_reproducible():
    ds = gen_world(WorldConfig(), 8, 0)
    plan = SchedulePlan(50, 1.0, mix_mode=FixedRatio(1.0))
    a, b = ToyTrainer().fit(ds, plan, 3), ToyTrainer().fit(ds, plan, 3)
    np.testing.assert_array_equal(a.weights, b.weights)


def test_trainer_uses_generated_pool():
    lab = gen_world(WorldConfig(), 4, 0)
    gen = gen_world(WorldConfig(), 4, 0, stream=1, first_id=50)
    union = merge(lab, replace(gen, provenance=gen.provenance))
    plan = SchedulePlan(20, 1.0, mix_mode=FixedRatio(0.6))
    m = ToyTrainer().fit(union, plan, 0)
    assert np.isfinite(m.weights).all()


def test_save_load_round_trip(tmp_path):
    m = ToyModel.initialize(ModelConfig(threshold=0.3), 9)
    path = tmp_path / "model.bin"
    m.save(path)
    assert path.exists()
    back = ToyModel.load(path)
    assert back.config == m.config
    np.testing.assert_array_equal(back.weights, m.weights)


def test_predict_tta_identity_and_determinism():
    im = gen_world(WorldConfig(), 1, 4).images[0]
    m = ToyModel.initialize(ModelConfig(), 2)
    schema = WorldConfig().schema()
    plain = predict_tta(m, im.pixels, None, schema)
    assert plain == predict_tta(m, im.pixels, TransformSet((64,), False), schema)
    ts = TransformSet((48, 64, 80), True)
    assert predict_tta(m, im.pixels, ts, schema) == predict_tta(m, im.pixels, ts, schema)


SMALL = ExperimentSpec(n_labeled=12, n_unlabeled=0, n_test=20, seeds=(0,), base_iters=600,
                       transforms=TransformSet((56, 64), True))


def test_splits_are_disjoint_and_strip_labels():
    lab, unl, test = make_splits(replace(SMALL, n_unlabeled=5), 0)
    ids = [im.image_id for d in (lab, unl, test) for im in d.images]
    assert len(ids) == len(set(ids))
    assert strip_labels(unl).num_instances() == 0


def test_no_unlabeled_student_close_to_baseline():
    r = run_seed(SMALL, 0, tta=False)
    assert r["n_generated_instances"] == 0
    assert abs(r["student"] - r["baseline"]) < 0.1


def test_iteration_ablation_shape():
    spec = replace(SMALL, n_unlabeled=6, base_iters=100)
    ctx = {0: prepare_seed(spec, 0)}
    out = iteration_ablation(spec, (1.0, 2.0), ctx)
    assert set(out) == {1.0, 2.0} and all(len(v) == 1 for v in out.values())


def test_summarize():
    s = summarize([1.0, 2.0, 3.0])
    assert s["mean"] == 2.0 and s["std"] == 1.0 and s["se"] == pytest.approx(1 / np.sqrt(3))
