import json
from dataclasses import replace

import pytest

from omnidistill import config as cfgmod
from omnidistill.cli import main
from omnidistill.datamodel import Dataset, Provenance
from omnidistill.distill import generate_labels
from omnidistill.evaluation import evaluate
from omnidistill.io import dataset_to_json, dumps, load_dataset, save_dataset
from omnidistill.synth import ToyModel


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth-world", "--n", "10", "--seed", "0", "--out", str(d / "lab.json")]) == 0
    assert main(["synth-world", "--n", "6", "--seed", "0", "--stream", "1", "--first-id", "100",
                 "--out", str(d / "unl_gt.json")]) == 0
    gt = load_dataset(d / "unl_gt.json")
    save_dataset(replace(gt, images=tuple(replace(im, instances=()) for im in gt.images)), d / "unl.json")
    assert main(["train", "--data", str(d / "lab.json"), "--out", str(d / "teacher.npz"), "--iters", "300"]) == 0
    return d


def test_plan_prints_total(capsys):
    assert main(["plan", "--base-iters", "130000", "--rho", "0.5"]) == 0
    out = capsys.readouterr().out
    assert "total iterations: 195000" in out
    assert main(["plan", "--json", "--base-iters", "10", "--multiple", "3"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["total_iters"] == 30 and payload["milestone_iters"] == [21, 27]


def test_generate_matches_library(work, capsys):
    out = work / "gen.json"
    assert main(["generate", "--labeled", str(work / "lab.json"), "--unlabeled", str(work / "unl.json"),
                 "--model", str(work / "teacher.npz"), "--out", str(out)]) == 0
    lib = generate_labels(ToyModel.load(work / "teacher.npz"), load_dataset(work / "unl.json"),
                          load_dataset(work / "lab.json"), cfgmod.distill_config(cfgmod.resolve()))
    assert load_dataset(out) == lib
    report = json.loads((work / "gen.json.report.json").read_text())
    assert report["n_instances"] == lib.num_instances()
    # a second run with more threads writes identical bytes
    out2 = work / "gen2.json"
    assert main(["generate", "--threads", "2", "--labeled", str(work / "lab.json"), "--unlabeled",
                 str(work / "unl.json"), "--model", str(work / "teacher.npz"), "--out", str(out2)]) == 0
    assert out.read_bytes() == out2.read_bytes().replace(b"gen2.json", b"gen.json")


def test_generate_empty_unlabeled(work, tmp_path):
    lab = load_dataset(work / "lab.json")
    save_dataset(Dataset((), lab.categories), tmp_path / "empty.json")
    assert main(["generate", "--labeled", str(work / "lab.json"), "--unlabeled", str(tmp_path / "empty.json"),
                 "--model", str(work / "teacher.npz"), "--out", str(tmp_path / "g.json")]) == 0
    assert load_dataset(tmp_path / "g.json").images == ()


def test_train_is_reproducible(work):
    a, b = work / "a.npz", work / "b.npz"
    for p in (a, b):
        assert main(["train", "--data", str(work / "lab.json"), "--out", str(p), "--iters", "40", "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_eval_matches_library(work, capsys):
    gt = work / "unl_gt.json"
    assert main(["predict", "--model", str(work / "teacher.npz"), "--images", str(gt),
                 "--out", str(work / "pred.json")]) == 0
    capsys.readouterr()
    assert main(["eval", "--json", "--gt", str(gt), "--dets", str(work / "pred.json")]) == 0
    got = json.loads(capsys.readouterr().out)
    lib = evaluate(load_dataset(gt), load_dataset(work / "pred.json"), "keypoints",
                   cfgmod.eval_config(cfgmod.resolve()))
    assert got == json.loads(dumps(lib.to_dict()))


def test_eval_perfect_and_empty(work, tmp_path, capsys):
    gt = load_dataset(work / "unl_gt.json")
    perfect = replace(gt, provenance=Provenance.GENERATED, images=tuple(
        replace(im, instances=tuple(replace(i, score=1.0) for i in im.instances)) for im in gt.images))
    save_dataset(perfect, tmp_path / "p.json", pixels=False)
    save_dataset(replace(gt, images=tuple(replace(im, instances=()) for im in gt.images)),
                 tmp_path / "e.json", pixels=False)
    for task in ("boxes", "keypoints"):
        assert main(["eval", "--json", "--task", task, "--gt", str(work / "unl_gt.json"),
                     "--dets", str(tmp_path / "p.json")]) == 0
        assert json.loads(capsys.readouterr().out)["AP"] == 1.0
        assert main(["eval", "--json", "--task", task, "--gt", str(work / "unl_gt.json"),
                     "--dets", str(tmp_path / "e.json")]) == 0
        assert json.loads(capsys.readouterr().out)["AP"] == 0.0


def test_merge_with_empty_generated(work, tmp_path):
    lab = load_dataset(work / "lab.json")
    save_dataset(Dataset((), lab.categories, Provenance.GENERATED), tmp_path / "none.json")
    assert main(["merge", "--labeled", str(work / "lab.json"), "--generated", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "m.json")]) == 0
    merged = load_dataset(tmp_path / "m.json")
    assert merged.provenance is Provenance.UNION
    strip = lambda ds: replace(ds, provenance=Provenance.LABELED,
                               images=tuple(replace(im, provenance=None) for im in ds.images))
    assert dumps(dataset_to_json(strip(merged))) == dumps(dataset_to_json(lab))


@pytest.mark.parametrize("content", ['{"images": [', '{"images": [], "categories": [{"id": 1}]}', "[]"])
def test_malformed_input_exit_code(tmp_path, capsys, content):
    p = tmp_path / "bad.json"
    p.write_text(content)
    assert main(["eval", "--gt", str(p), "--dets", str(p)]) == 2
    assert "bad.json" in capsys.readouterr().err


def test_missing_file_and_bad_config(tmp_path, capsys):
    assert main(["merge", "--labeled", str(tmp_path / "nope.json"), "--generated", "x", "--out", "y"]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text('{"schedule": {"bogus": 1}}')
    assert main(["plan", "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_calibrate_command(work, tmp_path, capsys):
    assert main(["predict", "--model", str(work / "teacher.npz"), "--images", str(work / "unl.json"),
                 "--out", str(tmp_path / "raw.json")]) == 0
    assert main(["calibrate", "--json", "--labeled", str(work / "lab.json"), "--predictions",
                 str(tmp_path / "raw.json"), "--out", str(tmp_path / "cal.json")]) == 0
    capsys.readouterr()
    report = json.loads((tmp_path / "cal.json.report.json").read_text())
    assert report["n_images"] == 6
    assert load_dataset(tmp_path / "cal.json").num_instances() == report["n_instances"]
