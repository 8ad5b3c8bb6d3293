import json
import os

import numpy as np
import pytest

from dflcnn import checkpoint
from dflcnn.cli import build_parser, config_json, default_config, resolve_config, run
from dflcnn.datapipe import write_ppm

SYNTH = ["--n", "2", "--img-w", "128", "--img-h", "128", "--vehicles-min", "2", "--vehicles-max", "3"]


def _synth(out, seed=2):
    assert run(["synth", "--seed", str(seed), *SYNTH, "--out", str(out)], environ={}) == 0
    return out / "manifest.json"


def _train(manifest, out, *extra):
    return run(["train", "--manifest", str(manifest), "--out", str(out), "--steps", "10", *extra], environ={})


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = _synth(root / "data")
    assert _train(manifest, root / "run", "--seed", "3") == 0
    return root, manifest


def _files(d):
    return {n: (d / n).read_bytes() for n in sorted(os.listdir(d))}


def test_synth_writes_images_manifest_and_config(tmp_path, capsys):
    m = _synth(tmp_path / "a")
    assert capsys.readouterr().out.strip() == str(m)
    assert sorted(os.listdir(tmp_path / "a")) == ["config.json", "img_0000.ppm", "img_0001.ppm", "manifest.json"]
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["synth.seed"] == 2 and cfg["synth.n_images"] == 2


def test_synth_repeat_identical(tmp_path):
    _synth(tmp_path / "a")
    first = _files(tmp_path / "a")
    _synth(tmp_path / "a")
    assert _files(tmp_path / "a") == first


def test_synth_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = run(["synth", *SYNTH, "--out", str(blocker / "sub")], environ={})
    assert code == 2
    err = capsys.readouterr().err.strip()
    assert "IoFailure" in err and len(err.splitlines()) == 1


def test_train_outputs(trained):
    root, _ = trained
    run_dir = root / "run"
    assert sorted(os.listdir(run_dir)) == ["config.json", "loss.csv", "weights.dflw"]
    lines = (run_dir / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 11
    assert all(np.isfinite(float(line.split(",")[1])) for line in lines[1:])
    assert checkpoint.load(run_dir / "weights.dflw")


def test_train_log_byte_identical(trained):
    root, manifest = trained
    first = _files(root / "run")
    assert _train(manifest, root / "run", "--seed", "3") == 0
    assert _files(root / "run") == first


def test_train_ce_arm(trained, tmp_path):
    _, manifest = trained
    assert _train(manifest, tmp_path / "ce", "--seed", "3", "--use-focal-rpn=false", "--use-focal-cls=false") == 0
    cfg = json.loads((tmp_path / "ce" / "config.json").read_text())
    assert cfg["detector.use_focal_rpn"] is False and cfg["detector.use_focal_cls"] is False
    assert (tmp_path / "ce" / "loss.csv").read_bytes() != (trained[0] / "run" / "loss.csv").read_bytes()


def test_train_missing_manifest(tmp_path, capsys):
    assert _train(tmp_path / "none.json", tmp_path / "out") == 2
    assert "ParseError" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_detect_deterministic(trained, tmp_path):
    root, manifest = trained
    args = ["detect", "--checkpoint", str(root / "run" / "weights.dflw"), "--manifest", str(manifest), "--score-thresh", "0.05"]
    assert run([*args, "--out", str(tmp_path / "a.json")], environ={}) == 0
    assert run([*args, "--out", str(tmp_path / "b.json")], environ={}) == 0
    a = (tmp_path / "a.json").read_bytes()
    assert a == (tmp_path / "b.json").read_bytes()
    doc = json.loads(a)
    assert [e["image"] for e in doc] == ["img_0000.ppm", "img_0001.ppm"]
    for e in doc:
        scores = [row[4] for row in e["boxes"]]
        assert scores == sorted(scores, reverse=True)
    assert (tmp_path / "a.config.json").exists()


def test_detect_empty_manifest(trained, tmp_path):
    root, _ = trained
    m = tmp_path / "empty.json"
    m.write_text("[]")
    out = tmp_path / "d.json"
    assert run(["detect", "--checkpoint", str(root / "run" / "weights.dflw"), "--manifest", str(m), "--out", str(out)], environ={}) == 0
    assert json.loads(out.read_text()) == []


def test_detect_corrupt_checkpoint(trained, tmp_path, capsys):
    _, manifest = trained
    bad = tmp_path / "bad.dflw"
    bad.write_bytes(b"NOPE!\n")
    code = run(["detect", "--checkpoint", str(bad), "--manifest", str(manifest), "--out", str(tmp_path / "d.json")], environ={})
    assert code == 2
    assert "UnsupportedFormat" in capsys.readouterr().err
    assert not (tmp_path / "d.json").exists()


def _gt_as_detections(manifest, out):
    doc = json.loads(manifest.read_text())
    out.write_text(json.dumps([{"image": e["image"], "boxes": [b + [0.9] for b in e["boxes"]]} for e in doc]))
    return out


def test_eval_perfect(trained, tmp_path, capsys):
    _, manifest = trained
    dets = _gt_as_detections(manifest, tmp_path / "d.json")
    report = tmp_path / "r.json"
    assert run(["eval", "--detections", str(dets), "--manifest", str(manifest), "--report", str(report)], environ={}) == 0
    assert capsys.readouterr().out.strip() == "IoU=0.3 RR=1.0000 PR=1.0000 F1=1.0000"
    rep = json.loads(report.read_text())
    assert rep["recall"] == rep["precision"] == rep["f1"] == 1.0


@pytest.mark.parametrize("rr, pr, f1", [(0.8944, 0.6461, "0.7502"), (0.8838, 0.5836, "0.7030"), (0.2119, 0.0652, "0.0997")])
def test_eval_counts_file(tmp_path, capsys, rr, pr, f1):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"rr": rr, "pr": pr}))
    assert run(["eval", "--counts", str(c)], environ={}) == 0
    assert capsys.readouterr().out.strip().endswith(f"F1={f1}")


def test_eval_counts_tp_fp_fn(tmp_path, capsys):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"tp": 3, "fp": 1, "fn": 1}))
    assert run(["eval", "--counts", str(c), "--iou", "0.5"], environ={}) == 0
    assert capsys.readouterr().out.strip() == "IoU=0.5 RR=0.7500 PR=0.7500 F1=0.7500"


@pytest.mark.parametrize("value", ["0", "1", "1.5", "-0.2", "abc"])
def test_eval_iou_out_of_range(value):
    with pytest.raises(SystemExit) as e:
        run(["eval", "--counts", "x.json", "--iou", value], environ={})
    assert e.value.code == 1


def test_curves(trained, tmp_path):
    _, manifest = trained
    dets = _gt_as_detections(manifest, tmp_path / "d.json")
    args = ["curves", "--detections", str(dets), "--manifest", str(manifest)]
    assert run([*args, "--csv", str(tmp_path / "a.csv"), "--svg", str(tmp_path / "a.svg")], environ={}) == 0
    assert run([*args, "--csv", str(tmp_path / "b.csv"), "--svg", str(tmp_path / "b.svg")], environ={}) == 0
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0] == "iou,recall,precision" and len(lines) == 20
    assert lines[1] == "0.050000,1.000000,1.000000"
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_eval_unknown_image_is_data_error(trained, tmp_path):
    _, manifest = trained
    d = tmp_path / "d.json"
    d.write_text('[{"image": "ghost.ppm", "boxes": []}]')
    assert run(["eval", "--detections", str(d), "--manifest", str(manifest)], environ={}) == 2


@pytest.mark.parametrize("cmd", ["synth", "tile", "train", "detect", "eval", "curves"])
def test_help_lists_every_flag_with_default(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        run([cmd, "--help"], environ={})
    assert e.value.code == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        if action.option_strings and action.dest != "help":
            assert action.option_strings[0] in text
            assert "(default:" in (action.help or "")


def test_missing_required_path_is_usage_error(capsys):
    assert run(["synth"], environ={}) == 1
    assert "--out is required" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"detector.stepz": 3}))
    assert run(["synth", "--config", str(c), "--out", str(tmp_path / "o")], environ={}) == 2


def test_config_type_mismatch(tmp_path):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"detector.steps": "ten"}))
    assert run(["synth", "--config", str(c), "--out", str(tmp_path / "o")], environ={}) == 2


def test_config_serialization_canonical():
    cfg = default_config()
    text = config_json(cfg)
    assert json.loads(text) == cfg
    assert config_json(dict(reversed(list(cfg.items())))) == text


def _resolved(argv, environ):
    return resolve_config(build_parser().parse_args(argv), environ)


def test_seed_precedence(tmp_path):
    c = tmp_path / "c.json"
    c.write_text(json.dumps({"synth.seed": 5, "synth.n_images": 7}))
    base = ["synth", "--out", "o", "--config", str(c)]
    assert _resolved(base, {})["synth.seed"] == 5
    env = _resolved(base, {"DFL_SEED": "11"})
    assert env["synth.seed"] == env["detector.seed"] == env["sampler.seed"] == 11
    assert _resolved([*base, "--seed", "13"], {"DFL_SEED": "11"})["synth.seed"] == 13
    assert _resolved([*base, "--n", "2"], {})["synth.n_images"] == 2


def test_bad_env_seed(tmp_path):
    assert run(["synth", "--out", str(tmp_path / "o")], environ={"DFL_SEED": "x"}) == 2


def test_tile_command(tmp_path):
    src = tmp_path / "src"
    write_ppm(np.random.default_rng(0).random((1, 3, 100, 150)), src / "big.ppm")
    (src / "manifest.json").write_text(json.dumps([{"image": "big.ppm", "width": 150, "height": 100, "boxes": [[60, 10, 20, 20]]}]))
    out = tmp_path / "tiles"
    code = run(["tile", "--manifest", str(src / "manifest.json"), "--out", str(out), "--tile-w", "64", "--tile-h", "64"], environ={})
    assert code == 0
    doc = json.loads((out / "manifest.json").read_text())
    assert len(doc) == 6
    assert all((e["width"], e["height"]) == (64, 64) for e in doc)
    assert sum(len(e["boxes"]) for e in doc) == 1
    owner = next(e for e in doc if e["boxes"])
    assert owner["image"] == "big_x64_y0.ppm" and owner["boxes"] == [[0, 10, 16, 20]]
