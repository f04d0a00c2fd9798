import json

import numpy as np
import pytest

from posefield.checkpoint import load_checkpoint, tensor_hash
from posefield.cli import main, parse_pose
from posefield.scene import load_manifest
from posefield.training import read_log, trainable


def test_gen_scene_default_split_and_bytes(tmp_path, capsys):
    assert main(["gen-scene", "--category", "car", "--views", "28", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    m = load_manifest(tmp_path / "a")
    assert len(m.indices("train")) == 20 and len(m.indices("val")) == 8
    assert main(["gen-scene", "--category", "car", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["gen-scene", "--category", "car"]) == 2
    assert main(["no-such-command"]) == 2
    assert main([]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.bogus = 1\n")
    assert main(["train", "--scene", "x", "--base", "y", "--out", str(tmp_path), "--config", str(bad)]) == 2


def test_unwritable_scene_dir_exit_3(tmp_path, capsys):
    (tmp_path / "f").write_text("")
    assert main(["gen-scene", "--out", str(tmp_path / "f" / "s"), "--views", "2", "--val", "1"]) == 3


def test_missing_base_exit_4(small_scene, tmp_path, capsys):
    assert main(["train", "--scene", str(small_scene.root), "--base", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o"), "--steps", "1"]) == 4
    assert main(["render", "--ckpt", str(tmp_path / "none"), "--pose", "az=0,el=0,r=2", "--out", str(tmp_path)]) == 4


def test_pose_parsing(small_scene):
    p = parse_pose("az=90,el=20,r=2", small_scene)
    assert np.allclose(small_scene.world_pose(p).center, [0, 2 * np.cos(np.radians(20)), 2 * np.sin(np.radians(20))],
                       atol=1e-9)
    w = small_scene.world_pose(small_scene.entries[0].pose)
    text = "matrix=" + ",".join(str(v) for v in np.r_[w.R.ravel(), w.t])
    q = parse_pose(text, small_scene)
    assert np.allclose(q.R, small_scene.entries[0].pose.R) and np.allclose(q.t, small_scene.entries[0].pose.t)


@pytest.mark.parametrize("pose", ["az=90,el=20", "az=x,el=1,r=2", "matrix=1,2,3", "hello", "az=0,el=0,r=0"])
def test_malformed_pose_exit_2(small_base, small_scene, tmp_path, pose, capsys):
    assert main(["sample", "--ckpt", str(small_base), "--scene", str(small_scene.root), "--pose", pose,
                 "--out", str(tmp_path / "s.png"), "--steps", "2"]) == 2


def test_train_steps_zero_then_resume(small_base, small_scene, tmp_path, capsys):
    out = tmp_path / "run"
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.views = 3\ntrain.checkpoint_every = 2\n")
    assert main(["train", "--scene", str(small_scene.root), "--base", str(small_base), "--out", str(out),
                 "--steps", "0"]) == 0
    unet, vocab, meta, _ = load_checkpoint(out / "checkpoint")
    assert meta["step"] == 0
    assert tensor_hash(trainable(unet, vocab)) == tensor_hash(trainable(*load_checkpoint(small_base)[:2]))
    args = ["train", "--scene", str(small_scene.root), "--base", str(small_base), "--config", str(cfg)]
    assert main(args + ["--out", str(tmp_path / "full"), "--steps", "4"]) == 0
    assert main(args + ["--out", str(out), "--steps", "2"]) == 0
    assert main(args + ["--out", str(out), "--steps", "4"]) == 0
    assert read_log(out / "metrics.jsonl") == read_log(tmp_path / "full" / "metrics.jsonl")


def test_render_sample_eval(small_base, small_scene, tmp_path, capsys):
    ckpt = str(small_base)
    common = ["--ckpt", ckpt, "--scene", str(small_scene.root)]
    assert main(["render", *common, "--pose", "az=30,el=20,r=2", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "rgb.png").is_file() and (tmp_path / "r" / "opacity.png").is_file()
    assert main(["render", *common, "--pose", "az=30,el=20,r=2", "--out", str(tmp_path / "r"), "--layer", "x"]) == 2
    assert main(["sample", *common, "--pose", "az=90,el=20,r=2", "--prompt", "photo of a red V* car", "--seed", "1",
                 "--steps", "3", "--out", str(tmp_path / "s.png")]) == 0
    side = json.loads((tmp_path / "s.json").read_text())
    assert side["guidance"] == {"image": 3.5, "text": 7.5} and side["seed"] == 1 and side["steps"] == 3
    cfg = tmp_path / "e.cfg"
    cfg.write_text("sampler.steps = 2\neval.adherence_seeds = 1\neval.render_size = 16\n")
    capsys.readouterr()
    assert main(["eval", *common, "--config", str(cfg), "--out", str(tmp_path / "e" / "report.json"), "--sweep",
                 "--text-scales", "1", "7.5", "--image-scales", "3.5"]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert len(rep["views"]) == 8 and rep["pose_adherence"]["n"] == 8 and len(rep["sweep"]) == 2
    assert (tmp_path / "e" / "sweep.png").is_file()
    assert json.loads(capsys.readouterr().out) == rep
