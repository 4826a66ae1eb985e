import re
from pathlib import Path

import numpy as np
import pytest

from listereo import cli, imageio
from listereo.evaluation import colormap
from listereo.geometry import DepthMap
from listereo.scene import SceneDataset

SMALL_CONFIG = """
scene.count = 4
train.epochs = 2
train.lr_drop_epoch = 1
train.batch_size = 2
train.crop_height = 32
train.crop_width = 64
train.max_steps = 3
sweep.holdout = 2
sweep.levels = 0.1, 1.0
"""


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL_CONFIG)
    assert cli.main(["gen", "--config", str(root / "small.cfg"), "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", str(root / "small.cfg"), "--data", str(root / "data"),
                     "--out", str(root / "run")]) == 0
    return root


def _parsers():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    return parser, sub.choices


def test_help_lists_every_registered_flag(capsys):
    parser, subs = _parsers()
    assert set(subs) == {"gen", "train", "eval", "sweep", "colorize", "gradcheck"}
    for name, p in subs.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert re.search(rf"(^|[\s\[,]){re.escape(flag)}\b", text), (name, flag)
        with pytest.raises(SystemExit) as exc:
            cli.main([name, "--help"])
        assert exc.value.code == 0
        assert capsys.readouterr().out.strip() == text.strip()


def test_usage_errors_exit_1(capsys, tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["train", "--data", "x"]) == 1
    assert cli.main(["eval", "--data", "x"]) == 1
    assert "error" in capsys.readouterr().err


def test_invalid_config_names_key_and_writes_nothing(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("train.crop_widht = 64\n")
    assert cli.main(["gen", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 1
    assert "train.crop_widht" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_missing_dataset_is_io_error(tmp_path):
    assert cli.main(["eval", "--oracle", "--data", str(tmp_path / "nothing")]) == 3


def test_bad_thread_setting(monkeypatch, tmp_path):
    monkeypatch.setenv("LISTEREO_THREADS", "zero")
    assert cli.main(["gradcheck", "--tolerance", "1"]) == 1


def test_gen_is_deterministic_and_counts(workdir, tmp_path):
    assert cli.main(["gen", "--config", str(workdir / "small.cfg"), "--out", str(tmp_path / "again")]) == 0
    first, second = _tree(workdir / "data"), _tree(tmp_path / "again")
    assert first == second
    assert len(SceneDataset(workdir / "data")) == 4


def test_gen_refuses_non_empty_dir_without_force(workdir, tmp_path):
    out = tmp_path / "used"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert cli.main(["gen", "--config", str(workdir / "small.cfg"), "--out", str(out)]) == 1
    assert sorted(p.name for p in out.iterdir()) == ["keep.txt"]
    assert cli.main(["gen", "--config", str(workdir / "small.cfg"), "--out", str(out), "--force"]) == 0
    assert (out / "manifest.txt").exists()


def test_train_is_deterministic(workdir, tmp_path):
    assert cli.main(["train", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "run2")]) == 0
    assert _tree(workdir / "run") == _tree(tmp_path / "run2")
    lines = (workdir / "run" / "train.log").read_text().splitlines()
    assert [ln.split()[0] for ln in lines] == ["0", "1", "2"]


def test_self_mode_never_reads_ground_truth(workdir, tmp_path, monkeypatch):
    seen = []
    original = SceneDataset._read
    monkeypatch.setattr(SceneDataset, "_read", lambda self, sub, i, ext: seen.append(sub) or original(self, sub, i, ext))
    assert cli.main(["train", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "self"), "--mode", "self"]) == 0
    assert seen and "gt" not in seen
    seen.clear()
    assert cli.main(["train", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "sup"), "--mode", "supervised"]) == 0
    assert "gt" in seen


def test_resume_continues_step_counter(workdir, tmp_path):
    cfg = tmp_path / "long.cfg"
    cfg.write_text(SMALL_CONFIG.replace("train.max_steps = 3", "train.max_steps = 0"))
    assert cli.main(["train", "--config", str(cfg), "--data", str(workdir / "data"), "--out", str(tmp_path / "full")]) == 0
    # the 3-step run stopped mid-epoch; resuming it must reproduce the uninterrupted log
    part = tmp_path / "part"
    for name in ("last.ckpt", "train.log"):
        part.mkdir(exist_ok=True)
        (part / name).write_bytes((workdir / "run" / name).read_bytes())
    assert cli.main(["train", "--config", str(cfg), "--data", str(workdir / "data"), "--out", str(part),
                     "--from-checkpoint", str(part / "last.ckpt")]) == 0
    assert (part / "train.log").read_text() == (tmp_path / "full" / "train.log").read_text()
    assert [ln.split()[0] for ln in (part / "train.log").read_text().splitlines()] == ["0", "1", "2", "3"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_exits_2(workdir, tmp_path):
    cfg = tmp_path / "nan.cfg"
    cfg.write_text(SMALL_CONFIG.replace("train.max_steps = 3", "train.max_steps = 4") + "train.lr_initial = 1e38\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(workdir / "data"), "--out", str(tmp_path / "nan")]) == 2


def test_eval_outputs(workdir, tmp_path, capsys):
    ckpt = str(workdir / "run" / "last.ckpt")
    data = str(workdir / "data")
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", data, "--csv", str(tmp_path / "m.csv")]) == 0
    default = capsys.readouterr().out
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", data, "--los", "1.0"]) == 0
    assert capsys.readouterr().out == default
    row = (tmp_path / "m.csv").read_text().splitlines()[1].split(",")
    assert row[1:5] == default.splitlines()[1].split()[1:5]
    assert cli.main(["eval", "--oracle", "--data", data]) == 0
    assert "oracle" in capsys.readouterr().out
    assert cli.main(["eval", "--oracle", "--data", data, "--csv", str(tmp_path / "o.csv")]) == 0
    oracle = (tmp_path / "o.csv").read_text().splitlines()[1].split(",")
    assert oracle[1:5] == ["0.00", "0.00", "0.0000", "0.0000"]
    assert cli.main(["eval", "--oracle", "--data", data, "--los", "0"]) == 1


def test_infer_sweep_uses_one_checkpoint_and_is_deterministic(workdir, tmp_path, monkeypatch):
    opened = []
    original = cli.load_checkpoint
    monkeypatch.setattr(cli, "load_checkpoint", lambda p: opened.append(p) or original(p))
    args = ["sweep", "infer", "--config", str(workdir / "small.cfg"), "--checkpoint", str(workdir / "run" / "last.ckpt")]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert len(opened) == 2 and len(set(opened)) == 1
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    assert sorted(_tree(tmp_path / "a")) == ["config.txt", "report.csv", "report.ppm", "report.txt"]
    csv = (tmp_path / "a" / "report.csv").read_text().splitlines()
    assert len(csv) == 3 and all(",inference_time/" in ln for ln in csv[1:])
    assert cli.main(["sweep", "infer", "--out", str(tmp_path / "c")]) == 1


def test_train_sweep_embeds_paper_rows_and_reproduces(workdir, tmp_path):
    args = ["sweep", "train", "--config", str(workdir / "small.cfg"), "--data", str(workdir / "data")]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    csv = (tmp_path / "a" / "report.csv").read_text()
    assert "3177.83,,,,paper-kitti-scale,train_time/self_supervised" in csv
    assert csv.count(",listereo,train_time/self_supervised") == 2


def test_beta_sweep_embeds_paper_rows(workdir, tmp_path):
    cfg = tmp_path / "b.cfg"
    cfg.write_text(SMALL_CONFIG.replace("train.max_steps = 3", "train.max_steps = 1"))
    assert cli.main(["sweep", "beta", "--config", str(cfg), "--data", str(workdir / "data"),
                     "--out", str(tmp_path / "beta")]) == 0
    rows = (tmp_path / "beta" / "report.csv").read_text().splitlines()
    assert rows[1].startswith("0,0.01,") and rows[2].startswith("0.5,0.01,")
    assert "0,0.01,1970.63,,,,paper-kitti-scale,self_supervised" in rows


def test_colorize_two_pixel_file(tmp_path):
    depth = DepthMap(np.array([[2.0, 40.0, 0.0]]), np.array([[True, True, False]]))
    src = tmp_path / "d.png"
    src.write_bytes(imageio.encode_depth_png16(depth))
    before = src.read_bytes()
    assert cli.main(["colorize", str(src), str(tmp_path / "d.ppm")]) == 0
    img = imageio.decode_ppm((tmp_path / "d.ppm").read_bytes())
    rgb = np.round(img * 255).astype(int)[0]
    assert rgb[0][0] - rgb[0][2] > rgb[1][0] - rgb[1][2]
    assert list(rgb[0]) == list(colormap(np.array(0.0)))
    assert list(rgb[2]) == [0, 0, 0]
    assert src.read_bytes() == before
    back = imageio.decode_depth_png16(before)
    assert np.array_equal(back.depth, depth.depth) and np.array_equal(back.valid, depth.valid)


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert any(ln.startswith("correlation") and "max_rel_error=" in ln and ln.endswith("PASS") for ln in out)
    assert out[-1].endswith("passed") and out[-1].split("/")[0] == out[-1].split("/")[1].split()[0]
    assert cli.main(["gradcheck", "--tolerance", "1e-300"]) == 2
