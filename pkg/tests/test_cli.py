import numpy as np
import pytest

from refinery import rntb
from refinery.cli import build_parser, main
from refinery.config import load_config
from refinery.data import read_pgm, read_ppm
from refinery.errors import ConfigError

TINY_MODEL = """[model]
variant = cascade4
num_classes = 4
stem_channels = 4
backbone_channels = 4, 6, 8, 8
refine_channels = 4, 4, 4, 6
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "train"), "--samples", "8", "--size", "32", "32",
                 "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(root / "val"), "--samples", "3", "--size", "40", "36",
                 "--seed", "2"]) == 0
    (root / "run.ini").write_text(TINY_MODEL + f"""
[train]
iterations = 3
batch_size = 2
crop = 32, 32
out_dir = {root / "out"}

[data]
train = train
val = val
""")
    assert main(["train", "--config", str(root / "run.ini")]) == 0
    return root


COMMANDS = ["gen-data", "train", "eval", "predict", "gradcheck", "ablate"]


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help_for_every_command(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "usage: refinery " + cmd in capsys.readouterr().out


def test_parser_lists_every_command():
    text = build_parser().format_help()
    assert all(c in text for c in COMMANDS)


def test_gen_data_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / d), "--samples", "3", "--seed", "5",
                     "--size", "24", "32"]) == 0
    for name in ("img_00002.ppm", "mask_00002.pgm", "manifest.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert read_ppm(tmp_path / "a" / "img_00000.ppm").shape == (24, 32, 3)


def test_gen_data_empty_and_errors(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "e"), "--samples", "0"]) == 0
    assert (tmp_path / "e" / "manifest.txt").read_text() == ""
    assert main(["gen-data", "--out", str(tmp_path / "k"), "--classes", "9"]) == 1
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--out", str(blocker / "sub"), "--samples", "1"]) == 2


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.ini")]) == 1
    assert main(["eval", "--ckpt", "x", "--data", "y", "--scales", "0,1"]) == 1
    assert main(["frobnicate"]) == 1


def test_train_outputs(workspace):
    out = workspace / "out"
    for name in ("last.rntc", "ckpt_000003.rntc", "train_log.csv", "config.ini", "val_report.csv"):
        assert (out / name).exists()
    assert len((out / "train_log.csv").read_text().splitlines()) == 4


def test_config_echo_reruns_identically(workspace, tmp_path):
    echo = (workspace / "out" / "config.ini").read_text()
    rerun = tmp_path / "again.ini"
    rerun.write_text(echo.replace(str(workspace / "out"), str(tmp_path / "out")))
    assert main(["train", "--config", str(rerun)]) == 0
    assert (tmp_path / "out" / "train_log.csv").read_bytes() == (workspace / "out" / "train_log.csv").read_bytes()
    assert (tmp_path / "out" / "last.rntc").read_bytes() == (workspace / "out" / "last.rntc").read_bytes()


def test_zero_lr_checkpoint_equals_init(workspace, tmp_path):
    from refinery.cascade import build, load_checkpoint
    assert main(["train", "--config", str(workspace / "run.ini"), "--lr", "0",
                 "--out", str(tmp_path / "z")]) == 0
    trained, _ = load_checkpoint(tmp_path / "z" / "last.rntc")
    init = build(trained.spec, 0)
    for (n, a), (_, b) in zip(trained.named_parameters(), init.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n


def test_resume_with_other_variant_rejected(workspace, capsys):
    code = main(["train", "--config", str(workspace / "run.ini"), "--variant", "single",
                 "--resume", str(workspace / "out" / "last.rntc")])
    assert code == 1 and "variant" in capsys.readouterr().err


def test_eval_report_columns(workspace, tmp_path, capsys):
    csv = tmp_path / "r.csv"
    assert main(["eval", "--ckpt", str(workspace / "out" / "last.rntc"), "--data",
                 str(workspace / "val"), "--csv", str(csv)]) == 0
    lines = csv.read_text().splitlines()
    assert lines[0] == "class,iou,acc" and [l.split(",")[0] for l in lines[1:5]] == ["0", "1", "2", "3"]
    assert "mean IoU" in capsys.readouterr().out


def test_eval_single_scale_flag_matches_default(workspace, capsys):
    ck, data = str(workspace / "out" / "last.rntc"), str(workspace / "val")
    main(["eval", "--ckpt", ck, "--data", data])
    plain = capsys.readouterr().out
    main(["eval", "--ckpt", ck, "--data", data, "--scales", "1.0"])
    assert capsys.readouterr().out == plain


def test_predict(workspace, tmp_path):
    ck, img = str(workspace / "out" / "last.rntc"), str(workspace / "val" / "img_00001.ppm")
    assert main(["predict", "--ckpt", ck, "--image", img, "--out", str(tmp_path / "a.pgm"),
                 "--probs", str(tmp_path / "s.rntb")]) == 0
    assert main(["predict", "--ckpt", ck, "--image", img, "--out", str(tmp_path / "b.pgm")]) == 0
    mask = read_pgm(tmp_path / "a.pgm")
    assert mask.shape == (40, 36) and mask.max() < 4
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
    scores = rntb.load_blob(tmp_path / "s.rntb")
    assert scores.shape == (1, 4, 40, 36)
    np.testing.assert_array_equal(scores[0].argmax(axis=0), mask)


def test_predict_invalid_image(workspace, tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n4 4\n255\n\x00")
    assert main(["predict", "--ckpt", str(workspace / "out" / "last.rntc"), "--image", str(bad),
                 "--out", str(tmp_path / "m.pgm")]) == 1


def test_gradcheck_op_scope(capsys):
    assert main(["gradcheck", "--scope", "op", "--coords", "8"]) == 0
    out = capsys.readouterr().out
    for name in ("conv2d", "maxpool2d", "relu", "add", "bilinear", "crop", "softmax_xent"):
        assert name in out
    assert "max_rel_err" in out


def test_ablate_small(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("REFINERY_THREADS", "1")
    cfg = tmp_path / "abl.ini"
    cfg.write_text(TINY_MODEL + "\n[train]\nbatch_size = 2\ncrop = 32, 32\n")
    assert main(["ablate", "--data", str(workspace / "train"), "--seeds", "1", "--iterations", "1",
                 "--config", str(cfg), "--out", str(tmp_path / "abl")]) == 0
    table = (tmp_path / "abl" / "ablation.txt").read_text().splitlines()
    rows = [l.split("  ")[0] for l in table[1:4]]
    assert rows == ["single RefineNet", "2-cascaded RefineNet", "4-cascaded RefineNet"]
    csv = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert csv[0].startswith("variant,crp,seed") and len(csv) == 7


# ---------------------------------------------------------------- config

def test_config_unknown_key(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(p)


def test_config_unknown_section(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="optimizer"):
        load_config(p)


@pytest.mark.parametrize("line", ["[train]\nlr = -1", "[train]\nlr = fast", "[model]\nvariant = deep",
                                  "[train]\naugment = maybe", "[eval]\nscales = 0"])
def test_config_invalid_values(tmp_path, line):
    p = tmp_path / "c.ini"
    p.write_text(line + "\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlr = 0.5\niterations = 7\n")
    cfg = load_config(p, {"train": {"lr": "0.25"}})
    assert cfg.train.lr == 0.25 and cfg.train.iterations == 7


def test_echo_round_trip(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(TINY_MODEL + "[eval]\nscales = 0.5, 1.0\n")
    cfg = load_config(p)
    q = tmp_path / "echo.ini"
    q.write_text(cfg.echo())
    assert load_config(q) == cfg and load_config(q).echo() == cfg.echo()
