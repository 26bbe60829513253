import json

import numpy as np
import pytest

from isda import cli
from isda.ablate import COLUMNS, read_csv
from isda.data import read_pgm, read_ppm, write_pgm
from isda.core.autograd import GradReport
from isda.gradcheck import CheckResult

TINY = [
    "input.size=32",
    "data.train_count=4",
    "data.val_count=2",
    "train.epochs=1",
    "train.batch_size=2",
    "train.lr_drop_epochs=",
]


def run(*argv, tiny=True, data=None):
    extra = []
    if tiny:
        for kv in TINY:
            extra += ["--set", kv]
    if data is not None:
        extra += ["--set", f"data.dir={data}"]
    return cli.main([argv[0], *extra, *argv[1:]])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "run"
    assert run("train", "--out", str(out), data=data) == 0
    return data, out


def test_generate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("generate", "--seed", "11", "--out", str(tmp_path / name)) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_writes_artifacts(trained):
    _, out = trained
    assert (out / "model.ckpt").is_file()
    lines = (out / "train.log").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1]


def test_same_seed_same_checkpoint(trained, tmp_path):
    data, out = trained
    assert run("train", "--out", str(tmp_path), data=data) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()


def test_eval_report(trained, capsys):
    data, out = trained
    capsys.readouterr()
    assert run("eval", "--out", str(out), data=data) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "per_class"}
    assert json.loads((out / "eval.json").read_text()) == report


def test_infer_outputs(trained, tmp_path):
    data, out = trained
    img = np.random.default_rng(0).integers(0, 256, size=(32, 32), dtype=np.uint8)
    write_pgm(tmp_path / "probe.pgm", img)
    dest = tmp_path / "infer"
    code = run("infer", "--out", str(dest), "--checkpoint", str(out / "model.ckpt"), "--threshold", "0", str(tmp_path / "probe.pgm"), data=data)
    assert code == 0
    overlay = read_ppm(dest / "probe_overlay.ppm")
    assert overlay.shape == (32, 32, 3)
    records = [json.loads(l) for l in (dest / "detections.log").read_text().splitlines()]
    assert len(records) == 16  # threshold 0 keeps every query
    for r in records:
        mask = read_pgm(dest / f"probe_mask{r['index']:02d}.pgm")
        assert set(np.unique(mask)) <= {0, 255}
        assert int((mask == 255).sum()) == r["area"]


def test_infer_high_threshold_is_empty(trained, tmp_path):
    data, out = trained
    assert run("infer", "--out", str(tmp_path), "--checkpoint", str(out / "model.ckpt"), "--threshold", "1.0", data=data) == 0
    assert (tmp_path / "detections.log").read_text() == ""
    assert not list(tmp_path.glob("*_mask*.pgm"))
    assert len(list(tmp_path.glob("*_overlay.ppm"))) == 2


def test_missing_checkpoint_exit_3(tmp_path):
    assert run("eval", "--out", str(tmp_path), data=tmp_path / "data") == cli.EXIT_CHECKPOINT


def test_incompatible_checkpoint_exit_3(trained, tmp_path):
    data, out = trained
    code = run("eval", "--out", str(tmp_path), "--checkpoint", str(out / "model.ckpt"), "--set", "neck.width=16", data=data)
    assert code == cli.EXIT_CHECKPOINT


def test_corrupt_checkpoint_exit_3(trained, tmp_path):
    data, _ = trained
    (tmp_path / "model.ckpt").write_bytes(b"not a checkpoint")
    assert run("eval", "--out", str(tmp_path), data=data) == cli.EXIT_CHECKPOINT


@pytest.mark.parametrize("args", [["--set", "train.nope=1"], ["--set", "train.epochs=x"], ["--set", "novalue"]])
def test_config_error_exit_2(tmp_path, args):
    assert run("train", "--out", str(tmp_path), *args, data=tmp_path / "data") == cli.EXIT_CONFIG


def test_bad_config_file_exit_2(tmp_path):
    (tmp_path / "bad.cfg").write_text("this is not a config\n")
    assert run("generate", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path)) == cli.EXIT_CONFIG


def test_gradcheck_exit_codes(monkeypatch, capsys):
    good = CheckResult("ok", [GradReport("x", 1e-9, "full")])
    bad = CheckResult("bad", [GradReport("y", 0.5, "jvp")])
    monkeypatch.setattr(cli, "run_suite", lambda seed: [good, bad])
    assert cli.main(["gradcheck"]) == cli.EXIT_GRADCHECK
    out = capsys.readouterr().out
    assert "PASS ok" in out and "FAIL bad" in out and "y error=5.000e-01" in out
    monkeypatch.setattr(cli, "run_suite", lambda seed: [good])
    assert cli.main(["gradcheck"]) == 0


def test_ablate_table(tmp_path, capsys):
    args = ["--set", "ablate.epochs=1", "--set", "ablate.train_count=4", "--set", "ablate.val_count=2", "--set", "ablate.lr_drop_epochs="]
    assert run("ablate", "--seed", "3", "--out", str(tmp_path), *args) == 0
    header = (tmp_path / "ablation.csv").read_text().splitlines()[0]
    assert header.split(",") == list(COLUMNS)
    rows = read_csv(tmp_path / "ablation.csv")
    assert [(r.grid, r.cell) for r in rows] == [
        ("position", "MP=0,KP=0"),
        ("position", "MP=1,KP=0"),
        ("position", "MP=0,KP=1"),
        ("position", "MP=1,KP=1"),
        ("scale", "1/8"),
        ("scale", "1/4"),
        ("scale", "1/2"),
    ]
    assert {r.seed for r in rows} == {3}
    assert "MP+KP best AP50" in capsys.readouterr().out
