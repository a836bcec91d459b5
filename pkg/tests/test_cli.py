import csv
import json

import numpy as np
import pytest

from fisheyerect.cli import main, resolve_checkpoint, side_by_side
from fisheyerect.dataset import load_image, save_image, smooth_image
from fisheyerect.nncore import CheckpointError


def synth(out, *extra):
    return main(["synth", "--out", str(out), "--count", "3", "--seed", "5", "--image-size", "64",
                 "--patch-size", "8", "--num-sources", "2", *extra])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds") / "data"
    assert synth(out) == 0
    return out


def test_selfcheck_quick(capsys):
    assert main(["selfcheck", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "position-map classes" in out


def test_synth_is_reproducible(tmp_path, dataset):
    assert synth(tmp_path / "again") == 0
    a = (dataset / "manifest.json").read_text()
    b = (tmp_path / "again" / "manifest.json").read_text()
    assert a == b
    manifest = json.loads(a)
    assert manifest["count"] == 3 and manifest["image_size"] == 64
    for f in sorted(dataset.iterdir()):
        assert f.read_bytes() == (tmp_path / "again" / f.name).read_bytes()


def test_oracle_eval(tmp_path, dataset, capsys):
    assert main(["eval", "--dataset", str(dataset), "--oracle", "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ev" / "report.csv")))
    assert [r["id"] for r in rows][-1] == "mean"
    assert all(float(r["psnr"]) >= 30 for r in rows)
    assert len(list((tmp_path / "ev").glob("*_compare.png"))) == 3


def test_train_rectify_eval_round_trip(tmp_path, dataset):
    common = ["--dataset", str(dataset), "--steps", "2", "--batch", "2", "--desk"]
    assert main(["pretrain", *common, "--out", str(tmp_path / "pre")]) == 0
    assert main(["finetune", *common, "--out", str(tmp_path / "ft"),
                 "--checkpoint", str(tmp_path / "pre"), "--nf", "1"]) == 0
    ckpt = resolve_checkpoint(tmp_path / "ft")
    assert ckpt.name.startswith("finetune_epoch")

    img = smooth_image(80, np.random.default_rng(0))
    save_image(tmp_path / "a.png", img)
    assert main(["rectify", str(tmp_path / "a.png"), "--checkpoint", str(tmp_path / "ft"),
                 "--out", str(tmp_path / "a_out.png")]) == 0
    assert load_image(tmp_path / "a_out.png").shape == (80, 80, 3)

    assert main(["eval", "--dataset", str(dataset), "--checkpoint", str(tmp_path / "ft")]) == 0


def test_exit_codes(tmp_path, dataset, capsys):
    # validation errors
    assert main(["synth", "--out", str(tmp_path / "x"), "--count", "0"]) == 1
    assert main(["eval", "--dataset", str(dataset)]) == 1
    # unknown flag prints usage
    assert main(["synth", "--bogus"]) == 1
    assert "usage:" in capsys.readouterr().err
    # I/O errors
    assert main(["eval", "--dataset", str(tmp_path / "missing"), "--oracle"]) == 2
    assert main(["rectify", str(tmp_path / "none.png"), "--checkpoint", str(tmp_path),
                 "--out", str(tmp_path / "o.png")]) == 2


def test_resolve_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        resolve_checkpoint(tmp_path)


def test_side_by_side():
    a = np.zeros((4, 5, 3))
    b = np.ones((4, 5, 3))
    out = side_by_side(a, b, gap=2)
    assert out.shape == (4, 12, 3) and out[:, 7:].min() == 1
