import hashlib
import json
import os

import numpy as np
import pytest

from vfcnn import ops
from vfcnn.autograd import _result, as_tensor
from vfcnn.cli import main
from vfcnn.train import LOG_HEADER, read_loss_log, read_split
from vfcnn.volume import MaskVolume, read_volume, write_volume

SMOKE_INI = """
[phantom]
dims = 24, 24, 16
noise_sigma = 0.0
contrast = 1.0
background = 0.0

[synth]
count = 3
n_val = 1

[model]
channels = 2, 4, 8, 16

[pipeline]
target_size = 24, 24

[train]
epochs = 2
lr = 1e-2
"""


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def tree_digest(directory):
    return {name: digest(os.path.join(directory, name)) for name in sorted(os.listdir(directory))}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "smoke.ini"
    cfg.write_text(SMOKE_INI)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "run"), "--quiet"]) == 0
    return root


def test_synth_counts(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--count", "6", "--n-val", "1"]) == 0
    train, val = read_split(str(tmp_path / "d"))
    assert len(train) == 5 and len(val) == 1
    for case in train + val:
        assert isinstance(read_volume(str(tmp_path / "d" / f"{case}_mask.volr")), MaskVolume)


def test_synth_is_reproducible(workspace, tmp_path):
    cfg = str(workspace / "smoke.ini")
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert tree_digest(str(tmp_path / "again")) == tree_digest(str(workspace / "data"))


def test_synth_validation_errors(workspace, tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "z"), "--count", "0"]) == 1
    assert not (tmp_path / "z").exists()
    assert main(["synth", "--config", str(workspace / "smoke.ini"), "--out", str(workspace / "data")]) == 1
    assert "not empty" in capsys.readouterr().err


def test_train_smoke_outputs(workspace):
    run = workspace / "run"
    for name in ("best.ckpt", "last.ckpt", "loss_log.csv", "run.json"):
        assert (run / name).is_file()
    assert (run / "loss_log.csv").read_text().splitlines()[0] == LOG_HEADER
    rows = read_loss_log(str(run / "loss_log.csv"))
    assert [r[0] for r in rows] == [0, 1]
    assert all(np.isfinite(r[1:]).all() for r in rows)
    meta = json.loads((run / "run.json").read_text())
    assert meta["train"]["epochs"] == 2 and meta["model"]["channels"] == [2, 4, 8, 16]
    assert "lr" in meta["notes"]
    assert len(meta["loss_log"]) == 2


def test_train_is_bit_reproducible(workspace):
    cfg = str(workspace / "smoke.ini")
    assert main(["train", "--config", cfg, "--data", str(workspace / "data"),
                 "--out", str(workspace / "run2"), "--quiet"]) == 0
    for name in ("best.ckpt", "last.ckpt", "loss_log.csv"):
        assert digest(workspace / "run" / name) == digest(workspace / "run2" / name)


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1


def test_predict_geometry_and_repeatability(workspace):
    case = read_split(str(workspace / "data"))[0][0]
    vol = str(workspace / "data" / f"{case}.volr")
    outs = [str(workspace / f"pred{i}.volr") for i in range(2)]
    for out in outs:
        assert main(["predict", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                     "--volume", vol, "--out", out]) == 0
    a, b = read_volume(outs[0]), read_volume(outs[1])
    src = read_volume(vol)
    assert isinstance(a, MaskVolume)
    assert a.dims == src.dims and a.spacing == src.spacing
    np.testing.assert_array_equal(a.data, b.data)
    meta = json.loads(open(os.path.splitext(outs[0])[0] + ".json").read())
    assert meta["threshold"] == 0.5


def test_predict_rejects_bad_checkpoint(workspace, tmp_path):
    bogus = tmp_path / "x.ckpt"
    bogus.write_bytes(b"NOTACKPT")
    case = read_split(str(workspace / "data"))[0][0]
    code = main(["predict", "--checkpoint", str(bogus),
                 "--volume", str(workspace / "data" / f"{case}.volr"), "--out", str(tmp_path / "p.volr")])
    assert code == 1
    assert not (tmp_path / "p.volr").exists()


def test_evaluate_gt_vs_gt(workspace, capsys, tmp_path):
    gt = str(workspace / "data" / "case000_mask.volr")
    out = tmp_path / "report.txt"
    assert main(["evaluate", "--pred", gt, "--gt", gt, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.count("100.00 (0.00)") == 3
    kv = dict(line.split("=") for line in out.read_text().splitlines())
    assert float(kv["dice_whole"]) == 1.0 and float(kv["hd_directed_mm"]) == 0.0


def test_evaluate_geometry_mismatch(workspace, tmp_path):
    other = str(tmp_path / "small_mask.volr")
    write_volume(MaskVolume(np.ones((2, 2, 2), np.uint8)), other)
    gt = str(workspace / "data" / "case000_mask.volr")
    assert main(["evaluate", "--pred", other, "--gt", gt]) == 1


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--no-model"]) == 0
    out = capsys.readouterr().out
    for name in ("conv3d", "conv_transpose3d", "prelu", "batchnorm3d", "sigmoid",
                 "combined_loss[subtract]", "combined_loss[literal]"):
        assert name in out
    assert "FAIL" not in out


def test_gradcheck_detects_corrupted_rule(monkeypatch, capsys):
    def bad_sigmoid(x):
        x = as_tensor(x)
        out = 1.0 / (1.0 + np.exp(-x.data))
        return _result(out, (x,), lambda g: (g * out,), "sigmoid")   # missing (1 - out)

    monkeypatch.setattr(ops, "sigmoid", bad_sigmoid)
    assert main(["gradcheck", "--no-model"]) == 2
    line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("sigmoid")][0]
    assert line.endswith("FAIL")


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepoch = 3\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    bad.write_text("[nosuch]\nx = 1\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    bad.write_text("[train]\nlr = fast\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
