"""Acceptance gate: one test per primary criterion.

Each test records a single PASS/FAIL line (printed inline with ``-s`` and
collected in the terminal summary).  Run with::

    pytest tests/test_acceptance.py -v
"""
import hashlib
import json
import math
import os
import re
import time

import numpy as np
import pytest

from vfcnn.autograd import Tensor
from vfcnn.cli import main
from vfcnn.gradcheck import MODEL_TOL, OP_CASES, OP_TOL, run_suite
from vfcnn.metrics import (LossConfig, combined_loss, dice_metric, directed_hausdorff,
                           extract_surface)
from vfcnn.model import Vfcnn, VfcnnConfig, plan_shapes
from vfcnn.ops import conv3d, conv_transpose3d
from vfcnn.phantom import PhantomConfig
from vfcnn.preprocess import PipelineConfig, bicubic_resample_slice, restore_mask
from vfcnn.train import (SynthConfig, TrainConfig, load_for_prediction, predict_volume,
                         read_loss_log, synthesize_dataset, train)
from vfcnn.volume import read_volume


def _digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# -- gradients -------------------------------------------------------------------

def test_gradient_suite(criterion):
    start = time.perf_counter()
    results = run_suite(seed=0, include_model=True)
    elapsed = time.perf_counter() - start
    names = {r.name for r in results}
    ok = (set(OP_CASES) <= names and any("model" in n for n in names)
          and all(r.passed for r in results) and elapsed < 60)
    worst_op = max(r.max_rel_error for r in results if r.name in OP_CASES)
    worst_model = max(r.max_rel_error for r in results if r.name not in OP_CASES)
    criterion("gradient suite", ok,
              f"{len(results)} checks, max op error {worst_op:.2e} (tol {OP_TOL:g}), "
              f"model {worst_model:.2e} (tol {MODEL_TOL:g}), {elapsed:.1f} s")


def test_adjoint_identity(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    n_configs = 24
    for _ in range(n_configs):
        k = tuple(int(v) for v in rng.choice([1, 2, 3, 5], 3))
        stride = tuple(int(v) for v in rng.integers(1, 4, 3))
        pad = tuple(int(rng.integers(0, kk // 2 + 1)) for kk in k)
        dhw = tuple(int(rng.integers(kk, kk + 7)) for kk in k)
        cin, cout = (int(v) for v in rng.integers(1, 4, 2))
        x = rng.standard_normal((int(rng.integers(1, 3)), cin) + dhw)
        w = rng.standard_normal((cout, cin) + k)
        ax = conv3d(x, w, None, stride, pad).data
        y = rng.standard_normal(ax.shape)
        outpad = tuple(n - ((o - 1) * s - 2 * p + kk)
                       for n, o, s, p, kk in zip(dhw, y.shape[2:], stride, pad, k))
        aty = conv_transpose3d(y, w, None, stride, pad, outpad).data
        lhs, rhs = float(np.vdot(ax, y)), float(np.vdot(x, aty))
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    criterion("adjoint identity", worst <= 1e-10, f"{n_configs} configs, max gap {worst:.2e}")


# -- shapes ------------------------------------------------------------------------

def _size_oracle(n, k=3, s=2, p=1):
    return (n + 2 * p - k) // s + 1


def test_shape_round_trip(criterion):
    rng = np.random.default_rng(7)
    # shape logic is independent of width: a one-channel model keeps the
    # 50 random sizes cheap.  Eval mode after one warm-up step so that
    # sizes whose bottleneck is a single voxel are also covered.
    narrow = Vfcnn(VfcnnConfig(channels=(1, 1, 1, 1)))
    narrow.forward(Tensor(rng.random((1, 1, 24, 24, 24))), training=True)
    sizes = [tuple(int(v) for v in rng.integers(16, 161, 3)) for _ in range(50)]
    bad = []
    for dhw in sizes:
        out = narrow.forward(Tensor(rng.random((1, 1) + dhw)), training=False)
        if out.shape != (1, 1) + dhw:
            bad.append(dhw)

    cfg = VfcnnConfig()
    plan = plan_shapes((88, 127, 127), cfg)
    d = [88]
    hw = [127]
    for _ in range(4):
        d.append(_size_oracle(d[-1]))
        hw.append(_size_oracle(hw[-1]))
    ledger_ok = (plan.ledger.sizes == [(a, b, b) for a, b in zip(d, hw)]
                 and hw == [127, 64, 32, 16, 8] and d == [88, 44, 22, 11, 6])
    full = Vfcnn(cfg).forward(Tensor(rng.random((1, 1, 88, 127, 127))), training=True)
    ok = not bad and ledger_ok and full.shape == (1, 1, 88, 127, 127)
    criterion("shape round trip", ok,
              f"{len(sizes) - len(bad)}/{len(sizes)} random sizes, 127x127x88 default model "
              f"-> {full.shape[2:]}, down path H/W {hw} Z {d}")


# -- metrics and loss --------------------------------------------------------------

def _dice_brute(a, b):
    inter = na = nb = 0
    for u, v in zip(a.ravel().tolist(), b.ravel().tolist()):
        na += u
        nb += v
        inter += u * v
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def _surface_brute(mask, spacing):
    Z, Y, X = mask.shape
    pts = []
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                if mask[z, y, x] and any(
                        not (0 <= z + dz < Z and 0 <= y + dy < Y and 0 <= x + dx < X)
                        or not mask[z + dz, y + dy, x + dx]
                        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                           (0, -1, 0), (0, 0, 1), (0, 0, -1))):
                    pts.append((z * spacing[0], y * spacing[1], x * spacing[2]))
    return np.array(pts).reshape(-1, 3)


def _hd_brute(a, b):
    # every point against every point; squared distances are minimised
    # before the square root, which is monotone, so the result is exact
    return math.sqrt(max(float(((b - p) ** 2).sum(axis=1).min()) for p in a))


def test_metric_oracles(criterion):
    rng = np.random.default_rng(31)
    pairs = dice_mismatch = hd_mismatch = hd_pairs = 0
    spacing = (0.625, 0.625, 0.625)
    while pairs < 200 or hd_pairs < 200:
        shape = tuple(int(v) for v in rng.integers(2, 17, 3))
        a = (rng.random(shape) < rng.uniform(0.05, 0.5)).astype(np.uint8)
        b = (rng.random(shape) < rng.uniform(0.05, 0.5)).astype(np.uint8)
        pairs += 1
        dice_mismatch += dice_metric(a, b) != _dice_brute(a, b)
        if not (a.any() and b.any()):
            continue
        sa, sb = _surface_brute(a, spacing), _surface_brute(b, spacing)
        hd_pairs += 1
        hd_mismatch += directed_hausdorff(sa, sb) != _hd_brute(sa, sb)
        hd_mismatch += not np.array_equal(extract_surface(a, spacing), sa)

    scale_ok = True
    for factor in (0.5, 2.0, 4.0):
        shape = (8, 9, 10)
        a = (rng.random(shape) < 0.3).astype(np.uint8)
        b = (rng.random(shape) < 0.3).astype(np.uint8)
        base = (0.625, 0.7, 1.1)
        scaled = tuple(factor * s for s in base)
        d0 = directed_hausdorff(extract_surface(a, base), extract_surface(b, base))
        d1 = directed_hausdorff(extract_surface(a, scaled), extract_surface(b, scaled))
        scale_ok &= d1 == factor * d0
    ok = dice_mismatch == 0 and hd_mismatch == 0 and hd_pairs >= 200 and scale_ok
    criterion("metric oracles", ok,
              f"{pairs} Dice pairs ({dice_mismatch} mismatches), {hd_pairs} Hausdorff pairs "
              f"({hd_mismatch} mismatches), spacing scaling exact: {scale_ok}")


def test_loss_correctness(criterion):
    cfg = LossConfig(lam=1e-3, eps=0.0)
    y = np.zeros((1, 2, 2))
    y[0, 0, 0] = 1.0
    pred = np.zeros((1, 1, 1, 2, 2))
    worked = combined_loss(pred, y, cfg).item()
    perfect_small = combined_loss(y[None, None], y, cfg).item()
    half = np.full((1, 1, 1, 2, 2), 0.5)
    # MSE = (0.25*1 + 0.25*3)/4 = 0.25; soft Dice = 2*0.5/(0.5*4 + 1) = 1/3
    half_loss = combined_loss(half, y, cfg).item()

    big = np.zeros((12, 16, 16))
    big[1:11, 3:13, 3:13] = 1.0
    zero = combined_loss(big[None, None], big, LossConfig(lam=1e-3)).item()
    perturbed = big.copy()
    perturbed[6, 6, 6] = 0.0     # one misclassified voxel
    nonzero = combined_loss(perturbed[None, None], big, LossConfig(lam=1e-3)).item()

    ok = (abs(worked - (0.25 + 1e-3)) <= 1e-15 and perfect_small == 0.0
          and abs(half_loss - (0.25 + 1e-3 * (1 - 1 / 3))) <= 1e-15
          and big.sum() >= 1000 and 0.0 <= zero <= 1e-9 and nonzero > 1e-9)
    criterion("loss correctness", ok,
              f"worked example {worked!r}, half-probability {half_loss!r}, "
              f"equal volumes {zero:.1e}, one flipped voxel {nonzero:.1e}")


# -- training ------------------------------------------------------------------------

DESK_PHANTOM = PhantomConfig(dims=(24, 24, 16), noise_sigma=0.0, contrast=1.0, background=0.0)
DESK_PIPELINE = PipelineConfig(target_size=(24, 24), restore_size=(24, 24))
DESK_MODEL = VfcnnConfig(channels=(2, 4, 8, 16))


@pytest.mark.slow
def test_desk_scale_convergence(tmp_path, criterion):
    data = str(tmp_path / "data")
    synthesize_dataset(data, SynthConfig(count=1, n_val=0), DESK_PHANTOM, seed=0)
    cfg = TrainConfig(epochs=500, lr=1e-2, augment=False)
    notes = {"lr": "learning rate raised from 1e-4 to 1e-2 for the reduced desk-scale problem"}
    start = time.perf_counter()
    train(data, str(tmp_path / "run"), cfg, DESK_MODEL, DESK_PIPELINE, notes=notes)
    elapsed = time.perf_counter() - start

    rows = read_loss_log(str(tmp_path / "run" / "loss_log.csv"))
    losses = np.array([r[1] for r in rows])
    windows = losses[: len(losses) // 20 * 20].reshape(-1, 20).mean(axis=1)
    monotone = bool(np.all(np.diff(windows) <= 0))

    model, pipeline, threshold = load_for_prediction(str(tmp_path / "run" / "best.ckpt"))
    vol = read_volume(os.path.join(data, "case000.volr"))
    gt = read_volume(os.path.join(data, "case000_mask.volr"))
    dice = dice_metric(predict_volume(model, vol, pipeline, threshold), gt)
    meta = json.load(open(tmp_path / "run" / "run.json"))
    recorded = meta["train"]["lr"] == 1e-2 and "lr" in meta["notes"]
    ok = len(rows) <= 500 and dice >= 0.95 and elapsed < 600 and monotone and recorded
    criterion("desk-scale convergence", ok,
              f"train Dice {dice:.4f} after {len(rows)} epochs in {elapsed:.0f} s, "
              f"20-epoch window means non-increasing: {monotone}, lr recorded: {recorded}")


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
epochs = 3
lr = 1e-2
"""


def test_end_to_end_pipeline(tmp_path, capsys, criterion):
    cfg = tmp_path / "run.ini"
    cfg.write_text(SMOKE_INI)
    data, run = tmp_path / "data", tmp_path / "run"
    codes = [main(["synth", "--config", str(cfg), "--out", str(data)]),
             main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run), "--quiet"]),
             main(["predict", "--checkpoint", str(run / "best.ckpt"),
                   "--volume", str(data / "case000.volr"), "--out", str(tmp_path / "pred.volr")])]
    capsys.readouterr()
    codes.append(main(["evaluate", "--pred", str(tmp_path / "pred.volr"),
                       "--gt", str(data / "case000_mask.volr")]))
    capsys.readouterr()
    gt = str(data / "case000_mask.volr")
    codes.append(main(["evaluate", "--pred", gt, "--gt", gt, "--out", str(tmp_path / "self.txt")]))
    cells = re.findall(r"\d+\.\d{2} \(\d+\.\d{2}\)", capsys.readouterr().out)
    kv = dict(line.split("=") for line in (tmp_path / "self.txt").read_text().splitlines())
    hd = (float(kv["hd_directed_mm"]), float(kv["hd_symmetric_mm"]))
    ok = codes == [0] * 5 and cells == ["100.00 (0.00)"] * 3 and hd == (0.0, 0.0)
    criterion("end-to-end pipeline", ok,
              f"exit codes {codes}, gt-vs-gt regions {cells}, HD directed/symmetric {hd}")


def test_reproducibility(tmp_path, criterion):
    cfg = tmp_path / "run.ini"
    cfg.write_text(SMOKE_INI)
    data = tmp_path / "data"
    assert main(["synth", "--config", str(cfg), "--out", str(data)]) == 0
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--out", str(tmp_path / name), "--threads", "1", "--quiet"]) == 0
    files = ["best.ckpt", "last.ckpt", "loss_log.csv"]
    same = [_digest(tmp_path / "a" / f) == _digest(tmp_path / "b" / f) for f in files]
    criterion("reproducibility", all(same),
              ", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in zip(files, same)))


def test_preprocessing_round_trip(criterion):
    c = (np.arange(640) + 0.5) / 640
    yy, xx = np.meshgrid(c, c, indexing="ij")
    scores = []
    for cy, cx, r in ((0.5, 0.5, 0.3), (0.4, 0.6, 0.2), (0.55, 0.45, 0.12)):
        smooth = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (r / 2) ** 2))
        mask = smooth >= 0.5
        down = bicubic_resample_slice(mask.astype(float), (127, 127))
        back = restore_mask(down[None], (640, 640), 0.5)
        scores.append(dice_metric(back.data[0], mask))
    criterion("preprocessing round trip", min(scores) >= 0.95,
              "640->127->640 blob Dice " + ", ".join(f"{s:.4f}" for s in scores))
