"""Overfitting a small V-FCNN on one synthetic phantom.

The full network is sized for 127x127x88 inputs and a thousand epochs on
real scans.  Here the same architecture, four channels narrower, learns a
single noiseless 24x24x16 phantom in a few seconds, which is a quick way
to see that every piece (pipeline, forward, loss, backward, SGD) is wired
correctly.

Run:  python demos/train_phantom.py [workdir]
"""
import os
import sys
import tempfile

import numpy as np

from vfcnn.metrics import dice_metric, evaluate
from vfcnn.model import VfcnnConfig
from vfcnn.phantom import PhantomConfig
from vfcnn.preprocess import PipelineConfig
from vfcnn.train import (SynthConfig, TrainConfig, load_for_prediction, predict_volume,
                         synthesize_dataset, train)
from vfcnn.volume import read_volume

work = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="vfcnn-demo-")
data, run = os.path.join(work, "data"), os.path.join(work, "run")

phantom = PhantomConfig(dims=(24, 24, 16), noise_sigma=0.0, contrast=1.0, background=0.0)
synthesize_dataset(data, SynthConfig(count=1, n_val=0), phantom, seed=0, force=True)
vol = read_volume(os.path.join(data, "case000.volr"))
gt = read_volume(os.path.join(data, "case000_mask.volr"))
print(f"phantom {vol.dims} voxels, {gt.count} foreground")

# With one tiny sample the reference learning rate of 1e-4 barely moves
# the weights in 500 epochs, so it is raised to 1e-2 and noted in run.json.
cfg = TrainConfig(epochs=500, lr=1e-2, augment=False)
pipeline = PipelineConfig(target_size=(24, 24), restore_size=(24, 24))


# The soft Dice column is a mean over all slices.  Slices without any
# foreground score close to zero there, so it sits far below the hard
# Dice of the thresholded prediction printed at the end.
def log(row):
    epoch, loss, mse, dice, _ = row
    if epoch % 50 == 0 or epoch == cfg.epochs - 1:
        print(f"epoch {epoch:3d}  loss {loss:.5f}  mse {mse:.5f}  soft dice {dice:.4f}")


train(data, run, cfg, VfcnnConfig(channels=(2, 4, 8, 16)), pipeline, force=True, log=log,
      notes={"lr": "raised to 1e-2 for the single-phantom demo"})

model, pipeline, threshold = load_for_prediction(os.path.join(run, "best.ckpt"))
pred = predict_volume(model, vol, pipeline, threshold)
print(f"\nDice on the training phantom: {dice_metric(pred, gt):.4f}")
print(evaluate(pred, gt).to_text())
print("artifacts in", work)
