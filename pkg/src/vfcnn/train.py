"""Dataset synthesis, the training loop and whole-volume prediction."""
import dataclasses
import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .augment import AugmentConfig, apply_transform, sample_transform
from .autograd import Tape, Tensor
from .errors import ConfigurationError, VfcnnError
from .metrics import LossConfig, combined_loss, dice_metric
from .model import Vfcnn, VfcnnConfig, load_checkpoint, save_checkpoint
from .optim import SGD, SgdConfig
from .phantom import PhantomConfig, generate_phantom, split_dataset
from .preprocess import (PipelineConfig, bicubic_resample_slice, preprocess_volume,
                         restore_mask)
from .volume import read_volume, write_volume

LOG_HEADER = "epoch,train_loss,mse_term,dice_term,val_dice"


class TrainingDiverged(VfcnnError, RuntimeError):
    pass


@dataclass
class SynthConfig:
    count: int = 6
    n_val: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ConfigurationError(f"synth count must be at least 1, got {self.count}")
        if not 0 <= self.n_val < self.count:
            raise ConfigurationError(f"n_val must lie in [0, count), got {self.n_val}")


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lam: float = 1e-3
    eps: float = 1e-6
    dice_sign: str = "subtract"
    threshold: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        if self.checkpoint_interval < 0:
            raise ConfigurationError("checkpoint_interval must be non-negative")
        self.sgd()
        self.loss()

    def sgd(self):
        return SgdConfig(self.lr, self.momentum, self.weight_decay)

    def loss(self):
        return LossConfig(self.lam, self.eps, self.dice_sign)


# -- dataset on disk --------------------------------------------------------
#   <dir>/caseNNN.volr + .raw        image
#   <dir>/caseNNN_mask.volr + .raw   binary mask
#   <dir>/split.txt                  "train = ..." / "val = ..." lines
#   <dir>/synth.json                 generating configuration


def _check_out_dir(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ConfigurationError(f"output directory {path} is not empty (use --force)")


def _publish(tmp, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for name in sorted(os.listdir(tmp)):
        os.replace(os.path.join(tmp, name), os.path.join(out_dir, name))
    shutil.rmtree(tmp, ignore_errors=True)


def synthesize_dataset(out_dir, synth=None, phantom=None, seed=0, force=False):
    """Write ``synth.count`` phantom pairs plus a train/val split."""
    synth = synth or SynthConfig()
    phantom = phantom or PhantomConfig()
    _check_out_dir(out_dir, force)
    parent = os.path.dirname(os.path.abspath(out_dir))
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".synth-")
    try:
        ids = []
        for i in range(synth.count):
            case = f"case{i:03d}"
            cfg = dataclasses.replace(phantom, seed=seed + i)
            vol, mask = generate_phantom(cfg)
            write_volume(vol, os.path.join(tmp, f"{case}.volr"))
            write_volume(mask, os.path.join(tmp, f"{case}_mask.volr"))
            ids.append(case)
        train, val = split_dataset(ids, synth.n_val, seed)
        with open(os.path.join(tmp, "split.txt"), "w") as fh:
            fh.write("train = " + " ".join(train) + "\n")
            fh.write("val = " + " ".join(val) + "\n")
        with open(os.path.join(tmp, "synth.json"), "w") as fh:
            json.dump({"synth": asdict(synth), "phantom": phantom.to_dict(), "seed": seed},
                      fh, indent=2, sort_keys=True)
        _publish(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return train, val


def read_split(data_dir):
    split = {"train": [], "val": []}
    with open(os.path.join(data_dir, "split.txt")) as fh:
        for line in fh:
            key, _, value = line.partition("=")
            if key.strip() in split:
                split[key.strip()] = value.split()
    return split["train"], split["val"]


def downsample_mask(mask, size):
    """Network-resolution training target: bicubic in-plane, threshold 0.5."""
    data = mask.data.astype(np.float64)
    if data.shape[1:] == tuple(size):
        return data
    return np.stack([bicubic_resample_slice(s, size) >= 0.5 for s in data]).astype(np.float64)


@dataclass
class Sample:
    case: str
    image: np.ndarray       # (Z, h, w) preprocessed
    target: np.ndarray      # (Z, h, w) binary at network resolution
    mask: object            # MaskVolume at original resolution


def load_samples(data_dir, ids, pipeline):
    samples = []
    for case in ids:
        vol = read_volume(os.path.join(data_dir, f"{case}.volr"))
        mask = read_volume(os.path.join(data_dir, f"{case}_mask.volr"))
        if vol.data.shape != mask.data.shape:
            raise ConfigurationError(f"{case}: image {vol.data.shape} and mask {mask.data.shape} differ")
        image = preprocess_volume(vol, pipeline).data[0, 0]
        samples.append(Sample(case, image, downsample_mask(mask, pipeline.target_size), mask))
    return samples


def predict_probabilities(model, image):
    return model.forward(Tensor(image[None, None]), training=False)


def predict_volume(model, volume, pipeline, threshold=0.5):
    """Preprocess, run the network in eval mode and restore a full-size mask."""
    x = preprocess_volume(volume, pipeline)
    prob = model.forward(x, training=False)
    return restore_mask(prob, volume.data.shape[1:], threshold, volume.spacing)


def _fmt(x):
    return "nan" if math.isnan(x) else repr(float(x))


def train(data_dir, out_dir, train_cfg=None, model_cfg=None, pipeline=None, augment=None,
          force=False, log=None, notes=None):
    """Train on the split in ``data_dir``; writes into ``out_dir``:

    ``best.ckpt`` (best validation Dice, or the final model without a
    validation split), ``last.ckpt``, ``loss_log.csv`` and ``run.json``.
    Returns the list of per-epoch log rows.
    """
    train_cfg = train_cfg or TrainConfig()
    model_cfg = model_cfg or VfcnnConfig(seed=train_cfg.seed)
    pipeline = pipeline or PipelineConfig()
    augment = augment or AugmentConfig(seed=train_cfg.seed)
    _check_out_dir(out_dir, force)

    train_ids, val_ids = read_split(data_dir)
    if not train_ids:
        raise ConfigurationError(f"{data_dir}: no training cases in split.txt")
    train_set = load_samples(data_dir, train_ids, pipeline)
    val_set = load_samples(data_dir, val_ids, pipeline)

    model = Vfcnn(model_cfg)
    opt = SGD(model.params, train_cfg.sgd())
    loss_cfg = train_cfg.loss()
    order_rng = np.random.default_rng(train_cfg.seed)
    aug_rng = np.random.default_rng(augment.seed)
    os.makedirs(out_dir, exist_ok=True)

    metadata = {
        "version": __version__,
        "seed": train_cfg.seed,
        "train": asdict(train_cfg),
        "model": model_cfg.to_dict(),
        "pipeline": pipeline.to_dict(),
        "augment": augment.to_dict(),
        "data": os.path.abspath(data_dir),
        "notes": notes or {},
    }
    ckpt_extra = {k: metadata[k] for k in ("train", "pipeline")}

    rows = []
    best = -math.inf
    for epoch in range(train_cfg.epochs):
        sums = np.zeros(3)
        for idx in order_rng.permutation(len(train_set)):
            sample = train_set[idx]
            image, target = sample.image, sample.target
            if train_cfg.augment:
                t = sample_transform(augment, aug_rng)
                image, target = apply_transform(image, t), apply_transform(target, t)
            with Tape() as tape:
                terms = combined_loss(model.forward(Tensor(image[None, None]), training=True),
                                      target, loss_cfg, return_terms=True)
            value = terms.loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, sample {sample.case}: "
                    f"loss={value}, mse={terms.mse}, dice={terms.dice}")
            tape.backward(terms.loss)
            opt.step()
            sums += (value, terms.mse, terms.dice)
        mean_loss, mean_mse, mean_dice = sums / len(train_set)

        if val_set:
            scores = [dice_metric(restore_mask(predict_probabilities(model, s.image),
                                               s.mask.data.shape[1:], train_cfg.threshold),
                                  s.mask) for s in val_set]
            val_dice = float(np.mean(scores))
        else:
            val_dice = math.nan

        row = (epoch, mean_loss, mean_mse, mean_dice, val_dice)
        rows.append(row)
        if log is not None:
            log(row)
        if val_set and val_dice > best:
            best = val_dice
            save_checkpoint(model, os.path.join(out_dir, "best.ckpt"),
                            dict(ckpt_extra, epoch=epoch, val_dice=val_dice))
        if train_cfg.checkpoint_interval and (epoch + 1) % train_cfg.checkpoint_interval == 0:
            save_checkpoint(model, os.path.join(out_dir, f"epoch{epoch + 1:04d}.ckpt"),
                            dict(ckpt_extra, epoch=epoch))

    final = dict(ckpt_extra, epoch=train_cfg.epochs - 1)
    save_checkpoint(model, os.path.join(out_dir, "last.ckpt"), final)
    if not val_set:
        save_checkpoint(model, os.path.join(out_dir, "best.ckpt"), final)

    lines = [LOG_HEADER] + [",".join([str(r[0])] + [_fmt(v) for v in r[1:]]) for r in rows]
    with open(os.path.join(out_dir, "loss_log.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    metadata["loss_log"] = [list(r) for r in rows]
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True, default=str)
    return rows


def read_loss_log(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != LOG_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            rows.append((int(parts[0]),) + tuple(float(p) for p in parts[1:]))
    return rows


def load_for_prediction(checkpoint):
    model, extra = load_checkpoint(checkpoint)
    pipeline = PipelineConfig(**extra.get("pipeline", {}))
    threshold = extra.get("train", {}).get("threshold", 0.5)
    return model, pipeline, threshold
