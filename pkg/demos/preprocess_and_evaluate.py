"""The slice pipeline and the evaluation report on a full-size phantom.

Run:  python demos/preprocess_and_evaluate.py
"""
import numpy as np

from vfcnn.augment import AugmentConfig, augment_pair
from vfcnn.metrics import dice_metric, evaluate
from vfcnn.phantom import PhantomConfig, generate_phantom
from vfcnn.preprocess import bicubic_resample_slice, preprocess_volume, restore_mask
from vfcnn.volume import MaskVolume

# 640x640 slices like the MRI scans, but only a dozen of them.
vol, gt = generate_phantom(PhantomConfig(dims=(640, 640, 12), vein_radius=(10, 20),
                                         vein_length=(30, 80), seed=3))
x, info = preprocess_volume(vol, return_info=True)
print("network input:", x.shape, f"range [{x.data.min():.3f}, {x.data.max():.3f}]")
print("constant slices:", info.degenerate_slices or "none")

# The network sees 127x127 slices; predictions go back up to 640x640.
# Pushing the ground truth itself through that path shows how much the
# resampling alone costs.
small = np.stack([bicubic_resample_slice(s, (127, 127)) for s in gt.data.astype(float)])
back = restore_mask(small, (640, 640), 0.5, gt.spacing)
print(f"640 -> 127 -> 640 Dice: {dice_metric(back, gt):.4f}")

print()
print(evaluate(back, gt).to_text())

# Augmentation applies one flip/shift to image and mask together.
img, msk = augment_pair(vol, gt, AugmentConfig(p_flip_h=1.0, max_translate=10), np.random.default_rng(0))
flipped = MaskVolume(gt.data[:, :, ::-1].copy(), gt.spacing)
print(f"augmented mask vs plain horizontal flip: Dice {dice_metric(msk, flipped):.4f}")
