"""Volumetric fully convolutional segmentation on a small numpy autodiff engine."""
__version__ = "0.1.0"

from .autograd import Tape, Tensor, backward
from .ops import BatchNormState, batchnorm3d, conv3d, conv_transpose3d, prelu, sigmoid
from .optim import SGD, SgdConfig, sgd_step
from .model import (ShapeLedger, ShapePlan, Vfcnn, VfcnnConfig, load_checkpoint, plan_shapes,
                    predict_mask, save_checkpoint)
from .metrics import (EvalReport, LossConfig, combined_loss, dice_metric, directed_hausdorff,
                      evaluate, extract_surface, hausdorff, regional_dice)
from .preprocess import (PipelineConfig, bicubic_resample_slice, clahe_slice, gaussian_blur_slice,
                         highpass_blend, preprocess_volume, restore_mask)
from .augment import AugmentConfig, augment_pair
from .volume import MaskVolume, Volume, read_volume, write_volume
from .phantom import PhantomConfig, generate_phantom, split_dataset
