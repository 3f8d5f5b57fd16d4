"""Feature-boosting segmentation network on a from-scratch autodiff tensor core."""

from .tensor import (Tensor, Tape, backward, finite_diff_check, no_grad,
                     set_default_dtype)
from .model import FBNet, ModelConfig, NetworkOutput, count_parameters
from .backbone import Backbone, BackboneConfig
from .attention import CamBlock, SamBlock, cam_forward, sam_forward, sam_attention_matrix
from .data import DataConfig, Sample, SyntheticSpec, augment, eval_resize, generate_synthetic, load_dataset
from .train import OptimConfig, SGD, confusion_matrix, evaluate, miou, pixel_accuracy, poly_lr, train_loop

__version__ = "0.1.0"
