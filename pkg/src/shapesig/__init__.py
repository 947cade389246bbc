"""Affine-invariant shape signatures as an auxiliary loss for 3D segmentation."""

from .affine3d import AffineTransform, AugmentationSpec, apply_affine, make_affine_pair
from .autodiff import Parameter, Tape, Tensor, finite_difference_check, no_tape
from .losses import dice_coefficient, dice_loss, hausdorff, shape_loss, total_loss
from .nets import SegNet, SegNetConfig, ShapeLearner, ShapeNetConfig, load_checkpoint, save_checkpoint
from .synth import Dataset, generate_dataset, load_dataset, save_dataset
from .training import (SegTrainConfig, ShapeTrainConfig, evaluate_affine_invariance,
                       evaluate_segmenter, train_segmenter, train_shape_learner)
from .volume_io import LabelMap, Volume, read_rvf, write_rvf

__version__ = "0.1.0"

__all__ = [
    "AffineTransform", "AugmentationSpec", "apply_affine", "make_affine_pair",
    "Parameter", "Tape", "Tensor", "finite_difference_check", "no_tape",
    "dice_coefficient", "dice_loss", "hausdorff", "shape_loss", "total_loss",
    "SegNet", "SegNetConfig", "ShapeLearner", "ShapeNetConfig", "load_checkpoint",
    "save_checkpoint", "Dataset", "generate_dataset", "load_dataset", "save_dataset",
    "SegTrainConfig", "ShapeTrainConfig", "evaluate_affine_invariance",
    "evaluate_segmenter", "train_segmenter", "train_shape_learner",
    "LabelMap", "Volume", "read_rvf", "write_rvf",
]
