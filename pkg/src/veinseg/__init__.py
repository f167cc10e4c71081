"""Semi-supervised vein segmentation for ultrasound-guided venipuncture.

A numpy autodiff engine drives a ResNeXt-Unet trained with a mean teacher;
post-processing turns probability maps into a vein centroid and puncture
axis commands.
"""
__version__ = "0.1.0"

from .network import NetConfig, SegModel, build_model, forward_infer, predict_proba, stage_shapes
from .losses import LossWeights, bce_loss, consistency_mse, focal_loss, total_loss
from .postprocess import VeinMask, centroid, navigate, plan_puncture, postprocess_mask
from .metrics import aggregate, centroid_error, cross_validate, dsc, failure_rate
from .trainer import TrainConfig, ema_update, select_inference_model, train_semi, train_supervised
from .data_io import generate_dataset, generate_phantom, load_checkpoint, load_dataset, save_checkpoint

__all__ = [
    "NetConfig", "SegModel", "build_model", "forward_infer", "predict_proba", "stage_shapes",
    "LossWeights", "bce_loss", "consistency_mse", "focal_loss", "total_loss",
    "VeinMask", "centroid", "navigate", "plan_puncture", "postprocess_mask",
    "aggregate", "centroid_error", "cross_validate", "dsc", "failure_rate",
    "TrainConfig", "ema_update", "select_inference_model", "train_semi", "train_supervised",
    "generate_dataset", "generate_phantom", "load_checkpoint", "load_dataset", "save_checkpoint",
]
