"""Attention-based multiple instance learning on image patches, in numpy."""

from .bags import Bag, SourceImage, TilingSpec, augment, load_dataset, split_train_val, synth_generate, tile
from .checkpoint import load_model, save_model
from .localization import Heatmap, attention_to_heatmap, localization_score, render_overlay
from .model import AmilModel, AttentionOutput, bag_label, forward_bag
from .tensor import Tensor, backward, finite_diff_check, no_grad
from .training import Metrics, TrainConfig, evaluate, fit, train_step

__version__ = "0.1.0"

__all__ = [
    "AmilModel",
    "AttentionOutput",
    "Bag",
    "Heatmap",
    "Metrics",
    "SourceImage",
    "Tensor",
    "TilingSpec",
    "TrainConfig",
    "attention_to_heatmap",
    "augment",
    "backward",
    "bag_label",
    "evaluate",
    "finite_diff_check",
    "fit",
    "forward_bag",
    "load_dataset",
    "load_model",
    "localization_score",
    "no_grad",
    "render_overlay",
    "save_model",
    "split_train_val",
    "synth_generate",
    "tile",
    "train_step",
]
