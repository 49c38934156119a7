"""Robust binary segmentation under corrupted masks: a three-network
committee selects trustworthy samples, then trains jointly on the original
and peer-corrected labels."""

from .correction import CorrectionConfig, corrected_label, joint_loss, sharpen
from .metrics import ResultRow, dice, emit_table
from .model import DESK, FULL, ModelConfig, build_trinet, build_unet, ensemble_predict
from .morphology import NoiseSpec, corrupt_dataset, dilate, erode
from .selection import SampleLossRecord, SelectionConfig, select_for
from .trainer import TrainConfig, evaluate, fit, run

__all__ = [
    "CorrectionConfig", "corrected_label", "joint_loss", "sharpen",
    "ResultRow", "dice", "emit_table",
    "DESK", "FULL", "ModelConfig", "build_trinet", "build_unet", "ensemble_predict",
    "NoiseSpec", "corrupt_dataset", "dilate", "erode",
    "SampleLossRecord", "SelectionConfig", "select_for",
    "TrainConfig", "evaluate", "fit", "run",
]
__version__ = "0.1.0"
