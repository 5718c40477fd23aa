from .augment import Augmenter, affine_matrix, apply_affine_augmentation, augment
from .config import LOSS_TERMS, AugmentConfig, TrainConfig, lr_at
from .losses import compute_loss, depth_targets, masked_l1
from .loop import TrainResult, load_checkpoint, model_from_checkpoint, save_checkpoint, train

__all__ = [
    "LOSS_TERMS",
    "AugmentConfig",
    "Augmenter",
    "TrainConfig",
    "TrainResult",
    "affine_matrix",
    "apply_affine_augmentation",
    "augment",
    "compute_loss",
    "depth_targets",
    "load_checkpoint",
    "lr_at",
    "masked_l1",
    "model_from_checkpoint",
    "save_checkpoint",
    "train",
]
