from .config import TrainConfig
from .data import EmptyMaskError, TrainingSample, View, ViewTransform, generate_synthetic_sample, synthesize_pair, synthetic_sequence
from .losses import ObjectProbabilitySet, dice_loss, dice_loss_backward, fuse_multi_object
from .model import backward_train, forward, forward_train
from .segment import object_probabilities, segment_frame, segment_sequence
from .train import NumericFailure, fine_tune, train

__all__ = [
    "EmptyMaskError",
    "NumericFailure",
    "ObjectProbabilitySet",
    "TrainConfig",
    "TrainingSample",
    "View",
    "ViewTransform",
    "backward_train",
    "dice_loss",
    "dice_loss_backward",
    "fine_tune",
    "forward",
    "forward_train",
    "fuse_multi_object",
    "generate_synthetic_sample",
    "object_probabilities",
    "segment_frame",
    "segment_sequence",
    "synthesize_pair",
    "synthetic_sequence",
    "train",
]
