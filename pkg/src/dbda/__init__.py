"""Unsupervised domain adaptation for semantic segmentation by entropy
minimisation and soft class-distribution alignment, on a small numpy
autodiff engine."""

from .tensor import Tensor, backward, no_grad, softmax_channel
from .model import ModelConfig, SegModel, build, forward
from .losses import (
    ClassDistribution,
    LossValue,
    cross_entropy,
    entropy_min,
    kl_distribution,
    pseudo_label_ce,
    soft_class_distribution,
)
from .metrics import ConfusionMatrix, MetricReport, accumulate, report
from .train import TrainConfig, joint_step, poly_lr, run

__version__ = "0.1.0"
