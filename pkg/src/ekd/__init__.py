"""Ensemble knowledge distillation into compact multi-branch CIFAR ResNets."""
from .data import LabeledImageSet, batch_iterator, parse_cifar10, parse_cifar100, stratified_subsample, synthetic_blobs
from .estimators import EKDClassifier, ResNetClassifier
from .losses import LossWeights, cross_entropy, kd_loss, kl_loss, mse_loss, softmax, train_loss
from .models import BranchNet, CifarResNet, EnsembleSpec, ModelSpec, compnet, count_flops, count_params, teachnet
from .training import TrainConfig, lr_at, train_ekd, pretrain_teacher

__version__ = "0.1.0"
