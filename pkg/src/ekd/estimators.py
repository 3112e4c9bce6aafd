"""Scikit-learn style estimators over the multi-branch ResNet machinery.

``ResNetClassifier`` trains a (possibly multi-branch) ResNet with plain
cross-entropy; it is used for teacher pretraining and for the
no-distillation control. ``EKDClassifier`` pretrains a teacher ensemble
(or takes already fitted teachers) and then trains the compact student
jointly with it.

Both take images shaped ``(n, H, W, C)``, raw ``uint8`` or real valued.
"""
from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import data as data_mod
from .exceptions import PairingError
from .evaluation import EvalReport, extract_features, top1_accuracy
from .losses import LossWeights
from .models import BranchNet, ModelSpec, compnet, count_flops, count_params
from .training import TrainConfig, fit_supervised, predict_logits, train_ekd
from .validation import as_image_set, check_images, check_images_labels


def derive_seed(seed, index):
    """Independent integer seed for sub-run ``index`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


class _BranchClassifierMixin(ClassifierMixin, TransformerMixin):
    """Prediction surface shared by both estimators; subclasses set ``model_``."""

    def _prepare_fit(self, X, y, eval_set):
        X, y = check_images_labels(X, y)
        self.classes_ = np.unique(y)
        self.image_shape_ = X.shape[1:]
        self.normalization_ = data_mod.channel_stats(X)
        train = as_image_set(X, y, self.classes_, "train")
        evaluation = None
        if eval_set is not None:
            Xe, ye = check_images_labels(*eval_set) if isinstance(eval_set, tuple) else check_images_labels(eval_set)
            evaluation = as_image_set(Xe, ye, self.classes_, "test")
        return train, evaluation

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        if X.shape[1:] != tuple(self.image_shape_):
            raise ValueError(f"fitted on images of shape {self.image_shape_}, got {X.shape[1:]}")
        return X

    def decision_function(self, X):
        """Summed branch logits, shape ``(n, n_classes)``."""
        X = self._check_X(X)
        return predict_logits(self.model_, X, self.normalization_, self.eval_batch_size)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X):
        """Pooled features of every branch, concatenated branch by branch: ``(n, N * M)``."""
        X = self._check_X(X)
        dump = extract_features(self.model_, self._as_set(X, None), self.normalization_, self.eval_batch_size)
        n_br = len(self.model_.branches)
        return dump.features.reshape(len(X), n_br * dump.feature_dim)

    def _as_set(self, X, y):
        if y is None:
            y = np.full(len(X), self.classes_[0])
        return as_image_set(X, np.asarray(y), self.classes_, "eval")

    def evaluate(self, X, y=None, dataset_id="", model_id="") -> EvalReport:
        """Ensemble and per-branch top-1 accuracy."""
        X, y = check_images_labels(X, y)
        X = self._check_X(X)
        return top1_accuracy(self.model_, self._as_set(X, y), self.normalization_,
                             self.eval_batch_size, dataset_id, model_id)

    def feature_dump(self, X, y=None):
        X, y = check_images_labels(X, y)
        X = self._check_X(X)
        return extract_features(self.model_, self._as_set(X, y), self.normalization_, self.eval_batch_size)

    @property
    def n_params_(self):
        check_is_fitted(self, "model_")
        return count_params(self.model_)

    @property
    def n_flops_(self):
        check_is_fitted(self, "model_")
        h, w, c = self.image_shape_
        return count_flops(self.model_.specs, (h, w, c))


class ResNetClassifier(_BranchClassifierMixin, BaseEstimator):
    """CIFAR ResNet (``n_branches`` parallel copies, logits summed) trained with cross-entropy.

    Parameters
    ----------
    depth : int, default=8
        Layers per branch; must be ``6n + 2``.
    n_branches : int, default=1
    stage_widths : tuple of int, default=(16, 32, 64)
    epochs : int, default=30
    lr : float, default=0.01
        Base learning rate, divided by ``drop_factor`` at each of ``lr_drop_points``.
    ce_weight : float, default=1.0
        Multiplier on the loss. Setting it to the ``beta`` of an
        :class:`EKDClassifier` reproduces that estimator's ``alpha=gamma=0`` run.
    random_state : int, default=0
        Seeds initialization, batch order and augmentation.
    """

    def __init__(
        self,
        depth=8,
        n_branches=1,
        stage_widths=(16, 32, 64),
        epochs=30,
        lr=0.01,
        lr_drop_points=(0.5, 0.75),
        drop_factor=10.0,
        weight_decay=5e-4,
        batch_size=128,
        augment=False,
        init_std=0.01,
        ce_weight=1.0,
        max_steps=None,
        eval_batch_size=512,
        random_state=0,
        dtype="float32",
        callback=None,
    ):
        self.depth = depth
        self.n_branches = n_branches
        self.stage_widths = stage_widths
        self.epochs = epochs
        self.lr = lr
        self.lr_drop_points = lr_drop_points
        self.drop_factor = drop_factor
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.augment = augment
        self.init_std = init_std
        self.ce_weight = ce_weight
        self.max_steps = max_steps
        self.eval_batch_size = eval_batch_size
        self.random_state = random_state
        self.dtype = dtype
        self.callback = callback

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            base_lr=self.lr,
            lr_drop_points=tuple(self.lr_drop_points),
            drop_factor=self.drop_factor,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=self.random_state,
            augment=self.augment,
            init_std=self.init_std,
            max_steps=self.max_steps,
        )

    def fit(self, X, y=None, eval_set=None):
        train, evaluation = self._prepare_fit(X, y, eval_set)
        spec = ModelSpec(self.depth, len(self.classes_), tuple(self.stage_widths), self.image_shape_[-1])
        self.spec_ = spec
        self.model_ = compnet(spec, self.n_branches).to(getattr(torch, self.dtype))
        self.trace_ = fit_supervised(
            self.model_, train, self._train_config(), evaluation, self.normalization_,
            ce_weight=self.ce_weight, on_epoch=self.callback,
        )
        return self


class EKDClassifier(_BranchClassifierMixin, BaseEstimator):
    """Compact multi-branch student distilled from an ensemble of deeper teachers.

    ``fit`` first pretrains one :class:`ResNetClassifier` per entry of
    ``teacher_depths`` (skipped when ``teachers`` supplies fitted ones), then
    trains student and teachers jointly on
    ``alpha * CE(P_t) + beta * CE(P_s) + gamma * KD``. Branch ``i`` of the
    student is paired with teacher ``i``.

    Fitted attributes: ``student_`` (alias ``model_``), ``teacher_net_``,
    ``teachers_`` (the pretrained teachers, before joint training), ``trace_``
    and ``teacher_traces_``.
    """

    def __init__(
        self,
        student_depth=8,
        n_branches=1,
        teacher_depths=(14,),
        stage_widths=(16, 32, 64),
        alpha=0.5,
        beta=0.5,
        gamma=0.6,
        temperature=10.0,
        soften_student=False,
        epochs=60,
        pretrain_epochs=30,
        lr=0.01,
        lr_drop_points=(0.5, 0.75),
        drop_factor=10.0,
        weight_decay=5e-4,
        batch_size=128,
        augment=False,
        init_std=0.01,
        freeze_teachers=False,
        teacher_objective="ce",
        teachers=None,
        max_steps=None,
        pretrain_max_steps=None,
        eval_batch_size=512,
        random_state=0,
        dtype="float32",
        callback=None,
    ):
        self.student_depth = student_depth
        self.n_branches = n_branches
        self.teacher_depths = teacher_depths
        self.stage_widths = stage_widths
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.temperature = temperature
        self.soften_student = soften_student
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.lr = lr
        self.lr_drop_points = lr_drop_points
        self.drop_factor = drop_factor
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.augment = augment
        self.init_std = init_std
        self.freeze_teachers = freeze_teachers
        self.teacher_objective = teacher_objective
        self.teachers = teachers
        self.max_steps = max_steps
        self.pretrain_max_steps = pretrain_max_steps
        self.eval_batch_size = eval_batch_size
        self.random_state = random_state
        self.dtype = dtype
        self.callback = callback

    @property
    def loss_weights(self):
        return LossWeights(self.alpha, self.beta, self.gamma, self.temperature, self.soften_student)

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            base_lr=self.lr,
            lr_drop_points=tuple(self.lr_drop_points),
            drop_factor=self.drop_factor,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=self.random_state,
            augment=self.augment,
            init_std=self.init_std,
            loss_weights=self.loss_weights,
            freeze_teachers=self.freeze_teachers,
            teacher_objective=self.teacher_objective,
            max_steps=self.max_steps,
        )

    def _teacher_estimator(self, depth, index):
        return ResNetClassifier(
            depth=depth,
            stage_widths=self.stage_widths,
            epochs=self.pretrain_epochs,
            lr=self.lr,
            lr_drop_points=self.lr_drop_points,
            drop_factor=self.drop_factor,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            augment=self.augment,
            init_std=self.init_std,
            max_steps=self.pretrain_max_steps,
            eval_batch_size=self.eval_batch_size,
            random_state=derive_seed(self.random_state, index + 1),
            dtype=self.dtype,
        )

    def fit(self, X, y=None, eval_set=None):
        # pairing is checked before any training starts
        self._check_pairing()
        train, evaluation = self._prepare_fit(X, y, eval_set)
        X_raw, y_raw = check_images_labels(X, y)
        if self.teachers is None:
            self.teachers_ = [
                self._teacher_estimator(d, i).fit(X_raw, y_raw, eval_set)
                for i, d in enumerate(self.teacher_depths)
            ]
        else:
            self.teachers_ = [copy.deepcopy(t) for t in self.teachers]
            for t in self.teachers_:
                check_is_fitted(t, "model_")
                if not np.array_equal(t.classes_, self.classes_):
                    raise ValueError("pretrained teachers were fitted on different classes")
        self.teacher_traces_ = [t.trace_ for t in self.teachers_]
        self.teacher_net_ = BranchNet(
            [copy.deepcopy(b) for t in self.teachers_ for b in t.model_.branches]
        )

        spec = ModelSpec(self.student_depth, len(self.classes_), tuple(self.stage_widths), self.image_shape_[-1])
        self.spec_ = spec
        self.student_ = compnet(spec, self.n_branches).to(getattr(torch, self.dtype))
        self.teacher_net_.to(getattr(torch, self.dtype))
        self.trace_ = train_ekd(
            self.student_, self.teacher_net_, train, self._train_config(), evaluation,
            self.normalization_, on_epoch=self.callback,
        )
        self.model_ = self.student_
        return self

    def _check_pairing(self):
        if self.teachers is None:
            n_teachers = len(self.teacher_depths)
        else:
            n_teachers = sum(len(t.model_.branches) for t in self.teachers)
        if n_teachers != self.n_branches:
            raise PairingError(
                f"{self.n_branches} student branches but {n_teachers} teachers; "
                "branches pair with teachers by index"
            )

    def teacher_evaluate(self, X, y=None) -> EvalReport:
        """Accuracy of the jointly trained teacher ensemble."""
        X, y = check_images_labels(X, y)
        X = self._check_X(X)
        return top1_accuracy(self.teacher_net_, self._as_set(X, y), self.normalization_, self.eval_batch_size)
