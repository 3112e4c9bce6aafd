"""Parameter initialization, LR schedule, teacher pretraining and joint EKD training."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Callable, List, Optional

import numpy as np
import torch
from torch import nn

from . import data as data_mod
from .exceptions import ConfigurationError, DivergedError, PairingError
from .losses import LossWeights, cross_entropy, train_loss
from .models import BranchNet, CifarResNet, ModelSpec

LOSS_PARTS = (
    "ce_teacher",
    "ce_student",
    "kd_combined_kl",
    "kd_combined_mse",
    "kd_branch_kl_sum",
    "kd_branch_mse_sum",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    base_lr: float = 0.01
    lr_drop_points: tuple = (0.5, 0.75)
    drop_factor: float = 10.0
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    augment: bool = False
    init_std: float = 0.01
    loss_weights: LossWeights = field(default_factory=LossWeights)
    freeze_teachers: bool = False
    # "ce": teachers learn from alpha * CE(P_t, y) only; "full": from the whole objective
    teacher_objective: str = "ce"
    max_steps: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "lr_drop_points", tuple(float(p) for p in self.lr_drop_points))
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.base_lr < 0:
            raise ConfigurationError("base_lr must be >= 0")
        if any(not 0 < p < 1 for p in self.lr_drop_points):
            raise ConfigurationError("lr drop points must lie strictly inside (0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.teacher_objective not in ("ce", "full"):
            raise ConfigurationError("teacher_objective must be 'ce' or 'full'")


@dataclass
class TraceRow:
    epoch: int
    lr: float
    total: float
    parts: dict
    train_acc: float
    test_acc: Optional[float]
    wall_time: float
    steps: int

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainTrace:
    rows: List[TraceRow] = field(default_factory=list)

    def append(self, row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def to_list(self):
        return [r.to_dict() for r in self.rows]


def init_params(model: nn.Module, seed: int, std: float = 0.01) -> nn.Module:
    """Weights ~ N(0, std^2), biases 0, BN scale 1 and shift 0, from a seeded generator."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                draw = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                module.weight.copy_(draw * std)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.reset_parameters()
    return model


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: divide by ``drop_factor`` at ``ceil(p * epochs)`` for each drop point."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    drops = sum(epoch >= math.ceil(p * config.epochs) for p in config.lr_drop_points)
    return config.base_lr / config.drop_factor ** drops


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


def _make_optimizer(params, config):
    # coupled L2: decay is added to the gradient before the moment estimates
    return torch.optim.Adam(params, lr=config.base_lr, weight_decay=config.weight_decay)


def _dtype_of(model):
    return next(model.parameters()).dtype


def _to_tensor(xb, dtype):
    return torch.from_numpy(np.ascontiguousarray(xb.transpose(0, 3, 1, 2))).to(dtype)


def _check_finite(tensor, epoch, what="loss"):
    if not torch.isfinite(tensor).all():
        raise DivergedError(f"non-finite {what} at epoch {epoch}", epoch)


@torch.no_grad()
def predict_logits(model: BranchNet, images, normalization=None, batch_size=512):
    """Combined logits of ``model`` in inference mode, as a float64 numpy array."""
    was_training = model.training
    model.eval()
    dtype = _dtype_of(model)
    out = []
    try:
        for start in range(0, len(images), batch_size):
            xb = images[start:start + batch_size]
            xb = data_mod.normalize(xb, *normalization) if normalization else np.asarray(xb, np.float32)
            out.append(model(_to_tensor(xb, dtype)).combined_logits.double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def _test_accuracy(model, eval_data, normalization):
    if eval_data is None:
        return None
    logits = predict_logits(model, eval_data.images, normalization)
    return float((logits.argmax(1) == eval_data.labels).mean())


class _EpochMeter:
    def __init__(self):
        self.n = 0
        self.correct = 0
        self.sums = {}

    def add(self, values: dict, logits, labels):
        b = len(labels)
        self.n += b
        self.correct += int((logits.argmax(1) == labels).sum())
        for k, v in values.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v) * b

    def means(self):
        return {k: v / self.n for k, v in self.sums.items()}

    @property
    def accuracy(self):
        return self.correct / self.n


def fit_supervised(
    model: BranchNet,
    dataset,
    config: TrainConfig,
    eval_data=None,
    normalization=None,
    ce_weight: float = 1.0,
    on_epoch: Optional[Callable[[TraceRow], None]] = None,
    initialize: bool = True,
) -> TrainTrace:
    """Minimize ``ce_weight * CE(combined logits, y)``; ``model`` is updated in place."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if initialize:
        init_params(model, config.seed, config.init_std)
    dtype = _dtype_of(model)
    optimizer = _make_optimizer(model.parameters(), config)
    trace = TrainTrace()
    steps = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_at(epoch, config)
        _set_lr(optimizer, lr)
        model.train()
        meter = _EpochMeter()
        for xb, yb in data_mod.batch_iterator(
            dataset, config.batch_size, config.seed, epoch, config.augment, normalization
        ):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            x = _to_tensor(xb, dtype)
            y = torch.from_numpy(yb)
            out = model(x)
            _check_finite(out.combined_logits, epoch, "logits")
            ce = cross_entropy(out.combined_logits, y)
            loss = ce_weight * ce
            _check_finite(loss, epoch)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            steps += 1
            meter.add({"ce_student": ce.detach()}, out.combined_logits.detach().numpy(), yb)
        if meter.n == 0:
            break
        parts = meter.means()
        row = TraceRow(
            epoch, lr, ce_weight * parts["ce_student"], parts, meter.accuracy,
            _test_accuracy(model, eval_data, normalization),
            time.perf_counter() - start, steps,
        )
        trace.append(row)
        if on_epoch:
            on_epoch(row)
    model.eval()
    return trace


def pretrain_teacher(spec: ModelSpec, dataset, config: TrainConfig, eval_data=None,
                     normalization=None, on_epoch=None):
    """Train one teacher from scratch with plain cross-entropy.

    Returns ``(network, trace)`` where ``network`` is a :class:`CifarResNet`.
    """
    wrapper = BranchNet([CifarResNet(spec)])
    trace = fit_supervised(wrapper, dataset, config, eval_data, normalization, on_epoch=on_epoch)
    return wrapper.branches[0], trace


def train_ekd(
    student: BranchNet,
    teachers: BranchNet,
    dataset,
    config: TrainConfig,
    eval_data=None,
    normalization=None,
    on_epoch=None,
    initialize: bool = True,
):
    """Jointly train student and teacher ensemble on the composite objective.

    The student is updated from the full objective. Teacher outputs are
    detached inside the distillation term, so with ``teacher_objective="ce"``
    teachers learn only from ``alpha * CE(P_t, y)``. With ``freeze_teachers``
    the teachers run in inference mode and are never stepped. Both networks
    are modified in place; the trace is returned.
    """
    if len(student.branches) != len(teachers.branches):
        raise PairingError(
            f"{len(student.branches)} student branches cannot pair with "
            f"{len(teachers.branches)} teachers"
        )
    if student.num_classes != teachers.num_classes:
        raise ConfigurationError("student and teachers disagree on num_classes")
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    if initialize:
        init_params(student, config.seed, config.init_std)
    weights = config.loss_weights
    dtype = _dtype_of(student)
    s_opt = _make_optimizer(student.parameters(), config)
    t_opt = None
    if config.freeze_teachers:
        for p in teachers.parameters():
            p.requires_grad_(False)
    else:
        t_opt = _make_optimizer(teachers.parameters(), config)
    detach = config.teacher_objective == "ce"

    trace = TrainTrace()
    steps = 0
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_at(epoch, config)
        _set_lr(s_opt, lr)
        if t_opt is not None:
            _set_lr(t_opt, lr)
        student.train()
        teachers.train(not config.freeze_teachers)
        meter = _EpochMeter()
        for xb, yb in data_mod.batch_iterator(
            dataset, config.batch_size, config.seed, epoch, config.augment, normalization
        ):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            x = _to_tensor(xb, dtype)
            y = torch.from_numpy(yb)
            s_out = student(x)
            if config.freeze_teachers:
                with torch.no_grad():
                    t_out = teachers(x)
            else:
                t_out = teachers(x)
            _check_finite(s_out.combined_logits, epoch, "student logits")
            _check_finite(t_out.combined_logits, epoch, "teacher logits")
            parts = train_loss(s_out, t_out, y, weights, detach_teacher=detach)
            _check_finite(parts.total, epoch)
            s_opt.zero_grad(set_to_none=True)
            if t_opt is not None:
                t_opt.zero_grad(set_to_none=True)
            parts.total.backward()
            s_opt.step()
            if t_opt is not None:
                t_opt.step()
            steps += 1
            values = {k: getattr(parts, k).detach() for k in LOSS_PARTS}
            values["total"] = parts.total.detach()
            meter.add(values, s_out.combined_logits.detach().numpy(), yb)
        if meter.n == 0:
            break
        means = meter.means()
        total = means.pop("total")
        row = TraceRow(
            epoch, lr, total, means, meter.accuracy,
            _test_accuracy(student, eval_data, normalization),
            time.perf_counter() - start, steps,
        )
        trace.append(row)
        if on_epoch:
            on_epoch(row)
    if config.freeze_teachers:
        for p in teachers.parameters():
            p.requires_grad_(True)
    student.eval()
    teachers.eval()
    return trace
