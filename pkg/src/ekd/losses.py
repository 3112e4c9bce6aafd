"""Softmax, cross-entropy, KL, MSE and the ensemble distillation objective.

Every reduction over a batch is an arithmetic mean. Functions accept logits
of shape ``(K,)`` or ``(N, K)``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .exceptions import InvalidInputError, PairingError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.6
    temperature: float = 10.0
    soften_student: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class LossBreakdown:
    """Every constituent of the training loss, with ``total`` built from them once."""

    ce_teacher: torch.Tensor
    ce_student: torch.Tensor
    kd_combined_kl: torch.Tensor
    kd_combined_mse: torch.Tensor
    kd_branch_kl_sum: torch.Tensor
    kd_branch_mse_sum: torch.Tensor
    total: torch.Tensor

    @property
    def kd(self):
        return self.kd_combined_kl + self.kd_combined_mse + self.kd_branch_kl_sum + self.kd_branch_mse_sum

    def as_dict(self):
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _as_2d(z):
    z = torch.as_tensor(z)
    if not torch.is_floating_point(z):
        z = z.to(torch.get_default_dtype())
    return z.unsqueeze(0) if z.ndim == 1 else z


def _check_finite(z, what="logits"):
    if not torch.isfinite(z).all():
        raise InvalidInputError(f"{what} contain NaN or infinite entries")


def log_softmax(z):
    z = torch.as_tensor(z)
    _check_finite(z)
    shifted = z - z.max(dim=-1, keepdim=True).values.detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True))


def softmax(z):
    """``exp(z) / sum(exp(z))`` along the last axis, computed after max-subtraction."""
    return torch.exp(log_softmax(z))


def cross_entropy(logits, labels):
    """Mean negative log-probability of the true class."""
    logits = _as_2d(logits)
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    k = logits.shape[-1]
    if labels.numel() != logits.shape[0]:
        raise InvalidInputError(f"{labels.numel()} labels for {logits.shape[0]} rows of logits")
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInputError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits)
    return -logp.gather(1, labels[:, None]).mean()


def _same_shape(a, b):
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def kl_loss(student_logits, teacher_logits, temperature=1.0, soften_student=False):
    """``KL(softmax(student) || softmax(teacher / T))``, batch-averaged.

    Only the teacher side is divided by ``T`` unless ``soften_student`` is set.
    """
    if temperature <= 0:
        raise InvalidInputError("temperature must be > 0")
    qs, qt = _as_2d(student_logits), _as_2d(teacher_logits)
    _same_shape(qs, qt)
    if soften_student:
        qs = qs / temperature
    logp_s = log_softmax(qs)
    logp_t = log_softmax(qt / temperature)
    return (torch.exp(logp_s) * (logp_s - logp_t)).sum(dim=-1).mean()


def mse_loss(a, b):
    a, b = _as_2d(a), _as_2d(b)
    _same_shape(a, b)
    return ((a - b) ** 2).mean()


def kd_loss(student, teacher, weights=LossWeights(), detach_teacher=True):
    """Distillation term: combined KL + MSE plus index-paired branch KL + MSE.

    Returns ``(combined_kl, combined_mse, branch_kl_sum, branch_mse_sum)``.
    """
    if student.n_branches != teacher.n_branches:
        raise PairingError(
            f"student has {student.n_branches} branches but teacher ensemble has "
            f"{teacher.n_branches} members"
        )
    if detach_teacher:
        teacher = teacher.detach()
    T, soft = weights.temperature, weights.soften_student
    combined_kl = kl_loss(student.combined_logits, teacher.combined_logits, T, soft)
    combined_mse = mse_loss(student.combined_logits, teacher.combined_logits)
    branch_kl = branch_mse = None
    for qs, qt in zip(student.branch_logits, teacher.branch_logits):
        kl = kl_loss(qs, qt, T, soft)
        mse = mse_loss(qs, qt)
        branch_kl = kl if branch_kl is None else branch_kl + kl
        branch_mse = mse if branch_mse is None else branch_mse + mse
    return combined_kl, combined_mse, branch_kl, branch_mse


def train_loss(student, teacher, labels, weights=LossWeights(), detach_teacher=True) -> LossBreakdown:
    """``alpha * CE(teacher) + beta * CE(student) + gamma * KD``."""
    ce_t = cross_entropy(teacher.combined_logits, labels)
    ce_s = cross_entropy(student.combined_logits, labels)
    kl_c, mse_c, kl_b, mse_b = kd_loss(student, teacher, weights, detach_teacher)
    total = (
        weights.alpha * ce_t
        + weights.beta * ce_s
        + weights.gamma * (kl_c + mse_c + kl_b + mse_b)
    )
    return LossBreakdown(ce_t, ce_s, kl_c, mse_c, kl_b, mse_b, total)


def entropy(p):
    p = torch.as_tensor(p)
    return -torch.special.xlogy(p, p).sum(dim=-1)
