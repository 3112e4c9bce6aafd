"""CIFAR-style ResNets, multi-branch ensembles, and parameter/FLOP accounting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .exceptions import InvalidSpecError, ShapeError

STANDARD_DEPTHS = (8, 14, 20, 26, 32, 44, 56, 110)
# T1..T7, ordered by increasing depth
TEACHER_DEPTHS = (14, 20, 26, 32, 44, 56, 110)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of one 6n+2 CIFAR ResNet."""

    depth: int = 8
    num_classes: int = 10
    stage_widths: tuple = (16, 32, 64)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if self.depth < 8 or (self.depth - 2) % 6 != 0:
            raise InvalidSpecError(
                f"depth {self.depth} is not of the form 6n+2 with n >= 1"
            )
        if len(self.stage_widths) != 3 or min(self.stage_widths) < 1:
            raise InvalidSpecError(f"need three positive stage widths, got {self.stage_widths}")
        if self.num_classes < 2:
            raise InvalidSpecError("num_classes must be >= 2")

    @property
    def blocks_per_stage(self):
        return (self.depth - 2) // 6

    @property
    def feature_dim(self):
        return self.stage_widths[-1]

    @property
    def name(self):
        return f"ResNet{self.depth}"

    def to_dict(self):
        return {
            "depth": self.depth,
            "num_classes": self.num_classes,
            "stage_widths": list(self.stage_widths),
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["depth"], d["num_classes"], tuple(d["stage_widths"]), d.get("in_channels", 3))


@dataclass(frozen=True)
class EnsembleSpec:
    """A student of ``n_branches`` identical branches plus an ordered teacher list."""

    student: ModelSpec
    n_branches: int
    teachers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "teachers", tuple(self.teachers))
        if self.n_branches < 1:
            raise InvalidSpecError("n_branches must be >= 1")
        classes = {t.num_classes for t in self.teachers} | {self.student.num_classes}
        if len(classes) > 1:
            raise InvalidSpecError(f"ensemble members disagree on num_classes: {sorted(classes)}")

    @property
    def student_specs(self):
        return [self.student] * self.n_branches

    @property
    def paired(self):
        return len(self.teachers) == self.n_branches


@dataclass
class BranchOutputs:
    """Per-branch features and logits, plus their summed logits."""

    features: List[torch.Tensor]
    branch_logits: List[torch.Tensor]
    combined_logits: torch.Tensor = field(repr=False)

    @property
    def n_branches(self):
        return len(self.branch_logits)

    def detach(self):
        return BranchOutputs(
            [f.detach() for f in self.features],
            [q.detach() for q in self.branch_logits],
            self.combined_logits.detach(),
        )


def sum_logits(branch_logits):
    # left-to-right so the result is reproducible outside the graph
    total = branch_logits[0]
    for q in branch_logits[1:]:
        total = total + q
    return total


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CifarResNet(nn.Module):
    """One branch: stem conv, three residual stages, global pooling, linear head.

    ``forward`` returns ``(features, logits)``; features are the pooled
    ``feature_dim`` vector fed to the head.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        w1, w2, w3 = spec.stage_widths
        n = spec.blocks_per_stage
        self.conv1 = nn.Conv2d(spec.in_channels, w1, 3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(w1)
        self.layer1 = self._stage(w1, w1, n, 1)
        self.layer2 = self._stage(w1, w2, n, 2)
        self.layer3 = self._stage(w2, w3, n, 2)
        self.fc = nn.Linear(w3, spec.num_classes)

    @staticmethod
    def _stage(in_planes, planes, blocks, stride):
        layers = [BasicBlock(in_planes, planes, stride)]
        layers += [BasicBlock(planes, planes) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"conv1 expects a 4-D (N, C, H, W) batch, got shape {tuple(x.shape)}", "conv1")
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"conv1 expects {self.spec.in_channels} input channels, got {x.shape[1]}", "conv1"
            )
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layer3(self.layer2(self.layer1(out)))
        features = torch.flatten(F.adaptive_avg_pool2d(out, 1), 1)
        return features, self.fc(features)


class BranchNet(nn.Module):
    """Parallel branches whose logits are summed.

    Serves both as the compact student (identical branch specs) and as the
    teacher ensemble (one branch per teacher architecture).
    """

    def __init__(self, branches: Sequence[nn.Module]):
        super().__init__()
        if not branches:
            raise InvalidSpecError("a BranchNet needs at least one branch")
        self.branches = nn.ModuleList(branches)

    @classmethod
    def from_specs(cls, specs: Sequence[ModelSpec]):
        return cls([CifarResNet(s) for s in specs])

    @property
    def specs(self):
        return [b.spec for b in self.branches]

    @property
    def num_classes(self):
        return self.branches[0].spec.num_classes

    def forward(self, x) -> BranchOutputs:
        feats, logits = [], []
        for branch in self.branches:
            y, q = branch(x)
            feats.append(y)
            logits.append(q)
        return BranchOutputs(feats, logits, sum_logits(logits))


def build_resnet(spec: ModelSpec, seed=None, init_std=0.01) -> CifarResNet:
    model = CifarResNet(spec)
    if seed is not None:
        from .training import init_params

        init_params(model, seed, init_std)
    return model


def compnet(spec: ModelSpec, n_branches: int) -> BranchNet:
    """Compact student of ``n_branches`` identical ResNet branches."""
    return BranchNet.from_specs([spec] * n_branches)


def teachnet(specs: Sequence[ModelSpec]) -> BranchNet:
    return BranchNet.from_specs(specs)


def count_params(model: nn.Module) -> int:
    """Learnable scalars over every conv, BN and linear layer."""
    return sum(p.numel() for p in model.parameters())


def _conv_macs(cin, cout, k, h, w, stride):
    ho, wo = -(-h // stride), -(-w // stride)
    return cin * cout * k * k * ho * wo, ho, wo


def _branch_flops(spec: ModelSpec, h, w):
    c = spec.in_channels
    w1 = spec.stage_widths[0]
    total, h, w = _conv_macs(c, w1, 3, h, w, 1)
    c = w1
    for stage, width in enumerate(spec.stage_widths):
        for b in range(spec.blocks_per_stage):
            stride = 2 if stage > 0 and b == 0 else 1
            m1, ho, wo = _conv_macs(c, width, 3, h, w, stride)
            m2, _, _ = _conv_macs(width, width, 3, ho, wo, 1)
            total += m1 + m2
            if stride != 1 or c != width:
                total += _conv_macs(c, width, 1, h, w, stride)[0]
            c, h, w = width, ho, wo
    return total + spec.feature_dim * spec.num_classes


def count_flops(specs, input_shape=(32, 32, 3)) -> int:
    """Multiply-accumulates of convolutions (shortcuts included) and linear heads.

    ``specs`` is a single :class:`ModelSpec` or a sequence of branch specs;
    ``input_shape`` is ``(H, W, C)``. BN, ReLU and pooling are not counted.
    """
    if isinstance(specs, ModelSpec):
        specs = [specs]
    h, w, c = input_shape
    for s in specs:
        if s.in_channels != c:
            raise ShapeError(f"{s.name} expects {s.in_channels} channels, input has {c}", "conv1")
    return sum(_branch_flops(s, h, w) for s in specs)
