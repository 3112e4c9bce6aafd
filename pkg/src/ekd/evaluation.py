"""Accuracy reports, feature extraction, 2-D projection and inference timing."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np
import torch

from . import data as data_mod
from .exceptions import InvalidInputError
from .models import BranchNet


@dataclass
class EvalReport:
    top1_ensemble: float
    top1_per_branch: List[float]
    dataset_id: str = ""
    model_id: str = ""
    sample_count: int = 0

    def to_dict(self):
        return {
            "top1_ensemble": self.top1_ensemble,
            "top1_per_branch": list(self.top1_per_branch),
            "dataset_id": self.dataset_id,
            "model_id": self.model_id,
            "sample_count": self.sample_count,
        }


@dataclass
class FeatureDump:
    """One row per (sample, branch): label, branch index, pooled feature vector."""

    labels: np.ndarray
    branch: np.ndarray
    sample: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.labels)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def for_branch(self, i):
        keep = self.branch == i
        return FeatureDump(self.labels[keep], self.branch[keep], self.sample[keep], self.features[keep])

    def combined(self):
        """Per-sample sum of the branch features (branch index reported as -1)."""
        n = int(self.sample.max()) + 1 if len(self) else 0
        feats = np.zeros((n, self.feature_dim))
        np.add.at(feats, self.sample, self.features)
        labels = np.zeros(n, dtype=np.int64)
        labels[self.sample] = self.labels
        return FeatureDump(labels, np.full(n, -1), np.arange(n), feats)

    def to_tsv(self, path):
        """Columns: ``sample``, ``label``, ``branch``, then ``f0 .. f{M-1}``."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["sample", "label", "branch"] + [f"f{j}" for j in range(self.feature_dim)])
            for s, y, b, f in zip(self.sample, self.labels, self.branch, self.features):
                w.writerow([int(s), int(y), int(b)] + [repr(float(v)) for v in f])
        return path

    @classmethod
    def from_tsv(cls, path):
        raw = np.loadtxt(path, delimiter="\t", skiprows=1, ndmin=2)
        return cls(
            raw[:, 1].astype(np.int64), raw[:, 2].astype(np.int64),
            raw[:, 0].astype(np.int64), raw[:, 3:],
        )


@dataclass
class Projection2D:
    coords: np.ndarray
    labels: np.ndarray
    rank: int
    degenerate: bool
    explained_variance: np.ndarray = field(repr=False, default=None)


def _check_classes(model, dataset):
    if model.num_classes != dataset.num_classes:
        raise InvalidInputError(
            f"model predicts {model.num_classes} classes, dataset has {dataset.num_classes}"
        )


@torch.no_grad()
def _run(model: BranchNet, images, normalization, batch_size):
    model.eval()
    dtype = next(model.parameters()).dtype
    for start in range(0, len(images), batch_size):
        xb = images[start:start + batch_size]
        xb = data_mod.normalize(xb, *normalization) if normalization else np.asarray(xb, np.float32)
        x = torch.from_numpy(np.ascontiguousarray(xb.transpose(0, 3, 1, 2))).to(dtype)
        yield model(x)


def top1_accuracy(model: BranchNet, dataset, normalization=None, batch_size=512,
                  dataset_id="", model_id="") -> EvalReport:
    """Ensemble accuracy from argmax of summed logits, plus accuracy of each branch."""
    _check_classes(model, dataset)
    n_br = len(model.branches)
    ens_correct = 0
    branch_correct = np.zeros(n_br, dtype=np.int64)
    offset = 0
    for out in _run(model, dataset.images, normalization, batch_size):
        y = dataset.labels[offset:offset + len(out.combined_logits)]
        offset += len(y)
        ens_correct += int((out.combined_logits.argmax(1).numpy() == y).sum())
        for i, q in enumerate(out.branch_logits):
            branch_correct[i] += int((q.argmax(1).numpy() == y).sum())
    n = len(dataset)
    return EvalReport(
        ens_correct / n if n else 0.0,
        [float(c / n) if n else 0.0 for c in branch_correct],
        dataset_id or dataset.split_name,
        model_id,
        n,
    )


def extract_features(model: BranchNet, dataset, normalization=None, batch_size=512) -> FeatureDump:
    _check_classes(model, dataset)
    n_br = len(model.branches)
    chunks = []
    for out in _run(model, dataset.images, normalization, batch_size):
        # (batch, branches, M) -> sample-major rows
        chunks.append(torch.stack(out.features, 1).double().numpy())
    n = len(dataset)
    feats = np.concatenate(chunks).reshape(n * n_br, -1) if chunks else np.zeros((0, 0))
    return FeatureDump(
        np.repeat(dataset.labels, n_br),
        np.tile(np.arange(n_br), n),
        np.repeat(np.arange(n), n_br),
        feats,
    )


def project_2d(dump, labels=None, tol=1e-10) -> Projection2D:
    """Project rows onto their top two principal components.

    Accepts a :class:`FeatureDump` or a plain ``(n, d)`` array. Signs are fixed
    so that each component's largest-magnitude loading is positive. When the
    centered data has rank below two the missing coordinates are zero and
    ``degenerate`` is set.
    """
    if isinstance(dump, FeatureDump):
        x, labels = dump.features, dump.labels
    else:
        x = np.asarray(dump, dtype=np.float64)
        labels = np.zeros(len(x), dtype=np.int64) if labels is None else np.asarray(labels)
    if len(x) < 3:
        raise InvalidInputError("need at least 3 rows to project")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    scale = s[0] if s.size else 0.0
    rank = int(np.sum(s > tol * scale)) if scale > 0 else 0
    k = min(2, rank)
    comps = vt[:k]
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    coords = np.zeros((len(x), 2))
    coords[:, :k] = centered @ comps.T
    var = s[:2] ** 2 / max(len(x) - 1, 1)
    return Projection2D(coords, labels, rank, rank < 2, var)


@dataclass
class InferenceTiming:
    median_ms: float
    times_ms: List[float]
    warmup: int


@torch.no_grad()
def measure_inference(model, batch, repetitions=10, warmup=2) -> InferenceTiming:
    """Median wall time (ms) of a forward pass over ``batch`` in inference mode."""
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    model.eval()
    x = batch if isinstance(batch, torch.Tensor) else torch.as_tensor(batch)
    for _ in range(warmup):
        model(x)
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        model(x)
        times.append((time.perf_counter() - start) * 1e3)
    return InferenceTiming(statistics.median(times), times, warmup)

