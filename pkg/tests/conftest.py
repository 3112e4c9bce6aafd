import math

import numpy as np
import pytest
import torch

from ekd.data import LabeledImageSet, synthetic_blobs


# --- independent oracles -------------------------------------------------
# Plain-Python/numpy evaluations of the textbook formulas, kept free of any
# code path in the package.

def softmax_oracle(z):
    e = [math.exp(v) for v in z]
    s = sum(e)
    return [v / s for v in e]


def ce_oracle(z, y):
    p = softmax_oracle(z)
    return -sum((1.0 if k == y else 0.0) * math.log(p[k]) for k in range(len(z)))


def kl_oracle(qs, qt, T, soften_student=False):
    ps = softmax_oracle([v / T for v in qs] if soften_student else qs)
    pt = softmax_oracle([v / T for v in qt])
    return sum(a * (math.log(a) - math.log(b)) for a, b in zip(ps, pt))


def mse_oracle(a, b):
    return sum((u - v) ** 2 for u, v in zip(a, b)) / len(a)


def batch_mean(fn, *rows):
    vals = [fn(*r) for r in zip(*rows)]
    return sum(vals) / len(vals)


def kd_oracle(s_branches, t_branches, T, soften_student=False):
    """Distillation term from nested lists: [branch][sample][class]."""
    def combined(branches):
        n, k = len(branches[0]), len(branches[0][0])
        return [[sum(b[i][c] for b in branches) for c in range(k)] for i in range(n)]

    ps, pt = combined(s_branches), combined(t_branches)
    kl = lambda a, b: kl_oracle(a, b, T, soften_student)  # noqa: E731
    total = batch_mean(kl, ps, pt) + batch_mean(mse_oracle, ps, pt)
    for qs, qt in zip(s_branches, t_branches):
        total += batch_mean(kl, qs, qt) + batch_mean(mse_oracle, qs, qt)
    return total


def nearest_mean_accuracy(train: LabeledImageSet, test: LabeledImageSet):
    """Classify test images by the closest class mean of the training images."""
    x = train.images.reshape(len(train), -1).astype(np.float64)
    means = np.stack([x[train.labels == c].mean(0) for c in range(train.num_classes)])
    xt = test.images.reshape(len(test), -1).astype(np.float64)
    d = ((xt[:, None, :] - means[None]) ** 2).sum(-1)
    return float((d.argmin(1) == test.labels).mean())


# --- fixtures --------------------------------------------------------------

@pytest.fixture
def blobs():
    return synthetic_blobs(4, 24, (8, 8, 3), separation=6.0, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
