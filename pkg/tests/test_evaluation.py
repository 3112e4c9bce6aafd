import numpy as np
import pytest
import torch
from sklearn.metrics import silhouette_score

from ekd.data import LabeledImageSet, synthetic_blobs
from ekd.evaluation import (
    FeatureDump,
    extract_features,
    measure_inference,
    project_2d,
    top1_accuracy,
)
from ekd.exceptions import InvalidInputError
from ekd.models import BranchNet, ModelSpec, compnet, teachnet
from ekd.training import init_params, predict_logits

TINY = (4, 8, 8)


@pytest.fixture
def small():
    return synthetic_blobs(4, 10, (8, 8, 3), 6.0, seed=0)


def net_for(n_br=1, k=4, seed=0, std=0.3):
    net = compnet(ModelSpec(8, k, TINY), n_br)
    return init_params(net, seed, std).eval()


def test_single_branch_ensemble_equals_branch(small):
    rep = top1_accuracy(net_for(1), small)
    assert rep.top1_ensemble == rep.top1_per_branch[0]
    assert rep.sample_count == 40


def test_labels_set_to_predictions_give_one(small):
    net = net_for(3)
    pred = predict_logits(net, small.images).argmax(1)
    relabeled = LabeledImageSet(small.images, pred, 4)
    assert top1_accuracy(net, relabeled).top1_ensemble == 1.0


def test_untrained_is_chance():
    # random inputs and labels: accuracy is binomial around 1/10
    rng = np.random.default_rng(0)
    ds = LabeledImageSet(rng.normal(size=(10_000, 8, 8, 3)).astype(np.float32),
                         rng.integers(0, 10, 10_000), 10)
    rep = top1_accuracy(net_for(1, k=10, std=0.01), ds)
    assert abs(rep.top1_ensemble - 0.10) <= 0.02


def test_argmax_invariant_to_logit_shift(small):
    net = net_for(2)
    base = top1_accuracy(net, small).top1_ensemble
    with torch.no_grad():
        for b in net.branches:
            b.fc.bias.add_(5.0)
    assert top1_accuracy(net, small).top1_ensemble == base


def test_identical_branches_match_single(small):
    single = net_for(1)
    many = BranchNet([single.branches[0]] * 4).eval()
    assert top1_accuracy(many, small).top1_ensemble == top1_accuracy(single, small).top1_ensemble


def test_class_mismatch(small):
    with pytest.raises(InvalidInputError):
        top1_accuracy(net_for(1, k=10), small)


def test_feature_dump_layout(small):
    dump = extract_features(net_for(7), small)
    assert len(dump) == 40 * 7
    assert dump.feature_dim == 8
    assert dump.branch[:7].tolist() == list(range(7))
    assert (dump.sample[:7] == 0).all()
    assert np.array_equal(dump.labels[::7], small.labels)


def test_feature_dim_default_width():
    ds = synthetic_blobs(10, 10, (8, 8, 3), 3.0, seed=1)
    dump = extract_features(init_params(compnet(ModelSpec(8), 7), 0), ds)
    assert dump.features.shape == (700, 64)


def test_zero_weights_zero_features(small):
    net = net_for(2, std=0.0)
    dump = extract_features(net, small)
    assert not dump.features.any()


def test_feature_dump_tsv_round_trip(tmp_path, small):
    dump = extract_features(net_for(2), small)
    back = FeatureDump.from_tsv(dump.to_tsv(tmp_path / "f.tsv"))
    assert np.array_equal(back.features, dump.features)
    assert np.array_equal(back.labels, dump.labels)
    assert np.array_equal(back.branch, dump.branch)
    comb = dump.combined()
    assert len(comb) == 40
    assert np.allclose(comb.features[0], dump.features[:2].sum(0), rtol=0, atol=1e-12)


def test_projection_preserves_planar_distances(rng):
    # points in a random 2-D plane of R^10: PCA is an isometry on them
    plane = np.linalg.qr(rng.normal(size=(10, 2)))[0]
    pts2 = rng.normal(size=(50, 2)) * [5.0, 1.0]
    x = pts2 @ plane.T + 3.0
    proj = project_2d(x)
    d_in = np.linalg.norm(x[:, None] - x[None], axis=-1)
    d_out = np.linalg.norm(proj.coords[:, None] - proj.coords[None], axis=-1)
    assert np.abs(d_in - d_out).max() <= 1e-8
    assert proj.rank == 2 and not proj.degenerate


def test_projection_keeps_blobs_apart():
    ds = synthetic_blobs(4, 50, (4, 4, 3), 8.0, seed=2)
    x = ds.images.reshape(len(ds), -1)
    proj = project_2d(x, ds.labels)
    assert silhouette_score(proj.coords, ds.labels) > 0.5


def test_projection_degenerate():
    x = np.outer(np.arange(6.0), [1.0, 2.0, 3.0])
    proj = project_2d(x)
    assert proj.degenerate and proj.rank == 1
    assert not proj.coords[:, 1].any()
    const = project_2d(np.ones((5, 4)))
    assert const.rank == 0 and not const.coords.any()
    with pytest.raises(InvalidInputError):
        project_2d(np.ones((2, 4)))


def test_projection_sign_convention(rng):
    x = rng.normal(size=(30, 5))
    a = project_2d(x).coords
    b = project_2d(-x).coords
    # components are sign-fixed, so negating the data negates the coordinates
    assert np.allclose(a, -b, rtol=0, atol=1e-10)


def test_timing_repetitions():
    net = net_for(1)
    calls = []
    net.register_forward_hook(lambda *a: calls.append(1))
    t = measure_inference(net, torch.zeros(2, 3, 8, 8), repetitions=3, warmup=2)
    assert len(t.times_ms) == 3 and len(calls) == 5
    assert t.median_ms == sorted(t.times_ms)[1]
    with pytest.raises(ValueError):
        measure_inference(net, torch.zeros(1, 3, 8, 8), repetitions=2)


@pytest.mark.slow
def test_wide_shallow_not_slower_than_deep():
    torch.manual_seed(0)
    x = torch.randn(32, 3, 32, 32)
    wide = compnet(ModelSpec(8), 7)
    deep = teachnet([ModelSpec(110)])
    first = measure_inference(wide, x, repetitions=5).median_ms
    t_deep = measure_inference(deep, x, repetitions=5).median_ms
    second = measure_inference(wide, x, repetitions=5).median_ms
    assert first <= 2 * t_deep
    assert abs(first - second) <= 0.5 * max(first, second)
