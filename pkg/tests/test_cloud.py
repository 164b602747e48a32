import numpy as np
import pytest
import torch

from crossda.cloud import accuracy, load_cloud_net, predict_cloud, predict_proba, train_cloud, train_cloud_ensemble
from crossda.config import CloudTrainConfig
from crossda.models import CloudUNet, CheckpointError, Generator, save_checkpoint
from crossda.raster import CloudMask, Domain, MultispectralImage, PatchSet, QualityMask


def _toy_pool(rng, n=64, size=32):
    """Dark clear background with bright square clouds; linearly separable per pixel."""
    x = rng.uniform(0.02, 0.25, size=(n, 4, size, size)).astype(np.float32)
    y = np.zeros((n, size, size), dtype=np.uint8)
    for i in range(n):
        r, c = rng.integers(0, size - 8, size=2)
        h, w = rng.integers(6, 16, size=2)
        y[i, r : r + h, c : c + w] = 1
    x[np.broadcast_to(y[:, None].astype(bool), x.shape)] += 0.6
    return PatchSet(patches=x, provenance=[("toy", i, 0) for i in range(n)], patch_size=size, labels=y)


@pytest.fixture(scope="module")
def toy_model():
    rng = np.random.default_rng(0)
    pool = _toy_pool(rng)
    cfg = CloudTrainConfig(steps=300, batch_size=8, patch_size=32, learning_rate=1e-3, seed=0)
    return train_cloud(pool, cfg), pool


def test_accuracy_extremes(rng):
    t = rng.integers(0, 2, (10, 10)).astype(np.uint8)
    assert accuracy(t, t)["accuracy"] == 100.0
    assert accuracy(1 - t, t)["accuracy"] == 0.0


def test_accuracy_hand_tally():
    truth = np.array([[1, 0, 1], [0, 0, 255], [1, 1, 0]], dtype=np.uint8)
    pred = np.array([[1, 1, 0], [0, 0, 1], [1, 0, 255]], dtype=np.uint8)
    # valid: 7 pixels; correct (0,0) (1,0) (1,1) (2,0) -> 4
    a = accuracy(pred, truth)
    assert a["n_valid"] == 7
    assert a["accuracy"] == pytest.approx(400 / 7)


def test_accuracy_random_brute_force(rng):
    for _ in range(20):
        p = rng.integers(0, 2, (10, 10)).astype(np.uint8)
        t = rng.integers(0, 2, (10, 10)).astype(np.uint8)
        correct = sum(int(p[i, j] == t[i, j]) for i in range(10) for j in range(10))
        assert accuracy(p, t)["accuracy"] == pytest.approx(correct)
        assert accuracy(p, t)["accuracy"] + accuracy(1 - p, t)["accuracy"] == pytest.approx(100.0)


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        accuracy(np.full((3, 3), 255), np.zeros((3, 3)))


def test_accuracy_strata_from_quality(rng):
    p = rng.integers(0, 2, (6, 6)).astype(np.uint8)
    flags = np.zeros((4, 6, 6), bool)
    flags[2, :2] = True
    a = accuracy(p, p, QualityMask(flags))
    assert a["n_bad"] == 12 and a["share_bad"] == pytest.approx(12 / 36)


def test_separable_sanity_run(toy_model):
    res, pool = toy_model
    net = res.net
    acc = []
    for x, y in zip(pool.patches, pool.labels):
        pred = (predict_proba(net, x) >= 0.5).astype(np.uint8)
        acc.append(accuracy(pred, y)["accuracy"])
    assert np.mean(acc) >= 99.0


def test_constant_clear_image_is_all_clear(toy_model):
    net = toy_model[0].net
    img = MultispectralImage(data=np.full((4, 48, 48), 0.12, np.float32), resolution_m=333.0, domain=Domain.LU_333M)
    _, mask = predict_cloud(img, net)
    assert (mask.labels == 0).all()


def test_threshold_extremes_and_invalid(toy_model, rng):
    net = toy_model[0].net
    data = rng.uniform(0, 0.9, (4, 40, 44)).astype(np.float32)
    valid = np.ones((40, 44), bool)
    valid[:, :5] = False
    img = MultispectralImage(data=data, resolution_m=333.0, domain=Domain.LU_333M, valid=valid)
    prob, m0 = predict_cloud(img, net, threshold=0.0)
    assert ((prob >= 0) & (prob <= 1)).all()
    assert (m0.labels[valid] == 1).all() and (m0.labels[~valid] == 255).all()
    _, m1 = predict_cloud(img, net, threshold=1.0 + 1e-6)
    assert (m1.labels[valid] == 0).all()


def test_invalid_margin_invariance(toy_model, rng):
    net = toy_model[0].net
    core = rng.uniform(0, 0.9, (4, 36, 36)).astype(np.float32)
    a = MultispectralImage(data=core, resolution_m=333.0, domain=Domain.LU_333M)
    padded = np.zeros((4, 50, 50), np.float32)
    padded[:, 7:43, 5:41] = core
    valid = np.zeros((50, 50), bool)
    valid[7:43, 5:41] = True
    b = MultispectralImage(data=padded, resolution_m=333.0, domain=Domain.LU_333M, valid=valid)
    pa, _ = predict_cloud(a, net)
    pb, mb = predict_cloud(b, net)
    np.testing.assert_allclose(pb[7:43, 5:41], pa, atol=1e-6)
    assert (mb.labels[~valid] == 255).all()


def test_determinism_ten_steps(rng):
    pool = _toy_pool(rng, n=16)
    cfg = CloudTrainConfig(steps=10, batch_size=4, seed=5)
    assert train_cloud(pool, cfg).records == train_cloud(pool, cfg).records


def test_ensemble_schema(rng, tmp_path):
    pool = _toy_pool(rng, n=16)
    cfg = CloudTrainConfig(steps=3, batch_size=4)
    results, stats = train_cloud_ensemble(pool, cfg, seeds=[0, 1, 2], out_dir=tmp_path)
    assert len(results) == 3
    assert {"min", "max", "mean", "std"} <= set(stats)
    assert all((tmp_path / f"seed_{s}").is_dir() for s in range(3))
    assert (tmp_path / "ensemble.json").exists()


def test_misaligned_labels_rejected(rng):
    pool = _toy_pool(rng, n=4)
    bad = PatchSet(patches=pool.patches, provenance=pool.provenance, patch_size=32, labels=pool.labels[:3])
    with pytest.raises(ValueError):
        train_cloud(bad, CloudTrainConfig(steps=1, batch_size=2))


def test_wrong_checkpoint_kind(tmp_path):
    save_checkpoint(tmp_path / "g", Generator(), step=0, seed=0)
    with pytest.raises(CheckpointError):
        load_cloud_net(tmp_path / "g")


def test_checkpoint_reload_predicts_identically(tmp_path, rng):
    pool = _toy_pool(rng, n=8)
    res = train_cloud(pool, CloudTrainConfig(steps=2, batch_size=2), out_dir=tmp_path)
    x = rng.uniform(0, 1, (4, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(predict_proba(tmp_path, x), predict_proba(res.net, x))
