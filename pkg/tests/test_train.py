import numpy as np
import pytest

from geomnet import model as M
from geomnet.data import SkeletonSequence
from geomnet.optim import AdamConfig
from geomnet.topology import toy_topology
from geomnet.train import TrainingDiverged, confusion_matrix, evaluate, param_norms, predict, train

TOY = toy_topology()
CFG = M.GeomNetConfig(d=2, n_clusters=2, k=1, k_prime=1, n_classes=2)


def separable(rng, count=8):
    seqs = []
    for i in range(count):
        coords = rng.normal(scale=0.1, size=(4, 8, 3))
        coords[:, [1, 2, 5, 6]] += (1.0 if i % 2 else -1.0) * np.arange(4)[:, None, None]
        seqs.append(SkeletonSequence(coords, i % 2))
    return seqs


def test_confusion_matrix_rows_are_true_classes():
    conf = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 1], 3)
    np.testing.assert_array_equal(conf, [[1, 1, 0], [0, 1, 0], [0, 1, 0]])
    np.testing.assert_array_equal(conf.sum(axis=1), [2, 1, 1])


def test_evaluate_empty_raises():
    with pytest.raises(ValueError):
        evaluate([], [], TOY, M.init_params(CFG), CFG)


def test_training_is_deterministic_and_learns(rng):
    seqs = separable(rng)
    labels = [s.label for s in seqs]
    run = lambda: train(seqs, labels, TOY, CFG, AdamConfig(alpha=0.05), 6, 4, seed=3)  # noqa: E731
    a, b = run(), run()
    assert [r.loss for r in a.history] == [r.loss for r in b.history]
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert a.history[-1].loss < a.history[0].loss
    acc, conf = evaluate(seqs, labels, TOY, a.params, CFG)
    assert acc == a.history[-1].train_accuracy
    assert conf.sum() == len(seqs)
    np.testing.assert_array_equal(predict(seqs, TOY, a.params, CFG, batch_size=3),
                                  predict(seqs, TOY, a.params, CFG))


def test_zero_epochs_returns_initial_params(rng):
    seqs = separable(rng, 4)
    result = train(seqs, [s.label for s in seqs], TOY, CFG, AdamConfig(), 0, 2, seed=1)
    assert result.history == []
    init = M.init_params(CFG, int(np.random.default_rng(1).integers(2 ** 31)))
    for name in init:
        np.testing.assert_array_equal(result.params[name], init[name])


def test_ablations_keep_frozen_parameters(rng):
    seqs = separable(rng, 4)
    labels = [s.label for s in seqs]
    cfg = M.with_config(CFG, use_pt=False, use_ltml=False)
    result = train(seqs, labels, TOY, cfg, AdamConfig(alpha=0.05), 2, 2, seed=1)
    for s in M.STREAMS:
        np.testing.assert_array_equal(result.params[f"pt_{s}"], np.eye(cfg.spd_dim))
        np.testing.assert_array_equal(result.params[f"lw_{s}"], np.eye(cfg.tri_dim))


def test_callbacks_and_test_split(rng):
    seqs = separable(rng, 6)
    labels = [s.label for s in seqs]
    seen = []
    result = train(seqs[:4], labels[:4], TOY, CFG, AdamConfig(), 2, 2, seed=0,
                   test=(seqs[4:], labels[4:]), on_epoch=seen.append)
    assert [r.epoch for r in seen] == [1, 2]
    assert seen == result.history
    assert all(r.test_accuracy is not None for r in seen)


def test_nan_loss_raises_with_norms(rng, monkeypatch):
    seqs = separable(rng, 2)
    monkeypatch.setattr(M, "loss_and_backward", lambda *a, **k: (float("nan"), {}, None))
    with pytest.raises(TrainingDiverged) as info:
        train(seqs, [0, 1], TOY, CFG, AdamConfig(), 1, 2, seed=0)
    assert set(info.value.norms) == set(M.init_params(CFG))
    assert param_norms({"a": np.ones(4)}) == {"a": 2.0}


def test_bad_inputs(rng):
    seqs = separable(rng, 2)
    with pytest.raises(ValueError):
        train([], [], TOY, CFG, AdamConfig(), 1, 2, seed=0)
    with pytest.raises(ValueError):
        train(seqs, [0, 2], TOY, CFG, AdamConfig(), 1, 2, seed=0)
