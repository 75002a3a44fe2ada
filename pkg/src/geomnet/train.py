"""Mini-batch training and evaluation of GeomNet."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .autodiff import NumericError
from .optim import AdamConfig, ManifoldParam, step_all

logger = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    """The loss became non-finite."""

    def __init__(self, message, norms):
        super().__init__(message)
        self.norms = norms


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    test_accuracy: float | None = None
    unconverged_means: int = 0


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)


def param_norms(params: dict) -> dict:
    return {k: float(np.linalg.norm(v)) for k, v in sorted(params.items())}


def predict(seqs, topo, params, cfg, batch_size=64):
    """Predicted class of each sequence."""
    out = []
    for i in range(0, len(seqs), batch_size):
        out.append(np.argmax(M.forward(seqs[i:i + batch_size], topo, params, cfg), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def confusion_matrix(labels, predicted, n_classes):
    """Counts with true classes along rows."""
    mat = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(mat, (np.asarray(labels, dtype=int), np.asarray(predicted, dtype=int)), 1)
    return mat


def evaluate(seqs, labels, topo, params, cfg):
    """Accuracy and confusion matrix; raises on an empty dataset."""
    if len(seqs) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(seqs, topo, params, cfg)
    conf = confusion_matrix(labels, pred, cfg.n_classes)
    return float(np.trace(conf) / conf.sum()), conf


def train(train_seqs, train_labels, topo, cfg: M.GeomNetConfig, adam: AdamConfig,
          epochs, batch_size, seed, params=None, test=None, on_epoch=None,
          lr_scale=1.0) -> TrainResult:
    """Train with Riemannian Adam; every source of randomness derives from ``seed``.

    The step size of every parameter is ``adam.alpha * lr_scale``.
    ``test`` is an optional ``(sequences, labels)`` pair evaluated after each
    epoch.  ``on_epoch`` is called with each :class:`EpochRecord`.
    """
    labels = np.asarray(train_labels, dtype=int)
    if len(train_seqs) == 0:
        raise ValueError("empty training set")
    if np.any(labels < 0) or np.any(labels >= cfg.n_classes):
        raise ValueError(f"labels must lie in [0, {cfg.n_classes})")
    rng = np.random.default_rng(seed)
    values = M.init_params(cfg, int(rng.integers(2 ** 31))) if params is None else dict(params)
    M.check_params(values, cfg)
    manifolds = M.param_manifolds(cfg)
    state = {k: ManifoldParam(values[k], manifolds[k], lr_scale=lr_scale) for k in manifolds}
    history = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_seqs))
        losses, weights, unconverged = [], [], 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = [train_seqs[i] for i in idx]
            current = {**values, **{k: p.value for k, p in state.items()}}
            loss, grads, fstate = M.loss_and_backward(batch, labels[idx], topo, current, cfg)
            if not math.isfinite(loss):
                norms = param_norms(current)
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", norms)
            state = step_all(state, grads, adam)
            for k, p in state.items():
                p.manifold.check(p.value)
            losses.append(loss)
            weights.append(len(idx))
            unconverged += fstate.unconverged
        values = {**values, **{k: p.value for k, p in state.items()}}
        train_acc, _ = evaluate(train_seqs, labels, topo, values, cfg)
        test_acc = None
        if test is not None and len(test[0]):
            test_acc, _ = evaluate(test[0], test[1], topo, values, cfg)
        rec = EpochRecord(epoch, float(np.average(losses, weights=weights)), train_acc,
                          test_acc, unconverged)
        history.append(rec)
        logger.info("epoch %d loss %.4f train %.3f test %s", epoch, rec.loss, train_acc,
                    "-" if test_acc is None else f"{test_acc:.3f}")
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(values, history)
