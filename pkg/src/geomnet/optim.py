"""Adam on products of Euclidean, SPD and Cholesky-space parameters.

Manifold parameters keep their first moment as a tangent vector that is
parallel transported to each new iterate, and their second moment as one
scalar built from the squared Riemannian norm of the gradient.  Euclidean
parameters use classical per-entry Adam.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import cholesky_space as chol
from . import spd
from .spd import AIRM, MetricConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 1e-3
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.alpha <= 0 or self.eps <= 0:
            raise ValueError("alpha and eps must be positive")


class Euclidean:
    name = "euclidean"

    def egrad_to_rgrad(self, x, g):
        return g

    def check(self, x):
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite Euclidean parameter")


class SPDManifold:
    name = "spd"

    def __init__(self, metric: MetricConfig = AIRM):
        self.metric = metric

    def inner(self, x, a, b):
        return float(spd.inner(x, a, b, self.metric))

    def exp(self, x, u):
        return spd.exp_map(x, u)

    def transport(self, x, y, u):
        return spd.parallel_transport(x, y, u)

    def egrad_to_rgrad(self, x, g):
        return spd.egrad_to_rgrad(x, g, self.metric)

    def check(self, x):
        spd.check_spd(x, "SPD parameter")


class CholeskyManifold:
    name = "cholesky"

    def inner(self, x, a, b):
        return float(chol.tri_inner(x, a, b))

    def exp(self, x, u):
        return chol.tri_exp(x, u)

    def transport(self, x, y, u):
        return chol.tri_transport(x, y, u)

    def egrad_to_rgrad(self, x, g):
        return chol.egrad_to_rgrad(x, g)

    def check(self, x):
        chol.check_lower_pos(x, "Cholesky-space parameter")


EUCLIDEAN = Euclidean()


@dataclass(frozen=True)
class ManifoldParam:
    """A parameter value with its optimizer state.

    ``momentum`` is a tangent vector at ``value``; ``v`` is a scalar for
    manifold parameters and an array for Euclidean ones.
    """

    value: np.ndarray
    manifold: object = EUCLIDEAN
    momentum: np.ndarray | None = None
    v: np.ndarray | float = 0.0
    t: int = 0
    lr_scale: float = 1.0


def step(param: ManifoldParam, grad, cfg: AdamConfig) -> ManifoldParam:
    """One Adam update; ``grad`` must already be a tangent at ``param.value``."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != param.value.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {param.value.shape}")
    if not np.all(np.isfinite(grad)):
        logger.warning("skipping update: non-finite gradient")
        return param
    x = param.value
    b1, b2 = cfg.beta1, cfg.beta2
    t = param.t + 1
    tau = np.zeros_like(x) if param.momentum is None else param.momentum
    m = b1 * tau + (1 - b1) * grad
    man = param.manifold
    if isinstance(man, Euclidean):
        v = b2 * param.v + (1 - b2) * grad ** 2
    else:
        v = b2 * param.v + (1 - b2) * man.inner(x, grad, grad)
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    update = -cfg.alpha * param.lr_scale * m_hat / (np.sqrt(v_hat) + cfg.eps)
    if isinstance(man, Euclidean):
        new_x = x + update
        new_tau = m
    else:
        new_x = man.exp(x, update)
        new_tau = man.transport(x, new_x, m)
    return replace(param, value=new_x, momentum=new_tau, v=v, t=t)


def step_all(params: dict, grads: dict, cfg: AdamConfig) -> dict:
    """Apply :func:`step` to every parameter, in name order."""
    out = {}
    for name in sorted(params):
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        out[name] = step(params[name], grads[name], cfg)
    return out
