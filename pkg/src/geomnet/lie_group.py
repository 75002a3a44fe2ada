"""Group structure on (mean, covariance) pairs of SPD statistics.

A pair ``(P_m, P_c)`` with ``P_c = L L^T`` is identified with the
lower-triangular block matrix ``[[L, 0], [phi(P_m), I_k']]`` where each of the
``k'`` rows of ``phi(P_m)`` is the half-vectorized logarithm of ``P_m``.
Matrix multiplication of these blocks corresponds to the ``star`` product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .gaussian import log_then_vec
from .spd import expm, unvec_sym


class RiemannianGaussian(NamedTuple):
    mean: np.ndarray
    covariance: np.ndarray

    def validate(self):
        n = self.mean.shape[-1]
        if self.covariance.shape[-1] != n * (n + 1) // 2:
            raise ValueError(
                f"covariance of a {n}x{n} mean must be {n * (n + 1) // 2}-dimensional")


@dataclass(frozen=True)
class StatsEmbedConfig:
    k_prime: int = 1

    def __post_init__(self):
        if self.k_prime < 0:
            raise ValueError("k_prime must be non-negative")


def varphi(p, k_prime):
    """``k_prime`` identical rows, each the log-vectorization of ``p``."""
    v = log_then_vec(p)
    n_prime = value_of(v).shape[-1]
    shape = value_of(v).shape[:-1] + (k_prime, n_prime)
    return ad.broadcast_to(ad.reshape(v, value_of(v).shape[:-1] + (1, n_prime)), shape)


def varphi_inverse(rows):
    """Recover the SPD matrix from (the first row of) ``varphi`` output."""
    rows = np.asarray(rows, dtype=float)
    if rows.shape[-2] == 0:
        raise ValueError("cannot invert an empty varphi block")
    return expm(unvec_sym(rows[..., 0, :]))


def to_group_element(x: RiemannianGaussian, cfg: StatsEmbedConfig, cov_root=None):
    """Block matrix ``[[chol(P_c), 0], [varphi(P_m), I]]``; just the factor when k' = 0.

    ``cov_root`` optionally gives ``R`` with ``R^T R = P_c`` (see
    :func:`geomnet.autodiff.cholesky`).
    """
    low = ad.cholesky(x.covariance, root=cov_root)
    kp = cfg.k_prime
    if kp == 0:
        return low
    phi = varphi(x.mean, kp)
    n_prime = value_of(low).shape[-1]
    batch = value_of(low).shape[:-2]
    zeros = np.zeros(batch + (n_prime, kp))
    eye = np.broadcast_to(np.eye(kp), batch + (kp, kp))
    top = ad.concatenate([low, zeros], axis=-1)
    bottom = ad.concatenate([phi, eye], axis=-1)
    return ad.concatenate([top, bottom], axis=-2)


def split_group_element(g, k_prime):
    """Return the triangular block and the ``varphi`` block."""
    g = np.asarray(g)
    n_prime = g.shape[-1] - k_prime
    return g[..., :n_prime, :n_prime], g[..., n_prime:, :n_prime]


def from_group_element(g, k_prime) -> RiemannianGaussian:
    """The isomorphism back to (mean, covariance)."""
    low, phi = split_group_element(g, k_prime)
    return RiemannianGaussian(varphi_inverse(phi), low @ np.swapaxes(low, -1, -2))


def star_product(x: RiemannianGaussian, y: RiemannianGaussian,
                 cfg: StatsEmbedConfig) -> RiemannianGaussian:
    if x.mean.shape != y.mean.shape or x.covariance.shape != y.covariance.shape:
        raise ValueError("star product of differently sized elements")
    if cfg.k_prime == 0:
        raise ValueError("the star product needs k_prime >= 1")
    l1 = np.linalg.cholesky(x.covariance)
    l2 = np.linalg.cholesky(y.covariance)
    rows = varphi(x.mean, cfg.k_prime) @ l2 + varphi(y.mean, cfg.k_prime)
    prod = l1 @ l2
    return RiemannianGaussian(varphi_inverse(rows), prod @ np.swapaxes(prod, -1, -2))


def identity_element(n_s) -> RiemannianGaussian:
    return RiemannianGaussian(np.eye(n_s), np.eye(n_s * (n_s + 1) // 2))


def inverse_element(x: RiemannianGaussian, cfg: StatsEmbedConfig) -> RiemannianGaussian:
    low_inv = np.linalg.inv(np.linalg.cholesky(x.covariance))
    rows = -varphi(x.mean, cfg.k_prime) @ low_inv
    return RiemannianGaussian(varphi_inverse(rows), low_inv @ low_inv.T)


def deviation(x: RiemannianGaussian, y: RiemannianGaussian) -> float:
    return float(np.linalg.norm(x.mean - y.mean) + np.linalg.norm(x.covariance - y.covariance))


def iso_check(k1, k2, cfg: StatsEmbedConfig) -> float:
    """How far the block-matrix product is from the star product of its images."""
    kp = cfg.k_prime
    left = from_group_element(k1 @ k2, kp)
    right = star_product(from_group_element(k1, kp), from_group_element(k2, kp), cfg)
    return deviation(left, right)
