"""Embedding of n-variate Gaussians as unit-determinant SPD matrices."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of
from .spd import logm, vec_sym


@dataclass(frozen=True)
class GaussianEmbedConfig:
    """``k`` copies of the mean are bordered onto the covariance.

    ``k = 0`` keeps only the determinant-normalized covariance.  The
    covariance is regularized by ``(reg * tr / n + reg_floor) * I`` before
    embedding.
    """

    k: int = 2
    reg: float = 1e-5
    reg_floor: float = 1e-8

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be non-negative")


def regularize(cov, reg, reg_floor=0.0):
    n = value_of(cov).shape[-1]
    lam = reg * ad.trace(cov) / n + reg_floor
    eye = np.eye(n)
    if isinstance(lam, ad.Var):
        return cov + ad.reshape(lam, lam.shape + (1, 1)) * eye
    return cov + np.asarray(lam)[..., None, None] * eye


def embed_gaussian(mean, cov, cfg: GaussianEmbedConfig = GaussianEmbedConfig()):
    """Map ``(cov, mean)`` to an SPD matrix of size ``n + k`` with determinant 1.

    The result is ``det(S)^(-1/(n+k)) [[S + k mu mu^T, mu 1_k^T], [1_k mu^T, I_k]]``
    where ``S`` is the regularized covariance.  The determinant factor is
    evaluated from the log-eigenvalues of ``S``.

    Parameters
    ----------
    mean : array or Var, shape (..., n)
    cov : array or Var, shape (..., n, n)

    Returns
    -------
    array or Var, shape (..., n + k, n + k)
    """
    mv, cv = value_of(mean), value_of(cov)
    if not (np.all(np.isfinite(mv)) and np.all(np.isfinite(cv))):
        raise ValueError("Gaussian parameters must be finite")
    n = cv.shape[-1]
    if mv.shape[-1] != n:
        raise ValueError(f"mean has length {mv.shape[-1]}, covariance is {n}x{n}")
    k = cfg.k
    sigma = regularize(cov, cfg.reg, cfg.reg_floor)
    scale = ad.exp(ad.logdet(sigma) * (-1.0 / (n + k)))
    scale = ad.reshape(scale, np.shape(value_of(scale)) + (1, 1))
    if k == 0:
        return sigma * scale
    mu = ad.reshape(mean, mv.shape + (1,))
    top_left = sigma + k * (mu @ ad.transpose(mu))
    mu_k = mu @ np.ones((1, k))
    batch = cv.shape[:-2]
    eye_k = np.broadcast_to(np.eye(k), batch + (k, k))
    top = ad.concatenate([top_left, mu_k], axis=-1)
    bottom = ad.concatenate([ad.transpose(mu_k), eye_k], axis=-1)
    return ad.concatenate([top, bottom], axis=-2) * scale


def log_then_vec(p):
    """Half-vectorized matrix logarithm of an SPD matrix."""
    return vec_sym(logm(p), check=False)


def sample_moments(samples):
    """Mean and unbiased covariance of the rows of ``samples``."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] < 2:
        raise ValueError("need at least two samples for a covariance")
    mu = samples.mean(axis=0)
    centered = samples - mu
    return mu, centered.T @ centered / (samples.shape[0] - 1)
