"""Lin's Riemannian geometry on lower-triangular matrices with positive diagonal.

The strictly lower part is flat; each diagonal entry lives on the positive
half-line with the metric ``du^2 / k^2``.  All functions broadcast over
leading axes.
"""

import numpy as np


def strict_lower(x):
    return np.tril(x, -1)


def diag_part(x):
    return np.diagonal(x, axis1=-2, axis2=-1)


def _with_diag(lower, diag):
    return lower + diag[..., None, :] * np.eye(diag.shape[-1])


def check_lower_pos(k, name="matrix"):
    k = np.asarray(k)
    if k.ndim < 2 or k.shape[-1] != k.shape[-2]:
        raise ValueError(f"{name} must be square, got shape {k.shape}")
    if np.any(np.triu(k, 1) != 0):
        raise ValueError(f"{name} has entries above the diagonal")
    if np.any(diag_part(k) <= 0):
        raise ValueError(f"{name} needs a strictly positive diagonal")


def project_tangent(x):
    """Keep the lower triangle (diagonal included) of an ambient matrix."""
    return np.tril(x)


def tri_inner(k, u, v):
    """``sum_{i>j} u_ij v_ij + sum_j u_jj v_jj / k_jj^2``."""
    if not (np.shape(k)[-1] == np.shape(u)[-1] == np.shape(v)[-1]):
        raise ValueError("dimension mismatch")
    off = np.sum(strict_lower(u) * strict_lower(v), axis=(-2, -1))
    on = np.sum(diag_part(u) * diag_part(v) / diag_part(k) ** 2, axis=-1)
    return off + on


def tri_exp(k, u):
    kd = diag_part(k)
    return _with_diag(strict_lower(k) + strict_lower(u), kd * np.exp(diag_part(u) / kd))


def tri_log(k, h):
    kd = diag_part(k)
    return _with_diag(strict_lower(h) - strict_lower(k), kd * np.log(diag_part(h) / kd))


def tri_transport(k, h, u):
    """Move ``u`` from the tangent space at ``k`` to the one at ``h``."""
    return _with_diag(strict_lower(u), diag_part(h) / diag_part(k) * diag_part(u))


def egrad_to_rgrad(k, grad):
    """Riemannian gradient for a Euclidean gradient ``grad`` at ``k``."""
    g = np.tril(grad)
    return _with_diag(strict_lower(g), diag_part(g) * diag_part(k) ** 2)


def tri_distance(k, h):
    u = tri_log(k, h)
    return np.sqrt(tri_inner(k, u, u))


def random_lower_pos(n, rng, size=(), scale=1.0):
    x = np.tril(rng.normal(scale=scale, size=tuple(size) + (n, n)), -1)
    return _with_diag(x, np.exp(rng.uniform(-scale, scale, size=tuple(size) + (n,))))
