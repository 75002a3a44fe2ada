"""Affine-invariant geometry of symmetric positive-definite matrices.

Points and tangent vectors are plain arrays of shape ``(..., n, n)``; every
function broadcasts over leading axes and accepts tape variables, so the same
code serves the library API and the differentiable network layers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import value_of

logger = logging.getLogger(__name__)

SYM_TOL = 1e-9


@dataclass(frozen=True)
class MetricConfig:
    """Member of the affine-invariant metric family.

    With ``use_trace_term`` the inner product is
    ``tr(A P^-1 B P^-1) - tr(A P^-1) tr(B P^-1) / beta_denominator``;
    without it the plain affine-invariant metric is used.
    """

    beta_denominator: int = 0
    use_trace_term: bool = False

    def validate(self, n: int):
        if self.use_trace_term and self.beta_denominator < n:
            raise ValueError(
                f"beta_denominator={self.beta_denominator} must be >= n={n}")


AIRM = MetricConfig()


def check_spd(p, name="matrix"):
    p = np.asarray(value_of(p))
    if p.ndim < 2 or p.shape[-1] != p.shape[-2]:
        raise ValueError(f"{name} must be square, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has non-finite entries")
    if np.max(np.abs(p - np.swapaxes(p, -1, -2)), initial=0.0) > SYM_TOL * max(1.0, np.abs(p).max()):
        raise ValueError(f"{name} is not symmetric")
    if np.min(np.linalg.eigvalsh(p)) <= 0:
        raise ValueError(f"{name} is not positive definite")


def _same_dim(*mats):
    dims = {value_of(m).shape[-1] for m in mats}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {sorted(dims)}")
    return dims.pop()


def sqrtm(p):
    return ad.matrix_fn(p, "sqrt")


def invsqrtm(p):
    return ad.matrix_fn(p, "inv_sqrt")


def logm(p):
    return ad.matrix_fn(p, "log")


def expm(a):
    return ad.matrix_fn(a, "exp")


def inner(p, a, b, cfg: MetricConfig = AIRM):
    """Riemannian inner product of tangent vectors ``a`` and ``b`` at ``p``."""
    n = _same_dim(p, a, b)
    cfg.validate(n)
    p_inv = ad.inv(p)
    ap = a @ p_inv
    bp = b @ p_inv
    out = ad.trace(ap @ bp)
    if cfg.use_trace_term:
        out = out - ad.trace(ap) * ad.trace(bp) / cfg.beta_denominator
    return out


def norm(p, a, cfg: MetricConfig = AIRM):
    return np.sqrt(np.maximum(value_of(inner(p, a, a, cfg)), 0.0))


def exp_map(p, a):
    """Point reached at unit time along the geodesic from ``p`` with velocity ``a``."""
    _same_dim(p, a)
    s = sqrtm(p)
    si = invsqrtm(p)
    return ad.symmetrize(s @ expm(si @ a @ si) @ s)


def log_map(p, q):
    """Tangent vector at ``p`` pointing to ``q`` (inverse of :func:`exp_map`)."""
    _same_dim(p, q)
    s = sqrtm(p)
    si = invsqrtm(p)
    return ad.symmetrize(s @ logm(ad.symmetrize(si @ q @ si)) @ s)


def distance(p, q, cfg: MetricConfig = AIRM):
    """Geodesic distance.

    Computed from the eigenvalues of ``p^-1/2 q p^-1/2`` so that it is
    exactly symmetric up to rounding.
    """
    _same_dim(p, q)
    si = invsqrtm(value_of(p))
    z, _ = ad.sym_eig(si @ value_of(q) @ si)
    lz = np.log(z)
    sq = np.sum(lz ** 2, axis=-1)
    if cfg.use_trace_term:
        cfg.validate(z.shape[-1])
        sq = sq - np.sum(lz, axis=-1) ** 2 / cfg.beta_denominator
    return np.sqrt(np.maximum(sq, 0.0))


def transport_operator(q, p):
    """Matrix ``E = (p q^-1)^(1/2)`` in its symmetric similarity form."""
    s = sqrtm(p)
    si = invsqrtm(p)
    x = ad.symmetrize(si @ q @ si)
    return s @ invsqrtm(x) @ si


def parallel_transport(q, p, a):
    """Transport tangent vector ``a`` at ``q`` to the tangent space at ``p``."""
    _same_dim(q, p, a)
    e = transport_operator(q, p)
    return ad.symmetrize(e @ a @ ad.transpose(e))


def egrad_to_rgrad(p, grad, cfg: MetricConfig = AIRM):
    """Convert a Euclidean gradient at ``p`` into the Riemannian gradient.

    For the plain metric this is ``p sym(G) p``.  The trace-corrected metric
    adds ``tr(G p) p / (beta_denominator - n)`` so that the result still
    represents the differential.
    """
    grad = 0.5 * (grad + np.swapaxes(grad, -1, -2))
    out = p @ grad @ p
    if cfg.use_trace_term:
        n = p.shape[-1]
        gap = cfg.beta_denominator - n
        if gap <= 0:
            raise ValueError("trace-corrected metric is degenerate when "
                             "beta_denominator == n; no Riemannian gradient")
        out = out + np.trace(grad @ p, axis1=-2, axis2=-1)[..., None, None] * p / gap
    return out


class FrechetInfo(NamedTuple):
    iterations: np.ndarray
    converged: np.ndarray
    residual: np.ndarray
    schedule: np.ndarray      # (steps, ...) accepted step sizes, 0 once finished


MAX_HALVINGS = 12


def _whitened_norm(mean, tangent):
    s = invsqrtm(mean)
    return np.linalg.norm(s @ tangent @ s, axis=(-2, -1))


def _karcher_search(pv, w, tol, max_iter):
    """Value-only Karcher iteration; returns the mean and the step schedule."""
    batch = pv.shape[:-3]
    mean = np.sum(pv * w, axis=-3)
    tangent = np.sum(log_map(mean[..., None, :, :], pv) * w, axis=-3)
    res = np.linalg.norm(tangent, axis=(-2, -1))
    rnorm = _whitened_norm(mean, tangent)
    eta = np.ones(batch)
    done = res < tol
    schedule = []
    for _ in range(max_iter):
        if done.all():
            break
        step = np.where(done, 0.0, eta)
        for _ in range(MAX_HALVINGS + 1):
            cand = exp_map(mean, step[..., None, None] * tangent)
            c_tan = np.sum(log_map(cand[..., None, :, :], pv) * w, axis=-3)
            c_rnorm = _whitened_norm(cand, c_tan)
            worse = (step > 0) & ~(c_rnorm < rnorm)
            if not worse.any():
                break
            step = np.where(worse, step / 2, step)
        # an element that cannot improve even with a tiny step has stalled
        stalled = worse
        step = np.where(stalled, 0.0, step)
        take = (step > 0)[..., None, None]
        mean = np.where(take, cand, mean)
        tangent = np.where(take, c_tan, tangent)
        rnorm = np.where(step > 0, c_rnorm, rnorm)
        res = np.where(step > 0, np.linalg.norm(tangent, axis=(-2, -1)), res)
        schedule.append(step)
        # grow the step back after a success, never past the plain fixed-point step
        eta = np.where(step > 0, np.minimum(1.0, 2 * step), eta)
        done = done | stalled | (res < tol)
    schedule = np.array(schedule).reshape((len(schedule),) + batch)
    return mean, schedule, res


def _sym_basis(n):
    """Orthonormal basis of symmetric matrices matching :func:`vec_sym` coordinates."""
    key = ("basis", n)
    if key not in _LAYOUTS:
        _LAYOUTS[key] = unvec_sym(np.eye(n * (n + 1) // 2))
    return _LAYOUTS[key]


def _whitened_logs(mean, pv):
    """Whitening factors of ``mean`` and the logs of the whitened points."""
    z, u = np.linalg.eigh(mean)
    ut = np.swapaxes(u, -1, -2)
    isq = (u * z[..., None, :] ** -0.5) @ ut
    sq = (u * z[..., None, :] ** 0.5) @ ut
    a = isq[..., None, :, :] @ pv @ isq[..., None, :, :]
    lz, lu = np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2)))
    lz = np.maximum(lz, ad.EIG_CLAMP)
    lg = (lu * np.log(lz)[..., None, :]) @ np.swapaxes(lu, -1, -2)
    return isq, sq, lg, lz, lu


def _karcher_hessian(lz, lu, w):
    """Hessian of ``1/2 sum_i w_i d^2(., P_i)`` at the whitening point.

    Along the eigenbasis of each whitened log with eigenvalues ``l_k`` the
    Hessian of one squared distance scales entry ``(k, l)`` by
    ``x coth x`` with ``x = (l_k - l_l) / 2``.  Returned in :func:`vec_sym`
    coordinates, shape (..., N, N).
    """
    lam = np.log(lz)
    half = 0.5 * np.abs(lam[..., :, None] - lam[..., None, :])
    small = half < 1e-8
    c = np.where(small, 1.0, half / np.tanh(np.where(small, 1.0, half)))
    basis = _sym_basis(lz.shape[-1])
    ut = np.swapaxes(lu, -1, -2)
    x = ut[..., None, :, :] @ basis @ lu[..., None, :, :]
    y = lu[..., None, :, :] @ (c[..., None, :, :] * x) @ ut[..., None, :, :]
    cols = vec_sym(y, check=False)                  # (..., L, N, N); row b = image of e_b
    return np.sum(np.swapaxes(cols, -1, -2) * w[..., None, None], axis=-3)


def _karcher_cost(lg, w):
    return 0.5 * np.sum(w * np.sum(lg ** 2, axis=(-2, -1)), axis=-1)


def _karcher_newton(pv, w, tol, max_iter):
    """Damped Riemannian Newton iteration for the Karcher mean (values only).

    Long steps (whitened norm above 1) are backtracked until the cost
    decreases; shorter ones are taken in full.  Stops per problem once the
    Frobenius norm of the mean tangent is below ``tol``, after ``max_iter``
    updates, or when a full step no longer halves the whitened residual
    (rounding floor of ill-conditioned sets).
    """
    w = w[..., 0, 0]
    batch = pv.shape[:-3]
    mean = np.sum(pv * w[..., None, None], axis=-3)
    count = np.zeros(batch, dtype=int)
    done = np.zeros(batch, dtype=bool)
    res = np.full(batch, np.inf)
    prev = np.full(batch, np.inf)
    local = np.zeros(batch, dtype=bool)
    for it in range(max_iter + 1):
        isq, sq, lg, lz, lu = _whitened_logs(mean, pv)
        grad = np.sum(lg * w[..., None, None], axis=-3)
        res = np.where(done, res, np.linalg.norm(sq @ grad @ sq, axis=(-2, -1)))
        rnorm = np.linalg.norm(grad, axis=(-2, -1))
        done = done | (res < tol) | (local & (rnorm > 0.5 * prev))
        if done.all() or it == max_iter:
            break
        prev = np.where(done, prev, rnorm)
        hess = _karcher_hessian(lz, lu, w)
        xi = unvec_sym(np.linalg.solve(hess, vec_sym(grad, check=False)[..., None])[..., 0])
        size = np.linalg.norm(xi, axis=(-2, -1))
        local = size <= 1.0
        step = np.where(done, 0.0, np.minimum(1.0, 20.0 / np.maximum(size, 1e-300)))
        search = ~done & ~local
        if search.any():
            slope = np.sum(grad * xi, axis=(-2, -1))
            cost = _karcher_cost(lg, w)
            for _ in range(MAX_HALVINGS * 2):
                cand = sq @ expm(step[..., None, None] * xi) @ sq
                c_cost = _karcher_cost(_whitened_logs(cand, pv)[2], w)
                bad = search & ~(c_cost <= cost - 1e-4 * step * slope)
                if not bad.any():
                    break
                step = np.where(bad, step / 2, step)
            step = np.where(bad, 0.0, step)
            done = done | bad
        else:
            cand = sq @ expm(step[..., None, None] * xi) @ sq
        mean = np.where((step > 0)[..., None, None], cand, mean)
        count = count + (step > 0)
    return mean, count, res


def _karcher_vjp(mean, pv, w, g):
    """Cotangent of the points from the cotangent ``g`` of their Karcher mean.

    At the mean the whitened mean log ``F`` vanishes.  Moving the mean to
    ``m^1/2 exp(xi) m^1/2`` changes ``F`` by ``-H xi``, so the implicit
    function theorem gives ``xi = H^-1 dF`` for a change of the points.
    """
    w = w[..., 0, 0]
    isq, sq, lg, lz, lu = _whitened_logs(mean, pv)
    hess = _karcher_hessian(lz, lu, w)
    g = 0.5 * (g + np.swapaxes(g, -1, -2))
    xi_bar = vec_sym(sq @ g @ sq, check=False)
    lam = unvec_sym(np.linalg.solve(hess, xi_bar[..., None])[..., 0])
    ut = np.swapaxes(lu, -1, -2)
    k = ad.loewner(lz, np.log(lz), 1.0 / lz)
    dlog = lu @ (k * (ut @ lam[..., None, :, :] @ lu)) @ ut
    return (isq[..., None, :, :] @ dlog @ isq[..., None, :, :]) * w[..., None, None]


def frechet_mean(points, cfg: MetricConfig = AIRM, weights=None, tol=1e-6,
                 max_iter=50, schedule=None, return_info=False, method="fixed_point",
                 warn=True):
    """Karcher mean of SPD matrices.

    Iteration starts at the (weighted) arithmetic mean and stops once the
    Frobenius norm of the mean tangent drops below ``tol`` or after
    ``max_iter`` updates.  All metrics in the affine-invariant family share
    geodesics, so ``cfg`` does not change the result.

    ``method="fixed_point"`` maps the points to the tangent space at the
    current estimate, averages there, and moves along the averaged tangent.
    The full step is tried first; when it does not reduce the whitened norm
    of the mean tangent (which happens for widely spread sets) the step is
    halved until it does.  Gradients flow through the unrolled iteration.

    ``method="newton"`` takes damped Newton steps with the exact Hessian of
    the sum of squared distances.  It needs far fewer iterations on spread
    or ill-conditioned sets; gradients come from the implicit function
    theorem at the returned point.

    Parameters
    ----------
    points : array or Var, shape (..., L, n, n)
        Sets of SPD matrices; leading axes are independent problems.
    weights : ndarray, shape (..., L), optional
        Non-negative constant weights; zero-weight slots are ignored.
    schedule : ndarray, shape (steps, ...), optional
        Fixed-point method only: replay exactly these step sizes (0 = no
        update) instead of searching.  Used to freeze the iteration when
        differentiating; take it from the ``schedule`` field of a previous
        call's info.
    return_info : bool
        Also return a :class:`FrechetInfo`.

    Returns
    -------
    mean : array or Var, shape (..., n, n)
    """
    if method not in ("fixed_point", "newton"):
        raise ValueError(f"unknown Frechet mean method {method!r}")
    pv = value_of(points)
    if pv.ndim < 3 or pv.shape[-3] == 0:
        raise ValueError("frechet_mean needs a non-empty set of matrices")
    batch = pv.shape[:-3]
    if weights is None:
        weights = np.ones(pv.shape[:-2])
    weights = np.broadcast_to(np.asarray(weights, dtype=float), pv.shape[:-2])
    total = weights.sum(axis=-1)
    if np.any(total <= 0):
        raise ValueError("every set needs positive total weight")
    w = (weights / total[..., None])[..., None, None]

    if method == "newton":
        found, count, residual = _karcher_newton(pv, w, tol, max_iter)
        schedule = np.zeros((0,) + batch)
        mean = ad._record(found, [(points, lambda g: _karcher_vjp(found, pv, w, g))])
    else:
        residual = None
        if schedule is None:
            found, schedule, residual = _karcher_search(pv, w, tol, max_iter)
        else:
            schedule = np.asarray(schedule, dtype=float).reshape((-1,) + batch)
        count = (schedule > 0).sum(axis=0)
        if not isinstance(points, ad.Var) and residual is not None:
            mean = found
        else:
            mean = ad.sum_(points * w, axis=-3)
            for step in schedule:
                tangents = log_map(_expand(mean), points)
                mean_tangent = ad.sum_(tangents * w, axis=-3)
                updated = exp_map(mean, mean_tangent * step[..., None, None])
                if np.all(step > 0):
                    mean = updated
                else:
                    mean = mean + (updated - mean) * (step > 0).astype(float)[..., None, None]
        if residual is None:
            mv = value_of(mean)
            residual = np.linalg.norm(
                np.sum(log_map(mv[..., None, :, :], pv) * w, axis=-3), axis=(-2, -1))
    converged = residual < tol
    if warn and not np.all(converged):
        logger.warning("Frechet mean did not converge in %d iterations "
                       "(residual %.3g)", max_iter, float(np.max(residual)))
    if return_info:
        return mean, FrechetInfo(count, converged, residual, schedule)
    return mean


def _expand(mean):
    if isinstance(mean, ad.Var):
        return ad.reshape(mean, mean.shape[:-2] + (1,) + mean.shape[-2:])
    return mean[..., None, :, :]


def vec_sym(a, check=True):
    """Norm-preserving half-vectorization of a symmetric matrix.

    Lower-triangular entries are taken row by row (``i >= j``); off-diagonal
    entries are scaled by ``sqrt(2)``.
    """
    av = value_of(a)
    if check and np.max(np.abs(av - np.swapaxes(av, -1, -2)), initial=0.0) > SYM_TOL * max(1.0, np.abs(av).max(initial=0.0)):
        raise ValueError("vec_sym needs a symmetric matrix")
    rows, cols, scale = _tril_layout(av.shape[-1])
    return ad.getitem(a, (..., rows, cols)) * scale


def unvec_sym(v):
    """Inverse of :func:`vec_sym`."""
    v = np.asarray(v, dtype=float)
    n = int(round((np.sqrt(8 * v.shape[-1] + 1) - 1) / 2))
    rows, cols, scale = _tril_layout(n)
    out = np.zeros(v.shape[:-1] + (n, n))
    out[..., rows, cols] = v / scale
    out[..., cols, rows] = v / scale
    return out


_LAYOUTS: dict = {}


def _tril_layout(n):
    if n not in _LAYOUTS:
        rows, cols = np.tril_indices(n)
        scale = np.where(rows == cols, 1.0, np.sqrt(2.0))
        _LAYOUTS[n] = (rows, cols, scale)
    return _LAYOUTS[n]


def transported_covariance(points, mean, target=None, weights=None, reg=1e-5,
                           reg_floor=1e-8, return_root=False):
    """Covariance of vectorized tangents, optionally parallel transported.

    The tangents ``log_map(mean, P_i)`` are moved to ``target`` (skipped when
    ``target`` is None, which is the no-transport variant), half-vectorized,
    and averaged as ``sum_i v_i v_i^T / (L - 1)``.  The result gets
    ``(reg * trace / dim + reg_floor) * I`` added so it stays SPD when the
    tangents span less than the full space.

    ``weights`` (0/1 per slot) lets padded sets share one array; a set with
    a single active point yields the regularizer alone.

    With ``return_root`` the function also returns a plain array ``R`` with
    ``R^T R`` equal to the covariance, for an accurate Cholesky factor.
    """
    pv = value_of(points)
    n_pts = pv.shape[-3]
    if weights is None:
        if n_pts < 2:
            raise ValueError("transported_covariance needs at least 2 points")
        weights = np.ones(pv.shape[:-2])
    weights = np.broadcast_to(np.asarray(weights, dtype=float), pv.shape[:-2])
    tangents = log_map(_expand(mean), points)
    if target is not None:
        tangents = parallel_transport(_expand(mean), _expand_like(target, mean), tangents)
    vecs = vec_sym(tangents, check=False)
    denom = np.maximum(weights.sum(axis=-1) - 1.0, 1.0)
    scaled = vecs * (weights / denom[..., None])[..., None]
    cov = ad.transpose(scaled) @ vecs
    dim = cov.shape[-1]
    lam = reg * ad.trace(cov) / dim + reg_floor
    cov = cov + _as_eye(lam, dim)
    if not return_root:
        return cov
    rows = value_of(vecs) * np.sqrt(weights / denom[..., None])[..., None]
    ridge = np.sqrt(np.asarray(value_of(lam)))[..., None, None] * np.eye(dim)
    return cov, np.concatenate([rows, np.broadcast_to(ridge, rows.shape[:-2] + (dim, dim))], axis=-2)


def _expand_like(target, mean):
    tv = value_of(target)
    mv = value_of(mean)
    if tv.ndim == mv.ndim:
        return _expand(target)
    return target


def _as_eye(lam, dim):
    eye = np.eye(dim)
    if isinstance(lam, ad.Var):
        return ad.reshape(lam, lam.shape + (1, 1)) * eye
    return np.asarray(lam)[..., None, None] * eye


def random_spd(n, rng, size=(), scale=1.0):
    """SPD matrices with log-eigenvalues in ``[-scale, scale]`` and random rotation."""
    a = rng.normal(size=tuple(size) + (n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[..., None, :]
    z = np.exp(rng.uniform(-scale, scale, size=tuple(size) + (n,)))
    return (q * z[..., None, :]) @ np.swapaxes(q, -1, -2)


def random_tangent(n, rng, size=(), scale=1.0):
    a = rng.normal(size=tuple(size) + (n, n))
    return scale * 0.5 * (a + np.swapaxes(a, -1, -2))
