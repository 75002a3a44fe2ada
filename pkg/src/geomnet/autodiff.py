"""Reverse-mode differentiation for the dense-matrix primitives used by GeomNet.

Every operation accepts plain ``ndarray`` values or :class:`Var` instances.
With only arrays in, the result is a plain array and nothing is recorded, so
the geometry code runs at numpy speed outside training.  Inside an active
:class:`Tape`, operations on watched variables append a node holding the
output and one vector-Jacobian product per differentiable input.

Matrix operations work on the last two axes and broadcast over the rest.
"""

from __future__ import annotations

import logging
import threading

import numpy as np

logger = logging.getLogger(__name__)

EIG_CLAMP = 1e-10
DEGENERATE_GAP = 1e-12


class NumericError(ArithmeticError):
    """A factorization or decomposition failed to produce a usable result."""


class Var:
    """A value on the tape.

    Only variables created while a :class:`Tape` is active and flagged
    ``requires_grad`` take part in differentiation; everything else acts as a
    constant.
    """

    __array_ufunc__ = None
    __slots__ = ("value", "requires_grad", "grad", "name", "_parents")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=float)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def mT(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


class Tape:
    """Records primitive applications in execution order.

    A tape is single-use: record one forward pass inside ``with Tape() as
    tape``, then call :func:`backward` once.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Var] = []
        self._used = False

    def __enter__(self):
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = self._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        self._local.stack.pop()
        return False

    def watch(self, value, name=None) -> Var:
        """Create a differentiable leaf from ``value``."""
        if isinstance(value, Var):
            value = value.value
        return Var(np.array(value, dtype=float), requires_grad=True, name=name)

    @classmethod
    def current(cls):
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _record(value, inputs):
    """Wrap ``value`` as the output of a primitive.

    ``inputs`` is a sequence of ``(operand, vjp)`` pairs.  Returns a plain
    array when no operand is a ``Var``.
    """
    if not any(isinstance(x, Var) for x, _ in inputs):
        return value
    out = Var(value)
    tape = Tape.current()
    live = tuple((x, f) for x, f in inputs if isinstance(x, Var) and x.requires_grad)
    if tape is not None and live:
        out.requires_grad = True
        out._parents = live
        tape.nodes.append(out)
    return out


def backward(tape: Tape, output: Var, seed=None) -> dict:
    """Propagate ``seed`` (default 1) from ``output`` to every leaf on ``tape``.

    Returns a mapping from leaf ``Var`` to its gradient and also stores the
    gradient on ``leaf.grad``.
    """
    if tape._used:
        raise RuntimeError("tape already consumed by a backward pass")
    tape._used = True
    if not isinstance(output, Var) or not output.requires_grad:
        return {}
    if seed is None:
        if output.value.size != 1:
            raise ValueError("seed required for non-scalar output")
        seed = np.ones_like(output.value)
    grads = {id(output): np.asarray(seed, dtype=float)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node._parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
            if not parent._parents:
                leaves[key] = parent
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        out[leaf] = leaf.grad
    return out


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av + bv, [(a, lambda g: _unbroadcast(g, sa)),
                             (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av - bv, [(a, lambda g: _unbroadcast(g, sa)),
                             (b, lambda g: -_unbroadcast(g, sb))])


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av * bv, [(a, lambda g: _unbroadcast(g * bv, sa)),
                             (b, lambda g: _unbroadcast(g * av, sb))])


def div(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return _record(out, [(a, lambda g: _unbroadcast(g / bv, sa)),
                         (b, lambda g: _unbroadcast(-g * out / bv, sb))])


def neg(a):
    return _record(-value_of(a), [(a, lambda g: -g)])


def exp(a):
    out = np.exp(value_of(a))
    return _record(out, [(a, lambda g: g * out)])


def log(a):
    av = value_of(a)
    return _record(np.log(av), [(a, lambda g: g / av)])


def sqrt(a):
    out = np.sqrt(value_of(a))
    return _record(out, [(a, lambda g: 0.5 * g / out)])


# ------------------------------------------------------------------ structure


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if np.ndim(av) < 2 or np.ndim(bv) < 2:
        raise ValueError("matmul operands must be at least 2-D")
    sa, sb = av.shape, bv.shape
    return _record(av @ bv, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), sa)),
        (b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, sb)),
    ])


def transpose(a):
    """Swap the last two axes."""
    return _record(np.swapaxes(value_of(a), -1, -2),
                   [(a, lambda g: np.swapaxes(g, -1, -2))])


def permute(a, axes):
    inverse = np.argsort(axes)
    return _record(np.transpose(value_of(a), axes),
                   [(a, lambda g: np.transpose(g, inverse))])


def reshape(a, shape):
    av = value_of(a)
    src = av.shape
    return _record(av.reshape(shape), [(a, lambda g: g.reshape(src))])


def broadcast_to(a, shape):
    av = value_of(a)
    src = av.shape
    return _record(np.broadcast_to(av, shape).copy(),
                   [(a, lambda g: _unbroadcast(g, src))])


def getitem(a, index):
    av = value_of(a)

    def vjp(g):
        out = np.zeros_like(av)
        np.add.at(out, index, g)
        return out

    return _record(av[index], [(a, vjp)])


def sum_(a, axis=None, keepdims=False):
    av = value_of(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _record(av.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def concatenate(items, axis=0):
    values = [value_of(x) for x in items]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def slicer(lo, hi):
        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]
        return vjp

    return _record(out, [(x, slicer(bounds[i], bounds[i + 1]))
                         for i, x in enumerate(items)])


def stack(items, axis=0):
    values = [value_of(x) for x in items]
    out = np.stack(values, axis=axis)

    def picker(i):
        return lambda g: np.take(g, i, axis=axis)

    return _record(out, [(x, picker(i)) for i, x in enumerate(items)])


def trace(a):
    av = value_of(a)
    n = av.shape[-1]
    eye = np.eye(n)
    return _record(np.trace(av, axis1=-2, axis2=-1),
                   [(a, lambda g: g[..., None, None] * eye)])


def diagonal(a):
    av = value_of(a)
    n = av.shape[-1]
    eye = np.eye(n)
    return _record(np.diagonal(av, axis1=-2, axis2=-1).copy(),
                   [(a, lambda g: g[..., None, :] * eye)])


def symmetrize(a):
    return 0.5 * (a + transpose(a))


def _sym(g):
    return 0.5 * (g + np.swapaxes(g, -1, -2))


def log_softmax(a):
    """Log-softmax over the last axis, computed with max subtraction."""
    av = value_of(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    prob = np.exp(out)
    return _record(out, [(a, lambda g: g - prob * g.sum(axis=-1, keepdims=True))])


# ------------------------------------------------------------- linear algebra


def sym_eig(m):
    """Eigendecomposition of a symmetric matrix (or stack of them).

    The input is symmetrized as ``(m + m.T) / 2`` first.

    Returns
    -------
    eigenvalues : ndarray, shape (..., n)
        Sorted in descending order.
    eigenvectors : ndarray, shape (..., n, n)
        Orthogonal; column ``i`` pairs with ``eigenvalues[..., i]``.
    """
    m = np.asarray(value_of(m), dtype=float)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError(f"sym_eig needs square matrices, got shape {m.shape}")
    try:
        z, u = np.linalg.eigh(_sym(m))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"symmetric eigensolver did not converge: {exc}") from exc
    return z[..., ::-1], u[..., ::-1]


def _scalar_fn(kind, power):
    if kind == "log":
        return np.log, lambda z: 1.0 / z, True
    if kind == "exp":
        return np.exp, np.exp, False
    if kind == "sqrt":
        return np.sqrt, lambda z: 0.5 / np.sqrt(z), True
    if kind == "inv_sqrt":
        return lambda z: z ** -0.5, lambda z: -0.5 * z ** -1.5, True
    if kind == "pow":
        if power is None:
            raise ValueError("pow needs an exponent")
        return lambda z: z ** power, lambda z: power * z ** (power - 1), True
    raise ValueError(f"unknown matrix function {kind!r}")


def loewner(z, fz, dfz):
    """Matrix of divided differences ``(f(z_i) - f(z_j)) / (z_i - z_j)``.

    Pairs closer than ``DEGENERATE_GAP`` use the derivative instead.
    """
    dz = z[..., :, None] - z[..., None, :]
    df = fz[..., :, None] - fz[..., None, :]
    close = np.abs(dz) < DEGENERATE_GAP
    avg = 0.5 * (dfz[..., :, None] + dfz[..., None, :])
    return np.where(close, avg, df / np.where(close, 1.0, dz))


def matrix_fn(m, kind, power=None):
    """Spectral matrix function ``U diag(f(z)) U^T`` of a symmetric matrix.

    ``kind`` is one of ``log``, ``exp``, ``sqrt``, ``inv_sqrt``, ``pow``.
    For every kind except ``exp`` the eigenvalues are clamped below at
    ``EIG_CLAMP`` (with a logged warning) before ``f`` is applied, so the
    function differentiated is ``f(max(z, EIG_CLAMP))``.
    """
    f, df, clamp = _scalar_fn(kind, power)
    z, u = sym_eig(m)
    zf = z
    dmask = 1.0
    if clamp:
        low = z < EIG_CLAMP
        if low.any():
            logger.warning("clamping %d eigenvalue(s) below %g (min %.3g)",
                           int(low.sum()), EIG_CLAMP, float(z.min()))
            zf = np.where(low, EIG_CLAMP, z)
            dmask = np.where(low, 0.0, 1.0)
    fz = f(zf)
    ut = np.swapaxes(u, -1, -2)
    out = _sym((u * fz[..., None, :]) @ ut)

    def vjp(g):
        k = loewner(z, fz, df(zf) * dmask)
        return u @ (k * (ut @ _sym(g) @ u)) @ ut

    return _record(out, [(m, vjp)])


def gram_logm(d):
    """``log(d d^T)`` for a square non-singular ``d``.

    Eigenvectors and eigenvalues come from the SVD of ``d`` rather than from
    ``d d^T``, which keeps small eigenvalues accurate to working precision
    relative to themselves instead of to the largest one.
    """
    dv = np.asarray(value_of(d), dtype=float)
    if dv.ndim < 2 or dv.shape[-1] != dv.shape[-2]:
        raise ValueError(f"gram_logm needs square matrices, got shape {dv.shape}")
    try:
        u, s, _ = np.linalg.svd(dv)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc
    if np.any(s <= 0):
        raise NumericError("gram_logm needs a non-singular matrix")
    z = s ** 2
    fz = np.log(z)
    ut = np.swapaxes(u, -1, -2)
    out = _sym((u * fz[..., None, :]) @ ut)

    def vjp(g):
        k = loewner(z, fz, 1.0 / z)
        ga = u @ (k * (ut @ _sym(g) @ u)) @ ut
        return 2.0 * ga @ dv

    return _record(out, [(d, vjp)])


def logdet(m):
    """Log-determinant of an SPD matrix via its (clamped) eigenvalues."""
    z, u = sym_eig(m)
    z = np.maximum(z, EIG_CLAMP)
    out = np.log(z).sum(axis=-1)

    def vjp(g):
        inv = (u / z[..., None, :]) @ np.swapaxes(u, -1, -2)
        return g[..., None, None] * inv

    return _record(out, [(m, vjp)])


def _cholesky_lower(a):
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    a = np.array(a, copy=True)
    flat = a.reshape(-1, a.shape[-2], a.shape[-1])
    out = np.empty_like(flat)
    n = a.shape[-1]
    for i, mat in enumerate(flat):
        try:
            out[i] = np.linalg.cholesky(mat)
            continue
        except np.linalg.LinAlgError:
            pass
        lam = 1e-10 * np.trace(mat) / n
        try:
            out[i] = np.linalg.cholesky(mat + lam * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise NumericError("matrix not positive definite even after "
                               f"adding {lam:.3g} * I") from exc
    return out.reshape(a.shape)


def _factor_from_root(root):
    """Lower factor ``L`` with ``L L^T = root^T root``, via QR of ``root``."""
    r = np.linalg.qr(root, mode="r")
    sign = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    sign = np.where(sign == 0, 1.0, sign)
    return np.swapaxes(r * sign[..., :, None], -1, -2)


def cholesky(m, root=None):
    """Lower Cholesky factor of an SPD matrix (input symmetrized first).

    A matrix that fails to factor is retried once with ``1e-10 * tr/n`` added
    to the diagonal.  When a square root ``root`` with ``root^T root = m``
    is known (e.g. stacked data rows), the factor is computed from its QR
    decomposition instead, which avoids squaring the condition number; the
    gradient is unchanged.
    """
    mv = value_of(m)
    if mv.ndim < 2 or mv.shape[-1] != mv.shape[-2]:
        raise ValueError(f"cholesky needs square matrices, got shape {mv.shape}")
    if root is not None:
        low = _factor_from_root(np.asarray(root, dtype=float))
    else:
        low = _cholesky_lower(_sym(mv))
    n = low.shape[-1]
    half = np.tril(np.ones((n, n))) - 0.5 * np.eye(n)

    def vjp(g):
        g = np.tril(g)
        inv = np.linalg.inv(low)
        inv_t = np.swapaxes(inv, -1, -2)
        phi = (np.swapaxes(low, -1, -2) @ g) * half
        return _sym(inv_t @ phi @ inv)

    return _record(low, [(m, vjp)])


def inv(m):
    out = np.linalg.inv(value_of(m))
    out_t = np.swapaxes(out, -1, -2)
    return _record(out, [(m, lambda g: -out_t @ g @ out_t)])


# --------------------------------------------------------------- verification


def numeric_grad(f, point, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``point`` (an array)."""
    point = np.array(point, dtype=float)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(value_of(f(point.copy())))
        flat[i] = old - h
        down = float(value_of(f(point.copy())))
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_grad(f, point):
    with Tape() as tape:
        x = tape.watch(point)
        out = f(x)
    grads = backward(tape, out)
    return grads.get(x, np.zeros_like(np.asarray(point, dtype=float)))


def check_grad(f, point, h=1e-5) -> float:
    """Largest entrywise relative gap between tape and central differences.

    The error measure is ``|analytic - fd| / (|fd| + 1e-8)``.
    """
    ana = analytic_grad(f, point)
    fd = numeric_grad(f, point, h)
    return float(np.max(np.abs(ana - fd) / (np.abs(fd) + 1e-8)))
