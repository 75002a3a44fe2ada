"""Property checks over random instances, grouped by family.

Each family reports the largest deviation seen and passes when it stays
within the family tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cholesky_space as chol
from . import lie_group as lg
from . import spd
from .data import SkeletonSequence
from .gaussian import GaussianEmbedConfig, embed_gaussian
from .spd import MetricConfig
from .topology import toy_topology


@dataclass(frozen=True)
class FamilyResult:
    name: str
    max_deviation: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_deviation <= self.tolerance)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_exp_log(rng, sizes, trials):
    worst = 0.0
    for n in sizes:
        for _ in range(trials):
            p = spd.random_spd(n, rng)
            q = spd.random_spd(n, rng)
            worst = max(worst, _rel(spd.exp_map(p, spd.log_map(p, q)), q))
    return worst


def check_transport(rng, sizes, trials, transport=spd.parallel_transport):
    metrics = (MetricConfig(), None)
    worst = 0.0
    for n in sizes:
        for _ in range(trials):
            p = spd.random_spd(n, rng)
            q = spd.random_spd(n, rng)
            a = spd.random_tangent(n, rng)
            b = spd.random_tangent(n, rng)
            ta, tb = transport(p, q, a), transport(p, q, b)
            for m in metrics:
                m = m or MetricConfig(beta_denominator=n + 2, use_trace_term=True)
                before = spd.inner(p, a, b, m)
                after = spd.inner(q, ta, tb, m)
                worst = max(worst, abs(after - before) / max(1.0, abs(before)))
    return worst


def check_transport_operator(rng, sizes, trials):
    worst = 0.0
    for n in sizes:
        for _ in range(trials):
            p = spd.random_spd(n, rng)
            q = spd.random_spd(n, rng)
            e = spd.transport_operator(p, q)
            worst = max(worst, _rel(e @ e, q @ np.linalg.inv(p)))
    return worst


def check_gaussian_det(rng, sizes, trials):
    worst = 0.0
    for n in sizes:
        for k in (0, 1, 2, 5, 10):
            for _ in range(trials):
                mu = rng.normal(size=n)
                cov = spd.random_spd(n, rng)
                emb = embed_gaussian(mu, cov, GaussianEmbedConfig(k))
                worst = max(worst, abs(np.linalg.det(emb) - 1.0))
    return worst


def check_cholesky_space(rng, sizes, trials):
    worst = 0.0
    for n in sizes:
        for _ in range(trials):
            k = chol.random_lower_pos(n, rng)
            h = chol.random_lower_pos(n, rng)
            worst = max(worst, _rel(chol.tri_exp(k, chol.tri_log(k, h)), h))
            u = chol.project_tangent(rng.normal(size=(n, n)))
            v = chol.project_tangent(rng.normal(size=(n, n)))
            before = chol.tri_inner(k, u, v)
            after = chol.tri_inner(h, chol.tri_transport(k, h, u), chol.tri_transport(k, h, v))
            worst = max(worst, abs(after - before) / max(1.0, abs(before)))
    return worst


def check_group_axioms(rng, trials, shapes=((3, 1), (3, 3), (4, 2))):
    worst = 0.0
    for n_s, kp in shapes:
        cfg = lg.StatsEmbedConfig(kp)
        dim = n_s * (n_s + 1) // 2

        def draw():
            return lg.RiemannianGaussian(spd.random_spd(n_s, rng), spd.random_spd(dim, rng))

        ident = lg.identity_element(n_s)
        for _ in range(trials):
            x, y, z = draw(), draw(), draw()
            star = lambda a, b: lg.star_product(a, b, cfg)  # noqa: E731
            worst = max(worst, lg.deviation(star(x, ident), x), lg.deviation(star(ident, x), x))
            worst = max(worst, lg.deviation(star(star(x, y), z), star(x, star(y, z))))
            worst = max(worst, lg.deviation(star(x, lg.inverse_element(x, cfg)), ident))
            worst = max(worst, lg.iso_check(lg.to_group_element(x, cfg),
                                            lg.to_group_element(y, cfg), cfg))
    return worst


def check_frechet(rng, trials, n=4, size=10):
    """Largest ``|| sum log_mean(P_i) || / size`` over random sets."""
    worst = 0.0
    for _ in range(trials):
        pts = spd.random_spd(n, rng, size=(size,))
        mean = spd.frechet_mean(pts)
        worst = max(worst, float(np.linalg.norm(spd.log_map(mean[None], pts).sum(axis=0))) / size)
    return worst


def check_gradients(rng, sizes):
    """Largest relative finite-difference error of the spectral primitives and a toy loss."""
    from . import model as M

    worst = 0.0
    for n in sizes:
        m = spd.random_spd(n, rng, scale=0.5)
        w = rng.normal(size=(n, n))
        for kind in ("log", "exp", "sqrt", "inv_sqrt"):
            worst = max(worst, ad.check_grad(lambda x, kind=kind: ad.sum_(ad.matrix_fn(x, kind) * w), m))
        worst = max(worst, ad.check_grad(lambda x: ad.sum_(ad.cholesky(x) * w), m))
    topo = toy_topology()
    cfg = M.GeomNetConfig(d=3, n_clusters=2, k=1, k_prime=1, n_classes=2)
    seqs = [SkeletonSequence(rng.normal(size=(5, 8, 3)), i % 2) for i in range(2)]
    params = M.init_params(cfg, int(rng.integers(2 ** 31)))
    _, grads, state = M.euclidean_grads(seqs, [0, 1], topo, params, cfg, names=["fc_w"])

    def loss(x):
        return M.loss_fn(seqs, [0, 1], topo, {**params, "fc_w": x}, cfg, state)[0]

    fd = ad.numeric_grad(loss, params["fc_w"], 1e-4)
    worst = max(worst, float(np.max(np.abs(grads["fc_w"] - fd) / (np.abs(fd) + 1e-8))))
    return worst


def run_selfcheck(seed=0, sizes=(2, 3, 4), trials=20, transport=spd.parallel_transport):
    """Run every family; returns a list of :class:`FamilyResult`.

    ``transport`` replaces the parallel transport under test (used to check
    that a broken formula is caught).
    """
    rng = np.random.default_rng(seed)
    sizes = tuple(sizes)
    return [
        FamilyResult("spd_exp_log", check_exp_log(rng, sizes, trials), 1e-8),
        FamilyResult("transport_isometry", check_transport(rng, sizes, trials, transport), 1e-8),
        FamilyResult("transport_operator", check_transport_operator(rng, sizes, trials), 1e-8),
        FamilyResult("gaussian_determinant", check_gaussian_det(rng, sizes, trials), 1e-6),
        FamilyResult("cholesky_space", check_cholesky_space(rng, sizes, trials), 1e-10),
        FamilyResult("group_axioms", check_group_axioms(rng, trials), 1e-8),
        FamilyResult("frechet_stationarity", check_frechet(rng, trials), 1e-5),
        FamilyResult("gradients", check_gradients(rng, sizes), 1e-4),
    ]


def format_report(results) -> str:
    lines = [f"{'family':<24}{'max deviation':>16}{'tolerance':>12}  result"]
    for r in results:
        lines.append(f"{r.name:<24}{r.max_deviation:>16.3e}{r.tolerance:>12.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
