"""GeomNet: skeleton graph convolution, Gaussian pooling, SPD statistics and
triangular embeddings feeding a softmax classifier.

Layers work on batches.  Per-sequence steps (convolution, clustering,
Gaussian moments) run sequence by sequence; the SPD statistics and
everything after them are vectorized over the batch, with padded cluster
slots carrying zero weight.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import cholesky_space as chol
from . import spd
from .autodiff import Tape, value_of
from .clustering import cluster_features
from .gaussian import GaussianEmbedConfig, embed_gaussian
from .lie_group import RiemannianGaussian, StatsEmbedConfig, to_group_element
from .optim import EUCLIDEAN, CholeskyManifold, SPDManifold
from .spd import AIRM, MetricConfig
from .topology import SkeletonTopology

logger = logging.getLogger(__name__)

STREAMS = ("arms", "legs")


@dataclass(frozen=True)
class GeomNetConfig:
    d: int = 9
    n_clusters: int = 180
    k: int = 2
    k_prime: int = 3
    n_classes: int = 8
    kmeans_seed: int = 0
    kmeans_max_iter: int = 100
    use_pt: bool = True
    use_ltml: bool = True
    metric: MetricConfig = AIRM
    gauss_reg: float = 1e-5
    cov_reg: float = 1e-5
    reg_floor: float = 1e-8
    frechet_tol: float = 1e-6
    frechet_max_iter: int = 50
    frechet_method: str = "newton"
    stop_mean_gradient: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be >= 2")
        if self.k < 0 or self.k_prime < 0:
            raise ValueError("k and k_prime must be non-negative")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.frechet_method not in ("newton", "fixed_point"):
            raise ValueError("frechet_method must be 'newton' or 'fixed_point'")

    @property
    def spd_dim(self):
        """Size of the Gaussian embedding matrices."""
        return self.d + self.k

    @property
    def cov_dim(self):
        n = self.spd_dim
        return n * (n + 1) // 2

    @property
    def tri_dim(self):
        return self.cov_dim + self.k_prime

    @property
    def feature_dim(self):
        m = self.tri_dim
        return 2 * m * (m + 1) // 2


@dataclass
class ForwardState:
    """Choices made during a forward pass that gradients treat as constants.

    ``schedules`` holds the accepted Frechet step sizes per stream, shape
    (steps, B)."""

    labels: list = field(default_factory=list)       # per sequence: {stream: labels}
    schedules: dict = field(default_factory=dict)    # stream -> Frechet step sizes
    used_pt: bool = True
    unconverged: int = 0


# -------------------------------------------------------------- parameters


def init_params(cfg: GeomNetConfig, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (3 + cfg.d))
    fan = cfg.feature_dim + cfg.n_classes
    params = {
        "conv": rng.uniform(-bound, bound, size=(3, 3, cfg.d, 3)),
        "fc_w": rng.uniform(-1, 1, size=(cfg.n_classes, cfg.feature_dim)) * np.sqrt(6.0 / fan),
        "fc_b": np.zeros(cfg.n_classes),
    }
    for s in STREAMS:
        params[f"pt_{s}"] = np.eye(cfg.spd_dim)
        params[f"lw_{s}"] = np.eye(cfg.tri_dim)
    return params


def param_manifolds(cfg: GeomNetConfig) -> dict:
    """Manifold of each trainable parameter; frozen ablation parameters are left out."""
    out = {"conv": EUCLIDEAN, "fc_w": EUCLIDEAN, "fc_b": EUCLIDEAN}
    for s in STREAMS:
        if cfg.use_pt:
            out[f"pt_{s}"] = SPDManifold(cfg.metric)
        if cfg.use_ltml:
            out[f"lw_{s}"] = CholeskyManifold()
    return out


def check_params(params, cfg: GeomNetConfig):
    expected = init_params(cfg)
    for name, val in expected.items():
        if name not in params:
            raise ValueError(f"missing parameter {name!r}")
        if np.shape(params[name]) != val.shape:
            raise ValueError(f"parameter {name!r} has shape {np.shape(params[name])}, "
                             f"config expects {val.shape}")
    for s in STREAMS:
        spd.check_spd(params[f"pt_{s}"], f"pt_{s}")
        chol.check_lower_pos(params[f"lw_{s}"], f"lw_{s}")


# ------------------------------------------------------------------ layers


def conv_inputs(coords, topo: SkeletonTopology):
    """Stack of neighbour-selected, time-shifted inputs, shape (F, K, 27).

    Channel ``(u * 3 + v) * 3 + c`` holds coordinate ``c`` of the relation-``v``
    neighbours at frame ``t + u - 1`` (zero outside the sequence).
    """
    x = np.asarray(coords, dtype=float)[:, topo.kept]
    n_frames, n_joints = x.shape[:2]
    padded = np.zeros((n_frames + 2, n_joints, 3))
    padded[1:-1] = x
    rel = topo.relations
    out = np.empty((n_frames, n_joints, 3, 3, 3))
    for u in range(3):
        shifted = padded[u:u + n_frames]
        for v in range(3):
            out[:, :, u, v, :] = np.einsum("ij,tjc->tic", rel[v], shifted)
    return out.reshape(n_frames, n_joints, 27)


def conv_layer(coords, topo: SkeletonTopology, weights):
    """Graph convolution over joints and adjacent frames.

    ``weights`` has shape (3, 3, d, 3): temporal offset, neighbour relation
    (closer to root / self / farther), output and input channels.
    Returns features of shape (F, K, d) for the kept joints.
    """
    z = conv_inputs(coords, topo)
    d = value_of(weights).shape[2]
    w = ad.reshape(ad.permute(weights, (0, 1, 3, 2)), (27, d))
    return z @ w


def stream_features(features, topo: SkeletonTopology, stream):
    pos = topo.arm_positions if stream == "arms" else topo.leg_positions
    feats = ad.getitem(features, (slice(None), pos))
    shape = value_of(feats).shape
    return ad.reshape(feats, (shape[0] * shape[1], shape[2]))


def gaussemb_layer(y, labels, n_slots, cfg: GaussianEmbedConfig):
    """Embed the Gaussian of each cluster of the rows of ``y``.

    Returns ``(points, weights)``: ``points`` has shape (n_slots, d+k, d+k)
    and unused slots hold the identity with weight 0.
    """
    yv = value_of(y)
    n, d = yv.shape
    onehot = np.zeros((n_slots, n))
    onehot[labels, np.arange(n)] = 1.0
    counts = onehot.sum(axis=1)
    active = counts >= 2
    safe = np.where(active, counts, 2.0)
    mu = (onehot @ y) / safe[:, None]
    centered = ad.reshape(y, (1, n, d)) - ad.reshape(mu, (n_slots, 1, d))
    cov = ad.transpose(centered * onehot[:, :, None]) @ centered / (safe - 1)[:, None, None]
    emb = embed_gaussian(mu, cov, cfg)
    size = value_of(emb).shape[-1]
    mask = active.astype(float)[:, None, None]
    return emb * mask + np.eye(size) * (1 - mask), active.astype(float)


def spdstats_layer(points, weights, target, cfg: GeomNetConfig, schedule=None):
    """Frechet mean and (transported) tangent covariance per batch element.

    ``target`` None selects the covariance without transport.
    Returns ``(RiemannianGaussian, FrechetInfo, covariance root)``.
    """
    src = value_of(points) if cfg.stop_mean_gradient else points
    mean, info = spd.frechet_mean(src, weights=weights, tol=cfg.frechet_tol,
                                  max_iter=cfg.frechet_max_iter, schedule=schedule,
                                  method=cfg.frechet_method, return_info=True, warn=False)
    if not np.all(info.converged):
        logger.debug("%d Frechet mean(s) stopped above tolerance (max residual %.3g)",
                     int(np.sum(~info.converged)), float(np.max(info.residual)))
    cov, root = spd.transported_covariance(points, mean, target, weights=weights,
                                           reg=cfg.cov_reg, reg_floor=cfg.reg_floor,
                                           return_root=True)
    return RiemannianGaussian(mean, cov), info, root


def spdstatsemb_layer(stats: RiemannianGaussian, cfg: GeomNetConfig, cov_root=None):
    return to_group_element(stats, StatsEmbedConfig(cfg.k_prime), cov_root)


def trilmap_layer(b, w):
    if value_of(b).shape[-1] != value_of(w).shape[-1]:
        raise ValueError("triangular weight does not match the embedding size")
    return b @ w


def triltoeud_layer(d):
    """``log(D D^T)``, evaluated from the singular values of ``D``."""
    return ad.gram_logm(d)


def prob_logits(e_arms, e_legs, w_fc, bias):
    feats = ad.concatenate([spd.vec_sym(e_arms, check=False),
                            spd.vec_sym(e_legs, check=False)], axis=-1)
    return feats @ ad.transpose(w_fc) + bias


def prob_layer(e_arms, e_legs, w_fc, bias):
    """Class probabilities from the two log-Euclidean features."""
    logits = value_of(prob_logits(e_arms, e_legs, w_fc, bias))
    shifted = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(shifted)
    return p / p.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------- network


def _as_batch(seqs):
    if hasattr(seqs, "coords"):
        return [seqs]
    return list(seqs)


def logits(seqs, topo: SkeletonTopology, params: dict, cfg: GeomNetConfig,
           state: ForwardState | None = None):
    """Forward pass up to the logits.

    ``params`` values may be arrays or tape variables.  Passing the
    ``state`` returned by an earlier call replays its cluster assignments
    and Frechet step schedules.

    Returns ``(logits, state)``; logits have shape (B, n_classes).
    """
    seqs = _as_batch(seqs)
    replay = state is not None
    if not replay:
        state = ForwardState(labels=[{} for _ in seqs], used_pt=cfg.use_pt)
    gcfg = GaussianEmbedConfig(cfg.k, cfg.gauss_reg, cfg.reg_floor)

    per_stream = {s: ([], []) for s in STREAMS}
    for i, seq in enumerate(seqs):
        coords = seq.coords if hasattr(seq, "coords") else seq
        feats = conv_layer(coords, topo, params["conv"])
        for s in STREAMS:
            y = stream_features(feats, topo, s)
            if replay:
                lab = state.labels[i][s]
            else:
                lab = cluster_features(value_of(y), cfg.n_clusters, cfg.kmeans_seed,
                                       cfg.kmeans_max_iter)
                state.labels[i][s] = lab
            pts, w = gaussemb_layer(y, lab, cfg.n_clusters, gcfg)
            per_stream[s][0].append(pts)
            per_stream[s][1].append(w)

    embedded = []
    for s in STREAMS:
        points = ad.stack(per_stream[s][0], axis=0)
        weights = np.stack(per_stream[s][1])
        target = params[f"pt_{s}"] if cfg.use_pt else None
        stats, info, root = spdstats_layer(points, weights, target, cfg,
                                           state.schedules.get(s) if replay else None)
        state.schedules[s] = info.schedule
        if not replay:
            state.unconverged += int(np.sum(~info.converged))
        b = spdstatsemb_layer(stats, cfg, root)
        d = trilmap_layer(b, params[f"lw_{s}"]) if cfg.use_ltml else b
        embedded.append(triltoeud_layer(d))
    return prob_logits(embedded[0], embedded[1], params["fc_w"], params["fc_b"]), state


def forward(seqs, topo, params, cfg, state=None):
    """Class probabilities, shape (B, n_classes)."""
    out, _ = logits(seqs, topo, params, cfg, state)
    out = value_of(out)
    shifted = out - out.max(axis=-1, keepdims=True)
    p = np.exp(shifted)
    return p / p.sum(axis=-1, keepdims=True)


def cross_entropy(logit_var, labels):
    labels = np.asarray(labels, dtype=int)
    logp = ad.log_softmax(logit_var)
    picked = ad.getitem(logp, (np.arange(len(labels)), labels))
    return -ad.sum_(picked) / len(labels)


def loss_fn(seqs, labels, topo, params, cfg, state=None):
    labels = np.asarray(labels, dtype=int)
    if np.any(labels < 0) or np.any(labels >= cfg.n_classes):
        raise ValueError(f"labels must lie in [0, {cfg.n_classes})")
    out, state = logits(seqs, topo, params, cfg, state)
    return cross_entropy(out, labels), state


def euclidean_grads(seqs, labels, topo, params, cfg, state=None, names=None):
    """Mean cross-entropy and its Euclidean gradient for each named parameter."""
    names = sorted(param_manifolds(cfg)) if names is None else names
    with Tape() as tape:
        leaves = {n: tape.watch(params[n], n) for n in names}
        live = {**params, **leaves}
        loss, state = loss_fn(seqs, labels, topo, live, cfg, state)
    grads = ad.backward(tape, loss)
    out = {n: grads.get(v, np.zeros_like(v.value)) for n, v in leaves.items()}
    return float(value_of(loss)), out, state


def loss_and_backward(seqs, labels, topo, params, cfg, state=None):
    """Mean cross-entropy and the gradient of every trainable parameter.

    Euclidean parameters get plain gradients; SPD transport targets and
    triangular weights get Riemannian gradients (tangent vectors at the
    current value).
    """
    manifolds = param_manifolds(cfg)
    loss, egrads, state = euclidean_grads(seqs, labels, topo, params, cfg, state,
                                          sorted(manifolds))
    rgrads = {n: manifolds[n].egrad_to_rgrad(params[n], g) for n, g in egrads.items()}
    return loss, rgrads, state


def with_config(cfg: GeomNetConfig, **changes) -> GeomNetConfig:
    return replace(cfg, **changes)
