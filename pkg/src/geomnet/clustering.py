"""Seeded K-means for pooling joint features into clusters."""

import logging

import numpy as np

logger = logging.getLogger(__name__)


def _sq_dists(x, centers):
    return (np.sum(x ** 2, axis=1)[:, None] - 2 * x @ centers.T
            + np.sum(centers ** 2, axis=1)[None, :])


def kmeans_pp_init(x, n_clusters, rng):
    centers = [x[rng.integers(len(x))]]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, n_clusters):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def lloyd(x, centers, max_iter=100):
    labels = None
    for _ in range(max_iter):
        # argmin keeps the lowest index on ties
        new = np.argmin(_sq_dists(x, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return labels, centers


def merge_small(x, labels, min_size=2):
    """Fold clusters with fewer than ``min_size`` members into the nearest larger one.

    Returns labels renumbered to ``0 .. n_effective - 1`` in order of the
    original cluster index.
    """
    ids, counts = np.unique(labels, return_counts=True)
    centroids = {j: x[labels == j].mean(axis=0) for j in ids}
    big = [j for j, c in zip(ids, counts) if c >= min_size]
    labels = labels.copy()
    if not big:
        return np.zeros_like(labels)
    for j, c in zip(ids, counts):
        if c >= min_size:
            continue
        d = [np.sum((centroids[j] - centroids[b]) ** 2) for b in big]
        labels[labels == j] = big[int(np.argmin(d))]
    remap = {b: i for i, b in enumerate(sorted(big))}
    return np.array([remap[j] for j in labels])


def cluster_features(x, n_clusters, seed, max_iter=100):
    """Partition the rows of ``x`` into at most ``n_clusters`` groups of size >= 2.

    K-means++ seeding from ``seed`` followed by Lloyd iterations.  With fewer
    than ``2 * n_clusters`` distinct rows the cluster count drops to half the
    number of distinct rows.

    Returns
    -------
    labels : ndarray of int, shape (len(x),)
        Values in ``0 .. n_effective - 1``.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        raise ValueError("need at least two feature vectors to cluster")
    n_distinct = len(np.unique(x, axis=0))
    k = n_clusters
    if n_distinct < 2 * n_clusters:
        k = max(1, n_distinct // 2)
        logger.warning("only %d distinct feature vectors; using %d clusters instead of %d",
                       n_distinct, k, n_clusters)
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(x, k, rng)
    labels, _ = lloyd(x, centers, max_iter)
    return merge_small(x, labels)
