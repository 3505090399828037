"""Localization descriptor kernels: k-means vocabulary, VLAD, PCA reduction.

A feature set is a plain (n, D) float array of dense patch features for one
image. The pipeline is: fit a K-centroid vocabulary on pooled features,
aggregate each image's features into a K*D VLAD descriptor, then project to
r dimensions with a PCA transform fit on the (normalized) descriptors.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VladVocabulary:
    centroids: np.ndarray  # (K, D)

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


@dataclass(frozen=True)
class PcaTransform:
    mean: np.ndarray  # (N,)
    basis: np.ndarray  # (r, N), orthonormal rows

    @property
    def dim_in(self):
        return self.basis.shape[1]

    @property
    def dim_out(self):
        return self.basis.shape[0]


def kmeans(points, k, seed, max_iter=100, tol=1e-4):
    """Lloyd's k-means with k-means++ seeding.

    Returns (centroids, inertia_history). Deterministic for a given seed;
    stops when the relative inertia improvement drops below ``tol``. Empty
    clusters keep their previous centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise ValueError("no features to cluster")
    if n < k:
        raise ValueError(f"need at least k={k} features, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_seed(points, k, rng)
    history = []
    prev = None
    for _ in range(max_iter):
        d2 = _sq_distances(points, centroids)
        assign = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), assign].sum())
        history.append(inertia)
        for c in range(k):
            mask = assign == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
        if prev is not None:
            if prev == 0 or (prev - inertia) / prev < tol:
                break
        prev = inertia
    return centroids, history


def _kmeans_pp_seed(points, k, rng):
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total == 0:
            # all remaining mass at chosen centroids: pick uniformly
            centroids[c] = points[rng.integers(n)]
            continue
        idx = np.searchsorted(np.cumsum(d2), rng.random() * total)
        centroids[c] = points[min(idx, n - 1)]
        d2 = np.minimum(d2, np.sum((points - centroids[c]) ** 2, axis=1))
    return centroids


def _sq_distances(points, centroids):
    # (n, k) squared Euclidean distances, clipped against rounding
    d2 = (
        np.sum(points**2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def fit_vocabulary(sets, k, seed):
    """Cluster the pooled features of all sets into a K-centroid vocabulary."""
    sets = [np.asarray(s, dtype=np.float64) for s in sets]
    if not sets or all(s.shape[0] == 0 for s in sets):
        raise ValueError("no feature sets given")
    pooled = np.vstack([s for s in sets if s.shape[0] > 0])
    if not np.isfinite(pooled).all():
        raise ValueError("features contain non-finite values")
    centroids, _ = kmeans(pooled, k, seed)
    return VladVocabulary(centroids=centroids)


def vlad(features, vocab):
    """Aggregate one image's features into a (K*D,) VLAD descriptor.

    Hard assignment to the nearest centroid (ties to the lowest index),
    per-centroid residual sums, per-block L2 normalization, concatenation,
    global L2 normalization. Zero blocks and the all-zero descriptor are
    left as zeros.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("empty feature set")
    if features.shape[1] != vocab.dim:
        raise ValueError(
            f"feature dim {features.shape[1]} does not match vocabulary dim {vocab.dim}"
        )
    k, d = vocab.k, vocab.dim
    assign = np.argmin(_sq_distances(features, vocab.centroids), axis=1)
    blocks = np.zeros((k, d), dtype=np.float64)
    np.add.at(blocks, assign, features - vocab.centroids[assign])
    norms = np.linalg.norm(blocks, axis=1)
    nonzero = norms > 0
    blocks[nonzero] /= norms[nonzero][:, None]
    desc = blocks.reshape(-1)
    total = np.linalg.norm(desc)
    if total > 0:
        desc = desc / total
    return desc


def fit_pca(descriptors, r):
    """Fit a mean + top-r right-singular-vector projection basis.

    No whitening. Raises when the centered data has rank below r. Basis row
    signs are canonicalized (largest-magnitude entry positive) so repeated
    fits serialize identically.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("descriptors must be a 2D array-like")
    n, dim = X.shape
    if r < 1 or r > dim:
        raise ValueError(f"r must be in [1, {dim}], got {r}")
    if n < r:
        raise ValueError(f"need at least r={r} samples, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    rank_tol = max(n, dim) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    if s.size < r or s[r - 1] <= rank_tol:
        raise ValueError(f"data rank below r={r}; cannot fit the projection")
    basis = vt[:r].copy()
    flip = np.sign(basis[np.arange(r), np.argmax(np.abs(basis), axis=1)])
    basis *= flip[:, None]
    return PcaTransform(mean=mean, basis=basis)


def reduce(descriptor, transform):
    """Project a descriptor onto the PCA basis and L2-normalize."""
    v = np.asarray(descriptor, dtype=np.float64)
    if v.shape != transform.mean.shape:
        raise ValueError(
            f"descriptor dim {v.shape} does not match transform dim {transform.mean.shape}"
        )
    out = transform.basis @ (v - transform.mean)
    n = np.linalg.norm(out)
    return out / n if n > 0 else out
