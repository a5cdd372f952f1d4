"""K-means clustering with k-means++ seeding and BIC-based selection of K.

Cluster centers are the compression primitive for the latent generator: only
the centers of each domain are retained, never the raw latents.
"""

import numpy as np
from dataclasses import dataclass

from sklearn.base import BaseEstimator

from ._validation import as_generator, check_matrix


def pairwise_sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of A and rows of B."""
    d2 = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    return np.maximum(d2, 0.0)


def kmeans_plus_plus(X: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: subsequent centers drawn with probability ~ D^2."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = pairwise_sq_dists(X, X[chosen[-1]][None, :])[:, 0]
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a chosen center
            mask = np.ones(n, dtype=bool)
            mask[chosen] = False
            idx = int(np.flatnonzero(mask)[0]) if mask.any() else 0
        chosen.append(idx)
        d2 = np.minimum(d2, pairwise_sq_dists(X, X[idx][None, :])[:, 0])
    return X[chosen].copy()


class KMeans(BaseEstimator):
    """Lloyd's algorithm from k-means++ initialization.

    Each run iterates until the assignment fixpoint or ``max_iter``;
    within-cluster SSE is non-increasing across iterations. With ``n_init > 1``
    the best of several independently seeded runs (lowest SSE) is kept.
    Deterministic per ``random_state``.

    Attributes
    ----------
    cluster_centers_ : ndarray of shape (n_clusters, dim)
    labels_ : ndarray of shape (n_samples,)
    inertia_ : float
        Total within-cluster sum of squared distances.
    inertia_history_ : list of float
        SSE after each Lloyd iteration of the kept run.
    n_iter_ : int
    """

    def __init__(self, n_clusters: int = 10, max_iter: int = 100, n_init: int = 1,
                 random_state=None):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X):
        X = check_matrix(X)
        n = X.shape[0]
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.n_clusters > n:
            raise ValueError(f"n_clusters={self.n_clusters} exceeds n_samples={n}")
        if self.max_iter < 1 or self.n_init < 1:
            raise ValueError("max_iter and n_init must be >= 1")
        rng = as_generator(self.random_state)
        best = None
        for _ in range(self.n_init):
            run = self._single_run(X, rng)
            if best is None or run[2] < best[2]:
                best = run
        centers, labels, sse, history, n_iter = best
        self.cluster_centers_ = centers
        self.labels_ = labels
        self.inertia_ = sse
        self.inertia_history_ = history
        self.n_iter_ = n_iter
        return self

    def _single_run(self, X, rng):
        centers = kmeans_plus_plus(X, self.n_clusters, rng)
        labels = None
        history = []
        for iteration in range(1, self.max_iter + 1):
            d2 = pairwise_sq_dists(X, centers)
            new_labels = np.argmin(d2, axis=1)
            new_labels = self._fill_empty_clusters(X, centers, new_labels, d2)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for k in range(self.n_clusters):
                centers[k] = X[labels == k].mean(axis=0)
            history.append(float(np.sum((X - centers[labels]) ** 2)))
        return centers, labels, history[-1], history, iteration

    def _fill_empty_clusters(self, X, centers, labels, d2):
        counts = np.bincount(labels, minlength=self.n_clusters)
        for k in np.flatnonzero(counts == 0):
            # steal the point currently farthest from its own center
            current = d2[np.arange(X.shape[0]), labels]
            far = int(np.argmax(current))
            centers[k] = X[far]
            labels[far] = k
            d2[:, k] = pairwise_sq_dists(X, centers[k][None, :])[:, 0]
            counts = np.bincount(labels, minlength=self.n_clusters)
        return labels

    def predict(self, X):
        X = check_matrix(X)
        return np.argmin(pairwise_sq_dists(X, self.cluster_centers_), axis=1)


def bic_score(n_samples: int, n_features: int, sse: float, cluster_sizes) -> float:
    """BIC for K-means viewed as a spherical Gaussian mixture with shared
    maximum-likelihood variance ``sse / (n * d)``.

    The log-likelihood includes the mixing-proportion mass term
    ``sum_k n_k log(n_k / n)`` (the x-means criterion); without it, splitting
    any Gaussian cluster always looks favorable. Lower is better.
    """
    cluster_sizes = np.asarray([c for c in cluster_sizes if c > 0], dtype=np.float64)
    n_clusters = cluster_sizes.shape[0]
    variance = sse / (n_samples * n_features)
    variance = max(variance, np.finfo(np.float64).tiny)
    log_likelihood = (
        float(np.sum(cluster_sizes * np.log(cluster_sizes / n_samples)))
        - 0.5 * n_samples * n_features * (np.log(2.0 * np.pi * variance) + 1.0)
    )
    n_params = n_clusters * (n_features + 1)
    return -2.0 * log_likelihood + n_params * np.log(n_samples)


@dataclass(frozen=True)
class KScanEntry:
    n_clusters: int
    bic: float
    model: KMeans


def select_k_bic(X, k_min: int, k_max: int, max_iter: int = 100, n_init: int = 1,
                 random_state=None):
    """Fit K-means for each K in ``[k_min, k_max]`` and pick the BIC minimizer.

    Ties break toward smaller K. Returns ``(k_star, entries)`` with one
    :class:`KScanEntry` per candidate K.
    """
    X = check_matrix(X)
    n = X.shape[0]
    if not 1 <= k_min <= k_max:
        raise ValueError(f"need 1 <= k_min <= k_max, got [{k_min}, {k_max}]")
    if k_max > n:
        raise ValueError(f"k_max={k_max} exceeds n_samples={n}")
    seeds = np.random.SeedSequence(random_state).spawn(k_max - k_min + 1)
    entries = []
    for k, ss in zip(range(k_min, k_max + 1), seeds):
        model = KMeans(n_clusters=k, max_iter=max_iter, n_init=n_init,
                       random_state=np.random.default_rng(ss)).fit(X)
        sizes = np.bincount(model.labels_, minlength=k)
        entries.append(KScanEntry(k, bic_score(n, X.shape[1], model.inertia_, sizes), model))
    best = min(entries, key=lambda e: (e.bic, e.n_clusters))
    return best.n_clusters, entries
