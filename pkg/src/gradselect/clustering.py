"""Lloyd's K-Means with k-means++ seeding, used on layerwise Data SI features."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    largest_cluster: int
    largest_fraction: float
    n_iter: int = 0
    inertia_path: list[float] = field(default_factory=list)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.centroids.shape[0])


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; falls back to uniform picks once all mass is zero."""
    m = X.shape[0]
    chosen = [int(rng.integers(m))]
    closest = _sq_dists(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(m, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(m), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[idx:idx + 1])[:, 0])
    return X[chosen].copy()


def _update_centroids(X, labels, old, k):
    centroids = np.empty_like(old)
    counts = np.bincount(labels, minlength=k)
    for j in range(k):
        if counts[j]:
            centroids[j] = X[labels == j].mean(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        # farthest points from their own centroid, each used at most once
        own = _sq_dists(X, old)[np.arange(X.shape[0]), labels]
        order = np.argsort(-own, kind="stable")
        for j, idx in zip(empty, order):
            centroids[j] = X[idx]
    return centroids


def kmeans(features, k: int, seed: int = 0, max_iters: int = 100, standardize: bool = False) -> ClusterResult:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    m = X.shape[0]
    if k < 1 or max_iters < 1:
        raise ValueError("k and max_iters must be >= 1")
    if m < k:
        raise ValueError(f"cannot form {k} clusters from {m} samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if standardize:
        std = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(std > 0, std, 1.0)

    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(X, k, rng)
    d = _sq_dists(X, centroids)
    labels = d.argmin(axis=1)
    path = [float(d[np.arange(m), labels].sum())]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        centroids = _update_centroids(X, labels, centroids, k)
        d = _sq_dists(X, centroids)
        new_labels = d.argmin(axis=1)
        path.append(float(d[np.arange(m), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    labels = new_labels

    sizes = np.bincount(labels, minlength=k)
    largest = int(sizes.argmax())
    return ClusterResult(
        assignments=labels,
        centroids=centroids,
        inertia=path[-1],
        largest_cluster=largest,
        largest_fraction=sizes[largest] / m,
        n_iter=n_iter,
        inertia_path=path,
    )


def largest_cluster_mask(result: ClusterResult) -> np.ndarray:
    """True for samples outside the largest cluster."""
    return result.assignments != result.largest_cluster


class KMeans(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`kmeans`.

    Parameters
    ----------
    n_clusters : int, default=10
    max_iter : int, default=100
    standardize : bool, default=False
        z-score each feature column before clustering.
    random_state : int, default=0
    """

    def __init__(self, n_clusters=10, max_iter=100, standardize=False, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            std = X.std(axis=0)
            self.scale_ = np.where(std > 0, std, 1.0)
        res = kmeans(
            self._scale(X), self.n_clusters, seed=self.random_state, max_iters=self.max_iter
        )
        self.result_ = res
        self.labels_ = res.assignments
        self.cluster_centers_ = res.centroids
        self.inertia_ = res.inertia
        self.inertia_path_ = np.asarray(res.inertia_path)
        self.n_iter_ = res.n_iter
        self.n_features_in_ = X.shape[1]
        return self

    def _scale(self, X):
        return (X - self.mean_) / self.scale_ if self.standardize else X

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        return _sq_dists(self._scale(X), self.cluster_centers_).argmin(axis=1)
