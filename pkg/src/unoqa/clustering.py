"""Two-way clustering of reduced representations and the cluster-to-grade map."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset_io import QualityGrade
from .errors import AssignmentError, NumericError

log = logging.getLogger(__name__)

MAX_ITER = 10000
N_CLUSTERS = 2


@dataclass
class ClusterModel:
    method: str
    labels: np.ndarray
    k: int = N_CLUSTERS
    seed: int = 0
    max_iter: int = MAX_ITER
    centroids: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    means: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None
    wcss: Optional[float] = None
    # per-iteration logs: WCSS (kmeans, best restart), log-likelihood (gmm),
    # merge costs (hierarchy)
    history: list[float] = field(default_factory=list, repr=False)
    restarts: list[list[float]] = field(default_factory=list, repr=False)
    n_fit: int = 0

    def predict(self, points) -> np.ndarray:
        X = _as_points(points)
        if self.method == "kmeans":
            return _sqdist(X, self.centroids).argmin(axis=1)
        if self.method == "gmm":
            return _log_resp(X, self.weights, self.means, self.covariances)[0].argmax(axis=1)
        if len(X) != self.n_fit:
            raise ValueError("hierarchical clustering only labels the batch it was fitted on")
        return self.labels


def _as_points(points) -> np.ndarray:
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _sqdist(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def wcss(X, labels, centroids) -> float:
    return float(((X - centroids[labels]) ** 2).sum())


def _kmeans_pp(X, k, rng):
    n = len(X)
    centres = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sqdist(X, np.array(centres)).min(axis=1)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centres.append(X[idx])
    return np.array(centres)


def _lloyd(X, centres, max_iter):
    k = len(centres)
    assign = _sqdist(X, centres).argmin(axis=1)
    history = []
    for _ in range(max_iter):
        labels = assign.copy()
        for j in range(k):
            if not np.any(labels == j):
                # reseed an empty cluster at the point farthest from its centroid
                far = int(np.argmax(((X - centres[labels]) ** 2).sum(axis=1)))
                labels[far] = j
        centres = np.array([X[labels == j].mean(axis=0) for j in range(k)])
        history.append(wcss(X, labels, centres))
        new = _sqdist(X, centres).argmin(axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    return _hartigan(X, labels, centres, history, max_iter)


def _hartigan(X, labels, centres, history, max_iter):
    """Single-point transfers that lower WCSS; escapes Lloyd fixed points."""
    k = len(centres)
    counts = np.bincount(labels, minlength=k).astype(float)
    # gains below rounding noise of the data magnitude would cycle forever
    floor = 1e-12 * float(np.mean(X ** 2))
    moved, passes = True, 0
    while moved and passes < max_iter:
        moved, passes = False, passes + 1
        for i in range(len(X)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d2 = ((centres - X[i]) ** 2).sum(axis=1)
            gain = counts / (counts + 1) * d2
            loss = counts[a] / (counts[a] - 1) * d2[a]
            gain[a] = np.inf
            b = int(np.argmin(gain))
            if loss - gain[b] > floor + 1e-12 * loss:
                centres[a] = (counts[a] * centres[a] - X[i]) / (counts[a] - 1)
                centres[b] = (counts[b] * centres[b] + X[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
        if moved:
            centres = np.array([X[labels == j].mean(axis=0) for j in range(k)])
            history.append(wcss(X, labels, centres))
    return labels, centres, history


def kmeans_fit(points, seed: int = 0, k: int = N_CLUSTERS, n_init: int = 10,
               max_iter: int = MAX_ITER) -> ClusterModel:
    """k-means++ seeding, Lloyd iterations polished by single-point transfers,
    best of ``n_init`` restarts by WCSS."""
    X = _as_points(points)
    if len(X) < k:
        raise ValueError(f"need at least {k} points, got {len(X)}")
    rng = np.random.default_rng(seed)
    best = None
    restarts = []
    for _ in range(n_init):
        labels, centres, hist = _lloyd(X, _kmeans_pp(X, k, rng), max_iter)
        restarts.append(hist)
        if best is None or hist[-1] < best[2][-1]:
            best = (labels, centres, hist)
    labels, centres, hist = best
    return ClusterModel("kmeans", labels, k, seed, max_iter, centroids=centres, wcss=hist[-1],
                        history=hist, restarts=restarts, n_fit=len(X))


def _initial_dissimilarity(X, linkage):
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    if linkage == "ward":
        # half squared distance = increase in error sum of squares for singletons
        return 0.5 * sq
    if linkage in ("average", "complete"):
        return np.sqrt(sq)
    raise ValueError(f"unknown linkage {linkage!r}")


def _lance_williams(linkage, dik, djk, dij, ni, nj, nk):
    if linkage == "ward":
        return ((ni + nk) * dik + (nj + nk) * djk - nk * dij) / (ni + nj + nk)
    if linkage == "average":
        return (ni * dik + nj * djk) / (ni + nj)
    return np.maximum(dik, djk)


def hierarchy_fit(points, linkage: str = "ward", k: int = N_CLUSTERS) -> ClusterModel:
    """Agglomerative clustering cut at ``k`` clusters.

    Each cluster is represented by its smallest member index; among equal
    merge costs the lexicographically smallest (i, j) pair merges first.
    ``history`` holds the merge costs in order.
    """
    X = _as_points(points)
    n = len(X)
    if n < 2 or n < k:
        raise ValueError(f"hierarchical clustering needs at least {max(2, k)} points")
    D = _initial_dissimilarity(X, linkage)
    D[np.tril_indices(n)] = np.inf  # only i < j is meaningful
    size = np.ones(n)
    active = np.ones(n, dtype=bool)
    parent = np.arange(n)
    nn_idx = np.argmin(D, axis=1)
    nn_dist = D[np.arange(n), nn_idx]
    costs = []

    def refresh(r):
        nn_idx[r] = int(np.argmin(D[r]))
        nn_dist[r] = D[r, nn_idx[r]]

    for _ in range(n - k):
        i = int(np.argmin(np.where(active, nn_dist, np.inf)))
        j = int(nn_idx[i])
        dij = D[i, j]
        costs.append(float(dij))
        others = np.flatnonzero(active)
        others = others[(others != i) & (others != j)]
        # D is stored upper-triangular; read d(i, m), d(j, m) symmetrically
        dik = np.where(others < i, D[others, i], D[i, others])
        djk = np.where(others < j, D[others, j], D[j, others])
        new = _lance_williams(linkage, dik, djk, dij, size[i], size[j], size[others])
        lo, hi = others[others < i], others[others > i]
        D[lo, i] = new[others < i]
        D[i, hi] = new[others > i]
        D[j, :] = np.inf
        D[:, j] = np.inf
        active[j] = False
        nn_dist[j] = np.inf
        size[i] += size[j]
        parent[parent == j] = i
        refresh(i)
        for r in lo:
            if nn_idx[r] in (i, j):
                refresh(r)
            elif D[r, i] < nn_dist[r] or (D[r, i] == nn_dist[r] and i < nn_idx[r]):
                nn_idx[r], nn_dist[r] = i, D[r, i]
        for r in others[(others > i) & (others < j)]:
            if nn_idx[r] == j:
                refresh(r)
    # label clusters in order of their smallest member
    reps = sorted(set(parent.tolist()))
    labels = np.array([reps.index(p) for p in parent])
    return ClusterModel("hierarchy", labels, k, history=costs, n_fit=n,
                        centroids=np.array([X[labels == c].mean(axis=0) for c in range(k)]))


def _log_gauss(X, mean, cov):
    L = np.linalg.cholesky(cov)
    sol = np.linalg.solve(L, (X - mean).T)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (X.shape[1] * np.log(2 * np.pi) + logdet + (sol ** 2).sum(axis=0))


def _log_resp(X, weights, means, covs):
    with np.errstate(divide="ignore"):
        logp = np.stack([np.log(w) + _log_gauss(X, m, c) for w, m, c in zip(weights, means, covs)], axis=1)
    top = logp.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
    return logp - lse[:, None], float(lse.sum())


def _m_step(X, resp, ridge):
    nk = resp.sum(axis=0)
    weights = nk / len(X)
    means = (resp.T @ X) / np.maximum(nk, 1e-300)[:, None]
    covs = []
    for j in range(resp.shape[1]):
        diff = X - means[j]
        cov = (resp[:, j, None] * diff).T @ diff / max(nk[j], 1e-300)
        covs.append(cov + ridge * np.eye(X.shape[1]))
    return weights, means, np.array(covs)


def gmm_fit(points, seed: int = 0, k: int = N_CLUSTERS, ridge: float = 1e-6, tol: float = 1e-4,
            max_iter: int = MAX_ITER, init=None) -> ClusterModel:
    """EM for a full-covariance Gaussian mixture.

    Starts from the k-means partition unless ``init`` = (weights, means,
    covariances) is given. ``history`` holds the log-likelihood evaluated at
    the start of every EM iteration.
    """
    X = _as_points(points)
    n, d = X.shape
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    if n <= d:
        log.warning("GMM with %d points in %d dims: covariances are dominated by the ridge", n, d)
    if init is None:
        km = kmeans_fit(X, seed=seed, k=k)
        resp = np.eye(k)[km.labels]
        weights, means, covs = _m_step(X, resp, ridge)
    else:
        weights, means, covs = (np.array(a, dtype=np.float64) for a in init)
    history = []
    for _ in range(max_iter):
        try:
            log_resp, ll = _log_resp(X, weights, means, covs)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"GMM covariance lost positive definiteness: {exc}") from exc
        if not np.isfinite(ll):
            raise NumericError("GMM log-likelihood is not finite")
        history.append(ll)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        weights, means, covs = _m_step(X, np.exp(log_resp), ridge)
    labels = log_resp.argmax(axis=1)
    return ClusterModel("gmm", labels, k, seed, max_iter, weights=weights, means=means,
                        covariances=covs, history=history, n_fit=n)


def fit_clusters(points, method: str, seed: int = 0, linkage: str = "ward") -> ClusterModel:
    if method == "kmeans":
        return kmeans_fit(points, seed=seed)
    if method == "hierarchy":
        return hierarchy_fit(points, linkage=linkage)
    if method == "gmm":
        return gmm_fit(points, seed=seed)
    raise ValueError(f"unknown clustering method {method!r}")


@dataclass
class GradeAssignment:
    ids: list[str]
    clusters: np.ndarray
    grades: list[QualityGrade]
    ungradable_cluster: int

    def as_dict(self) -> dict[str, QualityGrade]:
        return dict(zip(self.ids, self.grades))


def assign_grades(model: ClusterModel, points, ids: Sequence[str], scores) -> GradeAssignment:
    """Map clusters to grades: the cluster with the higher mean score is Ungradable.

    Equal mean scores fall back to the larger mean distance from the pooled
    centroid.
    """
    X = _as_points(points)
    scores = np.asarray(scores, dtype=np.float64)
    if not (len(X) == len(ids) == len(scores)):
        raise ValueError("points, ids and scores differ in length")
    labels = model.predict(X)
    members = [np.flatnonzero(labels == c) for c in range(model.k)]
    empty = [c for c, m in enumerate(members) if len(m) == 0]
    if empty:
        raise AssignmentError(f"cluster(s) {empty} received no samples")
    mean_score = [scores[m].mean() for m in members]
    centre = X.mean(axis=0)
    spread = [np.linalg.norm(X[m] - centre, axis=1).mean() for m in members]
    bad = max(range(model.k), key=lambda c: (mean_score[c], spread[c]))
    grades = [QualityGrade.UNGRADABLE if c == bad else QualityGrade.GRADABLE for c in labels]
    return GradeAssignment(list(ids), labels, grades, bad)
