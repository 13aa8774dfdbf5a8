"""Clustering evaluation: optimal matching, All/Old/New accuracy,
semi-supervised spherical k-means and estimation of the cluster count."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import silhouette_score

from . import linalg


class ClusterError(ValueError):
    pass


# matching

def _optimal_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian(cost) -> tuple[np.ndarray, np.ndarray, float]:
    """Minimum-cost one-to-one assignment of ``min(n, m)`` pairs.

    Among optimal assignments the lexicographically smallest (column
    sequence read row by row, on the shorter side) is returned.
    Returns ``(rows, cols, total_cost)``.
    """
    cost = linalg.as_matrix(cost, "cost")
    if cost.size == 0:
        raise ClusterError("empty cost matrix")
    flipped = cost.shape[0] > cost.shape[1]
    c = cost.T if flipped else cost
    n, m = c.shape
    best = _optimal_cost(c)
    tol = 1e-9 * max(1.0, abs(best), float(np.abs(c).max()))
    chosen: list[int] = []
    spent = 0.0
    free = list(range(m))
    for i in range(n):
        for j in free:
            rest = [col for col in free if col != j]
            total = spent + c[i, j] + _optimal_cost(c[np.ix_(range(i + 1, n), rest)])
            if total <= best + tol:
                chosen.append(j)
                spent += c[i, j]
                free = rest
                break
        else:  # pragma: no cover - the optimum always admits a completion
            raise ClusterError("failed to reconstruct an optimal assignment")
    rows, cols = np.arange(n), np.array(chosen, dtype=np.intp)
    if flipped:
        order = np.argsort(cols)
        rows, cols = cols[order], rows[order]
    return rows, cols, float(cost[rows, cols].sum())


def _dense(x) -> tuple[np.ndarray, np.ndarray]:
    values, inv = np.unique(np.asarray(x), return_inverse=True)
    return values, inv.reshape(-1)


def cluster_accuracy(pred, truth, known_mask=None) -> tuple[float, float, float]:
    """Accuracy after the best one-to-one cluster/class matching.

    Samples whose cluster or class is left unmatched count as wrong.  The
    old/new figures reuse the single global matching, restricted to the
    known-class and novel-class samples.  Among equally good matchings the
    one with more known-class hits is used.  An empty subset gives ``nan``.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ClusterError(f"pred and truth differ in length ({pred.size} vs {truth.size})")
    if pred.size == 0:
        raise ClusterError("nothing to score")
    known_mask = np.ones(pred.shape, bool) if known_mask is None else np.asarray(known_mask, bool)
    if known_mask.shape != pred.shape:
        raise ClusterError("known_mask length mismatch")
    _, p = _dense(pred)
    _, t = _dense(truth)
    table = np.zeros((p.max() + 1, t.max() + 1))
    np.add.at(table, (p, t), 1)
    known_hits = np.zeros_like(table)
    np.add.at(known_hits, (p[known_mask], t[known_mask]), 1)
    # integer weights: maximise matched samples first, then known-class
    # matches, so the old/new split does not depend on cluster ids
    rows, cols, _ = hungarian(-(table * (pred.size + 1) + known_hits))
    mapping = np.full(table.shape[0], -1)
    mapping[rows] = cols
    correct = mapping[p] == t

    def frac(sel):
        return float(correct[sel].mean()) if sel.any() else math.nan

    return float(correct.mean()), frac(known_mask), frac(~known_mask)


# semi-supervised k-means

@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    iterations: int
    objective_history: list[float] = field(default_factory=list, repr=False)
    cluster_of_label: dict = field(default_factory=dict)
    acc_all: float = math.nan
    acc_old: float = math.nan
    acc_new: float = math.nan


def _cos_dist(z, centroids):
    return 1.0 - z @ centroids.T


def _normalize(v, fallback):
    norm = np.linalg.norm(v)
    return v / norm if norm > 1e-12 else fallback


def _kmeanspp(points, chosen, count, rng):
    """Extend ``chosen`` centroids by ``count`` k-means++ draws from ``points``."""
    centroids = list(chosen)
    for _ in range(count):
        if centroids:
            d = np.clip(_cos_dist(points, np.array(centroids)).min(axis=1), 0.0, None) ** 2
        else:
            d = np.ones(len(points))
        total = d.sum()
        idx = rng.choice(len(points), p=d / total) if total > 1e-15 else rng.integers(len(points))
        centroids.append(points[idx])
    return np.array(centroids)


def ss_kmeans(z, labeled_idx, labels, k: int, max_iter: int = 300, seed: int = 0,
              n_init: int = 1) -> ClusterResult:
    """Spherical k-means with labeled samples pinned to their class cluster.

    Cluster ``i`` (for ``i`` below the number of distinct labels) belongs
    to the ``i``-th smallest label value.  Novel centroids start from a
    seeded k-means++ over the unlabeled points; with ``n_init > 1`` the
    restart with the lowest final objective is kept.
    """
    runs = [_ss_kmeans_once(z, labeled_idx, labels, k, max_iter, np.random.default_rng([seed, r]))
            for r in range(max(1, n_init))]
    return min(runs, key=lambda r: r.objective_history[-1])


def _ss_kmeans_once(z, labeled_idx, labels, k, max_iter, rng) -> ClusterResult:
    z = linalg.unit_rows(z)
    n = z.shape[0]
    labeled_idx = np.asarray(labeled_idx, dtype=np.intp).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if labeled_idx.shape != labels.shape:
        raise ClusterError("labeled_idx and labels differ in length")
    if k > n:
        raise ClusterError(f"K={k} exceeds the {n} samples")
    classes, lab_cluster = _dense(labels) if labels.size else (np.array([]), np.array([], dtype=np.intp))
    if k < len(classes):
        raise ClusterError(f"K={k} is smaller than the {len(classes)} labeled classes")
    pinned = np.full(n, -1)
    pinned[labeled_idx] = lab_cluster
    free = pinned < 0

    known = [_normalize(z[pinned == c].mean(axis=0), z[pinned == c][0]) for c in range(len(classes))]
    pool = z[free] if free.any() else z
    centroids = _kmeanspp(pool, known, k - len(classes), rng)

    assign = np.where(free, -1, pinned)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        new = pinned.copy()
        if free.any():
            new[free] = np.argmin(_cos_dist(z[free], centroids), axis=1)
        new = _fill_empty(z, new, free, centroids, k)
        changed = np.any(new != assign)
        assign = new
        for c in range(k):
            members = z[assign == c]
            centroids[c] = _normalize(members.sum(axis=0), centroids[c])
        history.append(float(_cos_dist(z, centroids)[np.arange(n), assign].sum()))
        if not changed:
            break
    return ClusterResult(assign, centroids, it, history, {c.item(): i for i, c in enumerate(classes)})


def _fill_empty(z, assign, free, centroids, k):
    """Move the worst-fitting free point into each empty cluster."""
    assign = assign.copy()
    for c in range(k):
        if np.any(assign == c):
            continue
        counts = np.bincount(assign, minlength=k)
        movable = free & (counts[assign] > 1)
        if not movable.any():
            continue
        dist = _cos_dist(z, centroids)[np.arange(len(z)), assign]
        dist = np.where(movable, dist, -np.inf)
        far = int(np.argmax(dist))
        if dist[far] <= 1e-12:  # every point sits on its centroid already
            break
        assign[far] = c
        centroids[c] = z[far]
    return assign


def score(result: ClusterResult, truth, known_mask, eval_mask) -> ClusterResult:
    """Attach All/Old/New accuracy measured on ``eval_mask`` samples."""
    eval_mask = np.asarray(eval_mask, bool)
    a, o, nw = cluster_accuracy(result.assignments[eval_mask], np.asarray(truth)[eval_mask],
                                np.asarray(known_mask, bool)[eval_mask])
    return replace(result, acc_all=a, acc_old=o, acc_new=nw)


# choosing K

def _silhouette(z, assign) -> float:
    n_labels = len(np.unique(assign))
    if n_labels < 2 or n_labels > len(z) - 1:
        return 0.0
    if np.allclose(z, z[0]):
        return 0.0
    return float(silhouette_score(z, assign, metric="cosine"))


@dataclass
class KEstimate:
    k: int
    scores: dict  # K -> (held-out accuracy, silhouette)


def estimate_k(z, labeled_idx, labels, k_min: int, k_max: int, seed: int = 0,
               max_iter: int = 300) -> KEstimate:
    """Scan ``K`` in ``[k_min, k_max]``.

    For every ``K`` the clustering sees labels for only half of each
    labeled class; the other half is scored with matched accuracy.  The
    best accuracy wins; ties go to the higher cosine silhouette, then to
    the smaller ``K``.
    """
    labeled_idx = np.asarray(labeled_idx, dtype=np.intp)
    labels = np.asarray(labels)
    n = len(z)
    if k_min > k_max:
        raise ClusterError(f"empty scan range [{k_min}, {k_max}]")
    if k_max > n:
        raise ClusterError(f"k_max={k_max} exceeds the {n} samples")
    if k_min < len(np.unique(labels)):
        raise ClusterError("k_min is below the number of labeled classes")
    rng = np.random.default_rng(seed)
    keep, hold = [], []
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        half = max(1, len(members) // 2)
        keep.extend(members[:half])
        hold.extend(members[half:])
    keep, hold = np.sort(keep), np.sort(hold)
    zu = linalg.unit_rows(z)
    scores = {}
    for k in range(k_min, k_max + 1):
        res = ss_kmeans(zu, labeled_idx[keep], labels[keep], k, max_iter, seed)
        acc = cluster_accuracy(res.assignments[labeled_idx[hold]], labels[hold])[0] if len(hold) else 0.0
        scores[k] = (round(acc, 12), round(_silhouette(zu, res.assignments), 12))
    best = max(scores, key=lambda k: (scores[k][0], scores[k][1], -k))
    return KEstimate(best, scores)
