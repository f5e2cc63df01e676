"""Detection and clustering metrics: FPR@TPR, AUROC, AUPR, Hungarian matching,
clustering accuracy, and (semi-supervised) K-means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .data import EmbeddingSet
from .scoring import threshold_at_tpr


def _validate_scores(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("need non-empty ID and OOD score lists")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("scores must be finite")
    return a, b


def fpr_at_tpr(id_scores, ood_scores, tpr: float = 0.95) -> float:
    """Fraction of OOD scores at or above the threshold that keeps tpr of ID."""
    a, b = _validate_scores(id_scores, ood_scores)
    lam = threshold_at_tpr(a, tpr)
    return float(np.count_nonzero(b >= lam) / b.size)


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney AUROC with half credit for ties (ID = positive)."""
    a, b = _validate_scores(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def aupr(id_scores, ood_scores) -> float:
    """Area under precision-recall by step interpolation, ID as positive class."""
    a, b = _validate_scores(id_scores, ood_scores)
    scores = np.concatenate([a, b])
    is_id = np.concatenate([np.ones(a.size, bool), np.zeros(b.size, bool)])
    order = np.argsort(-scores, kind="stable")
    scores, is_id = scores[order], is_id[order]
    tp = np.cumsum(is_id)
    fp = np.cumsum(~is_id)
    # Evaluate P and R only where the threshold actually drops (last row of a
    # tie block), which is the "sorted unique thresholds" sweep.
    last = np.r_[scores[1:] != scores[:-1], True]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / a.size
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class AssignmentResult:
    """Minimum-cost injective matching: mapping[row] = column, plus total cost."""

    mapping: dict[int, int]
    cost: float


def hungarian_assign(cost) -> AssignmentResult:
    """Minimum-cost assignment; rectangular inputs assign the smaller side fully."""
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError("cost must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost entries must be finite")
    rows, cols = linear_sum_assignment(c)
    return AssignmentResult(dict(zip(map(int, rows), map(int, cols))),
                            float(c[rows, cols].sum()))


def clustering_accuracy(pred, truth) -> float:
    """Best matched fraction over injective cluster-to-class assignments."""
    p = np.asarray(pred, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("pred and truth must be equal-length 1-D label arrays")
    if p.size == 0:
        raise ValueError("need at least one label")
    if p.min() < 0 or t.min() < 0:
        raise ValueError("labels must be non-negative")
    contingency = np.zeros((p.max() + 1, t.max() + 1))
    np.add.at(contingency, (p, t), 1)
    matched = -hungarian_assign(-contingency).cost
    return float(matched / p.size)


def _kmeans_pp(points: np.ndarray, existing: list[np.ndarray], count: int,
               rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded K-means++ picks among ``points``, spreading away from ``existing``."""
    chosen = list(existing)
    picks = []
    for _ in range(count):
        if not chosen:
            idx = int(rng.integers(points.shape[0]))
        else:
            d2 = np.min(
                [np.sum((points - c) ** 2, axis=1) for c in chosen], axis=0
            )
            total = d2.sum()
            if total == 0:
                idx = int(rng.integers(points.shape[0]))
            else:
                idx = int(rng.choice(points.shape[0], p=d2 / total))
        picks.append(points[idx].copy())
        chosen.append(points[idx])
    return picks


def kmeans(points, K: int, seed: int, fixed_assignments=None, max_iter: int = 300):
    """Lloyd K-means with optional pinned labels (semi-supervised variant).

    ``fixed_assignments`` is a length-n array with -1 for free points; pinned
    points never change cluster and always contribute to their center.  Free
    centers are seeded with K-means++.  Runs to an assignment fixpoint or
    ``max_iter`` sweeps; a cluster that loses all members is re-seeded at the
    point farthest from its current center.  Returns (labels, centers).
    """
    X = points.vectors if isinstance(points, EmbeddingSet) else points
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if K < 1 or K > n:
        raise ValueError("need 1 <= K <= n")
    fixed = np.full(n, -1, dtype=np.int64)
    if fixed_assignments is not None:
        fixed = np.asarray(fixed_assignments, dtype=np.int64).copy()
        if fixed.shape != (n,):
            raise ValueError("fixed_assignments must have length n")
        if np.any(fixed >= K):
            raise ValueError("fixed labels must lie in [0, K)")
    rng = np.random.default_rng(seed)

    is_fixed = fixed >= 0
    centers = np.zeros((K, X.shape[1]))
    has_fixed = np.zeros(K, dtype=bool)
    for c in range(K):
        members = X[fixed == c]
        if members.shape[0]:
            centers[c] = members.mean(axis=0)
            has_fixed[c] = True
    free_clusters = np.flatnonzero(~has_fixed)
    free_points = X[~is_fixed]
    if free_clusters.size:
        pool = free_points if free_points.shape[0] else X
        picks = _kmeans_pp(pool, [centers[c] for c in np.flatnonzero(has_fixed)],
                           free_clusters.size, rng)
        for c, pick in zip(free_clusters, picks):
            centers[c] = pick

    labels = fixed.copy()
    if np.all(is_fixed):
        return labels, centers
    for _ in range(max_iter):
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.where(is_fixed, fixed, np.argmin(d2, axis=1))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(K):
            members = X[labels == c]
            if members.shape[0]:
                centers[c] = members.mean(axis=0)
            else:
                dist_own = np.linalg.norm(X - centers[labels], axis=1)
                centers[c] = X[int(np.argmax(dist_own))]
    return labels, centers
