"""Post-hoc OOD scoring: MSP, energy, ReAct, DICE, KNN, and threshold selection.

Conventions used throughout: higher score = more in-distribution, and a score
exactly at the threshold is classified ID (S(x) >= lambda).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp, softmax

from .data import ClassifierHead, EmbeddingSet

MASK_STRATEGIES = ("top", "bottom", "random", "top+bottom")


@dataclass
class ReactConfig:
    """Rectification setup: percentile p over ID activations and derived clip c."""

    percentile: float
    clip: float

    def __post_init__(self):
        if not 0.0 <= self.percentile <= 100.0:
            raise ValueError("percentile must lie in [0, 100]")
        if not self.clip > 0:
            raise ValueError("clip level must be positive")


@dataclass
class DiceArtifacts:
    """Sparsification state: contribution matrix V, binary mask M, sparsity p."""

    V: np.ndarray
    M: np.ndarray
    p: float
    strategy: str

    def __post_init__(self):
        if self.V.shape != self.M.shape:
            raise ValueError("V and M must have equal shapes")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.strategy not in MASK_STRATEGIES:
            raise ValueError(f"strategy must be one of {MASK_STRATEGIES}")


class KnnIndex:
    """Exact brute-force k-NN over unit-norm training embeddings."""

    def __init__(self, train: np.ndarray, k: int):
        train = np.asarray(train, dtype=np.float64)
        if train.ndim != 2 or train.shape[0] == 0:
            raise ValueError("index needs a non-empty n x d matrix")
        norms = np.linalg.norm(train, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("index rows must be unit norm")
        if not 1 <= k <= train.shape[0]:
            raise ValueError("k must satisfy 1 <= k <= n")
        self.train = train
        self.k = k

    @property
    def n(self) -> int:
        return self.train.shape[0]


@dataclass
class KnnTheoryParams:
    """Constants of the KNN-to-Bayes threshold equivalence."""

    beta: float
    eps: float
    c_hat0: float = 1.0
    c_b: float = 1.0
    m: int = 2
    n: int = 1

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.c_hat0 <= 0 or self.c_b <= 0:
            raise ValueError("density constants must be positive")
        if self.m < 2:
            raise ValueError("dimension m must be >= 2")
        if self.n < 1:
            raise ValueError("sample count must be >= 1")


def logits(head: ClassifierHead, features) -> np.ndarray:
    """Linear head output W^T h + b, accumulated in float64."""
    h = features.vectors if isinstance(features, EmbeddingSet) else features
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != head.W.shape[0]:
        raise ValueError(f"feature dim {h.shape[-1]} != W rows {head.W.shape[0]}")
    return h @ head.W + head.b


def msp_score(logit_rows: np.ndarray) -> np.ndarray | float:
    """Maximum softmax probability per row (max-subtraction for stability)."""
    z = np.asarray(logit_rows, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if z.shape[-1] < 2:
        raise ValueError("need at least 2 logits")
    out = np.max(softmax(z, axis=-1), axis=-1)
    return float(out) if z.ndim == 1 else out


def energy_score(logit_rows: np.ndarray) -> np.ndarray | float:
    """Energy score log sum_c exp(f_c) per row; higher = more ID."""
    z = np.asarray(logit_rows, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    out = logsumexp(z, axis=-1)
    return float(out) if z.ndim == 1 else out


def react_percentile_threshold(id_features, p: float) -> float:
    """Nearest-rank percentile of the flattened ID activation multiset."""
    h = id_features.vectors if isinstance(id_features, EmbeddingSet) else id_features
    flat = np.sort(np.asarray(h, dtype=np.float64), axis=None)
    if flat.size == 0:
        raise ValueError("need at least one activation")
    if not 0.0 <= p <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    rank = max(1, math.ceil(p / 100.0 * flat.size))
    return float(flat[rank - 1])


def react_apply(features, c: float):
    """Elementwise truncation min(x, c); c = +inf is the identity."""
    if not c > 0:
        raise ValueError("clip level must be positive")
    if isinstance(features, EmbeddingSet):
        clipped = np.minimum(features.vectors, float(c))
        return EmbeddingSet(clipped, features.labels, False)
    return np.minimum(np.asarray(features, dtype=np.float64), c)


def dice_contribution_matrix(head: ClassifierHead, id_features) -> np.ndarray:
    """Average contribution of unit i to class c: V[i, c] = W[i, c] * mean_i(h_i)."""
    h = id_features.vectors if isinstance(id_features, EmbeddingSet) else id_features
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("need a non-empty feature matrix")
    if h.shape[1] != head.W.shape[0]:
        raise ValueError("feature dim mismatch with head")
    return head.W * h.mean(axis=0)[:, None]


def dice_mask(V: np.ndarray, p: float, strategy: str = "top", seed: int | None = None) -> np.ndarray:
    """Binary keep-mask over V with k = round((1-p)*d*C) ones.

    top keeps the k largest entries of V, bottom the k smallest, random a
    seeded uniform subset, and top+bottom splits k as ceil(k/2) largest plus
    floor(k/2) smallest (union, so coinciding picks are kept once).  Ties are
    broken by ascending flat index.
    """
    V = np.asarray(V, dtype=np.float64)
    if not 0.0 <= p < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    if strategy not in MASK_STRATEGIES:
        raise ValueError(f"strategy must be one of {MASK_STRATEGIES}")
    size = V.size
    k = int(math.floor((1.0 - p) * size + 0.5))
    flat = V.ravel()
    mask = np.zeros(size, dtype=np.int8)
    if strategy == "top":
        keep = np.argsort(-flat, kind="stable")[:k]
    elif strategy == "bottom":
        keep = np.argsort(flat, kind="stable")[:k]
    elif strategy == "random":
        if seed is None:
            raise ValueError("random strategy needs a seed")
        keep = np.random.default_rng(seed).choice(size, size=k, replace=False)
    else:
        hi = np.argsort(-flat, kind="stable")[: (k + 1) // 2]
        lo = np.argsort(flat, kind="stable")[: k // 2]
        keep = np.union1d(hi, lo)
    mask[keep] = 1
    return mask.reshape(V.shape)


def dice_logits(head: ClassifierHead, mask: np.ndarray, features) -> np.ndarray:
    """Sparsified logits (M * W)^T h + b."""
    if mask.shape != head.W.shape:
        raise ValueError("mask shape must equal W shape")
    masked = ClassifierHead(head.W * mask, head.b)
    return logits(masked, features)


def knn_score(index: KnnIndex, query: np.ndarray, exclude_self: bool = False) -> np.ndarray | float:
    """Negated k-th nearest-neighbor distance: -||q - z_(k)||.

    Accepts a single unit vector or a matrix of query rows.  With
    exclude_self=True each query's single closest zero-distance hit is
    dropped before ranking (used when scoring the index against itself).
    """
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if np.max(np.abs(np.linalg.norm(q, axis=1) - 1.0)) > 1e-9:
        raise ValueError("queries must be unit norm")
    # Dropping one zero-distance self hit is the same as ranking one deeper.
    rank = index.k if exclude_self else index.k - 1
    if rank >= index.n:
        raise ValueError("k (plus self exclusion) must not exceed n")
    score = np.empty(q.shape[0])
    for i, qi in enumerate(q):
        dist = np.linalg.norm(index.train - qi, axis=1)
        score[i] = -np.partition(dist, rank)[rank]
    return float(score[0]) if single else score


def threshold_at_tpr(id_scores, q: float) -> float:
    """Largest lambda with at least q*n of the ID scores >= lambda."""
    s = np.sort(np.asarray(id_scores, dtype=np.float64))
    if s.size == 0:
        raise ValueError("need at least one score")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    need = math.ceil(q * s.size)
    return float(s[s.size - need])


def detect(scores, lam: float):
    """True where the score says ID (score >= lambda, boundary inclusive)."""
    s = np.asarray(scores, dtype=np.float64)
    out = s >= lam
    return bool(out) if s.ndim == 0 else out


def knn_bayes_lambda(params: KnnTheoryParams, k: int) -> float:
    """Score threshold equivalent to the Bayesian posterior rule at level beta.

    lambda = -((1-beta)(1-eps) k / (beta eps c_b n c0))^(1/(m-1)).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    num = (1.0 - params.beta) * (1.0 - params.eps) * k
    den = params.beta * params.eps * params.c_b * params.n * params.c_hat0
    return -((num / den) ** (1.0 / (params.m - 1)))


class BayesEquivalence(NamedTuple):
    agree: np.ndarray       # True where both decision rules match (non-degenerate)
    by_threshold: np.ndarray
    by_posterior: np.ndarray
    degenerate: np.ndarray  # True where r_k = 0 made the density estimate undefined


def knn_bayes_equivalence(index: KnnIndex, queries: np.ndarray,
                          params: KnnTheoryParams) -> BayesEquivalence:
    """Check 1{-r_k >= lambda} = 1{posterior p(g=1|z) >= beta} per query.

    The empirical density is p_in = k/(c_b n r_k^(m-1)); the outlier density
    estimate is c0 when p_in falls below the theorem's cutoff and 0 otherwise.
    Queries with r_k = 0 are flagged degenerate rather than divided by.
    """
    lam = knn_bayes_lambda(params, index.k)
    r_k = -np.atleast_1d(knn_score(index, queries))
    degenerate = r_k == 0.0
    by_threshold = -r_k >= lam

    p_in = np.zeros_like(r_k)
    good = ~degenerate
    p_in[good] = index.k / (params.c_b * params.n * r_k[good] ** (params.m - 1))
    cutoff = (params.beta * params.eps * params.c_hat0
              / ((1.0 - params.beta) * (1.0 - params.eps)))
    p_out = np.where(p_in < cutoff, params.c_hat0, 0.0)
    posterior = np.zeros_like(p_in)
    denom = (1.0 - params.eps) * p_in + params.eps * p_out
    np.divide((1.0 - params.eps) * p_in, denom, out=posterior, where=denom > 0)
    by_posterior = posterior >= params.beta

    agree = (by_threshold == by_posterior) & good
    return BayesEquivalence(agree, by_threshold, by_posterior, degenerate)
