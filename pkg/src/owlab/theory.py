"""Closed-form rectification and sparsification theory.

Expectations of rectified / clipped Gaussian and epsilon-skew-normal (ESN)
activations, the activation-reduction formulas they imply, and the
variance-reduction identities for contribution-sorted sparsification.  Every
quantity here is paired with a Monte-Carlo oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _pdf(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


@dataclass
class EsnParams:
    """Mode mu, scale sigma and skew eps of an epsilon-skew-normal law."""

    mu: float
    sigma: float
    eps: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not -1.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [-1, 1]")


@dataclass
class ContributionStats:
    """Per-unit moments plus the contribution ordering used for sparsification.

    ``order`` lists unit indices sorted ascending by average contribution;
    the first ``t`` of them are the dropped units.
    """

    means: np.ndarray
    variances: np.ndarray
    order: np.ndarray
    t: int

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        self.order = np.asarray(self.order, dtype=np.int64)
        m = self.means.shape[0]
        if self.variances.shape != (m,) or self.order.shape != (m,):
            raise ValueError("means, variances and order must share length m")
        if np.any(self.variances < 0):
            raise ValueError("variances must be non-negative")
        if sorted(self.order.tolist()) != list(range(m)):
            raise ValueError("order must be a permutation of 0..m-1")
        if not 0 <= self.t <= m:
            raise ValueError("cut count t must lie in [0, m]")


def rect_gauss_mean(mu: float, sigma: float) -> float:
    """E[max(x, 0)] for x ~ Normal(mu, sigma^2)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    a = mu / sigma
    return float((1.0 - ndtr(-a)) * mu + _pdf(a) * sigma)


def id_reduction(mu: float, sigma: float, c: float) -> float:
    """Mean activation lost to clipping at c for Normal(mu, sigma^2) inputs.

    E[max(x,0) - min(max(x,0), c)] = E[(x - c)^+]
    = phi((c-mu)/sigma) sigma - (1 - Phi((c-mu)/sigma)) (c - mu).
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not c > 0:
        raise ValueError("clip level must be positive")
    d = (c - mu) / sigma
    return float(_pdf(d) * sigma - (1.0 - ndtr(d)) * (c - mu))


def esn_pdf(x, params: EsnParams):
    """Piecewise ESN density: wider left lobe for eps > 0, wider right for eps < 0."""
    x = np.asarray(x, dtype=np.float64)
    mu, sigma, eps = params.mu, params.sigma, params.eps
    u = (x - mu) / sigma
    left = _pdf(u / (1.0 + eps)) if eps != -1.0 else np.zeros_like(u)
    right = _pdf(u / (1.0 - eps)) if eps != 1.0 else np.zeros_like(u)
    out = np.where(x < mu, left, right) / sigma
    return float(out) if out.ndim == 0 else out


def esn_rect_mean(params: EsnParams) -> float:
    """E[max(x, 0)] for x ~ ESN(mu, sigma^2, eps), exact in every regime.

    For mu >= 0 this is the textbook expression
    mu - (1+eps) Phi(-mu/((1+eps) sigma)) mu + (1+eps)^2 phi(.) sigma
    - 4 eps sigma phi(0); for mu < 0 only the right lobe crosses zero and the
    expectation is (1-eps)(1 - Phi(b)) mu + (1-eps)^2 sigma phi(b) with
    b = -mu/((1-eps) sigma).  The two branches meet continuously at mu = 0.
    """
    mu, sigma, eps = params.mu, params.sigma, params.eps
    s_plus = (1.0 + eps) * sigma
    s_minus = (1.0 - eps) * sigma
    if mu >= 0:
        if s_plus == 0.0:  # eps = -1: all mass on the right lobe
            return float(mu + s_minus * _pdf(0.0) * (1.0 - eps))
        a = mu / s_plus
        return float(
            mu
            - (1.0 + eps) * ndtr(-a) * mu
            + (1.0 + eps) ** 2 * _pdf(a) * sigma
            - 4.0 * eps * sigma * _pdf(0.0)
        )
    if s_minus == 0.0:  # eps = 1: all mass at or left of mu < 0
        return 0.0
    b = -mu / s_minus
    return float((1.0 - eps) * (1.0 - ndtr(b)) * mu + (1.0 - eps) ** 2 * sigma * _pdf(b))


def esn_rect_clip_mean(params: EsnParams, c: float) -> float:
    """E[min(max(x, 0), c)] for x ~ ESN(mu, sigma^2, eps), c > 0.

    Derived by direct integration of x q(x) over [0, c] plus c P(x > c),
    split at the mode; independent of the reduction identity so the identity
    stays a genuine cross-check.
    """
    if not c > 0:
        raise ValueError("clip level must be positive")
    mu, sigma, eps = params.mu, params.sigma, params.eps
    s_plus = (1.0 + eps) * sigma
    s_minus = (1.0 - eps) * sigma

    if mu < 0:
        if s_minus == 0.0:
            return 0.0
        b = -mu / s_minus
        b_c = (c - mu) / s_minus
        trunc = (1.0 - eps) * (mu * (ndtr(b_c) - ndtr(b)) + s_minus * (_pdf(b) - _pdf(b_c)))
        tail = c * (1.0 - eps) * (1.0 - ndtr(b_c))
        return float(trunc + tail)

    if c >= mu:
        a = mu / s_plus if s_plus > 0 else np.inf
        a_c = (c - mu) / s_minus if s_minus > 0 else np.inf
        left = (1.0 + eps) * (
            mu * (0.5 - ndtr(-a)) + s_plus * (_pdf(a) - _pdf(0.0))
        )
        right = (1.0 - eps) * (
            mu * (ndtr(a_c) - 0.5) + s_minus * (_pdf(0.0) - _pdf(a_c))
        )
        tail = c * (1.0 - eps) * (1.0 - ndtr(a_c))
        return float(left + right + tail)

    # 0 < c < mu: clipping bites inside the left lobe.
    if s_plus == 0.0:
        return float(c)  # all mass sits at mu > c
    a = mu / s_plus
    a_c = (mu - c) / s_plus
    trunc = (1.0 + eps) * (mu * (ndtr(-a_c) - ndtr(-a)) + s_plus * (_pdf(a) - _pdf(a_c)))
    tail = c * ((1.0 + eps) * (0.5 - ndtr(-a_c)) + (1.0 - eps) / 2.0)
    return float(trunc + tail)


def ood_reduction(params: EsnParams, c: float) -> float:
    """Mean activation lost to clipping at c for ESN inputs.

    E[(x - c)^+] with x ~ ESN(mu, sigma^2, eps); since x - c is
    ESN(mu - c, sigma^2, eps), this is exactly esn_rect_mean shifted by c.
    For c >= mu it coincides with
    (1-eps)^2 phi((c-mu)/((1-eps) sigma)) sigma
    - (1-eps)(1 - Phi((c-mu)/((1-eps) sigma)))(c - mu).
    """
    if not c > 0:
        raise ValueError("clip level must be positive")
    return esn_rect_mean(EsnParams(params.mu - c, params.sigma, params.eps))


class VarReduction(NamedTuple):
    analytic: float
    empirical: float


def dice_var_reduction(stats: ContributionStats, samples: np.ndarray) -> VarReduction:
    """Variance removed from the summed output by dropping the t lowest units.

    analytic = sum of dropped-unit variances (independence assumption);
    empirical = Var(full row sums) - Var(kept row sums) on the samples.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("need at least 2 sample rows")
    if X.shape[1] != stats.means.shape[0]:
        raise ValueError("sample columns must match unit count")
    dropped = stats.order[: stats.t]
    kept = stats.order[stats.t:]
    analytic = float(stats.variances[dropped].sum())
    full = X.sum(axis=1).var(ddof=1)
    pruned = X[:, kept].sum(axis=1).var(ddof=1) if kept.size else 0.0
    return VarReduction(analytic, float(full - pruned))


def dice_var_reduction_correlated(cov: np.ndarray, t: int) -> float:
    """Variance reduction with correlated units (units already in drop order).

    sum_{i<=t} sigma_i^2 + 2 sum_{i<j<=m} Cov_ij - 2 sum_{t<i<j<=m} Cov_ij:
    the dropped diagonal plus twice every off-diagonal pair that involves at
    least one dropped unit.
    """
    S = np.asarray(cov, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("cov must be square")
    if not np.allclose(S, S.T, atol=1e-12):
        raise ValueError("cov must be symmetric")
    m = S.shape[0]
    if not 0 <= t <= m:
        raise ValueError("t must lie in [0, m]")
    upper = np.triu(S, k=1)
    kept_pairs = upper[t:, t:].sum()
    return float(np.diag(S)[:t].sum() + 2.0 * (upper.sum() - kept_pairs))


class VarSumCheck(NamedTuple):
    passed: bool
    observed: float
    expected: float
    tolerance: float


def var_sum_check(x: np.ndarray, y: np.ndarray, n_se: float = 5.0) -> VarSumCheck:
    """Check Var[x + y] = Var[x] + Var[y] on independent sample streams.

    The tolerance is n_se relative standard errors of a variance estimate,
    SE ~= Var * sqrt(2 / (n - 1)).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length streams with >= 2 samples")
    expected = x.var(ddof=1) + y.var(ddof=1)
    observed = (x + y).var(ddof=1)
    tol = n_se * expected * np.sqrt(2.0 / (x.size - 1))
    return VarSumCheck(bool(abs(observed - expected) <= tol),
                       float(observed), float(expected), float(tol))
