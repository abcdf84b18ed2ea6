"""Obstacle-constraint evaluators: mean distance, sigma-inflated distance,
and probability of collision, each with analytic gradients.

The probability of a Gaussian-distributed obstacle point A ~ N(a, Sigma)
falling within radius r of a query position x is evaluated as a power series

    P(|x - A| <= r) = sum_k (-1)^k c_k r^(n+2k) / Gamma(n/2 + k + 1)

in whitened coordinates b = Sigma^(-1/2)(x - a) with lambda the eigenvalues
of Sigma. The c_k, d_k coefficients satisfy a two-term recursion evaluated
bottom-up in O(k_max^2):

    c_0 = exp(-|b|^2 / 2) * prod_j (2 lambda_j)^(-1/2)
    d_k = (1/2) sum_j (1 - k b_j^2) (2 lambda_j)^(-k)
    c_k = (1/k) sum_{j=0}^{k-1} d_{k-j} c_j

The series is entire but its terms grow until k ~ r^2 / (2 lambda_min), so a
fixed 75-term truncation only converges when that ratio is comfortably below
the term budget; evaluations report a truncation warning when the last
term's share of the absolute-term mass exceeds 1e-8. A truncated sum that
lands far outside [0, 1] (or overflows) carries no information, so such
evaluations conservatively report probability 1 — a collision checker must
not certify safety from a diverged expansion. Validated against Monte Carlo
sampling and the central chi-square closed form (see tests).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import lgamma

import numpy as np

from .se3 import GaussianPoint

RUBEN_TERMS = 75
TRUNCATION_WARN_RATIO = 1e-8
ADAPTIVE_TERM_FLOOR = 1e-12
_COINCIDENT = 1e-9
# a truncated sum this far outside [0,1] is numerical garbage, not a clamp
_DIVERGED = 10.0


@dataclass(frozen=True)
class Distance:
    """Hard mean-distance constraint: mean |x - a_i| - r >= 0."""

    r: float = 1.2

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("r must be positive")


@dataclass(frozen=True)
class InflatedDistance:
    """Distance constraint with the radius grown by n_sigma standard
    deviations of the neighbor position uncertainty."""

    r: float = 1.2
    n_sigma: float = 1.0
    per_neighbor: bool = False  # inflate each neighbor by its own sigma

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("r must be positive")
        if self.n_sigma < 0:
            raise ValueError("n_sigma must be non-negative")


@dataclass(frozen=True)
class CollisionProbability:
    """Chance constraint: P(any neighbor within r) <= s_max."""

    r: float = 1.2
    s_max: float = 0.5

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("r must be positive")
        if not 0.0 < self.s_max < 1.0:
            raise ValueError("s_max must be in (0, 1)")


ConstraintKind = Distance | InflatedDistance | CollisionProbability


@dataclass
class ConstraintEval:
    value: float
    gradient: np.ndarray
    satisfied: bool
    degenerate: bool = False          # coincident query/neighbor encountered
    saturated: bool = False           # some per-neighbor probability hit 1
    truncation_warning: bool = False  # series not converged at the term cap


# ----------------------------------------------------------------------
# distance constraints
# ----------------------------------------------------------------------

def _distance_terms(query, neighbors):
    x = np.asarray(query, dtype=float)
    means = np.array([n.mean for n in neighbors])
    diff = x - means
    dist = np.linalg.norm(diff, axis=1)
    degenerate = dist < _COINCIDENT
    grads = np.zeros_like(diff)
    ok = ~degenerate
    grads[ok] = diff[ok] / dist[ok, None]
    return dist, grads, bool(degenerate.any())


def mean_distance(query, neighbors: list[GaussianPoint], r: float = 1.2) -> ConstraintEval:
    """Average distance to the neighbors minus the clearance radius.

    Gradient is the mean of the unit vectors pointing from each neighbor to
    the query; a coincident neighbor contributes a zero gradient term and
    sets the degenerate flag.
    """
    if not len(neighbors):
        raise ValueError("neighbors must be nonempty")
    dist, grads, degen = _distance_terms(query, neighbors)
    value = float(dist.mean() - r)
    grad = grads.mean(axis=0)
    return ConstraintEval(value, grad, value >= 0.0, degenerate=degen)


def sigma_max(neighbors: list[GaussianPoint]) -> float:
    """Largest per-neighbor standard deviation (sqrt of max eigenvalue)."""
    worst = 0.0
    for n in neighbors:
        worst = max(worst, float(np.linalg.eigvalsh(n.covariance)[-1]))
    return float(np.sqrt(worst))


def inflated_distance(query, neighbors: list[GaussianPoint], n_sigma: float,
                      r: float = 1.2, per_neighbor: bool = False) -> ConstraintEval:
    """Mean distance against a radius inflated by neighbor uncertainty.

    Default: r grows by n_sigma times the worst standard deviation over the
    neighbor set. per_neighbor=True instead subtracts each neighbor's own
    n_sigma * sigma_i from its distance term.
    """
    if not len(neighbors):
        raise ValueError("neighbors must be nonempty")
    dist, grads, degen = _distance_terms(query, neighbors)
    if per_neighbor:
        sigmas = np.array([np.sqrt(np.linalg.eigvalsh(n.covariance)[-1])
                           for n in neighbors])
        value = float((dist - n_sigma * sigmas).mean() - r)
    else:
        value = float(dist.mean() - (r + n_sigma * sigma_max(neighbors)))
    grad = grads.mean(axis=0)
    return ConstraintEval(value, grad, value >= 0.0, degenerate=degen)


# ----------------------------------------------------------------------
# probability of collision
# ----------------------------------------------------------------------

def ruben_coefficients(b, lam, k_max: int):
    """Bottom-up DP for the series coefficients; returns (c, d).

    c has length k_max + 1 (c[0]..c[k_max]); d likewise with d[0] = 0
    unused. O(k_max^2) work via the convolution recursion.
    """
    b = np.asarray(b, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if np.any(lam <= 0):
        raise ValueError("singular covariance: eigenvalues must be positive")
    c = np.zeros(k_max + 1)
    d = np.zeros(k_max + 1)
    b2 = b * b
    inv2lam = 0.5 / lam
    c[0] = np.exp(-0.5 * b2.sum()) * np.prod(2.0 * lam) ** -0.5
    powers = np.ones_like(lam)
    for k in range(1, k_max + 1):
        powers = powers * inv2lam
        d[k] = 0.5 * np.sum((1.0 - k * b2) * powers)
        c[k] = np.dot(d[k:0:-1], c[:k]) / k
    return c, d


def _radial_terms(r: float, k_max: int, n: int = 3) -> np.ndarray:
    """(-1)^k r^(n+2k) / Gamma(n/2+k+1), evaluated in log space."""
    ks = np.arange(k_max + 1)
    logs = (n + 2 * ks) * np.log(r) - np.array([lgamma(n / 2 + k + 1) for k in ks])
    return np.where(ks % 2 == 0, 1.0, -1.0) * np.exp(logs)


def collision_probability(query: GaussianPoint, neighbor: GaussianPoint, r: float,
                          k_max: int = RUBEN_TERMS, adaptive: bool = False,
                          return_diagnostics: bool = False):
    """P(|x - A| <= r) for A ~ N(a, Sigma_q + Sigma_a), clamped to [0, 1].

    adaptive=True stops the summation early once a term's magnitude falls
    below 1e-12. With return_diagnostics=True the result is
    (p, {"truncation_ratio", "clamped", "terms_used"}).
    """
    cov = query.covariance + neighbor.covariance
    diff = query.mean - neighbor.mean
    if np.allclose(cov, np.diag(np.diag(cov)), atol=1e-14):
        lam = np.diag(cov).copy()
        diff_e = diff
    else:
        lam, u = np.linalg.eigh(cov)
        diff_e = u.T @ diff
    if np.any(lam <= 1e-12):
        raise ValueError("singular covariance: eigenvalues must be positive")
    b = diff_e / np.sqrt(lam)
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        c, _ = ruben_coefficients(b, lam, k_max)
        radial = _radial_terms(r, k_max)
        terms = c * radial
        used = k_max + 1
        if adaptive:
            small = np.abs(terms) < ADAPTIVE_TERM_FLOOR
            # stop at the first small term past k=0
            idx = np.argmax(small[1:]) + 1 if small[1:].any() else k_max
            used = int(idx) + 1
            terms = terms[:used]
        raw = float(terms.sum())
    if not np.isfinite(raw) or abs(raw) > _DIVERGED:
        p = 1.0  # diverged truncation: refuse to certify safety
    else:
        p = min(max(raw, 0.0), 1.0)
    if return_diagnostics:
        mass = float(np.abs(terms).sum())
        if np.isfinite(mass) and mass > 0 and np.isfinite(terms[-1]):
            ratio = float(abs(terms[-1]) / mass)
        else:
            ratio = 1.0
        diag = {
            "truncation_ratio": ratio,
            "clamped": abs(raw - p) if np.isfinite(raw) else np.inf,
            "terms_used": used,
        }
        return p, diag
    return p


def combined_probability(p_list) -> float:
    """Probability of colliding with at least one of several neighbors."""
    p = np.asarray(p_list, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - p))


def probability_gradient(query: GaussianPoint, neighbors: list[GaussianPoint],
                         r: float, s_max: float = 0.5,
                         k_max: int = RUBEN_TERMS) -> ConstraintEval:
    """Combined collision probability over the neighbor set with gradient.

    grad p = (1 - p) * sum_i grad p_i / (1 - p_i). When some p_i saturates
    at 1 the gradient is undefined; the evaluation returns satisfied=False
    with the saturated flag set and a zero gradient.
    """
    if not len(neighbors):
        raise ValueError("neighbors must be nonempty")
    ps = np.zeros(len(neighbors))
    grads = np.zeros((len(neighbors), 3))
    trunc = False
    for i, nb in enumerate(neighbors):
        p_i, g_i, warn = _probability_and_gradient_single(query, nb, r, k_max)
        ps[i] = p_i
        grads[i] = g_i
        trunc = trunc or warn
    p = combined_probability(ps)
    if np.any(ps >= 1.0):
        return ConstraintEval(p, np.zeros(3), False, saturated=True,
                              truncation_warning=trunc)
    grad = (1.0 - p) * np.sum(grads / (1.0 - ps)[:, None], axis=0)
    return ConstraintEval(p, grad, p <= s_max, truncation_warning=trunc)


def _probability_and_gradient_single(query, neighbor, r, k_max):
    cov = query.covariance + neighbor.covariance
    diff = query.mean - neighbor.mean
    if np.allclose(cov, np.diag(np.diag(cov)), atol=1e-14):
        lam = np.diag(cov).copy()
        rot = None
        diff_e = diff
    else:
        lam, rot = np.linalg.eigh(cov)
        diff_e = rot.T @ diff
    if np.any(lam <= 1e-12):
        raise ValueError("singular covariance: eigenvalues must be positive")
    p, grad_e, warn = _series_batch(diff_e[None, :], lam[None, :], r, k_max)
    g = grad_e[0] if rot is None else rot @ grad_e[0]
    return float(p[0]), g, bool(warn[0])


def _series_batch(diff: np.ndarray, lam: np.ndarray, r: float, k_max: int):
    """Vectorized series + gradient for M cases with diagonalized covariance.

    diff, lam: (M, 3) in the eigenbasis. Returns (p (M,), grad (M, 3) in the
    eigenbasis, truncation_warning (M,) bool). Probabilities are clamped to
    [0, 1]; gradients are of the unclamped series.
    """
    m = diff.shape[0]
    b2 = diff * diff / lam
    sb2 = b2.sum(axis=1)
    c = np.zeros((k_max + 1, m))
    gc = np.zeros((k_max + 1, m, 3))
    d = np.zeros((k_max + 1, m))
    gd = np.zeros((k_max + 1, m, 3))
    with np.errstate(under="ignore", over="ignore", invalid="ignore"):
        c[0] = np.exp(-0.5 * sb2) * np.prod(2.0 * lam, axis=1) ** -0.5
        gc[0] = -c[0][:, None] * (diff / lam)
        inv2lam = 0.5 / lam
        powers = np.ones_like(lam)
        dl = diff / lam
        for k in range(1, k_max + 1):
            powers = powers * inv2lam
            d[k] = 0.5 * np.sum((1.0 - k * b2) * powers, axis=1)
            gd[k] = -k * dl * powers
            # c_k = (1/k) sum_{j<k} d_{k-j} c_j, same convolution for grads
            dk_rev = d[k:0:-1]
            c[k] = np.einsum("jm,jm->m", dk_rev, c[:k]) / k
            gc[k] = (np.einsum("jm,jmd->md", dk_rev, gc[:k])
                     + np.einsum("jmd,jm->md", gd[k:0:-1], c[:k])) / k
        radial = _radial_terms(r, k_max)
        terms = c * radial[:, None]
        p_raw = terms.sum(axis=0)
        grad = np.einsum("k,kmd->md", radial, gc)
    mass = np.abs(terms).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(mass > 0, np.abs(terms[-1]) / np.where(mass > 0, mass, 1.0), 0.0)
    diverged = ~np.isfinite(p_raw) | (np.abs(p_raw) > _DIVERGED) | ~np.isfinite(ratio)
    warn = diverged | (ratio >= TRUNCATION_WARN_RATIO)
    p = np.clip(np.where(diverged, 1.0, p_raw), 0.0, 1.0)
    grad = np.where(diverged[:, None], 0.0, grad)
    grad = np.where(np.isfinite(grad), grad, 0.0)
    return p, grad, warn


def probability_batch(points: np.ndarray, means: np.ndarray, variances: np.ndarray,
                      counts: np.ndarray, r: float, k_max: int = RUBEN_TERMS):
    """Combined probability constraint for Q query points at once.

    points: (Q, 3); means: (Q, K, 3) NaN-padded neighbor positions;
    variances: (Q, 3) per-query diagonal covariance (already including the
    query's own uncertainty); counts: (Q,) valid neighbors per row.
    Returns (p (Q,), grad (Q, 3), saturated (Q,), truncation (Q,)).
    """
    q, kmax_n, _ = means.shape
    valid = np.arange(kmax_n)[None, :] < counts[:, None]
    diff = points[:, None, :] - np.where(valid[:, :, None], means, 0.0)
    lam = np.repeat(variances[:, None, :], kmax_n, axis=1)
    flat_diff = diff.reshape(-1, 3)
    flat_lam = lam.reshape(-1, 3)
    p_i, g_i, warn_i = _series_batch(flat_diff, flat_lam, r, k_max)
    p_i = p_i.reshape(q, kmax_n)
    g_i = g_i.reshape(q, kmax_n, 3)
    warn_i = warn_i.reshape(q, kmax_n)
    p_i = np.where(valid, p_i, 0.0)
    g_i = np.where(valid[:, :, None], g_i, 0.0)
    warn = (warn_i & valid).any(axis=1)
    one_minus = 1.0 - p_i
    p = 1.0 - np.prod(one_minus, axis=1)
    saturated = (p_i >= 1.0).any(axis=1)
    safe = np.where(one_minus <= 1e-12, 1.0, one_minus)
    grad = (1.0 - p)[:, None] * np.sum(g_i / safe[:, :, None], axis=1)
    grad[saturated] = 0.0
    return p, grad, saturated, warn


# ----------------------------------------------------------------------
# kind-based dispatch
# ----------------------------------------------------------------------

def evaluate(kind: ConstraintKind, query: GaussianPoint,
             neighbors: list[GaussianPoint]) -> ConstraintEval:
    """Evaluate whichever constraint ``kind`` selects at the query point."""
    if isinstance(kind, Distance):
        return mean_distance(query.mean, neighbors, kind.r)
    if isinstance(kind, InflatedDistance):
        return inflated_distance(query.mean, neighbors, kind.n_sigma, kind.r,
                                 kind.per_neighbor)
    if isinstance(kind, CollisionProbability):
        return probability_gradient(query, neighbors, kind.r, kind.s_max)
    raise TypeError(f"unknown constraint kind: {kind!r}")
