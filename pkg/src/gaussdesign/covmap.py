"""Covariance maps for quantile-discretized Gaussian treatments.

A latent Gaussian vector T ~ N(0, Sigma) is turned into K arms by the
equidistant-quantile map g (arm i on the half-open cell
(Phi^-1((i-1)/K), Phi^-1(i/K)]).  The covariance between arm indicators of
two units is then an analytic scalar function of their latent correlation:

    Cov(1{g(X) <= q_i}, 1{g(Y) <= q_j}) = r_ij(rho)
                                        = integral_0^rho p_r(q_i, q_j) dr,

with p_r the standard bivariate normal density.  Arm maps f_k and cross-arm
maps f_{k,l} are signed combinations of r_ij terms; their derivatives are the
same combinations of p_rho(q_i, q_j).

The integral is evaluated with Gauss-Legendre after the substitution
r = sin(theta), which removes the 1/sqrt(1-r^2) endpoint singularity; at
rho = +-1 exactly the analytic co/antimonotone limits are used.  Maps can be
tabulated (Chebyshev grid + monotone cubic interpolation) for the O(n^2)
elementwise evaluations inside the design optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.special import ndtr, ndtri

DEFAULT_TABLE_SIZE = 2001
DEFAULT_EDGE_MARGIN = 1e-6

_QUAD_TOL = 1e-10


class Table:
    """Tabulated values of a map and its derivative on a fixed grid."""

    def __init__(self, grid, f_values, d_values):
        self.grid = grid
        self.f_values = f_values
        self.d_values = d_values
        self._f = PchipInterpolator(grid, f_values, extrapolate=False)
        self._d = PchipInterpolator(grid, d_values, extrapolate=False)


class CovarianceMap:
    """Elementwise transform f on [-1, 1] with derivative f' on (-1, 1).

    ``eval``/``deriv`` accept scalars or arrays.  When a table is attached,
    queries inside the grid use interpolation and queries outside (including
    exactly +-1) fall back to the direct evaluator.
    """

    def __init__(self, fn, dfn, label, tail_l2=0.0, truncation=None):
        self._fn = fn
        self._dfn = dfn
        self.label = label
        self.table = None
        self.tail_l2 = tail_l2
        self.truncation = truncation

    def eval(self, rho):
        a = np.asarray(rho, dtype=float)
        if np.any(np.abs(a) > 1.0):
            raise ValueError(f"{self.label}: correlation outside [-1, 1]")
        if self.table is None:
            out = self._fn(a)
        else:
            out = np.empty_like(a)
            g = self.table.grid
            inside = (a >= g[0]) & (a <= g[-1])
            out[inside] = self.table._f(a[inside])
            if np.any(~inside):
                out[~inside] = self._fn(a[~inside])
        return out if out.ndim else float(out)

    def deriv(self, rho):
        a = np.asarray(rho, dtype=float)
        if np.any(np.abs(a) >= 1.0):
            raise ValueError(f"{self.label}: derivative requested at |rho| >= 1")
        if self.table is None:
            out = self._dfn(a)
        else:
            out = np.empty_like(a)
            g = self.table.grid
            inside = (a >= g[0]) & (a <= g[-1])
            out[inside] = self.table._d(a[inside])
            if np.any(~inside):
                out[~inside] = self._dfn(a[~inside])
        return out if out.ndim else float(out)

    def tail_bound(self, rho):
        """Upper bound on the truncation error of a series-backed map."""
        if self.truncation is None:
            return 0.0
        r = abs(float(rho))
        if r >= 1.0:
            return np.inf if self.tail_l2 > 0 else 0.0
        return self.tail_l2 * r ** (self.truncation + 1) / (1.0 - r)


@dataclass(frozen=True)
class ArmQuantiles:
    """Equidistant-quantile thresholds q_i = Phi^-1(i/K), i = 1..K-1."""

    K: int
    thresholds: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must be strictly increasing")


def quantile_thresholds(K):
    if not 2 <= int(K) <= 64:
        raise ValueError(f"arm count K = {K} outside supported range [2, 64]")
    K = int(K)
    q = ndtri(np.arange(1, K) / K)
    return ArmQuantiles(K=K, thresholds=q)


def discretize(t, q: ArmQuantiles):
    """Map latent value(s) to arm index in 1..K; boundaries go to the left arm."""
    a = np.asarray(t, dtype=float)
    if np.any(np.isnan(a)):
        raise ValueError("cannot discretize NaN treatment value")
    arms = np.searchsorted(q.thresholds, a, side="left") + 1
    return arms if arms.ndim else int(arms)


def binormal_density(rho, x, y):
    """Density p_rho(x, y) of the unit-variance bivariate normal."""
    rho = np.asarray(rho, dtype=float)
    omr2 = 1.0 - rho * rho
    z = (x * x + y * y - 2.0 * rho * x * y) / (2.0 * omr2)
    return np.exp(-z) / (2.0 * np.pi * np.sqrt(omr2))


@lru_cache(maxsize=32)
def _leggauss(order):
    return np.polynomial.legendre.leggauss(order)


def _r_interior(rho, qi, qj, tol=_QUAD_TOL):
    """integral_0^rho p_r(qi, qj) dr for |rho| < 1, vectorized over rho.

    Substituting r = sin(theta) gives a smooth integrand on [0, asin(rho)],
    so Gauss-Legendre converges fast; the order is doubled until two
    consecutive estimates agree within tol.
    """
    theta_max = np.arcsin(rho)
    prev = None
    for order in (48, 96, 192, 384):
        x, w = _leggauss(order)
        theta = 0.5 * theta_max[..., None] * (x + 1.0)
        s = np.sin(theta)
        c2 = 1.0 - s * s
        z = (qi * qi + qj * qj - 2.0 * qi * qj * s) / (2.0 * c2)
        vals = np.exp(-z) / (2.0 * np.pi)
        est = 0.5 * theta_max * (vals @ w)
        if prev is not None and np.max(np.abs(est - prev)) < tol:
            return est
        prev = est
    return est


def _r_endpoint(rho_sign, qi, qj):
    """Analytic limit of r_ij at rho = +-1 (co-/antimonotone indicators)."""
    pi_, pj = ndtr(qi), ndtr(qj)
    if rho_sign > 0:
        return min(pi_, pj) - pi_ * pj
    return max(0.0, pi_ + pj - 1.0) - pi_ * pj


def r_ij(rho, qi, qj):
    """Covariance of threshold indicators 1{X<=qi}, 1{Y<=qj} at correlation rho."""
    a = np.asarray(rho, dtype=float)
    if np.any(np.abs(a) > 1.0):
        raise ValueError("correlation outside [-1, 1]")
    out = np.empty_like(a)
    hi = a == 1.0
    lo = a == -1.0
    mid = ~(hi | lo)
    out[hi] = _r_endpoint(+1, qi, qj)
    out[lo] = _r_endpoint(-1, qi, qj)
    if np.any(mid):
        out[mid] = _r_interior(a[mid], qi, qj)
    return out if out.ndim else float(out)


class _RectangleComboMap(CovarianceMap):
    """Signed combination of r_ij terms sharing one threshold set.

    Array evaluation is compressed to unique correlation values first;
    matrices from low-rank or repetitive designs then cost one quadrature
    per distinct entry instead of one per matrix cell.
    """

    def __init__(self, quantiles, terms, label):
        self.quantiles = quantiles
        self.terms = terms  # list of (coef, qi, qj)

        def fn(a):
            a = np.asarray(a, dtype=float)
            u, inv = np.unique(a, return_inverse=True)
            acc = np.zeros_like(u)
            for coef, qi, qj in terms:
                acc += coef * r_ij(u, qi, qj)
            return acc[inv].reshape(a.shape)

        def dfn(a):
            a = np.asarray(a, dtype=float)
            acc = np.zeros_like(a)
            for coef, qi, qj in terms:
                acc += coef * binormal_density(a, qi, qj)
            return acc

        super().__init__(fn, dfn, label)


def f_cross(K, k, l):
    """Map rho -> Cov(1{g(X)=k}, 1{g(Y)=l}) for arm pair (k, l).

    Telescoping the cell indicators into threshold indicators gives
    r_{k-1,l-1} + r_{k,l} - r_{k-1,l} - r_{k,l-1}; terms whose threshold
    index is 0 or K drop out (their indicator is constant).
    """
    q = quantile_thresholds(K)
    if not (1 <= k <= K and 1 <= l <= K):
        raise ValueError(f"arm index out of range for K = {K}")
    terms = []
    for coef, i, j in ((1.0, k - 1, l - 1), (1.0, k, l), (-1.0, k - 1, l), (-1.0, k, l - 1)):
        if 1 <= i <= K - 1 and 1 <= j <= K - 1:
            terms.append((coef, q.thresholds[i - 1], q.thresholds[j - 1]))
    label = f"f_{k}" if k == l else f"f_{k},{l}"
    return _RectangleComboMap(q, terms, f"{label}(K={K})")


def f_arm(K, k):
    """Single-arm covariance map f_k for arm k of K."""
    return f_cross(K, k, k)


def f_arm_prime(K, k, rho):
    """Derivative of f_k; undefined at |rho| >= 1 where it diverges."""
    a = np.asarray(rho, dtype=float)
    if np.any(np.abs(a) >= 1.0):
        raise ValueError("f_k' diverges at the endpoints +-1")
    return f_arm(K, k).deriv(rho)


def weighted_discrete_map(w, K):
    """f(rho) = sum_k w_k^2 f_k(rho), the nuclear-norm objective map."""
    w = np.asarray(w, dtype=float)
    if w.shape != (K,):
        raise ValueError(f"expected {K} arm weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("arm weights must be finite")
    q = quantile_thresholds(K)
    merged = {}
    for k in range(1, K + 1):
        arm = f_cross(K, k, k)
        for coef, qi, qj in arm.terms:
            key = (qi, qj)
            merged[key] = merged.get(key, 0.0) + w[k - 1] ** 2 * coef
    terms = [(c, qi, qj) for (qi, qj), c in merged.items() if c != 0.0]
    return _RectangleComboMap(q, terms, f"sum_k w_k^2 f_k(K={K})")


def apply_map(cmap: CovarianceMap, factor):
    """Elementwise image f(V V^T) of a correlation factor.

    Inner products are clamped to [-1, 1] to absorb row-normalization
    round-off; the diagonal is evaluated at exactly 1 (analytic limit).
    """
    rows = factor.rows
    g = np.clip(rows @ rows.T, -1.0, 1.0)
    np.fill_diagonal(g, 1.0)
    return cmap.eval(g)


def build_table(cmap: CovarianceMap, grid_size=DEFAULT_TABLE_SIZE,
                edge_margin=DEFAULT_EDGE_MARGIN):
    """Attach a Chebyshev-grid tabulation; returns a new map, original untouched.

    The grid covers [-1 + edge_margin, 1 - edge_margin] with Chebyshev
    spacing (dense near the endpoints where f' blows up); evaluation inside
    uses monotone cubic (PCHIP) interpolation.
    """
    if grid_size < 64:
        raise ValueError("table grid must have at least 64 points")
    j = np.arange(grid_size)
    grid = np.sort((1.0 - edge_margin) * np.cos(np.pi * j / (grid_size - 1)))
    grid[np.argmin(np.abs(grid))] = 0.0  # keep f(0) = 0 exact through the table
    tabulated = CovarianceMap(cmap._fn, cmap._dfn, cmap.label,
                              tail_l2=cmap.tail_l2, truncation=cmap.truncation)
    tabulated.table = Table(grid, cmap._fn(grid), cmap._dfn(grid))
    return tabulated
