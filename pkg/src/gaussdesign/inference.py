"""Design-based uncertainty for Gaussianized designs.

Variance of the arm estimator is estimated by inverse-probability weighting
over unit pairs,

    V_hat = (K^2/n) sum_{i,j} Y_i Y_j f_k(Sigma_ij)
            * 1{D_i = k, D_j = k} / (f_k(Sigma_ij) + 1/K^2),

using the joint-probability identity P(D_i = k, D_j = k) =
f_k(Sigma_ij) + 1/K^2 (which also covers i = j, where it equals 1/K).
Normal confidence intervals are tau_hat +- z_{alpha/2} sqrt(V_hat / n).

For weighted contrasts the same-unit cross-arm terms are not estimable, so a
conservative variance bound is estimated instead (Aronow-Samii), replacing
-(1/n) sum_{k!=l} w_k w_l sum_i Y_i(k) Y_i(l) with the observable bound
(1/2n) sum_{k!=l} |w_k||w_l| sum_i (Y_i(k)^2 + Y_i(l)^2).

As a less conservative alternative, randomization-based confidence intervals
redraw treatments from the design, impute counterfactual outcomes with a
fitted regression, and take empirical quantiles of the re-estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .covmap import apply_map, discretize, f_arm, f_cross, quantile_thresholds
from .elliptope import CorrelationFactor, sample
from .estimators import ExperimentRecords, WeightFn, weight_eval

_JOINT_GUARD = 1e-8
_MIN_REPLICATES = 100


@dataclass(frozen=True)
class VarianceReport:
    point: float
    well_defined: bool
    min_joint_prob: float
    kind: str


@dataclass(frozen=True)
class IntervalReport:
    lower: float
    upper: float
    alpha: float
    method: str
    replicates: int = None

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.lower > self.upper:
            raise ValueError("interval bounds out of order")

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, x):
        return self.lower <= x <= self.upper


def variance_ht_arm(records: ExperimentRecords, factor: CorrelationFactor,
                    k, K) -> VarianceReport:
    """Horvitz-Thompson estimate of n * Var(tau_hat_k) under the design."""
    if factor.n != records.n:
        raise ValueError("factor size does not match record count")
    arms = records.arms(K)
    F = apply_map(f_arm(K, k), factor)
    joint = F + 1.0 / K ** 2
    mask = np.outer(arms == k, arms == k)
    if not np.any(mask):
        return VarianceReport(point=0.0, well_defined=True,
                              min_joint_prob=np.inf, kind="ht_arm_variance")
    min_joint = float(joint[mask].min())
    if min_joint <= _JOINT_GUARD:
        return VarianceReport(point=None, well_defined=False,
                              min_joint_prob=min_joint, kind="ht_arm_variance")
    yy = np.outer(records.Y, records.Y)
    point = K ** 2 / records.n * float(np.sum(yy[mask] * F[mask] / joint[mask]))
    return VarianceReport(point=point, well_defined=True,
                          min_joint_prob=min_joint, kind="ht_arm_variance")


def true_variance(potential_outcomes, factor: CorrelationFactor, k, K):
    """V(Sigma) = (K^2/n) Y(k)^T f_k(Sigma) Y(k) (n * MSE of tau_hat_k)."""
    table = np.asarray(potential_outcomes, dtype=float)
    y = table[:, k - 1]
    F = apply_map(f_arm(K, k), factor)
    return float(K ** 2 / y.size * y @ F @ y)


def normal_ci(tau_hat, var_hat, n, alpha) -> IntervalReport:
    """tau_hat +- z_{alpha/2} sqrt(var_hat / n)."""
    if var_hat < 0:
        raise ValueError("variance estimate must be nonnegative")
    z = float(ndtri(1.0 - alpha / 2.0))
    half = z * np.sqrt(var_hat / n)
    return IntervalReport(lower=float(tau_hat - half), upper=float(tau_hat + half),
                          alpha=float(alpha), method="normal")


def aronow_samii_bound(records: ExperimentRecords, factor: CorrelationFactor,
                       w, K) -> VarianceReport:
    """Conservative estimator of n * Var(tau_hat_w) for a contrast w."""
    w = np.asarray(w, dtype=float)
    if w.shape != (K,):
        raise ValueError(f"contrast needs {K} weights, got shape {w.shape}")
    n = records.n
    arms = records.arms(K)
    Y = records.Y
    sigma = np.clip(factor.to_matrix(), -1.0, 1.0)

    # Same-unit own-arm variance term, IPW by the 1/K marginal.
    var_ind = (K - 1.0) / K ** 2
    t1 = K ** 2 / n * float(np.sum(w[arms - 1] ** 2 * Y ** 2 * var_ind * K))

    # Cross-unit term: each observed pair (i, j) realizes one (k, l) cell.
    t2 = 0.0
    min_joint = np.inf
    offdiag = ~np.eye(n, dtype=bool)
    cross_cache = {}
    for k in range(1, K + 1):
        for l in range(1, K + 1):
            sel = np.outer(arms == k, arms == l) & offdiag
            if not np.any(sel):
                continue
            key = (k, l)
            if key not in cross_cache:
                cross_cache[key] = f_cross(K, k, l)
            C = cross_cache[key].eval(sigma[sel])
            joint = C + 1.0 / K ** 2
            min_joint = min(min_joint, float(joint.min()))
            if min_joint <= _JOINT_GUARD:
                return VarianceReport(point=None, well_defined=False,
                                      min_joint_prob=min_joint,
                                      kind="aronow_samii_bound")
            yy = np.outer(Y, Y)[sel]
            t2 += w[k - 1] * w[l - 1] * float(np.sum(yy * C / joint))
    t2 *= K ** 2 / n

    # Bound replacing the inestimable same-unit cross-arm products.
    t3 = 0.0
    absw = np.abs(w)
    for k in range(1, K + 1):
        for l in range(1, K + 1):
            if k == l:
                continue
            in_k = (arms == k).astype(float)
            in_l = (arms == l).astype(float)
            t3 += absw[k - 1] * absw[l - 1] * float(np.sum(Y ** 2 * (in_k + in_l) * K))
    t3 /= 2.0 * n

    return VarianceReport(point=t1 + t2 + t3, well_defined=True,
                          min_joint_prob=min_joint, kind="aronow_samii_bound")


def ols_fit(design_matrix, response):
    """Minimum-norm least squares (SVD cutoff 1e-10 * sigma_max)."""
    A = np.asarray(design_matrix, dtype=float)
    y = np.asarray(response, dtype=float)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite entries in the regression inputs")
    if A.ndim != 2 or A.shape[0] < 1:
        raise ValueError("design matrix must be 2-D with at least one row")
    coef, _, _, _ = np.linalg.lstsq(A, y, rcond=1e-10)
    return coef


def _empirical_interval(estimates, alpha, B):
    lo, hi = np.quantile(estimates, [alpha / 2.0, 1.0 - alpha / 2.0])
    return IntervalReport(lower=float(lo), upper=float(hi), alpha=float(alpha),
                          method="randomization", replicates=int(B))


def randomization_ci_discrete(records: ExperimentRecords, factor: CorrelationFactor,
                              K, w, B, alpha, seed) -> IntervalReport:
    """Randomization-based CI for the contrast tau_hat_w.

    Per arm, a linear model of Y on X (with intercept) is fit on the units
    observed in that arm; redrawn assignments keep the observed outcome when
    the redrawn arm matches and impute the fitted value otherwise.  The
    interval is the (alpha/2, 1 - alpha/2) empirical quantile pair of the
    re-estimates.
    """
    if B < _MIN_REPLICATES:
        raise ValueError(f"need at least {_MIN_REPLICATES} randomization replicates")
    w = np.asarray(w, dtype=float)
    arms_obs = records.arms(K)
    n = records.n
    X1 = np.column_stack([np.ones(n), records.X]) if records.X is not None \
        else np.ones((n, 1))
    fitted = np.empty((n, K))
    for k in range(1, K + 1):
        sel = arms_obs == k
        if not np.any(sel):
            raise ValueError(f"cannot fit imputation model: no unit observed in arm {k}")
        fitted[:, k - 1] = X1 @ ols_fit(X1[sel], records.Y[sel])
    draws = sample(factor, B, seed).draws
    arms_b = discretize(draws, quantile_thresholds(K))
    imputed = fitted[np.arange(n)[None, :], arms_b - 1]
    Yb = np.where(arms_b == arms_obs[None, :], records.Y[None, :], imputed)
    estimates = K / n * np.sum(w[arms_b - 1] * Yb, axis=1)
    return _empirical_interval(estimates, alpha, B)


@dataclass(frozen=True)
class ContinuousModelSpec:
    """Imputation model and estimand for the continuous randomization CI.

    ``regressors(X, t)`` maps covariates (n, d) and a treatment vector (n,)
    to the regression design matrix (n, p); ``weight`` is the estimand's
    weight function.
    """

    regressors: object
    weight: WeightFn
    label: str = "continuous"


def randomization_ci_continuous(records: ExperimentRecords, factor: CorrelationFactor,
                                model_spec: ContinuousModelSpec, B, alpha,
                                seed) -> IntervalReport:
    """Randomization-based CI for the continuous estimand tau_hat_w^c.

    One global model of Y on (X, T) is fit; an imputed outcome is used
    whenever the redrawn T differs from the observed one (with continuous
    draws, always, unless the design is degenerate).
    """
    if B < _MIN_REPLICATES:
        raise ValueError(f"need at least {_MIN_REPLICATES} randomization replicates")
    if records.T is None:
        raise ValueError("continuous procedure requires latent treatments T")
    n = records.n
    A_obs = np.asarray(model_spec.regressors(records.X, records.T), dtype=float)
    coef = ols_fit(A_obs, records.Y)
    draws = sample(factor, B, seed).draws
    estimates = np.empty(B)
    chunk = max(1, 200_000 // n)
    for lo in range(0, B, chunk):
        t_flat = draws[lo:lo + chunk].reshape(-1)
        reps = t_flat.size // n
        x_tiled = None if records.X is None else np.tile(records.X, (reps, 1))
        basis = np.asarray(model_spec.regressors(x_tiled, t_flat), dtype=float)
        fitted = (basis @ coef).reshape(reps, n)
        tb = draws[lo:lo + chunk]
        yb = np.where(tb == records.T[None, :], records.Y[None, :], fitted)
        estimates[lo:lo + reps] = np.mean(yb * weight_eval(model_spec.weight, tb), axis=1)
    return _empirical_interval(estimates, alpha, B)
