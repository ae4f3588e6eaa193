"""Horvitz-Thompson estimators for discrete arms and continuous treatments.

Discrete arms use tau_hat_k = (K/n) sum_i 1{D_i = k} Y_i and weighted
combinations over arms.  Continuous (Gaussian-design) treatments use
tau_hat = (1/n) sum_i Y_i w(T_i) for a pre-specified weight function w;
polynomial weights identify average derivatives via Stein's lemma
(w(t) = (t - mu)/sigma^2 for the first, ((t - mu)^2/sigma^2 - 1)/sigma^2
for the second), and the interval weight 1{t in [r, l]} / ((l - r) phi(t))
identifies the averaged response over [r, l].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .covmap import discretize, quantile_thresholds
from .hermite import gauss_hermite_nodes

_PHI_FLOOR = 1e-300
_Z999 = float(ndtri(0.999))


def _phi(t):
    return np.exp(-0.5 * np.asarray(t, dtype=float) ** 2) / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class WeightFn:
    """Continuous-treatment weight function w(t)."""

    tag: str
    r: float = None
    l: float = None
    mu: float = None
    sigma: float = None
    fn: object = None

    @classmethod
    def interval(cls, r, l):
        if not r < l:
            raise ValueError("interval weight requires r < l")
        return cls(tag="interval", r=float(r), l=float(l))

    @classmethod
    def first_derivative(cls, mu=0.0, sigma=1.0):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return cls(tag="first_derivative", mu=float(mu), sigma=float(sigma))

    @classmethod
    def second_derivative(cls, mu=0.0, sigma=1.0):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return cls(tag="second_derivative", mu=float(mu), sigma=float(sigma))

    @classmethod
    def custom(cls, fn):
        return cls(tag="custom", fn=fn)

    def __call__(self, t):
        return weight_eval(self, t)


def weight_eval(weight: WeightFn, t):
    """Evaluate a weight function at treatment value(s) t."""
    t = np.asarray(t, dtype=float)
    if weight.tag == "interval":
        dens = _phi(t)
        return np.where((t >= weight.r) & (t <= weight.l),
                        1.0 / ((weight.l - weight.r) * np.maximum(dens, _PHI_FLOOR)),
                        0.0)
    if weight.tag == "first_derivative":
        return (t - weight.mu) / weight.sigma ** 2
    if weight.tag == "second_derivative":
        return ((t - weight.mu) ** 2 / weight.sigma ** 2 - 1.0) / weight.sigma ** 2
    if weight.tag == "custom":
        return np.asarray(weight.fn(t), dtype=float)
    raise ValueError(f"unknown weight tag {weight.tag!r}")


@dataclass(frozen=True)
class EstimandSpec:
    """What to estimate: a single arm mean, an arm contrast, or a weighted
    continuous functional."""

    kind: str
    K: int = None
    k: int = None
    w: np.ndarray = None
    weight: WeightFn = None
    label: str = ""

    @classmethod
    def arm(cls, k, K, label=None):
        if not 1 <= k <= K:
            raise ValueError(f"arm index {k} out of range 1..{K}")
        return cls(kind="arm", K=int(K), k=int(k), label=label or f"arm_{k}")

    @classmethod
    def contrast(cls, w, K, label=None):
        w = np.asarray(w, dtype=float)
        if w.shape != (K,):
            raise ValueError(f"contrast needs {K} weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("contrast weights must be finite")
        return cls(kind="contrast", K=int(K), w=w, label=label or "contrast")

    @classmethod
    def continuous(cls, weight: WeightFn, label=None):
        return cls(kind="continuous", weight=weight, label=label or weight.tag)

    @property
    def arm_weights(self):
        """Per-arm weight vector (e_k for an arm estimand)."""
        if self.kind == "arm":
            e = np.zeros(self.K)
            e[self.k - 1] = 1.0
            return e
        if self.kind == "contrast":
            return self.w
        raise ValueError("continuous estimand has no arm weights")


@dataclass(frozen=True)
class ExperimentRecords:
    """Column-wise per-unit experiment data.

    Discrete analyses need D (arm in 1..K), or T plus a declared K; continuous
    analyses need T and Y.  X carries covariates for imputation models.
    """

    Y: np.ndarray
    X: np.ndarray = None
    T: np.ndarray = None
    D: np.ndarray = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        object.__setattr__(self, "Y", Y)
        if self.X is not None:
            object.__setattr__(self, "X", np.asarray(self.X, dtype=float))
        if self.T is not None:
            object.__setattr__(self, "T", np.asarray(self.T, dtype=float))
        if self.D is not None:
            object.__setattr__(self, "D", np.asarray(self.D, dtype=int))

    @property
    def n(self):
        return self.Y.size

    def arms(self, K):
        """Observed arms; latent T is discretized through the shared map g."""
        if self.D is not None:
            if np.any((self.D < 1) | (self.D > K)):
                raise ValueError(f"arm labels outside 1..{K}")
            return self.D
        if self.T is None:
            raise ValueError("records carry neither arms D nor latent T")
        return discretize(self.T, quantile_thresholds(K))


def records_to_csv(path, records: ExperimentRecords):
    n = records.n
    d = 0 if records.X is None else records.X.shape[1]
    cols = ["unit", "T", "D", "Y"] + [f"x{j + 1}" for j in range(d)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(n):
            t = "" if records.T is None else f"{records.T[i]:.17g}"
            dd = "" if records.D is None else str(int(records.D[i]))
            row = [str(i + 1), t, dd, f"{records.Y[i]:.17g}"]
            row += [f"{records.X[i, j]:.17g}" for j in range(d)]
            fh.write(",".join(row) + "\n")


def records_from_csv(path) -> ExperimentRecords:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    idx = {name: j for j, name in enumerate(header)}
    for required in ("unit", "Y"):
        if required not in idx:
            raise ValueError(f"records CSV missing column {required!r}")
    Y = np.array([float(r[idx["Y"]]) for r in rows])
    T = D = None
    if "T" in idx and any(r[idx["T"]] for r in rows):
        T = np.array([float(r[idx["T"]]) if r[idx["T"]] else np.nan for r in rows])
    if "D" in idx and any(r[idx["D"]] for r in rows):
        D = np.array([int(r[idx["D"]]) if r[idx["D"]] else -1 for r in rows])
    xcols = [c for c in header if c.startswith("x")]
    X = None
    if xcols:
        X = np.array([[float(r[idx[c]]) for c in xcols] for r in rows])
    return ExperimentRecords(Y=Y, X=X, T=T, D=D)


def ht_arm(records: ExperimentRecords, k, K):
    """(K/n) sum_i 1{D_i = k} Y_i."""
    if records.n == 0:
        raise ValueError("no experimental records")
    if not 1 <= k <= K:
        raise ValueError(f"arm index {k} out of range 1..{K}")
    arms = records.arms(K)
    return float(K / records.n * np.sum(records.Y[arms == k]))


def ht_contrast(records: ExperimentRecords, w, K):
    """sum_k w_k tau_hat_k."""
    w = np.asarray(w, dtype=float)
    if w.shape != (K,):
        raise ValueError(f"contrast needs {K} weights, got shape {w.shape}")
    return float(sum(w[k - 1] * ht_arm(records, k, K) for k in range(1, K + 1)))


def ht_continuous(records: ExperimentRecords, weight: WeightFn):
    """(1/n) sum_i Y_i w(T_i)."""
    if records.T is None:
        raise ValueError("continuous estimator requires latent treatments T")
    if weight.tag == "interval":
        dens = _phi(records.T)
        bad = np.flatnonzero((dens < _PHI_FLOOR)
                             & (records.T >= weight.r) & (records.T <= weight.l))
        if bad.size:
            raise FloatingPointError(
                f"interval weight underflows phi(T) at unit {int(bad[0]) + 1}")
    return float(np.mean(records.Y * weight_eval(weight, records.T)))


def rescale_treatment(t, a, b):
    """Affine map sending N(0,1) draws into [a, b] with probability > 0.998."""
    if not a < b:
        raise ValueError("need a < b")
    t = np.asarray(t, dtype=float)
    out = (a + b) / 2.0 + t * (b - a) / (2.0 * _Z999)
    return out if out.ndim else float(out)


def true_estimand(potential_outcomes, spec: EstimandSpec, nodes=200):
    """Exact estimand value from full potential outcomes.

    Discrete: ``potential_outcomes`` is the n x K table.  Continuous: a
    callable mapping a node vector t (m,) to the n x m response matrix; the
    integral against phi is done by Gauss-Hermite quadrature.
    """
    if spec.kind in ("arm", "contrast"):
        table = np.asarray(potential_outcomes, dtype=float)
        means = table.mean(axis=0)
        if spec.kind == "arm":
            return float(means[spec.k - 1])
        return float(np.dot(spec.w, means))
    x, wq = gauss_hermite_nodes(nodes)
    vals = np.asarray(potential_outcomes(x), dtype=float)
    wt = weight_eval(spec.weight, x)
    return float(np.mean(vals @ (wq * wt)))
