"""Projected gradient descent on the correlation elliptope (PGD-Gauss).

Minimizes sum_k w_k^2 ||X^T f_k(Sigma) X||_norm over Sigma = V V^T with
unit-norm rows of V.  One iteration is

    V <- row_normalize( (I - eta * G) V ),
    G  = (A - diag(A)) o f'(V V^T),

where A = X X^T for the nuclear norm and A = X u1 u1^T X^T (u1 the leading
eigenvector of X^T f(Sigma) X) for the operator norm.  Diagonal gradient
entries are fixed at zero: the diagonal of Sigma never moves, and f' blows
up at +-1, so the 0 * f'(+-1) = 0 convention applies.

The default step policy is backtracking line search that accepts the first
step not increasing the objective (within 1e-12); accepted steps warm-start
the next trial step at twice the last accepted size, since the conservative
base step alone makes progress impractically slow on scaled covariates.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .covmap import CovarianceMap, apply_map, build_table
from .elliptope import CorrelationFactor

_GRAD_EDGE = 1e-6   # f' is evaluated no closer to +-1 than this
_ZERO_ROW = 1e-14
_GRAD_TOL = 1e-10
_ACCEPT_SLACK = 1e-12


class OptimizationError(RuntimeError):
    """Raised when the objective turns non-finite; carries the trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class DesignProblem:
    """Covariates plus the covariance map(s) and norm defining the objective.

    ``maps``/``weights`` hold one entry for a single-map objective (the
    combined nuclear map, or a continuous pair passed as two unit-weight
    entries) or per-arm maps with contrast weights for the weighted
    operator-norm objective.
    """

    X: np.ndarray
    maps: tuple
    weights: np.ndarray
    norm: str
    row_normalized: bool = False

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 2:
            raise ValueError("covariate matrix must be 2-D with n >= 2")
        if not np.all(np.isfinite(X)):
            raise ValueError("covariate matrix must be finite")
        if self.norm not in ("nuc", "op"):
            raise ValueError(f"norm must be 'nuc' or 'op', got {self.norm!r}")
        maps = tuple(self.maps)
        w = np.asarray(self.weights, dtype=float)
        if len(maps) != w.size:
            raise ValueError("one weight per covariance map required")
        if self.row_normalized:
            norms = np.linalg.norm(X, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-10):
                raise ValueError("row_normalized set but rows of X are not unit norm")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "weights", w)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]


def design_problem(X, cmap=None, norm="nuc", maps=None, weights=None,
                   row_normalized=False):
    """Convenience constructor for single-map or weighted multi-map problems."""
    if cmap is not None:
        maps, weights = (cmap,), np.ones(1)
    elif maps is None:
        raise ValueError("provide a single map or a list of maps")
    elif weights is None:
        weights = np.ones(len(maps))
    return DesignProblem(X=X, maps=tuple(maps), weights=np.asarray(weights, float),
                         norm=norm, row_normalized=row_normalized)


def _term_matrices(problem, factor):
    """X^T f_j(Sigma) X for every map j."""
    return [problem.X.T @ apply_map(m, factor) @ problem.X for m in problem.maps]


def objective(problem: DesignProblem, factor: CorrelationFactor):
    """sum_j w_j^2 ||X^T f_j(Sigma) X||_norm at Sigma = V V^T."""
    if factor.n != problem.n:
        raise ValueError("factor size does not match covariate rows")
    total = 0.0
    for w, M in zip(problem.weights, _term_matrices(problem, factor)):
        if not np.all(np.isfinite(M)):
            return float("nan")
        sv = np.linalg.svd(M, compute_uv=False) if M.size else np.zeros(1)
        total += w * w * (float(np.sum(sv)) if problem.norm == "nuc" else float(sv[0]))
    return total


def _deriv_offdiag(cmap, g):
    """f'(g) with inputs clipped just inside (-1, 1); diagonal zeroed."""
    clipped = np.clip(g, -1.0 + _GRAD_EDGE, 1.0 - _GRAD_EDGE)
    d = cmap.deriv(clipped)
    np.fill_diagonal(d, 0.0)
    return d


def gradient_nuclear(problem: DesignProblem, factor: CorrelationFactor):
    """(X X^T - diag) o f'(V V^T); diagonal entries exactly zero."""
    g = np.clip(factor.rows @ factor.rows.T, -1.0, 1.0)
    A = problem.X @ problem.X.T
    np.fill_diagonal(A, 0.0)
    grad = np.zeros_like(g)
    for w, cmap in zip(problem.weights, problem.maps):
        grad += (w * w) * A * _deriv_offdiag(cmap, g)
    return grad


@dataclass(frozen=True)
class OperatorGradient:
    matrix: np.ndarray
    is_subgradient: bool


def gradient_operator(problem: DesignProblem, factor: CorrelationFactor):
    """Per-map leading-eigenvector gradients, weighted; flags eigenvalue ties."""
    g = np.clip(factor.rows @ factor.rows.T, -1.0, 1.0)
    grad = np.zeros_like(g)
    degenerate = False
    for w, cmap, M in zip(problem.weights, problem.maps, _term_matrices(problem, factor)):
        lam, U = np.linalg.eigh(M)
        if lam.size >= 2 and lam[-1] - lam[-2] < 1e-10:
            degenerate = True
        u1 = U[:, -1]
        b = problem.X @ u1
        A = np.outer(b, b)
        np.fill_diagonal(A, 0.0)
        grad += (w * w) * A * _deriv_offdiag(cmap, g)
    return OperatorGradient(matrix=grad, is_subgradient=degenerate)


def _gradient(problem, factor):
    if problem.norm == "nuc":
        return gradient_nuclear(problem, factor)
    return gradient_operator(problem, factor).matrix


def pgd_step(factor: CorrelationFactor, grad, eta) -> CorrelationFactor:
    """Multiplicative update (I - eta G) V followed by row renormalization."""
    if eta < 0:
        raise ValueError("step size must be nonnegative")
    rows = factor.rows - eta * (grad @ factor.rows)
    norms = np.linalg.norm(rows, axis=1)
    dead = norms < _ZERO_ROW
    if np.any(dead):
        warnings.warn(f"pgd_step: rows {np.flatnonzero(dead).tolist()} collapsed; "
                      "keeping previous values", RuntimeWarning)
        rows[dead] = factor.rows[dead]
        norms[dead] = 1.0
    return CorrelationFactor(rows / norms[:, None])


@dataclass(frozen=True)
class FixedStep:
    eta: float


@dataclass(frozen=True)
class Backtracking:
    eta0: float
    shrink: float = 0.5
    max_halvings: int = 30
    grow: float = 2.0


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    objective: float
    eta: float
    grad_norm: float
    halvings: int


@dataclass
class OptimizerTrace:
    initial_objective: float
    rows: list = field(default_factory=list)

    @property
    def objectives(self):
        return np.array([r.objective for r in self.rows])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iteration,objective,eta,grad_norm,halvings\n")
            for r in self.rows:
                fh.write(f"{r.iteration},{r.objective:.17g},{r.eta:.17g},"
                         f"{r.grad_norm:.17g},{r.halvings}\n")


def cap_rank(factor: CorrelationFactor, k) -> CorrelationFactor:
    """Re-embed rows into their top-k principal coordinates and renormalize.

    This is an approximation: unless the factor already has rank <= k, the
    renormalized product V V^T differs from the original correlation matrix.
    """
    if k < 1:
        raise ValueError("rank cap must be positive")
    if k >= factor.k:
        return factor
    _, _, vt = np.linalg.svd(factor.rows, full_matrices=False)
    rows = factor.rows @ vt[:k].T
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("rank cap annihilated a row; choose a larger k")
    return CorrelationFactor(rows / norms)


def default_eta0(problem: DesignProblem):
    """0.1 / (1 + max offdiag |X X^T| * max |f'| over the table grid)."""
    A = np.abs(problem.X @ problem.X.T)
    np.fill_diagonal(A, 0.0)
    dmax = 0.0
    for w, cmap in zip(problem.weights, problem.maps):
        tab = cmap if cmap.table is not None else build_table(cmap)
        dmax += w * w * float(np.max(np.abs(tab.table.d_values)))
    return 0.1 / (1.0 + float(A.max()) * dmax)


def _tabulated(problem: DesignProblem):
    maps = tuple(m if m.table is not None else build_table(m) for m in problem.maps)
    return DesignProblem(X=problem.X, maps=maps, weights=problem.weights,
                         norm=problem.norm, row_normalized=problem.row_normalized)


def pgd_gauss(problem: DesignProblem, init: CorrelationFactor, iters,
              step_policy=None):
    """Run PGD-Gauss for ``iters`` iterations; returns (factor, trace).

    Maps are tabulated on entry (the objective touches all n^2 entries every
    iteration).  With the backtracking policy the objective trace is
    non-increasing; iteration stops early once the gradient norm falls below
    1e-10 or no acceptable step exists.
    """
    if iters < 0:
        raise ValueError("iteration count must be nonnegative")
    if not np.isfinite(objective(problem, init)):
        raise OptimizationError("objective non-finite at the initial design",
                                OptimizerTrace(initial_objective=np.nan))
    work = _tabulated(problem)
    if step_policy is None:
        step_policy = Backtracking(eta0=default_eta0(work))
    factor = init
    obj = objective(work, factor)
    trace = OptimizerTrace(initial_objective=obj)
    eta_prev = None
    for t in range(1, int(iters) + 1):
        grad = _gradient(work, factor)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < _GRAD_TOL:
            break
        if isinstance(step_policy, FixedStep):
            factor = pgd_step(factor, grad, step_policy.eta)
            obj = objective(work, factor)
            if not np.isfinite(obj):
                raise OptimizationError(f"objective non-finite at iteration {t}", trace)
            trace.rows.append(TraceRow(t, obj, step_policy.eta, gnorm, 0))
            continue

        def try_eta(eta):
            cand = pgd_step(factor, grad, eta)
            cand_obj = objective(work, cand)
            if not np.isfinite(cand_obj):
                raise OptimizationError(f"objective non-finite at iteration {t}", trace)
            return cand, cand_obj

        base = step_policy.eta0 if eta_prev is None else eta_prev
        # Probe the grown step against the held step and keep the better
        # acceptable one; pure growth with non-increase acceptance drifts the
        # step into a zone of vanishing progress near the f' barrier.
        accepted = None
        halvings = 0
        grown, grown_obj = try_eta(base * step_policy.grow)
        held, held_obj = try_eta(base)
        if grown_obj <= min(held_obj, obj + _ACCEPT_SLACK):
            accepted = (grown, grown_obj, base * step_policy.grow, 0)
        elif held_obj <= obj + _ACCEPT_SLACK:
            accepted = (held, held_obj, base, 0)
        else:
            eta = base * step_policy.shrink
            while halvings < step_policy.max_halvings:
                halvings += 1
                cand, cand_obj = try_eta(eta)
                if cand_obj <= obj + _ACCEPT_SLACK:
                    accepted = (cand, cand_obj, eta, halvings)
                    break
                eta *= step_policy.shrink
        if accepted is None:
            # No descent step within the halving budget: the gradient is
            # stale at this point, so further iterations cannot help.
            trace.rows.append(TraceRow(t, obj, 0.0, gnorm, halvings))
            break
        factor, obj, eta_prev, halvings = accepted
        trace.rows.append(TraceRow(t, obj, eta_prev, gnorm, halvings))
    return factor, trace
