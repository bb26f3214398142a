"""Discrete weak optimal transport over the transportation polytope.

For samples ``xs`` (n points, weights p) and ``ys`` (m points, weights q) the
weak kernel cost of a plan pi is

    F(pi) = <L, pi> + gamma/2 * sum_i (pi_i K pi_i^T) / p_i,
    L_ij  = 1/2 k(x_i,x_i) + (1-gamma)/2 k(y_j,y_j) - k(x_i,y_j),   K = k(ys, ys),

which equals sum_i p_i C(x_i, pi_i / p_i) on feasible plans. K is PSD, so F
is a convex quadratic for every gamma >= 0 and conditional gradient with an
exact line search applies directly.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse

from . import cost as cost_mod
from .cost import WeakCostSpec

_MARGINAL_TOL = 1e-9


class DwotError(ValueError):
    pass


@dataclass
class Coupling:
    matrix: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        if self.matrix.shape != (len(self.p), len(self.q)):
            raise DwotError(f"plan shape {self.matrix.shape} does not match marginals")
        if np.any(self.p <= 0):
            raise DwotError("every row marginal must be positive")

    def marginal_error(self) -> float:
        return float(max(np.abs(self.matrix.sum(1) - self.p).max(), np.abs(self.matrix.sum(0) - self.q).max()))

    def check(self, tol: float = _MARGINAL_TOL) -> None:
        if self.marginal_error() > tol:
            raise DwotError(f"plan marginals off by {self.marginal_error():.3g}")
        if self.matrix.min() < -1e-12:
            raise DwotError("plan has negative entries")

    @classmethod
    def product(cls, p, q) -> "Coupling":
        p, q = np.asarray(p, float), np.asarray(q, float)
        return cls(np.outer(p, q), p, q)

    @classmethod
    def identity(cls, n: int) -> "Coupling":
        w = np.full(n, 1.0 / n)
        return cls(np.diag(w), w, w)


class LineSearch(str, enum.Enum):
    EXACT = "exact"
    DIMINISHING = "diminishing"


@dataclass
class FwConfig:
    max_iters: int = 2000
    gap_tol: Optional[float] = None  # None: 1e-6 * |initial objective|
    line_search: LineSearch = LineSearch.EXACT

    def __post_init__(self):
        self.line_search = LineSearch(self.line_search)
        if self.max_iters < 1:
            raise DwotError("max_iters must be >= 1")
        if self.gap_tol is not None and not self.gap_tol > 0:
            raise DwotError("gap_tol must be positive")


@dataclass
class PlanStats:
    cvar: float
    dist_sq: float
    cost: float


@dataclass
class FwResult:
    plan: Coupling
    trace: list = field(default_factory=list)
    converged: bool = False
    gap: float = math.inf
    warnings: list = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.trace[-1]["objective"]

    def __iter__(self):
        yield self.plan
        yield self.trace


def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def _check_marginals(p, q) -> tuple[np.ndarray, np.ndarray]:
    p, q = np.asarray(p, float), np.asarray(q, float)
    if np.any(p < 0) or np.any(q < 0):
        raise DwotError("marginals must be nonnegative")
    if abs(p.sum() - q.sum()) > _MARGINAL_TOL:
        raise DwotError(f"infeasible marginals: sums {p.sum()!r} vs {q.sum()!r}")
    return p, q


class WeakOTProblem:
    """Kernel matrices for one (spec, xs, ys) instance, computed once."""

    def __init__(self, spec: WeakCostSpec, xs, ys):
        self.spec = spec
        self.xs = _points(xs)
        self.ys = _points(ys)
        if self.xs.shape[1] != self.ys.shape[1]:
            raise DwotError("xs and ys have different dimensions")
        k, g = spec.kernel, spec.gamma
        self.kxx = cost_mod.kernel_diag(k, self.xs)
        self.kyy = cost_mod.kernel_diag(k, self.ys)
        self.K = cost_mod.gram(k, self.ys, self.ys)
        self.linear = 0.5 * self.kxx[:, None] + 0.5 * (1 - g) * self.kyy[None, :] - cost_mod.gram(k, self.xs, self.ys)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.xs), len(self.ys)

    def objective(self, matrix, p, piK=None) -> float:
        if piK is None:
            piK = matrix @ self.K
        quad = np.sum(matrix * piK, axis=1) / p
        return float(np.sum(self.linear * matrix) + 0.5 * self.spec.gamma * quad.sum())

    def gradient(self, matrix, p, piK=None) -> np.ndarray:
        if piK is None:
            piK = matrix @ self.K
        return self.linear + self.spec.gamma * piK / p[:, None]


def _unpack(plan, p=None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(plan, Coupling):
        return plan.matrix, plan.p
    matrix = np.asarray(plan, dtype=float)
    if p is None:
        raise DwotError("a bare matrix needs its row marginal p")
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0):
        raise DwotError("every row marginal must be positive")
    return matrix, p


def wot_objective(spec: WeakCostSpec, xs, ys, plan, p=None) -> float:
    """Weak transport cost of a plan; the row marginal p is held fixed.

    Written as <L, pi> + gamma/2 sum_i pi_i K pi_i^T / p_i so that it is a
    smooth function of all matrix entries (needed for finite differences).
    """
    matrix, p = _unpack(plan, p)
    return WeakOTProblem(spec, xs, ys).objective(matrix, p)


def wot_gradient(spec: WeakCostSpec, xs, ys, plan, p=None) -> np.ndarray:
    matrix, p = _unpack(plan, p)
    return WeakOTProblem(spec, xs, ys).gradient(matrix, p)


def _emd():
    # keep POT from importing deep-learning backends it does not need here
    for name in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{name}", "1")
    import ot

    return ot.emd


def linear_ot(cost, p, q) -> Coupling:
    """Exact minimizer of <cost, pi> over the transportation polytope (a vertex)."""
    cost = np.ascontiguousarray(cost, dtype=float)
    p, q = _check_marginals(p, q)
    if cost.shape != (len(p), len(q)):
        raise DwotError("cost shape does not match marginals")
    if len(p) == 1:
        return Coupling(q[None, :].copy(), p, q)
    with warnings.catch_warnings():
        warnings.simplefilter("error", UserWarning)
        matrix = _emd()(p, q, cost, numItermax=50_000_000)
    return Coupling(matrix, p, q)


def solve_frank_wolfe(spec: WeakCostSpec, xs, ys, p=None, q=None, config: Optional[FwConfig] = None,
                      init: Optional[Coupling] = None) -> FwResult:
    """Conditional gradient from the product plan (or ``init``).

    Each trace entry records the objective and FW gap at the current iterate
    and the step taken from it. Iterates stay feasible because every update
    is a convex combination of feasible plans.
    """
    config = config or FwConfig()
    problem = WeakOTProblem(spec, xs, ys)
    n, m = problem.shape
    p = np.full(n, 1.0 / n) if p is None else np.asarray(p, float)
    q = np.full(m, 1.0 / m) if q is None else np.asarray(q, float)
    p, q = _check_marginals(p, q)
    if np.any(p <= 0):
        raise DwotError("zero row marginal: conditional plan undefined")
    result = FwResult(plan=Coupling.product(p, q) if init is None else init)
    if not spec.appropriate:
        result.warnings.append(f"gamma={spec.gamma} > 1: cost is not appropriate")

    pi = result.plan.matrix.copy()
    piK = pi @ problem.K
    obj = problem.objective(pi, p, piK)
    gap_tol = config.gap_tol if config.gap_tol is not None else 1e-6 * max(abs(obj), 1e-12)
    g = spec.gamma
    for t in range(config.max_iters):
        G = problem.gradient(pi, p, piK)
        s = linear_ot(G, p, q).matrix
        d = s - pi
        gap = float(-np.sum(G * d))
        if gap <= gap_tol:
            result.trace.append({"iter": t, "objective": obj, "gap": gap, "step": 0.0})
            result.converged = True
            break
        sK = scipy.sparse.csr_matrix(s) @ problem.K
        dK = sK - piK
        a = 0.5 * g * float(np.sum(np.sum(d * dK, axis=1) / p))
        b = -gap
        if config.line_search is LineSearch.EXACT and a > 1e-15:
            step = min(max(-b / (2 * a), 0.0), 1.0)
        else:
            step = 2.0 / (t + 2.0)
        result.trace.append({"iter": t, "objective": obj, "gap": gap, "step": step})
        pi += step * d
        piK += step * dK
        obj = problem.objective(pi, p, piK)
    else:
        G = problem.gradient(pi, p, piK)
        gap = float(np.sum(G * (pi - linear_ot(G, p, q).matrix)))
        result.trace.append({"iter": config.max_iters, "objective": obj, "gap": gap, "step": 0.0})
        result.converged = gap <= gap_tol
    result.gap = result.trace[-1]["gap"]
    result.plan = Coupling(pi, p, q)
    return result


def plan_stats(spec: WeakCostSpec, xs, ys, plan: Coupling) -> PlanStats:
    """Conditional feature variance, squared input-output feature distance and cost."""
    xs, ys = _points(xs), _points(ys)
    matrix, p = plan.matrix, plan.p
    k = spec.kernel
    dist_sq = float(np.sum(matrix * cost_mod.feature_sqdist(k, xs, ys)))
    K = cost_mod.gram(k, ys, ys)
    kyy = cost_mod.kernel_diag(k, ys)
    cond = matrix / p[:, None]
    row_var = cond @ kyy - np.sum((cond @ K) * cond, axis=1)
    cvar = float(p @ row_var)
    return PlanStats(cvar=cvar, dist_sq=dist_sq, cost=wot_objective(spec, xs, ys, plan))


def conditional_profile(plan: Coupling, ys) -> tuple[np.ndarray, np.ndarray]:
    """Per-row conditional mean and variance of 1D targets."""
    ys = np.asarray(ys, dtype=float).reshape(-1)
    if len(ys) != plan.matrix.shape[1]:
        raise DwotError("ys does not match the plan's columns")
    if np.any(plan.p <= 0):
        raise DwotError("zero row marginal")
    cond = plan.matrix / plan.p[:, None]
    mean = cond @ ys
    var = np.maximum(cond @ ys**2 - mean**2, 0.0)
    return mean, var


def write_plan_csv(plan: Coupling, path) -> None:
    """Rows: ``n,<n>,m,<m>``, then ``p,...``, ``q,...``, then the matrix row by row."""
    n, m = plan.matrix.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", n, "m", m])
        w.writerow(["p", *(f"{v:.17g}" for v in plan.p)])
        w.writerow(["q", *(f"{v:.17g}" for v in plan.q)])
        for row in plan.matrix:
            w.writerow([f"{v:.17g}" for v in row])


def read_plan_csv(path) -> Coupling:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    n, m = int(rows[0][1]), int(rows[0][3])
    p = np.array(rows[1][1:], dtype=float)
    q = np.array(rows[2][1:], dtype=float)
    matrix = np.array(rows[3:3 + n], dtype=float)
    if matrix.shape != (n, m):
        raise DwotError("plan CSV body does not match its header")
    return Coupling(matrix, p, q)
