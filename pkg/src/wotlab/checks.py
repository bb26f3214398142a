"""Self-checks run by ``wotlab checks``: identities, estimator unbiasedness,
finite-difference gradients, Gaussian oracle consistency and solver sanity.

Each check returns ``(passed, detail)``. The estimator used by the
unbiasedness suite is injectable so that a deliberately broken estimator can
be shown to fail.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import cost as cost_mod
from .cost import Bilinear, DistanceInduced, GaussianRBF, Laplacian, WeakCostSpec
from .dist import Empirical, isotropic_gaussian
from .dwot import (Coupling, FwConfig, linear_ot, plan_stats, solve_frank_wolfe, wot_gradient,
                   wot_objective)
from .nnot import MlpNet, NotConfig, f_step, mlp_backward, mlp_forward, t_step
from .oracle import Verdict, fake_solution_diagnostic, projection_gaussian, w2_gamma_squared_gaussian
from .rng import stream

IDENTITY_TOL = 1e-10
NET_GRAD_TOL = 1e-5
SOLVER_GRAD_TOL = 1e-6
FD_STEP = 1e-4


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str
    seconds: float


def _close(a: float, b: float, tol: float = IDENTITY_TOL) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def random_kernel(rng: np.random.Generator):
    kind = rng.integers(4)
    if kind == 0:
        return Bilinear()
    if kind == 1:
        return DistanceInduced(float(rng.uniform(0.5, 1.9)))
    if kind == 2:
        return GaussianRBF(float(rng.uniform(0.5, 3.0)))
    return Laplacian(float(rng.uniform(0.5, 3.0)))


def random_measure(rng: np.random.Generator, dim: int, size: Optional[int] = None) -> Empirical:
    size = size or int(rng.integers(2, 7))
    w = rng.dirichlet(np.ones(size))
    w[-1] = 1.0 - w[:-1].sum()
    return Empirical.from_arrays(rng.normal(size=(size, dim)) * 1.5 + rng.normal(size=dim), w)


# ---------------------------------------------------------------------------
# Identities
# ---------------------------------------------------------------------------

def check_identities(instances: int = 100, seed: int = 0) -> tuple[bool, str]:
    """Closed forms of the weak costs, the variance and the plan statistics agree."""
    rng = stream(seed, "identities")
    worst = 0.0
    failures = []
    for i in range(instances):
        dim = int(rng.integers(1, 4))
        mu = random_measure(rng, dim)
        Y, w = mu.array, mu.weight_array
        x = rng.normal(size=dim)
        gamma = float(rng.uniform(0, 1))

        # weak quadratic cost: kernel form vs 1/2 E|x-y|^2 - gamma/2 Var
        centered, pairwise = cost_mod.variance_forms(mu)
        direct = 0.5 * float(w @ np.sum((Y - x) ** 2, axis=1)) - 0.5 * gamma * centered
        bil = WeakCostSpec(Bilinear(), gamma)
        pairs = [
            ("variance forms", centered, pairwise),
            ("bilinear cost vs quadratic form", cost_mod.weak_cost_exact(bil, x, mu), direct),
            ("bilinear feature form", cost_mod.weak_cost_feature_form(bil, x, mu), cost_mod.weak_cost_exact(bil, x, mu)),
        ]
        alpha = float(rng.uniform(0.3, 2.0))
        dspec = WeakCostSpec(DistanceInduced(alpha), gamma)
        dxy = np.linalg.norm(Y - x, axis=1) ** alpha
        dyy = np.linalg.norm(Y[:, None] - Y[None], axis=2) ** alpha
        pairs.append(("distance cost vs norm form", cost_mod.weak_cost_exact(dspec, x, mu),
                      0.5 * float(w @ dxy) - 0.25 * gamma * float(w @ dyy @ w)))
        kspec = WeakCostSpec(random_kernel(rng), gamma)
        pairs.append(("feature form", cost_mod.weak_cost_feature_form(kspec, x, mu), cost_mod.weak_cost_exact(kspec, x, mu)))
        kv = cost_mod.kernel_variance(kspec.kernel, mu)
        pairs.append(("kernel variance forms", kv, 0.5 * float(w @ cost_mod.feature_sqdist(kspec.kernel, Y, Y) @ w)))

        # plan statistics on a random feasible plan
        n = int(rng.integers(1, 5))
        xs = rng.normal(size=(n, dim))
        plan = Coupling(np.outer(np.full(n, 1.0 / n), w) * rng.uniform(0.5, 1.5, size=(n, len(w))),
                        np.full(n, 1.0 / n), w)
        plan.matrix *= (plan.p / plan.matrix.sum(1))[:, None]
        plan.q = plan.matrix.sum(0)
        stats = plan_stats(kspec, xs, Y, plan)
        pairs.append(("plan stats identity", stats.cost, 0.5 * stats.dist_sq - 0.5 * gamma * stats.cvar))
        per_row = sum(plan.p[r] * cost_mod.weak_cost_exact(kspec, xs[r], Empirical.from_arrays(Y, plan.matrix[r] / plan.p[r]))
                      for r in range(n))
        pairs.append(("plan objective vs per-row costs", stats.cost, per_row))
        for name, a, b in pairs:
            err = abs(a - b) / max(1.0, abs(a), abs(b))
            worst = max(worst, err)
            if err > IDENTITY_TOL:
                failures.append(f"{name} (instance {i}): {a!r} vs {b!r}")
    if failures:
        return False, "; ".join(failures[:3])
    return True, f"{instances} instances, worst relative error {worst:.2e}"


# ---------------------------------------------------------------------------
# Estimator unbiasedness
# ---------------------------------------------------------------------------

def _mc_mean(estimator, spec, x, support, weights, batches: int, size: int, rng):
    idx = rng.choice(len(support), size=(batches, size), p=weights)
    vals = np.array([estimator(spec, x, support[row]) for row in idx])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(batches))


def check_unbiased_fixed(estimator: Callable = cost_mod.weak_cost_estimator, batches: int = 100_000,
                         seed: int = 0) -> tuple[bool, str]:
    """x=0, mu uniform on {-1,+1}, bilinear gamma=1: exact value 0."""
    spec = WeakCostSpec(Bilinear(), 1.0)
    support = np.array([[-1.0], [1.0]])
    mean, se = _mc_mean(estimator, spec, np.zeros(1), support, np.array([0.5, 0.5]), batches, 2,
                        stream(seed, "unbiased-fixed"))
    return abs(mean) <= 0.01, f"mean {mean:.5f} (se {se:.5f}) vs exact 0"


def check_unbiased_random(estimator: Callable = cost_mod.weak_cost_estimator, specs: int = 6,
                          batches: int = 20_000, seed: int = 0) -> tuple[bool, str]:
    """Random kernels and measures: Monte-Carlo mean within 3 standard errors of the exact cost."""
    rng = stream(seed, "unbiased-random")
    lines, ok = [], True
    for i in range(specs):
        dim = int(rng.integers(1, 3))
        mu = random_measure(rng, dim, size=int(rng.integers(2, 5)))
        spec = WeakCostSpec(random_kernel(rng), float(rng.uniform(0.2, 1.0)))
        x = rng.normal(size=dim)
        size = int(rng.integers(2, 4))
        exact = cost_mod.weak_cost_exact(spec, x, mu)
        mean, se = _mc_mean(estimator, spec, x, mu.array, mu.weight_array, batches, size, rng)
        z = abs(mean - exact) / se if se > 0 else (0.0 if mean == exact else math.inf)
        ok &= z <= 3.0
        lines.append(f"{type(spec.kernel).__name__}: z={z:.2f}")
    return ok, ", ".join(lines)


# ---------------------------------------------------------------------------
# Finite-difference gradients
# ---------------------------------------------------------------------------

def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / scale)


def fd_params(loss: Callable[[], float], params: list, h: float = FD_STEP) -> list:
    """Central differences of a scalar loss over every entry of ``params`` (in place, restored)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = loss()
            flat[j] = old - h
            down = loss()
            flat[j] = old
            gflat[j] = (up - down) / (2 * h)
        out.append(g)
    return out


def _flat(grads) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])


def check_mlp_gradients(seeds: int = 10, activation: str = "silu") -> tuple[bool, str]:
    worst = 0.0
    for s in range(seeds):
        rng = stream(s, "grad-mlp")
        net = MlpNet.init((3, 6, 5, 2), rng, activation)
        X = rng.normal(size=(4, 3))
        C = rng.normal(size=(4, 2))
        grads, gx = mlp_backward(net, X, C)
        fd = fd_params(lambda: float(np.sum(mlp_forward(net, X) * C)), net.params)
        fdx = fd_params(lambda: float(np.sum(mlp_forward(net, X) * C)), [X])[0]
        worst = max(worst, rel_err(_flat(grads), _flat(fd)), rel_err(gx, fdx))
    return worst <= NET_GRAD_TOL, f"{seeds} seeds, worst relative error {worst:.2e}"


def _tiny_setup(seed: int, kernel=None):
    rng = stream(seed, "grad-tiny")
    dim, latent = 2, 2
    kernel = kernel or (Bilinear() if seed % 2 == 0 else DistanceInduced(1.0, smoothing=1e-6))
    cfg = NotConfig(WeakCostSpec(kernel, float(rng.uniform(0.2, 1.0))), latent_dim=latent, hidden=(5, 5))
    T = MlpNet.init((dim + latent, 5, 5, dim), rng)
    f = MlpNet.init((dim, 5, 5, 1), rng)
    X = rng.normal(size=(3, dim))
    Z = rng.normal(size=(3, 2, latent))
    Y = rng.normal(size=(4, dim))
    return cfg, T, f, X, Z, Y


def check_t_step_gradients(seeds: int = 10) -> tuple[bool, str]:
    worst = 0.0
    for s in range(seeds):
        cfg, T, f, X, Z, _ = _tiny_setup(s)
        res = t_step(cfg, T, f, X, Z)
        fd = fd_params(lambda: t_step(cfg, T, f, X, Z).loss, T.params)
        worst = max(worst, rel_err(_flat(res.grads), _flat(fd)))
    return worst <= NET_GRAD_TOL, f"{seeds} seeds, worst relative error {worst:.2e}"


def check_f_step_gradients(seeds: int = 10) -> tuple[bool, str]:
    worst = 0.0
    for s in range(seeds):
        cfg, T, f, X, Z, Y = _tiny_setup(s)
        _, grads = f_step(cfg, T, f, X, Z, Y)
        fd = fd_params(lambda: f_step(cfg, T, f, X, Z, Y)[0], f.params)
        worst = max(worst, rel_err(_flat(grads), _flat(fd)))
    return worst <= NET_GRAD_TOL, f"{seeds} seeds, worst relative error {worst:.2e}"


def check_solver_gradient(seeds: int = 10) -> tuple[bool, str]:
    worst = 0.0
    for s in range(seeds):
        rng = stream(s, "grad-solver")
        n, m = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        xs, ys = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        spec = WeakCostSpec(random_kernel(rng), float(rng.uniform(0, 1)))
        p = rng.dirichlet(np.ones(n))
        plan = rng.uniform(size=(n, m))
        G = wot_gradient(spec, xs, ys, plan, p)
        fd = fd_params(lambda: wot_objective(spec, xs, ys, plan, p), [plan], h=1e-5)[0]
        worst = max(worst, rel_err(G, fd))
    return worst <= SOLVER_GRAD_TOL, f"{seeds} seeds, worst relative error {worst:.2e}"


# ---------------------------------------------------------------------------
# Gaussian oracle
# ---------------------------------------------------------------------------

def check_oracle_verdicts() -> tuple[bool, str]:
    p, q = isotropic_gaussian(2, 0.5), isotropic_gaussian(2, 1.0)
    got = {g: fake_solution_diagnostic(p, q, g).verdict for g in (0.5, 0.75, 1.0)}
    want = {0.5: Verdict.DEGENERATE_BOUNDARY, 0.75: Verdict.FAKE_SADDLE_POINTS_EXIST,
            1.0: Verdict.FAKE_SADDLE_POINTS_EXIST}
    return got == want, ", ".join(f"gamma={g}: {v.value}" for g, v in got.items())


def check_oracle_values(seed: int = 0) -> tuple[bool, str]:
    """Closed form against the cost of the deterministic plan x -> grad phi(x),
    which is optimal when the projection is q itself."""
    rng = stream(seed, "oracle")
    worst = 0.0
    for _ in range(20):
        dim = int(rng.integers(1, 4))
        sp = float(rng.uniform(0.2, 1.0))
        gamma = float(rng.uniform(0.2, 1.0))
        sq = sp / gamma * float(rng.uniform(0.3, 0.9))       # scaled source dominates q
        p, q = isotropic_gaussian(dim, sp), isotropic_gaussian(dim, sq)
        target, pot = projection_gaussian(p, q, gamma)
        # plan x -> y = slope x is deterministic: cost = 1/2 E|x - slope x|^2
        direct = 0.5 * float(np.sum((1 - pot.slope_diag) ** 2 * np.asarray(p.cov_diag)))
        worst = max(worst, abs(direct - w2_gamma_squared_gaussian(p, q, gamma)))
    # gamma = 1 with p dominated by q: the identity barycentric map is feasible, value 0
    p, q = isotropic_gaussian(2, 0.5), isotropic_gaussian(2, 1.0)
    ok = worst <= 1e-12 and abs(w2_gamma_squared_gaussian(p, q, 1.0)) <= 1e-15
    return ok, f"worst deterministic-plan mismatch {worst:.2e}"


# ---------------------------------------------------------------------------
# Discrete solver
# ---------------------------------------------------------------------------

def check_solver_gamma0(seed: int = 0) -> tuple[bool, str]:
    rng = stream(seed, "solver-gamma0")
    worst = 0.0
    for _ in range(5):
        n, m = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        xs, ys = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        spec = WeakCostSpec(DistanceInduced(1.0), 0.0)
        res = solve_frank_wolfe(spec, xs, ys, config=FwConfig(max_iters=1))
        L = wot_gradient(spec, xs, ys, Coupling.product(np.full(n, 1 / n), np.full(m, 1 / m)))
        best = float(np.sum(L * linear_ot(L, np.full(n, 1 / n), np.full(m, 1 / m)).matrix))
        worst = max(worst, abs(res.objective - best))
    return worst <= 1e-10, f"worst gap to the linear optimum {worst:.2e}"


def check_solver_monotone(seed: int = 0) -> tuple[bool, str]:
    rng = stream(seed, "solver-monotone")
    for _ in range(5):
        n, m = int(rng.integers(3, 12)), int(rng.integers(3, 12))
        xs, ys = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        spec = WeakCostSpec(random_kernel(rng), float(rng.choice([1 / 3, 2 / 3, 1.0])))
        res = solve_frank_wolfe(spec, xs, ys, config=FwConfig(max_iters=300))
        obj = np.array([t["objective"] for t in res.trace])
        if np.any(np.diff(obj) > 1e-12 * max(1.0, abs(obj[0]))):
            return False, "objective increased under exact line search"
        if res.plan.marginal_error() > 1e-9:
            return False, f"marginals drifted by {res.plan.marginal_error():.2e}"
    return True, "objective traces non-increasing, marginals within 1e-9"


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

SUITES = {
    "identities": ("identities",),
    "unbiasedness": ("unbiased_fixed", "unbiased_random"),
    "gradients": ("mlp_backward", "t_step", "f_step", "wot_gradient"),
    "oracle": ("oracle_verdicts", "oracle_values"),
    "solver": ("solver_gamma0", "solver_monotone"),
}


def _registry(estimator: Callable) -> dict:
    return {
        "identities": check_identities,
        "unbiased_fixed": lambda: check_unbiased_fixed(estimator),
        "unbiased_random": lambda: check_unbiased_random(estimator),
        "mlp_backward": check_mlp_gradients,
        "t_step": check_t_step_gradients,
        "f_step": check_f_step_gradients,
        "wot_gradient": check_solver_gradient,
        "oracle_verdicts": check_oracle_verdicts,
        "oracle_values": check_oracle_values,
        "solver_gamma0": check_solver_gamma0,
        "solver_monotone": check_solver_monotone,
    }


def run_suites(only: Optional[str] = None, estimator: Optional[Callable] = None) -> list[CheckResult]:
    """Run all suites, or a single suite (or single check) named by ``only``."""
    registry = _registry(estimator or cost_mod.weak_cost_estimator)
    selected = []
    for suite, names in SUITES.items():
        for name in names:
            if only is None or only in (suite, name):
                selected.append((suite, name))
    if not selected:
        raise KeyError(f"no suite or check named {only!r}")
    results = []
    for suite, name in selected:
        t0 = time.perf_counter()
        try:
            passed, detail = registry[name]()
        except Exception as exc:  # a crash is a failure of that check, not of the runner
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(suite, name, bool(passed), detail, time.perf_counter() - t0))
    return results


def run_checks(config, only: Optional[str] = None, estimator: Optional[Callable] = None):
    """``checks`` experiment: pass/fail matrix in checks.csv, exit status 1 on any failure."""
    from .experiments import ConfigError, _Run, write_table

    run = _Run(config)
    try:
        results = run_suites(only, estimator)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    write_table(run.path("checks.csv"), ("suite", "check", "passed", "seconds", "detail"),
                [[r.suite, r.name, int(r.passed), f"{r.seconds:.3f}", r.detail] for r in results])
    for r in results:
        run.metric(f"{r.suite}.{r.name}", float(r.passed))
        if not r.passed:
            run.report.fail("check_failed", f"{r.suite}.{r.name}: {r.detail}")
    run.report.details["checks"] = [r.__dict__ for r in results]
    return run.finish()
