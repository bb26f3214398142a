"""Kernels, weak kernel costs and kernel discrepancies.

The gamma-weak kernel cost of a point ``x`` and a distribution ``mu`` is

    C(x, mu) = 1/2 k(x,x) + (1-gamma)/2 E k(y,y) - E k(x,y) + gamma/2 E k(y,y')

with ``y, y' ~ mu`` independent. With the bilinear kernel this is the
gamma-weak quadratic cost ``1/2 E|x-y|^2 - gamma/2 Var(mu)``.

Everything here works in float64. Array helpers accept leading batch axes:
``A`` of shape ``(..., n, D)`` against ``B`` of shape ``(..., m, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .dist import Empirical, SampleBatch


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class Bilinear:
    characteristic = False


@dataclass(frozen=True)
class DistanceInduced:
    """k(x,y) = 1/2 |x|^a + 1/2 |y|^a - 1/2 |x-y|^a.

    ``smoothing`` replaces every norm |v| by sqrt(|v|^2 + smoothing^2); it is
    only meant for gradient checks and defaults to off.
    """

    alpha: float = 1.0
    smoothing: float = 0.0

    def __post_init__(self):
        if not 0 < self.alpha <= 2:
            raise CostError(f"alpha must lie in (0, 2], got {self.alpha}")

    @property
    def characteristic(self) -> bool:
        return self.alpha < 2


@dataclass(frozen=True)
class GaussianRBF:
    """k(x,y) = exp(-|x-y|^2 / bandwidth); bandwidth defaults to 2D."""

    bandwidth: Optional[float] = None
    characteristic = True


@dataclass(frozen=True)
class Laplacian:
    """k(x,y) = exp(-|x-y| / bandwidth); bandwidth defaults to 2D."""

    bandwidth: Optional[float] = None
    characteristic = True


KernelSpec = Union[Bilinear, DistanceInduced, GaussianRBF, Laplacian]


@dataclass(frozen=True)
class WeakCostSpec:
    kernel: KernelSpec
    gamma: float

    def __post_init__(self):
        if not self.gamma >= 0:
            raise CostError(f"gamma must be >= 0, got {self.gamma}")

    @property
    def appropriate(self) -> bool:
        """Convex, lsc and lower bounded in mu (the existence/duality regime)."""
        return self.gamma <= 1


def kernel_from_dict(data: dict) -> KernelSpec:
    data = dict(data)
    kind = data.pop("type", None)
    if kind == "Bilinear":
        return Bilinear()
    if kind == "DistanceInduced":
        return DistanceInduced(float(data.get("alpha", 1.0)), float(data.get("smoothing", 0.0)))
    if kind in ("GaussianRBF", "Laplacian"):
        bw = data.get("bandwidth")
        cls = GaussianRBF if kind == "GaussianRBF" else Laplacian
        return cls(None if bw is None else float(bw))
    raise CostError(f"unknown kernel type {kind!r}")


def kernel_to_dict(kernel: KernelSpec) -> dict:
    out = {"type": type(kernel).__name__}
    if isinstance(kernel, DistanceInduced):
        out["alpha"] = kernel.alpha
        if kernel.smoothing:
            out["smoothing"] = kernel.smoothing
    elif isinstance(kernel, (GaussianRBF, Laplacian)) and kernel.bandwidth is not None:
        out["bandwidth"] = kernel.bandwidth
    return out


# ---------------------------------------------------------------------------
# Kernel evaluation
# ---------------------------------------------------------------------------

def _bandwidth(kernel, dim: int) -> float:
    return float(kernel.bandwidth) if kernel.bandwidth is not None else 2.0 * dim


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    diff = A[..., :, None, :] - B[..., None, :, :]
    return np.einsum("...ijd,...ijd->...ij", diff, diff)


def _powered_norm(sq: np.ndarray, alpha: float, smoothing: float) -> np.ndarray:
    if smoothing:
        sq = sq + smoothing**2
    return sq ** (alpha / 2)


def gram(kernel: KernelSpec, A, B) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[-1] != B.shape[-1]:
        raise CostError(f"dimension mismatch: {A.shape[-1]} vs {B.shape[-1]}")
    if isinstance(kernel, Bilinear):
        return A @ np.swapaxes(B, -1, -2)
    if isinstance(kernel, DistanceInduced):
        a, s = kernel.alpha, kernel.smoothing
        na = _powered_norm(np.sum(A**2, axis=-1), a, s)
        nb = _powered_norm(np.sum(B**2, axis=-1), a, s)
        return 0.5 * na[..., :, None] + 0.5 * nb[..., None, :] - 0.5 * _powered_norm(_sqdist(A, B), a, s)
    if isinstance(kernel, GaussianRBF):
        return np.exp(-_sqdist(A, B) / _bandwidth(kernel, A.shape[-1]))
    if isinstance(kernel, Laplacian):
        return np.exp(-np.sqrt(_sqdist(A, B)) / _bandwidth(kernel, A.shape[-1]))
    raise CostError(f"unsupported kernel {kernel!r}")


def kernel_diag(kernel: KernelSpec, A) -> np.ndarray:
    """k(a, a) for every row of A."""
    A = np.asarray(A, dtype=float)
    if isinstance(kernel, Bilinear):
        return np.sum(A**2, axis=-1)
    if isinstance(kernel, DistanceInduced):
        a, s = kernel.alpha, kernel.smoothing
        return _powered_norm(np.sum(A**2, axis=-1), a, s) - 0.5 * _powered_norm(np.zeros(A.shape[:-1]), a, s)
    return np.ones(A.shape[:-1])


def kernel_eval(kernel: KernelSpec, x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise CostError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(gram(kernel, x[None], y[None])[0, 0])


def feature_sqdist(kernel: KernelSpec, A, B) -> np.ndarray:
    """|u(a) - u(b)|_H^2 computed from the closed form where one exists."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if isinstance(kernel, Bilinear):
        return _sqdist(A, B)
    if isinstance(kernel, DistanceInduced):
        return _powered_norm(_sqdist(A, B), kernel.alpha, kernel.smoothing)
    return kernel_diag(kernel, A)[..., :, None] + kernel_diag(kernel, B)[..., None, :] - 2 * gram(kernel, A, B)


def _pairwise_grad_first(kernel: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """d k(a_i, b_j) / d a_i with shape (..., n, m, D)."""
    diff = A[..., :, None, :] - B[..., None, :, :]
    if isinstance(kernel, Bilinear):
        return np.broadcast_to(B[..., None, :, :], diff.shape).copy()
    sq = np.einsum("...ijd,...ijd->...ij", diff, diff)
    if isinstance(kernel, DistanceInduced):
        a, s = kernel.alpha, kernel.smoothing
        return 0.5 * _norm_power_grad(A, a, s)[..., :, None, :] - 0.5 * _norm_power_grad_from(diff, sq, a, s)
    bw = _bandwidth(kernel, A.shape[-1])
    if isinstance(kernel, GaussianRBF):
        return (-2.0 / bw) * np.exp(-sq / bw)[..., None] * diff
    if isinstance(kernel, Laplacian):
        r = np.sqrt(sq)
        safe = np.where(r > 0, r, 1.0)
        coef = np.where(r > 0, -np.exp(-r / bw) / (bw * safe), 0.0)
        return coef[..., None] * diff
    raise CostError(f"unsupported kernel {kernel!r}")


def _norm_power_grad_from(v: np.ndarray, sq: np.ndarray, alpha: float, smoothing: float) -> np.ndarray:
    # grad of (|v|^2 + s^2)^(alpha/2); at v = 0 without smoothing the value 0 is used
    sq_s = sq + smoothing**2
    safe = np.where(sq_s > 0, sq_s, 1.0)
    coef = np.where(sq_s > 0, alpha * safe ** (alpha / 2 - 1), 0.0)
    return coef[..., None] * v


def _norm_power_grad(A: np.ndarray, alpha: float, smoothing: float) -> np.ndarray:
    return _norm_power_grad_from(A, np.sum(A**2, axis=-1), alpha, smoothing)


def _diag_grad(kernel: KernelSpec, A: np.ndarray) -> np.ndarray:
    """d k(a, a) / d a."""
    if isinstance(kernel, Bilinear):
        return 2.0 * A
    if isinstance(kernel, DistanceInduced):
        return _norm_power_grad(A, kernel.alpha, kernel.smoothing)
    return np.zeros_like(A)


# ---------------------------------------------------------------------------
# Weak costs
# ---------------------------------------------------------------------------

def _measure(mu) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(mu, Empirical):
        return mu.array, mu.weight_array
    if isinstance(mu, SampleBatch):
        return mu.points, np.full(mu.n, 1.0 / mu.n)
    pts = np.asarray(mu, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts, np.full(len(pts), 1.0 / len(pts))


def _point(x, dim: int) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (dim,):
        raise CostError(f"dimension mismatch: point {x.shape} vs measure dimension {dim}")
    return x


def weak_cost_exact(spec: WeakCostSpec, x, mu) -> float:
    """C_{k,gamma}(x, mu) for a discrete ``mu`` by exact double sums."""
    Y, w = _measure(mu)
    x = _point(x, Y.shape[1])
    k, g = spec.kernel, spec.gamma
    kxx = kernel_diag(k, x[None])[0]
    kyy = kernel_diag(k, Y)
    kxy = gram(k, x[None], Y)[0]
    K = gram(k, Y, Y)
    return float(0.5 * kxx + 0.5 * (1 - g) * (w @ kyy) - w @ kxy + 0.5 * g * (w @ K @ w))


def weak_cost_feature_form(spec: WeakCostSpec, x, mu) -> float:
    """The same cost written through squared feature distances:
    1/2 E|u(x)-u(y)|^2 - gamma/2 * (1/2 E|u(y)-u(y')|^2)."""
    Y, w = _measure(mu)
    x = _point(x, Y.shape[1])
    d_xy = feature_sqdist(spec.kernel, x[None], Y)[0]
    d_yy = feature_sqdist(spec.kernel, Y, Y)
    return float(0.5 * (w @ d_xy) - 0.25 * spec.gamma * (w @ d_yy @ w))


def weak_cost_estimator(spec: WeakCostSpec, x, outputs) -> float:
    """Unbiased Monte-Carlo estimate of C_{k,gamma}(x, mu) from i.i.d. outputs ~ mu.

    The pair term averages over the |Z|(|Z|-1) ordered off-diagonal pairs,
    so at least two outputs are required.
    """
    Y = np.asarray(outputs, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[0] < 2:
        raise CostError("estimator needs at least two outputs for the pair term")
    x = _point(x, Y.shape[1])
    value, _ = estimator_and_grad(spec, x[None], Y[None], need_grad=False)
    return float(value[0])


def estimator_and_grad(spec: WeakCostSpec, X, Y, need_grad: bool = True):
    """Batched estimator and its gradient with respect to the outputs.

    Args:
        X: inputs, shape (B, D).
        Y: outputs, shape (B, n, D), n >= 2 outputs per input.

    Returns:
        values of shape (B,) and, if requested, dvalue/dY of shape (B, n, D).
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[1]
    if n < 2:
        raise CostError("estimator needs at least two outputs for the pair term")
    k, g = spec.kernel, spec.gamma
    kxx = kernel_diag(k, X)
    kyy = kernel_diag(k, Y)                       # (B, n)
    kxy = gram(k, X[:, None, :], Y)[:, 0, :]      # (B, n)
    K = gram(k, Y, Y)                             # (B, n, n)
    off = K.sum(axis=(1, 2)) - np.einsum("bii->b", K)
    values = 0.5 * kxx + 0.5 * (1 - g) / n * kyy.sum(1) - kxy.sum(1) / n + 0.5 * g / (n * (n - 1)) * off
    if not need_grad:
        return values, None
    # d k(x, y_z)/d y_z: gradient of the kernel in its first slot, evaluated at (y_z, x)
    g_xy = _pairwise_grad_first(k, Y, X[:, None, :])[:, :, 0, :]          # (B, n, D)
    g_yy = _pairwise_grad_first(k, Y, Y)                                 # (B, n, n, D)
    idx = np.arange(n)
    g_yy[:, idx, idx, :] = 0.0
    grad = (0.5 * (1 - g) / n * _diag_grad(k, Y)
            - g_xy / n
            + g / (n * (n - 1)) * g_yy.sum(axis=2))
    return values, grad


def variance_forms(points) -> tuple[float, float]:
    """Variance as E|y - m|^2 and as 1/2 E|y - y'|^2."""
    Y, w = _measure(points)
    m = w @ Y
    centered = float(w @ np.sum((Y - m) ** 2, axis=1))
    pairwise = float(0.5 * (w @ _sqdist(Y, Y) @ w))
    return centered, pairwise


def kernel_variance(kernel: KernelSpec, points) -> float:
    """Variance of the pushed-forward features, E k(y,y) - E k(y,y')."""
    Y, w = _measure(points)
    return float(w @ kernel_diag(kernel, Y) - w @ gram(kernel, Y, Y) @ w)


def mmd_squared(kernel: KernelSpec, a, b, statistic: str = "U") -> float:
    """Squared MMD between two samples (V: plug-in, U: unbiased)."""
    A, _ = _measure(a)
    B, _ = _measure(b)
    if A.shape[1] != B.shape[1]:
        raise CostError("samples have different dimensions")
    Kaa, Kbb, Kab = gram(kernel, A, A), gram(kernel, B, B), gram(kernel, A, B)
    n, m = len(A), len(B)
    if statistic == "V":
        return float(Kaa.mean() + Kbb.mean() - 2 * Kab.mean())
    if statistic != "U":
        raise CostError(f"statistic must be 'U' or 'V', got {statistic!r}")
    if n < 2 or m < 2:
        raise CostError("U-statistic needs at least two points per sample")
    saa = (Kaa.sum() - np.trace(Kaa)) / (n * (n - 1))
    sbb = (Kbb.sum() - np.trace(Kbb)) / (m * (m - 1))
    return float(saa + sbb - 2 * Kab.mean())
