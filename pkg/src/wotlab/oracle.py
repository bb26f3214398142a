"""Closed-form ground truth for pairs of diagonal Gaussians.

Conventions: the strong quadratic cost is c(x, y) = 1/2 |x - y|^2, so every
W2 value returned here carries that factor 1/2. All covariances are diagonal.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dist import Gaussian, GroupedSamples, SampleBatch

GaussianSpec = Gaussian

_EQ_TOL = 1e-12
_DEGENERATE_TOL = 1e-9


class UnsupportedProjection(ValueError):
    """The scaled source and the target are not comparable in convex order."""


@dataclass(frozen=True)
class DiagonalAffineMap:
    """x -> scale * (x - center) + offset."""

    scale: np.ndarray
    center: np.ndarray
    offset: np.ndarray

    def __call__(self, x) -> np.ndarray:
        return self.scale * (np.asarray(x, dtype=float) - self.center) + self.offset

    def push(self, g: Gaussian) -> Gaussian:
        mean = self.scale * (np.asarray(g.mean) - self.center) + self.offset
        return Gaussian(mean, self.scale**2 * np.asarray(g.cov_diag))


@dataclass(frozen=True)
class RestrictedPotentialQuadratic:
    """Quadratic optimal restricted potential and its conjugate's curvature.

    The gradient map is x -> diag(slope) (x - source_mean) + target_mean, and
    ``psi_curvature_diag`` holds the curvature 1/slope - gamma of
    psi(y) = conj(phi)(y) - gamma/2 |y|^2. A zero entry means psi is affine
    along that axis, so the barycentric condition alone does not pin the map.
    """

    slope_diag: np.ndarray
    gamma: float
    psi_curvature_diag: np.ndarray
    degenerate: bool
    source_mean: np.ndarray
    target_mean: np.ndarray

    def grad(self, x) -> np.ndarray:
        return self.slope_diag * (np.asarray(x, dtype=float) - self.source_mean) + self.target_mean

    __call__ = grad


class Verdict(str, enum.Enum):
    FAKE_SADDLE_POINTS_EXIST = "FAKE_SADDLE_POINTS_EXIST"
    ARGINF_UNIQUE = "ARGINF_UNIQUE"
    DEGENERATE_BOUNDARY = "DEGENERATE_BOUNDARY"


@dataclass(frozen=True)
class FakeSolutionReport:
    projection_equals_q: bool
    psi_degenerate: bool
    verdict: Verdict
    potential: RestrictedPotentialQuadratic


def _arr(values) -> np.ndarray:
    return np.asarray(values, dtype=float)


def _same_dim(p: Gaussian, q: Gaussian) -> None:
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")


def _close(a, b) -> bool:
    a, b = _arr(a), _arr(b)
    return bool(np.all(np.abs(a - b) <= _EQ_TOL * np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def ot_map_gaussian(p: Gaussian, q: Gaussian) -> DiagonalAffineMap:
    """Monge map for the quadratic cost: per-coordinate std ratio plus mean shift."""
    _same_dim(p, q)
    scale = np.sqrt(_arr(q.cov_diag) / _arr(p.cov_diag))
    return DiagonalAffineMap(scale, _arr(p.mean), _arr(q.mean))


def convex_order_gaussian(p: Gaussian, q: Gaussian) -> bool:
    """True iff p is dominated by q in convex order (equal means, smaller variances)."""
    _same_dim(p, q)
    if not _close(p.mean, q.mean):
        return False
    vp, vq = _arr(p.cov_diag), _arr(q.cov_diag)
    return bool(np.all(vp <= vq * (1 + _EQ_TOL)))


def scale_gaussian(p: Gaussian, factor: float) -> Gaussian:
    """Law of factor * x for x ~ p."""
    return Gaussian(factor * _arr(p.mean), factor**2 * _arr(p.cov_diag))


def projection_gaussian(p: Gaussian, q: Gaussian, gamma: float) -> tuple[Gaussian, RestrictedPotentialQuadratic]:
    """W2-projection of the 1/gamma-scaled source onto {P' dominated by q}.

    Only the comparable cases are supported: either the scaled source is at
    least as spread as q in every coordinate (projection is q itself) or it is
    dominated by q (projection is the scaled source).
    """
    _same_dim(p, q)
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    scaled = scale_gaussian(p, 1.0 / gamma)
    if not _close(scaled.mean, q.mean):
        raise UnsupportedProjection("scaled source mean differs from target mean")
    vs, vq = _arr(scaled.cov_diag), _arr(q.cov_diag)
    if np.all(vs >= vq * (1 - _EQ_TOL)):
        target = q
    elif np.all(vs <= vq * (1 + _EQ_TOL)):
        target = scaled
    else:
        raise UnsupportedProjection("scaled source and target are incomparable in convex order")
    slope = np.sqrt(_arr(target.cov_diag) / _arr(p.cov_diag))
    curvature = 1.0 / slope - gamma
    potential = RestrictedPotentialQuadratic(
        slope_diag=slope,
        gamma=float(gamma),
        psi_curvature_diag=curvature,
        degenerate=bool(np.any(np.abs(curvature) <= _DEGENERATE_TOL)),
        source_mean=_arr(p.mean),
        target_mean=_arr(target.mean),
    )
    return target, potential


def fake_solution_diagnostic(p: Gaussian, q: Gaussian, gamma: float) -> FakeSolutionReport:
    target, potential = projection_gaussian(p, q, gamma)
    equals_q = _close(target.mean, q.mean) and _close(target.cov_diag, q.cov_diag)
    if not equals_q:
        verdict = Verdict.FAKE_SADDLE_POINTS_EXIST
    elif potential.degenerate:
        verdict = Verdict.DEGENERATE_BOUNDARY
    else:
        verdict = Verdict.ARGINF_UNIQUE
    return FakeSolutionReport(equals_q, potential.degenerate, verdict, potential)


def w2_squared_gaussian(p: Gaussian, q: Gaussian) -> float:
    """1/2 [ |m_p - m_q|^2 + sum_i (sigma_p,i - sigma_q,i)^2 ]."""
    _same_dim(p, q)
    dm = _arr(p.mean) - _arr(q.mean)
    ds = np.sqrt(_arr(p.cov_diag)) - np.sqrt(_arr(q.cov_diag))
    return float(0.5 * (dm @ dm + ds @ ds))


def second_moment(p: Gaussian) -> float:
    m = _arr(p.mean)
    return float(m @ m + np.sum(p.cov_diag))


def w2_gamma_squared_gaussian(p: Gaussian, q: Gaussian, gamma: float) -> float:
    """Optimal value of the gamma-weak quadratic transport problem.

    Completing the square in the conditional mean m(x) turns the cost into
    gamma * 1/2 |x/gamma - m(x)|^2 plus moment terms, which gives

        gamma * W2^2(P/gamma, Proj) - (1-gamma)/(2 gamma) E|x|^2 + (1-gamma)/2 E|y|^2.
    """
    target, _ = projection_gaussian(p, q, gamma)
    scaled = scale_gaussian(p, 1.0 / gamma)
    return float(gamma * w2_squared_gaussian(scaled, target)
                 - (1 - gamma) / (2 * gamma) * second_moment(p)
                 + (1 - gamma) / 2 * second_moment(q))


def barycentric_error(map_outputs, potential, inputs=None) -> float:
    """Relative error of the per-input output mean against the oracle map.

    ``map_outputs`` is a :class:`GroupedSamples` or an array (n, k, D) of
    outputs grouped by input; in the array case ``inputs`` (n, D) is required.
    """
    if isinstance(map_outputs, GroupedSamples):
        xs, outs = map_outputs.inputs, map_outputs.outputs
    else:
        outs = np.asarray(map_outputs, dtype=float)
        xs = inputs.points if isinstance(inputs, SampleBatch) else np.asarray(inputs, dtype=float)
        if outs.ndim == 2:
            outs = outs[:, None, :]
    if outs.shape[1] < 1:
        raise ValueError("need at least one output per input")
    if outs.shape[0] != xs.shape[0]:
        raise ValueError("outputs and inputs are not matched")
    target = potential(xs)
    err = np.linalg.norm(outs.mean(axis=1) - target, axis=1)
    return float(err.mean() / np.linalg.norm(target, axis=1).mean())
