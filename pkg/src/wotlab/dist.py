"""Toy source/target distributions and sample-backed (empirical) distributions.

All samplers are deterministic in ``(spec, n, seed)``: each call draws from a
fresh PCG64 stream keyed by the seed, so nothing is shared between calls.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from .rng import stream

_WEIGHT_TOL = 1e-12


class DistributionError(ValueError):
    """Invalid distribution specification or sampling request."""


def _as_tuple(values) -> tuple[float, ...]:
    return tuple(float(v) for v in np.atleast_1d(np.asarray(values, dtype=float)))


def _check_weights(weights: tuple[float, ...]) -> None:
    w = np.asarray(weights)
    if w.size == 0:
        raise DistributionError("empty weight vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
        raise DistributionError(f"weights must be nonnegative and sum to 1, got sum {w.sum()!r}")


@dataclass(frozen=True)
class Gaussian:
    mean: tuple[float, ...]
    cov_diag: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "mean", _as_tuple(self.mean))
        object.__setattr__(self, "cov_diag", _as_tuple(self.cov_diag))
        if len(self.mean) != len(self.cov_diag):
            raise DistributionError("mean and cov_diag dimensions differ")
        if any(not v > 0 for v in self.cov_diag):
            raise DistributionError("cov_diag entries must be strictly positive")

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class GaussianMixture:
    components: tuple[Gaussian, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", _as_tuple(self.weights) if len(self.weights) else ())
        if not self.components:
            raise DistributionError("mixture has no components")
        if len(self.components) != len(self.weights):
            raise DistributionError("one weight per mixture component required")
        _check_weights(self.weights)
        if len({c.dim for c in self.components}) != 1:
            raise DistributionError("mixture components have different dimensions")

    @property
    def dim(self) -> int:
        return self.components[0].dim


@dataclass(frozen=True)
class UniformSquare:
    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "low", _as_tuple(self.low))
        object.__setattr__(self, "high", _as_tuple(self.high))
        if len(self.low) != len(self.high):
            raise DistributionError("low and high dimensions differ")
        if any(not h > lo for lo, h in zip(self.low, self.high)):
            raise DistributionError("need high > low in every coordinate")

    @property
    def dim(self) -> int:
        return len(self.low)


@dataclass(frozen=True)
class SwissRoll:
    """Angle t ~ U[1.5pi, 4.5pi]; point = scale * (t cos t, t sin t) / (4.5pi) + noise."""

    scale: float = 1.0
    noise_std: float = 0.0
    dim: int = 2

    def __post_init__(self):
        if not self.scale > 0:
            raise DistributionError("swiss roll scale must be positive")
        if self.noise_std < 0:
            raise DistributionError("swiss roll noise_std must be nonnegative")
        if self.dim != 2:
            raise DistributionError(f"swiss roll is 2D only, got dim={self.dim}")


@dataclass(frozen=True)
class Empirical:
    points: tuple[tuple[float, ...], ...]
    weights: tuple[float, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise DistributionError("empirical distribution needs a non-empty n x D point array")
        if not np.all(np.isfinite(pts)):
            raise DistributionError("empirical points must be finite")
        object.__setattr__(self, "points", tuple(tuple(map(float, row)) for row in pts))
        if len(self.weights) == 0:
            weights = (1.0 / pts.shape[0],) * pts.shape[0]
        else:
            weights = _as_tuple(self.weights)
        if len(weights) != pts.shape[0]:
            raise DistributionError("one weight per point required")
        _check_weights(weights)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_arrays(cls, points, weights=None) -> "Empirical":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(tuple(map(tuple, pts)), () if weights is None else tuple(weights))

    @property
    def dim(self) -> int:
        return len(self.points[0])

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)


DistributionSpec = Union[Gaussian, GaussianMixture, UniformSquare, SwissRoll, Empirical]


@dataclass(frozen=True)
class SampleBatch:
    points: np.ndarray = field(repr=False)
    source_seed: int
    spec_digest: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < 1:
            raise DistributionError("a sample batch needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise DistributionError("sample batch contains NaN or Inf")
        object.__setattr__(self, "points", pts)

    @classmethod
    def of(cls, points) -> "SampleBatch":
        """Wrap raw points (e.g. network outputs) with no generating spec."""
        return cls(np.asarray(points, dtype=float), source_seed=0, spec_digest="raw")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def dim_of(spec: DistributionSpec) -> int:
    return spec.dim


def spec_to_dict(spec: DistributionSpec) -> dict:
    """Tagged plain-dict form, the same layout the config file uses."""
    kind = type(spec).__name__
    if isinstance(spec, GaussianMixture):
        body = {
            "components": [spec_to_dict(c) for c in spec.components],
            "weights": list(spec.weights),
        }
    else:
        body = {k: (list(map(list, v)) if k == "points" else list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(spec).items()}
    return {"type": kind, **body}


def spec_from_dict(data: dict) -> DistributionSpec:
    data = dict(data)
    kind = data.pop("type", None)
    if kind == "Gaussian":
        return Gaussian(data["mean"], data["cov_diag"])
    if kind == "GaussianMixture":
        comps = tuple(spec_from_dict({"type": "Gaussian", **c}) if "type" not in c else spec_from_dict(c)
                      for c in data.get("components", []))
        weights = data.get("weights") or ((1.0 / len(comps),) * len(comps) if comps else ())
        return GaussianMixture(comps, tuple(weights))
    if kind == "UniformSquare":
        return UniformSquare(data["low"], data["high"])
    if kind == "SwissRoll":
        return SwissRoll(float(data.get("scale", 1.0)), float(data.get("noise_std", 0.0)),
                         int(data.get("dim", 2)))
    if kind == "Empirical":
        return Empirical(tuple(map(tuple, np.atleast_2d(np.asarray(data["points"], float).T).T)),
                         tuple(data.get("weights", ())))
    raise DistributionError(f"unknown distribution type {kind!r}")


def spec_digest(spec: DistributionSpec) -> str:
    text = json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def draw(spec: DistributionSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(spec, Gaussian):
        mean = np.asarray(spec.mean)
        std = np.sqrt(np.asarray(spec.cov_diag))
        return mean + std * rng.standard_normal((n, spec.dim))
    if isinstance(spec, GaussianMixture):
        labels = rng.choice(len(spec.components), size=n, p=np.asarray(spec.weights))
        noise = rng.standard_normal((n, spec.dim))
        means = np.array([c.mean for c in spec.components])
        stds = np.sqrt(np.array([c.cov_diag for c in spec.components]))
        return means[labels] + stds[labels] * noise
    if isinstance(spec, UniformSquare):
        return rng.uniform(np.asarray(spec.low), np.asarray(spec.high), size=(n, spec.dim))
    if isinstance(spec, SwissRoll):
        t = rng.uniform(1.5 * math.pi, 4.5 * math.pi, size=n)
        pts = spec.scale * np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / (4.5 * math.pi)
        return pts + spec.noise_std * rng.standard_normal((n, 2))
    if isinstance(spec, Empirical):
        idx = rng.choice(len(spec.points), size=n, p=spec.weight_array)
        return spec.array[idx]
    raise DistributionError(f"cannot sample from {type(spec).__name__}")


def sample(spec: DistributionSpec, n: int, seed: int) -> SampleBatch:
    """Draw ``n`` points; identical ``(spec, n, seed)`` give bit-identical batches."""
    if n < 1:
        raise DistributionError(f"n must be >= 1, got {n}")
    points = draw(spec, int(n), stream(seed, "sample"))
    return SampleBatch(points, source_seed=int(seed), spec_digest=spec_digest(spec))


def empirical_moments(batch: SampleBatch) -> tuple[np.ndarray, np.ndarray, float]:
    """Sample mean, unbiased per-coordinate variance (divisor n-1), and mean squared norm."""
    pts = batch.points
    if pts.shape[0] < 2:
        raise DistributionError("covariance needs at least two points")
    mean = pts.mean(axis=0)
    cov_diag = pts.var(axis=0, ddof=1)
    second_moment = float(np.mean(np.sum(pts**2, axis=1)))
    return mean, cov_diag, second_moment


# Toy distributions used by the experiments. Means and spreads are this
# package's choices; only the Gaussian pairs come with exact parameters.

def isotropic_gaussian(dim: int, std: float, mean: float = 0.0) -> Gaussian:
    return Gaussian((mean,) * dim, (std**2,) * dim)


def eight_gaussians(radius: float = 2.0, std: float = 0.2) -> GaussianMixture:
    angles = 2 * math.pi * np.arange(8) / 8
    comps = tuple(Gaussian((radius * math.cos(a), radius * math.sin(a)), (std**2, std**2)) for a in angles)
    return GaussianMixture(comps, (1 / 8,) * 8)


def four_gaussians(offset: float = 1.0, std: float = 0.2) -> GaussianMixture:
    corners = [(offset, offset), (-offset, offset), (-offset, -offset), (offset, -offset)]
    return GaussianMixture(tuple(Gaussian(c, (std**2, std**2)) for c in corners), (0.25,) * 4)


def mixture_1d(means, std: float = 0.5) -> GaussianMixture:
    return GaussianMixture(tuple(Gaussian((m,), (std**2,)) for m in means), (1 / len(means),) * len(means))


@dataclass(frozen=True)
class GroupedSamples:
    """Outputs grouped by input: ``outputs[i, j]`` is the j-th draw for ``inputs[i]``."""

    inputs: np.ndarray = field(repr=False)
    outputs: np.ndarray = field(repr=False)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        outputs = np.asarray(self.outputs, dtype=float)
        if outputs.ndim != 3 or inputs.ndim != 2 or outputs.shape[0] != inputs.shape[0]:
            raise DistributionError("expected inputs (n, D) and outputs (n, k, D)")
        if outputs.shape[1] < 1:
            raise DistributionError("need at least one output per input")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)

    @property
    def per_input(self) -> int:
        return self.outputs.shape[1]

    def flat(self) -> SampleBatch:
        return SampleBatch.of(self.outputs.reshape(-1, self.outputs.shape[-1]))

    def conditional_means(self) -> np.ndarray:
        return self.outputs.mean(axis=1)
