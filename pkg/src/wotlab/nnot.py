"""Small neural optimal transport trainer in plain numpy.

A stochastic map T(x, z) and a potential f(y) are fully connected nets. T is
trained to minimize  mean_x [ C_hat(x, T_x(Z_x)) - mean_z f(T_x(z)) ]  and f
to maximize  mean_y f(y) - mean_{x,z} f(T_x(z)),  alternating k_T map updates
with one potential update. C_hat is the unbiased weak kernel cost estimator.
"""

from __future__ import annotations

import collections
import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cost as cost_mod
from .cost import DistanceInduced, WeakCostSpec
from .dist import DistributionSpec, Gaussian, GroupedSamples, SampleBatch, draw
from .rng import stream


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

# Each activation returns (value, aux); the derivative is rebuilt from
# (pre-activation, aux) so the backward pass does not recompute exponentials.

def _sigmoid(a):
    # exp(-a) overflows to inf for very negative a, which correctly gives 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-a))


def _silu(a):
    s = _sigmoid(a)
    return a * s, s


def _silu_grad(a, s):
    return s * (1.0 + a * (1.0 - s))


def _softplus(a):
    return np.logaddexp(0.0, a), _sigmoid(a)


def _softplus_grad(a, s):
    return s


def _tanh(a):
    t = np.tanh(a)
    return t, t


def _tanh_grad(a, t):
    return 1.0 - t * t


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "softplus": (_softplus, _softplus_grad),
    "tanh": (_tanh, _tanh_grad),
}


@dataclass
class MlpNet:
    """Affine layers with a smooth activation between them and a linear output."""

    layer_sizes: list
    weights: list
    biases: list
    activation: str = "silu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i} has shape {W.shape}/{b.shape}, expected sizes {self.layer_sizes}")

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, activation: str = "silu") -> "MlpNet":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(list(layer_sizes), weights, biases, activation)

    @classmethod
    def zeros(cls, layer_sizes, activation: str = "silu") -> "MlpNet":
        return cls(list(layer_sizes),
                   [np.zeros((a, b)) for a, b in zip(layer_sizes[:-1], layer_sizes[1:])],
                   [np.zeros(b) for b in layer_sizes[1:]], activation)

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def copy(self) -> "MlpNet":
        return MlpNet(list(self.layer_sizes), [W.copy() for W in self.weights],
                      [b.copy() for b in self.biases], self.activation)

    def __call__(self, inputs) -> np.ndarray:
        return mlp_forward(self, inputs)


def _forward(net: MlpNet, X: np.ndarray):
    act = ACTIVATIONS[net.activation][0]
    cache = []
    h = X
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W
        a += b
        if i == last:
            cache.append((h, a, None))
            h = a
        else:
            out, aux = act(a)
            cache.append((h, a, aux))
            h = out
    return h, cache


def _backward(net: MlpNet, cache, cot: np.ndarray, param_grads: bool = True):
    dact = ACTIVATIONS[net.activation][1]
    grads = [None] * (2 * len(net.weights))
    g = cot
    for i in range(len(net.weights) - 1, -1, -1):
        h, a, aux = cache[i]
        if aux is not None:
            g = g * dact(a, aux)
        if param_grads:
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return grads, g


def _check_width(net: MlpNet, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"input width {X.shape[-1]} does not match first layer {net.layer_sizes[0]}")
    return X


def mlp_forward(net: MlpNet, inputs) -> np.ndarray:
    return _forward(net, _check_width(net, inputs))[0]


def mlp_backward(net: MlpNet, inputs, output_cotangents):
    """Vector-Jacobian products: (parameter grads in ``net.params`` order, input grads)."""
    X = _check_width(net, inputs)
    out, cache = _forward(net, X)
    cot = np.asarray(output_cotangents, dtype=float)
    if cot.shape != out.shape:
        raise ValueError(f"cotangent shape {cot.shape} does not match output shape {out.shape}")
    return _backward(net, cache, cot)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr: float = 1e-4) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr)


def adam_step(state: AdamState, params: list, grads: list) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {i} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# Maximin steps
# ---------------------------------------------------------------------------

@dataclass
class NotConfig:
    cost: WeakCostSpec
    k_T: int = 10
    batch_x: int = 64
    batch_z: int = 4
    lr: float = 1e-4
    total_f_iters: int = 10_000
    latent_dim: int = 2
    latent: Optional[DistributionSpec] = None  # standard Gaussian of latent_dim when None
    eval_every: int = 100
    seed: int = 0
    hidden: tuple = (128, 128, 128)
    activation: str = "silu"
    n_eval: int = 1024
    bary_inputs: int = 128
    bary_z: int = 512
    checkpoints: int = 20

    def __post_init__(self):
        if self.batch_z < 2:
            raise ValueError("batch_z must be >= 2 for the unbiased cost estimator")
        if self.k_T < 1:
            raise ValueError("k_T must be >= 1")
        if self.latent is None:
            self.latent = Gaussian((0.0,) * self.latent_dim, (1.0,) * self.latent_dim)
        elif self.latent.dim != self.latent_dim:
            raise ValueError("latent distribution dimension differs from latent_dim")
        self.hidden = tuple(int(h) for h in self.hidden)


def _map_inputs(x_batch: np.ndarray, z_batches: np.ndarray) -> np.ndarray:
    B, n, _ = z_batches.shape
    xs = np.repeat(x_batch[:, None, :], n, axis=1)
    return np.concatenate([xs, z_batches], axis=2).reshape(B * n, -1)


def apply_map(T: MlpNet, x_batch, z_batches) -> np.ndarray:
    """T_x(z) for every (x, z) pair: array (B, n, D)."""
    x_batch = np.asarray(x_batch, dtype=float)
    z_batches = np.asarray(z_batches, dtype=float)
    B, n, _ = z_batches.shape
    return mlp_forward(T, _map_inputs(x_batch, z_batches)).reshape(B, n, -1)


@dataclass
class TStepResult:
    loss: float
    grads: list
    cost_values: np.ndarray
    outputs: np.ndarray


def t_step(config: NotConfig, T: MlpNet, f: MlpNet, x_batch, z_batches) -> TStepResult:
    """Loss of the inner (map) problem and its gradient for T's parameters."""
    X = np.asarray(x_batch, dtype=float)
    Z = np.asarray(z_batches, dtype=float)
    if Z.ndim != 3 or Z.shape[0] != X.shape[0]:
        raise ValueError("z_batches must have shape (batch_x, batch_z, latent_dim)")
    B, n, _ = Z.shape
    if n < 2:
        raise ValueError("need at least two latent draws per input")
    inputs = _map_inputs(X, Z)
    flat, t_cache = _forward(T, _check_width(T, inputs))
    Y = flat.reshape(B, n, -1)
    costs, dcost = cost_mod.estimator_and_grad(config.cost, X, Y)
    fy, f_cache = _forward(f, flat)
    loss = float(costs.mean() - fy.mean())
    _, df_dy = _backward(f, f_cache, np.full_like(fy, -1.0 / (B * n)), param_grads=False)
    cot = dcost.reshape(B * n, -1) / B + df_dy
    grads, _ = _backward(T, t_cache, cot)
    return TStepResult(loss, grads, costs, Y)


def f_step(config: NotConfig, T: MlpNet, f: MlpNet, x_batch, z_batches, y_batch):
    """Potential objective and its ascent gradient for f's parameters (T held fixed)."""
    mapped = apply_map(T, x_batch, z_batches).reshape(-1, f.layer_sizes[0])
    Yq = np.asarray(y_batch, dtype=float)
    if len(Yq) == 0 or len(mapped) == 0:
        raise ValueError("empty batch")
    fq, cache_q = _forward(f, _check_width(f, Yq))
    fm, cache_m = _forward(f, mapped)
    value = float(fq.mean() - fm.mean())
    gq, _ = _backward(f, cache_q, np.full_like(fq, 1.0 / len(fq)))
    gm, _ = _backward(f, cache_m, np.full_like(fm, -1.0 / len(fm)))
    return value, [a + b for a, b in zip(gq, gm)]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    checkpoints: collections.deque = field(default_factory=lambda: collections.deque(maxlen=20))

    def add(self, record: dict) -> None:
        if self.records and record["iter"] <= self.records[-1]["iter"]:
            raise ValueError("trace records must have increasing iterations")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def trailing(self, name: str = "mmd_sq", count: int = 20) -> np.ndarray:
        return self.column(name)[-count:]

    def fluctuation(self, count: int = 20) -> float:
        """Standard deviation of MMD^2 over the trailing checkpoints."""
        vals = self.trailing("mmd_sq", count)
        return float(vals.std()) if len(vals) else math.nan

    FIELDS = ("iter", "mmd_sq", "barycentric_error", "t_loss", "f_value")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            for r in self.records:
                w.writerow([r["iter"]] + [_fmt(r.get(k)) for k in self.FIELDS[1:]])


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return f"{value:.10g}"


@dataclass
class TrainResult:
    T: MlpNet
    f: MlpNet
    trace: TrainTrace

    def __iter__(self):
        yield self.T
        yield self.f
        yield self.trace


def build_nets(config: NotConfig, dim: int):
    T = MlpNet.init((dim + config.latent_dim, *config.hidden, dim), stream(config.seed, "init-T"), config.activation)
    f = MlpNet.init((dim, *config.hidden, 1), stream(config.seed, "init-f"), config.activation)
    return T, f


def map_samples(T: MlpNet, xs, z_per_x: int, latent: DistributionSpec, seed: int) -> GroupedSamples:
    """Draw ``z_per_x`` latents for every input and return outputs grouped by input."""
    if z_per_x < 1:
        raise ValueError("z_per_x must be >= 1")
    X = xs.points if isinstance(xs, SampleBatch) else np.asarray(xs, dtype=float)
    Z = draw(latent, len(X) * z_per_x, stream(seed, "map-samples")).reshape(len(X), z_per_x, -1)
    return GroupedSamples(X, apply_map(T, X, Z))


def evaluate(T: MlpNet, p, q, config: NotConfig, seed: int, oracle=None) -> dict:
    """MMD^2 (distance kernel, U-statistic) of T#(P x S) vs a fresh Q sample, plus
    the barycentric error when an oracle map is given."""
    rng = stream(seed, "eval")
    xs = draw(p, config.n_eval, rng)
    zs = draw(config.latent, config.n_eval, rng)
    pushed = apply_map(T, xs, zs[:, None, :])[:, 0, :]
    ys = draw(q, config.n_eval, rng)
    out = {"mmd_sq": cost_mod.mmd_squared(DistanceInduced(1.0), pushed, ys, "U")}
    if oracle is not None:
        from .oracle import barycentric_error

        xb = draw(p, config.bary_inputs, rng)
        zb = draw(config.latent, config.bary_inputs * config.bary_z, rng).reshape(config.bary_inputs, config.bary_z, -1)
        out["barycentric_error"] = barycentric_error(apply_map(T, xb, zb), oracle, xb)
    return out


def train_not(p: DistributionSpec, q: DistributionSpec, config: NotConfig, oracle_hook=None,
              progress=None) -> TrainResult:
    """Alternate k_T map updates and one potential update for total_f_iters rounds."""
    dim = p.dim
    if q.dim != dim:
        raise ValueError("source and target dimensions differ")
    T, f = build_nets(config, dim)
    opt_T = AdamState.for_params(T.params, config.lr)
    opt_f = AdamState.for_params(f.params, config.lr)
    rng_x = stream(config.seed, "train-x")
    rng_z = stream(config.seed, "train-z")
    rng_y = stream(config.seed, "train-y")
    trace = TrainTrace(checkpoints=collections.deque(maxlen=config.checkpoints))
    B, n = config.batch_x, config.batch_z
    t_loss = math.nan
    for it in range(1, config.total_f_iters + 1):
        for _ in range(config.k_T):
            X = draw(p, B, rng_x)
            Z = draw(config.latent, B * n, rng_z).reshape(B, n, -1)
            res = t_step(config, T, f, X, Z)
            t_loss = res.loss
            if not math.isfinite(t_loss):
                raise TrainingDiverged(f"map loss became non-finite at iteration {it}")
            _guarded_adam(opt_T, T.params, res.grads, it)
        X = draw(p, B, rng_x)
        Z = draw(config.latent, B * n, rng_z).reshape(B, n, -1)
        Y = draw(q, B, rng_y)
        f_value, f_grads = f_step(config, T, f, X, Z, Y)
        if not math.isfinite(f_value):
            raise TrainingDiverged(f"potential objective became non-finite at iteration {it}")
        _guarded_adam(opt_f, f.params, [-g for g in f_grads], it)
        if it % config.eval_every == 0 or it == config.total_f_iters:
            record = {"iter": it, "t_loss": t_loss, "f_value": f_value,
                      **evaluate(T, p, q, config, seed=config.seed + it, oracle=oracle_hook)}
            trace.add(record)
            trace.checkpoints.append((it, T.copy()))
            if progress is not None:
                progress(record)
    return TrainResult(T, f, trace)


def _guarded_adam(state: AdamState, params, grads, it: int) -> None:
    try:
        adam_step(state, params, grads)
    except NonFiniteGradient as exc:
        raise TrainingDiverged(f"{exc} (outer iteration {it})") from exc


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------

_MAGIC = b"WOTMLP01"
_ACTIVATION_CODES = {"silu": 0, "softplus": 1, "tanh": 2}


def save_checkpoint(net: MlpNet, path) -> None:
    """Little-endian layout: magic, u32 activation code, u32 layer count L,
    L x u32 layer sizes, then per layer the float64 weights (row-major,
    in x out) followed by the float64 biases."""
    sizes = net.layer_sizes
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _ACTIVATION_CODES[net.activation], len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for W, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError("not a network checkpoint")
    code, count = struct.unpack_from("<II", data, 8)
    sizes = list(struct.unpack_from(f"<{count}I", data, 16))
    offset = 16 + 4 * count
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = np.frombuffer(data, dtype="<f8", count=a * b, offset=offset).reshape(a, b).astype(float)
        offset += 8 * a * b
        bias = np.frombuffer(data, dtype="<f8", count=b, offset=offset).astype(float)
        offset += 8 * b
        weights.append(W)
        biases.append(bias)
    activation = {v: k for k, v in _ACTIVATION_CODES.items()}[code]
    return MlpNet(sizes, weights, biases, activation)
