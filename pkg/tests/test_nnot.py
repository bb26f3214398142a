import numpy as np
import pytest

from wotlab.cost import Bilinear, DistanceInduced, GaussianRBF, WeakCostSpec, weak_cost_estimator
from wotlab.dist import Gaussian, SampleBatch, isotropic_gaussian
from wotlab.nnot import (AdamState, MlpNet, NonFiniteGradient, NotConfig, TrainTrace, adam_step, apply_map,
                         build_nets, f_step, load_checkpoint, map_samples, mlp_backward, mlp_forward,
                         save_checkpoint, t_step, train_not)


def _tiny(seed, sizes=(3, 5, 4, 2), activation="silu"):
    return MlpNet.init(sizes, np.random.default_rng(seed), activation)


def test_zero_net_outputs_zero():
    net = MlpNet.zeros((3, 4, 2))
    np.testing.assert_array_equal(mlp_forward(net, np.ones((5, 3))), 0.0)


def test_single_linear_layer():
    net = MlpNet([1, 1], [np.array([[2.0]])], [np.array([1.0])])
    np.testing.assert_allclose(mlp_forward(net, [[3.0]]), [[7.0]])


@pytest.mark.parametrize("activation, fn", [
    ("silu", lambda a: a / (1 + np.exp(-a))),
    ("tanh", np.tanh),
    ("softplus", lambda a: np.log1p(np.exp(a))),
])
def test_identity_deep_net_hand_composition(activation, fn):
    eye = np.eye(2)
    net = MlpNet([2, 2, 2, 2], [eye, eye, eye], [np.zeros(2)] * 3, activation)
    x = np.array([[0.7, -1.3]])
    np.testing.assert_allclose(mlp_forward(net, x), fn(fn(x)), rtol=1e-14)


def test_param_count_and_width_check():
    net = _tiny(0)
    assert net.n_params == 4 * 5 + 6 * 4 + 5 * 2
    assert net.n_params == sum(p.size for p in net.params)
    with pytest.raises(ValueError):
        mlp_forward(net, np.ones((2, 4)))
    with pytest.raises(ValueError):
        mlp_backward(net, np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        MlpNet((2, 2), [np.eye(2)], [np.zeros(2)], "relu")


def test_zero_cotangent_gives_zero_gradients():
    net = _tiny(1)
    grads, gin = mlp_backward(net, np.ones((4, 3)), np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(gin == 0)


def test_linear_net_gradient_is_input():
    net = MlpNet([1, 1], [np.array([[0.5]])], [np.array([0.0])])
    grads, gin = mlp_backward(net, [[3.0]], [[1.0]])
    assert grads[0][0, 0] == 3.0 and grads[1][0] == 1.0 and gin[0, 0] == 0.5


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("activation", ["silu", "tanh", "softplus"])
def test_backward_matches_finite_differences(seed, activation):
    rng = np.random.default_rng(seed)
    net = _tiny(seed, activation=activation)
    X, cot = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    grads, gin = mlp_backward(net, X, cot)
    loss = lambda: float(np.sum(mlp_forward(net, X) * cot))  # noqa: E731
    h = 1e-4
    for p, g in zip(net.params, grads):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            fd[idx] = (up - down) / (2 * h)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-12)
    fd_in = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        fd_in[idx] = (np.sum(mlp_forward(net, Xp) * cot) - np.sum(mlp_forward(net, Xm) * cot)) / (2 * h)
    assert np.linalg.norm(gin - fd_in) <= 1e-5 * np.linalg.norm(fd_in)


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    st = AdamState.for_params(p, lr=0.1)
    st.m[0][:] = 1.0
    st.v[0][:] = 1.0
    adam_step(st, p, [np.zeros(2)])
    # the bias-corrected moment is non-zero, so only the moments are checked for decay
    np.testing.assert_allclose(st.m[0], 0.9)
    np.testing.assert_allclose(st.v[0], 0.999)
    q = [np.array([1.0, -2.0])]
    st2 = AdamState.for_params(q, lr=0.1)
    adam_step(st2, q, [np.zeros(2)])
    np.testing.assert_array_equal(q[0], [1.0, -2.0])
    assert st2.step == 1


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.2, 1e-3])
    p = [np.zeros(3)]
    st = AdamState.for_params(p, lr=1e-2)
    adam_step(st, p, [g])
    np.testing.assert_allclose(p[0], -1e-2 * np.sign(g), rtol=1e-4)


def test_adam_two_steps_hand_recursion():
    g, lr = 2.0, 0.1
    p = [np.array([0.0])]
    st = AdamState.for_params(p, lr=lr)
    adam_step(st, p, [np.array([g])])
    adam_step(st, p, [np.array([g])])
    m = 0.1 * g * 0.9 + 0.1 * g
    v = 0.001 * g * g * 0.999 + 0.001 * g * g
    step2 = lr * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = lr * g / (g + 1e-8)
    assert p[0][0] == pytest.approx(-(step1 + step2), rel=1e-12)
    assert st.step == 2


def test_adam_rejects_non_finite():
    p = [np.zeros(2)]
    with pytest.raises(NonFiniteGradient):
        adam_step(AdamState.for_params(p), p, [np.array([np.nan, 0.0])])


def _identity_map(dim, latent_dim):
    """Linear T(x, z) = x."""
    W = np.vstack([np.eye(dim), np.zeros((latent_dim, dim))])
    return MlpNet([dim + latent_dim, dim], [W], [np.zeros(dim)])


def _const_f(dim, c):
    return MlpNet([dim, 1], [np.zeros((dim, 1))], [np.array([c])])


def test_t_step_identity_map_zero_loss():
    cfg = NotConfig(WeakCostSpec(Bilinear(), 0.0))
    rng = np.random.default_rng(0)
    res = t_step(cfg, _identity_map(2, 2), _const_f(2, 0.0), rng.normal(size=(5, 2)), rng.normal(size=(5, 4, 2)))
    assert res.loss == pytest.approx(0.0, abs=1e-14)


def test_t_step_constant_potential():
    cfg = NotConfig(WeakCostSpec(GaussianRBF(), 0.7))
    rng = np.random.default_rng(1)
    T = _tiny(1, sizes=(4, 6, 2))
    X, Z = rng.normal(size=(5, 2)), rng.normal(size=(5, 3, 2))
    a = t_step(cfg, T, _const_f(2, 0.0), X, Z)
    b = t_step(cfg, T, _const_f(2, 2.5), X, Z)
    assert b.loss == pytest.approx(a.loss - 2.5, abs=1e-12)
    for ga, gb in zip(a.grads, b.grads):
        np.testing.assert_allclose(ga, gb, atol=1e-14)


def test_t_step_rejects_single_latent():
    cfg = NotConfig(WeakCostSpec(Bilinear(), 1.0))
    with pytest.raises(ValueError):
        t_step(cfg, _identity_map(2, 2), _const_f(2, 0.0), np.zeros((3, 2)), np.zeros((3, 1, 2)))
    with pytest.raises(ValueError):
        NotConfig(WeakCostSpec(Bilinear(), 1.0), batch_z=1)


def test_t_step_cost_term_matches_estimator():
    cfg = NotConfig(WeakCostSpec(DistanceInduced(1.0), 0.8))
    rng = np.random.default_rng(2)
    T = _tiny(2, sizes=(4, 6, 2))
    X, Z = rng.normal(size=(4, 2)), rng.normal(size=(4, 5, 2))
    res = t_step(cfg, T, _const_f(2, 0.0), X, Z)
    for i in range(4):
        assert res.cost_values[i] == pytest.approx(weak_cost_estimator(cfg.cost, X[i], res.outputs[i]), abs=1e-12)


def _fd_check(loss, params, grads, h=1e-4):
    flat_g, flat_fd = [], []
    for p, g in zip(params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            flat_fd.append((up - down) / (2 * h))
            flat_g.append(g[idx])
    flat_g, flat_fd = np.array(flat_g), np.array(flat_fd)
    return np.linalg.norm(flat_g - flat_fd) / np.linalg.norm(flat_fd)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kernel", [Bilinear(), GaussianRBF(1.0), DistanceInduced(1.0)])
def test_t_step_gradients(seed, kernel):
    rng = np.random.default_rng(seed)
    cfg = NotConfig(WeakCostSpec(kernel, float(rng.uniform(0.2, 1.0))))
    T, f = _tiny(seed, sizes=(4, 5, 2)), _tiny(seed + 100, sizes=(2, 5, 1))
    X, Z = rng.normal(size=(3, 2)), rng.normal(size=(3, 3, 2))
    res = t_step(cfg, T, f, X, Z)
    assert _fd_check(lambda: t_step(cfg, T, f, X, Z).loss, T.params, res.grads) <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_f_step_gradients(seed):
    rng = np.random.default_rng(seed)
    cfg = NotConfig(WeakCostSpec(Bilinear(), 0.5))
    T, f = _tiny(seed, sizes=(4, 5, 2)), _tiny(seed + 100, sizes=(2, 5, 1))
    X, Z, Y = rng.normal(size=(3, 2)), rng.normal(size=(3, 2, 2)), rng.normal(size=(5, 2))
    _, grads = f_step(cfg, T, f, X, Z, Y)
    assert _fd_check(lambda: f_step(cfg, T, f, X, Z, Y)[0], f.params, grads) <= 1e-5


def test_f_step_matched_batches_zero():
    cfg = NotConfig(WeakCostSpec(Bilinear(), 1.0))
    rng = np.random.default_rng(3)
    X, Z = rng.normal(size=(4, 2)), rng.normal(size=(4, 2, 2))
    T = _identity_map(2, 2)
    f = MlpNet([2, 1], [rng.normal(size=(2, 1))], [np.array([0.3])])
    Y = apply_map(T, X, Z).reshape(-1, 2)
    value, _ = f_step(cfg, T, f, X, Z, Y)
    assert value == 0.0


def test_f_step_zero_potential_direction():
    cfg = NotConfig(WeakCostSpec(Bilinear(), 1.0))
    X, Z = np.zeros((2, 2)), np.zeros((2, 2, 2))
    f = MlpNet.zeros((2, 1))
    Y = np.array([[1.0, 0.0], [1.0, 0.0]])
    value, grads = f_step(cfg, _identity_map(2, 2), f, X, Z, Y)
    assert value == 0.0
    # ascent direction on a linear f: weight moves toward mean(Y) - mean(mapped) = (1, 0)
    np.testing.assert_allclose(grads[0][:, 0], [1.0, 0.0])
    assert grads[1][0] == 0.0


def test_steps_do_not_touch_the_other_net():
    cfg = NotConfig(WeakCostSpec(DistanceInduced(1.0), 1.0))
    rng = np.random.default_rng(4)
    T, f = _tiny(4, sizes=(4, 5, 2)), _tiny(5, sizes=(2, 5, 1))
    T0, f0 = T.copy(), f.copy()
    X, Z, Y = rng.normal(size=(3, 2)), rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2))
    t_step(cfg, T, f, X, Z)
    f_step(cfg, T, f, X, Z, Y)
    for a, b in zip(T.params + f.params, T0.params + f0.params):
        np.testing.assert_array_equal(a, b)


def test_trace_requires_increasing_iterations():
    tr = TrainTrace()
    tr.add({"iter": 1, "mmd_sq": 0.1})
    with pytest.raises(ValueError):
        tr.add({"iter": 1, "mmd_sq": 0.2})
    tr.add({"iter": 3, "mmd_sq": 0.3})
    assert tr.fluctuation() == pytest.approx(0.1)


def test_checkpoint_round_trip(tmp_path):
    net = _tiny(6, activation="tanh")
    save_checkpoint(net, tmp_path / "net.bin")
    back = load_checkpoint(tmp_path / "net.bin")
    assert back.layer_sizes == net.layer_sizes and back.activation == "tanh"
    for a, b in zip(back.params, net.params):
        np.testing.assert_array_equal(a, b)
    assert (tmp_path / "net.bin").read_bytes()[:8] == b"WOTMLP01"
    (tmp_path / "bad.bin").write_bytes(b"nope" * 4)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")


def test_map_samples_grouping():
    latent = Gaussian((0.0, 0.0), (1.0, 1.0))
    xs = SampleBatch.of(np.random.default_rng(7).normal(size=(5, 2)))
    g = map_samples(_identity_map(2, 2), xs, 3, latent, seed=0)
    assert g.outputs.shape == (5, 3, 2)
    np.testing.assert_allclose(g.outputs, np.repeat(xs.points[:, None, :], 3, axis=1))
    one = map_samples(_tiny(7, sizes=(4, 5, 2)), xs, 1, latent, seed=0)
    assert one.flat().n == 5
    with pytest.raises(ValueError):
        map_samples(_identity_map(2, 2), xs, 0, latent, 0)


def test_short_training_is_deterministic(tmp_path):
    P, Q = isotropic_gaussian(2, 0.5), isotropic_gaussian(2, 1.0)
    cfg = NotConfig(WeakCostSpec(Bilinear(), 0.5), total_f_iters=6, eval_every=3, hidden=(16,), batch_x=8,
                    n_eval=64, bary_inputs=8, bary_z=4, seed=3)
    runs = []
    for name in ("a", "b"):
        res = train_not(P, Q, cfg)
        res.trace.write_csv(tmp_path / f"{name}.csv")
        runs.append(res)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert [r["iter"] for r in runs[0].trace.records] == [3, 6]
    assert len(runs[0].trace.checkpoints) == 2
    T, f = build_nets(cfg, 2)
    assert not np.array_equal(T.weights[0], runs[0].T.weights[0])
