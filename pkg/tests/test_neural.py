import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from dmpo_lab.neural import (MAGIC, Adam, DiagGaussian, DivergenceError, Mlp, NetParams, adam_step, init_mlp,
                             load_checkpoint, n_params, save_checkpoint)

# (name, layer sizes) of every network the package builds, at a reduced width
# where the production width only changes matrix sizes.
NETWORKS = [
    ("shift", [16, 32, 16]),
    ("mean_opt", [24, 32, 24]),
    ("cov_opt", [24, 32, 16]),
    ("critic", [17 + 16 + 56, 32, 1]),
    ("e2e", [47, 32, 32, 8]),
    ("critic_full", [329, 256, 1]),
]


def fd_probes(net: Mlp, rng, n_probes: int, eps: float = 1e-6):
    """Relative errors of backprop vs central differences on random (input, parameter) probes."""
    errs = []
    for _ in range(n_probes):
        x = rng.standard_normal((3, net.n_in))
        r = rng.standard_normal((3, net.n_out))
        y, cache = net.forward(x)
        grad, dx = net.backward(cache, r)
        i = rng.integers(net.theta.size)
        old = net.theta[i]
        net.theta[i] = old + eps
        lp = np.sum(net(x) * r)
        net.theta[i] = old - eps
        lm = np.sum(net(x) * r)
        net.theta[i] = old
        fd = (lp - lm) / (2 * eps)
        j = rng.integers(net.n_in)
        xp, xm = x.copy(), x.copy()
        xp[0, j] += eps
        xm[0, j] -= eps
        fdx = (np.sum(net(xp) * r) - np.sum(net(xm) * r)) / (2 * eps)
        for a, b in ((grad[i], fd), (dx[0, j], fdx)):
            scale = max(abs(a) + abs(b), 1e-7)
            errs.append(abs(a - b) / scale)
    return np.array(errs)


@pytest.mark.parametrize("name,sizes", NETWORKS)
def test_mlp_gradients_match_finite_differences(name, sizes):
    rng = np.random.default_rng(sum(sizes))
    net = init_mlp(sizes, last_layer_std=0.5, rng=rng)
    errs = fd_probes(net, rng, 60)
    assert len(errs) >= 100
    assert errs.max() <= 1e-4, f"{name}: max relative error {errs.max():.2e}"


def test_single_vector_forward_backward():
    rng = np.random.default_rng(0)
    net = init_mlp([5, 7, 3], 0.5, rng=rng)
    x = rng.standard_normal(5)
    y, cache = net.forward(x)
    g1, dx1 = net.backward(cache, np.ones(3))
    yb, cb = net.forward(x[None])
    g2, dx2 = net.backward(cb, np.ones((1, 3)))
    assert np.allclose(y, yb[0]) and np.allclose(g1, g2) and np.allclose(dx1, dx2[0])


def test_mlp_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Mlp([3])
    with pytest.raises(ValueError):
        Mlp([3, 2], np.zeros(5))
    with pytest.raises(ValueError):
        Mlp([3, 2])(np.zeros(4))


def test_init_zero_std_output_is_bias_and_seeded():
    net = init_mlp([6, 9, 3], last_layer_std=0.0, last_layer_bias=np.array([0.5, -1.0, 2.0]),
                   rng=np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((5, 6))
    assert np.array_equal(net(x), np.tile([0.5, -1.0, 2.0], (5, 1)))
    a = init_mlp([6, 9, 3], 0.1, rng=np.random.default_rng(4))
    b = init_mlp([6, 9, 3], 0.1, rng=np.random.default_rng(4))
    assert np.array_equal(a.theta, b.theta)


def test_last_layer_std_statistics():
    net = init_mlp([4, 400, 250], last_layer_std=1e-3, rng=np.random.default_rng(0))
    W, _ = net.layer(1)
    assert W.size == 100_000
    assert abs(W.std() - 1e-3) < 0.05e-3


def test_forward_matches_naive_matmul():
    rng = np.random.default_rng(2)
    net = init_mlp([5, 7, 6, 3], 0.5, rng=rng)
    x = rng.standard_normal(5)
    h = list(x)
    for i in range(3):
        W, b = net.layer(i)
        out = [b[j] + sum(h[k] * W[k, j] for k in range(len(h))) for j in range(len(b))]
        h = [max(v, 0.0) for v in out] if i < 2 else out
    assert np.allclose(net(x), h, rtol=1e-12, atol=1e-14)
    zero = Mlp([5, 7, 3])
    zero.layer(1)[1][...] = [1.0, 2.0, 3.0]
    assert np.array_equal(zero(x), [1.0, 2.0, 3.0])


def test_relu_blocks_negative_preactivations():
    net = Mlp([1, 2, 1])
    W0, b0 = net.layer(0)
    W0[...] = [[1.0, -1.0]]
    W1, _ = net.layer(1)
    W1[...] = [[1.0], [1.0]]
    assert net(np.array([2.0]))[0] == 2.0    # second unit's pre-activation is -2
    assert net(np.array([-3.0]))[0] == 3.0


def test_backward_zero_upstream_and_linearity():
    rng = np.random.default_rng(3)
    net = init_mlp([4, 8, 2], 0.5, rng=rng)
    x = rng.standard_normal((6, 4))
    _, cache = net.forward(x)
    g0, dx0 = net.backward(cache, np.zeros((6, 2)))
    assert not g0.any() and not dx0.any()
    r1, r2 = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    g1, _ = net.backward(cache, r1)
    g2, _ = net.backward(cache, r2)
    g12, _ = net.backward(cache, 2.0 * r1 - 0.5 * r2)
    assert np.allclose(g12, 2.0 * g1 - 0.5 * g2, atol=1e-12)


def test_init_last_layer():
    net = init_mlp([10, 20, 4], last_layer_std=1e-3, last_layer_bias=np.arange(4.0),
                   rng=np.random.default_rng(0))
    W, b = net.layer(1)
    assert np.abs(W).max() < 1e-2
    assert np.array_equal(b, np.arange(4.0))
    W0, _ = net.layer(0)
    assert np.abs(W0).max() <= 1 / np.sqrt(10)
    assert net.theta.size == n_params([10, 20, 4]) == 10 * 20 + 20 + 20 * 4 + 4


# --------------------------------------------------------------------------
# Gaussian head
# --------------------------------------------------------------------------

def test_diag_gaussian_matches_scipy():
    rng = np.random.default_rng(1)
    mean, log_std = rng.standard_normal((4, 6)), rng.uniform(-2, 1, (4, 6))
    d = DiagGaussian(mean, log_std)
    x = rng.standard_normal((4, 6))
    assert np.allclose(d.log_prob(x), norm.logpdf(x, mean, np.exp(log_std)).sum(-1), atol=1e-12)
    assert np.allclose(d.entropy(), norm.entropy(mean, np.exp(log_std)).sum(-1), atol=1e-12)


def test_diag_gaussian_gradients():
    rng = np.random.default_rng(2)
    mean, log_std = rng.standard_normal(5), rng.uniform(-2, 1, 5)
    x = rng.standard_normal(5)
    dm, dls = DiagGaussian(mean, log_std).log_prob_grads(x)
    eps = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = eps
        fdm = (DiagGaussian(mean + e, log_std).log_prob(x) - DiagGaussian(mean - e, log_std).log_prob(x)) / (2 * eps)
        fds = (DiagGaussian(mean, log_std + e).log_prob(x) - DiagGaussian(mean, log_std - e).log_prob(x)) / (2 * eps)
        assert dm[i] == pytest.approx(fdm, rel=1e-6)
        assert dls[i] == pytest.approx(fds, rel=1e-6)


def test_unit_gaussian_closed_forms():
    d = DiagGaussian(np.array([0.3, -1.0, 2.0]), np.zeros(3))
    assert d.log_prob(np.array([0.3, -1.0, 2.0])) == pytest.approx(-1.5 * np.log(2 * np.pi), abs=1e-14)
    assert d.entropy() == pytest.approx(3 * 0.5 * np.log(2 * np.pi * np.e), abs=1e-14)
    assert 0.5 * np.log(2 * np.pi * np.e) == pytest.approx(1.4189, abs=1e-4)


def test_sample_mean_within_three_standard_errors():
    mean, std = np.array([0.5, -2.0]), np.array([0.3, 1.5])
    d = DiagGaussian(np.tile(mean, (100_000, 1)), np.tile(np.log(std), (100_000, 1)))
    draws = d.sample(np.random.default_rng(0))
    assert np.all(np.abs(draws.mean(0) - mean) < 3 * std / np.sqrt(100_000))


def test_log_std_clamped_has_zero_gradient():
    d = DiagGaussian(np.zeros(2), np.array([-10.0, 5.0]))
    assert np.array_equal(d.log_std, [-5.0, 2.0])
    _, dls = d.log_prob_grads(np.ones(2))
    assert np.array_equal(dls, [0.0, 0.0])
    assert np.array_equal(d.entropy_grad(), [0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sample_statistics_seeded(seed):
    d = DiagGaussian(np.array([1.0, -2.0]), np.log([0.5, 2.0]))
    a = d.sample(np.random.default_rng(seed))
    b = d.sample(np.random.default_rng(seed))
    assert np.array_equal(a, b)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

def test_adam_first_step_is_signed_lr():
    rng = np.random.default_rng(3)
    theta = rng.standard_normal(20)
    g = rng.standard_normal(20)
    out = adam_step(NetParams(theta.copy(), np.zeros(20), np.zeros(20)), g, lr=1e-3)
    assert np.max(np.abs((out.theta - theta) + 1e-3 * np.sign(g))) < 1e-6


def test_adam_matches_scalar_recursion():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    grads = list(np.random.default_rng(9).standard_normal(100) * 2.0)
    th, m, v = 1.0, 0.0, 0.0
    p = NetParams(np.array([1.0]), np.zeros(1), np.zeros(1))
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        th -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        p = adam_step(p, np.array([g]), lr)
        assert p.theta[0] == pytest.approx(th, abs=1e-13)
    assert p.step == 100


def test_adam_zero_gradient_stream_is_stationary():
    p = NetParams(np.array([0.3, -1.0]), np.zeros(2), np.zeros(2))
    for _ in range(10):
        p = adam_step(p, np.zeros(2), 0.1)
    assert np.array_equal(p.theta, [0.3, -1.0])


def test_adam_does_not_mutate_inputs():
    p = NetParams(np.ones(3), np.zeros(3), np.zeros(3))
    adam_step(p, np.ones(3), 0.1)
    assert np.array_equal(p.theta, np.ones(3)) and p.step == 0


def test_adam_divergence():
    p = NetParams(np.ones(2), np.zeros(2), np.zeros(2))
    with pytest.raises(DivergenceError):
        adam_step(p, np.array([np.nan, 0.0]), 0.1)
    with pytest.raises(ValueError):
        adam_step(p, np.ones(3), 0.1)


def test_adam_wrapper_updates_net_in_place():
    net = init_mlp([3, 4, 2], rng=np.random.default_rng(0))
    view = net.layer(0)[0]
    before = view.copy()
    opt = Adam(net, 1e-2)
    opt.step(np.ones_like(net.theta))
    assert np.allclose(view, before - 1e-2, atol=1e-9)   # layer views stay live
    assert opt.state.step == 1


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    nets = {"a": init_mlp([3, 5, 2], 0.1, rng=rng), "b": init_mlp([2, 4, 4, 1], 0.1, rng=rng)}
    opt = Adam(nets["a"], 1e-3)
    opt.step(rng.standard_normal(nets["a"].theta.size))
    save_checkpoint(tmp_path / "c.ckpt", nets, {"a": opt.state})
    loaded, adam = load_checkpoint(tmp_path / "c.ckpt")
    for k in nets:
        assert loaded[k].sizes == nets[k].sizes
        assert np.array_equal(loaded[k].theta, nets[k].theta)
    assert set(adam) == {"a"}
    assert np.array_equal(adam["a"].m, opt.state.m) and np.array_equal(adam["a"].v, opt.state.v)
    assert adam["a"].step == 1


def test_checkpoint_layout(tmp_path):
    net = Mlp([2, 1], np.array([1.5, -2.0, 0.25]))
    save_checkpoint(tmp_path / "c.ckpt", {"n": net})
    raw = (tmp_path / "c.ckpt").read_bytes()
    expected = (MAGIC + struct.pack("<I", 1) + struct.pack("<I", 1) + b"n" + struct.pack("<I", 2)
                + struct.pack("<ii", 2, 1) + struct.pack("<3d", 1.5, -2.0, 0.25) + struct.pack("<I", 0))
    assert raw == expected


def test_checkpoint_rejects_corruption(tmp_path):
    save_checkpoint(tmp_path / "c.ckpt", {"n": Mlp([2, 1])})
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-6])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "long.ckpt")
