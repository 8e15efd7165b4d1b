import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr
from scipy.stats import qmc

from dmpo_lab import mppi
from dmpo_lab.mppi import (MppiConfig, MppiController, PlanParams, RolloutBatch, control_limits, halton,
                           halton_gaussian, make_base_samples, mppi_policy_step, mppi_update, mppi_weights,
                           rollout, sample_controls, shift_forward)
from dmpo_lab.sim import QuadState, SimParams, step_array
from dmpo_lab.task import CostWeights, denormalize_control, gen_zigzag, stage_cost_array

MODEL = SimParams()
W = CostWeights()


def test_halton_base2_prefix():
    assert np.array_equal(halton(4, 1, scramble=False)[:, 0], [0.5, 0.25, 0.75, 0.125])


def test_halton_matches_scipy_unscrambled():
    ours = halton(50, 6, skip=0, scramble=False)
    ref = qmc.Halton(6, scramble=False).random(51)[1:]
    assert np.allclose(ours, ref, atol=1e-15)


def test_halton_skip_offsets_sequence():
    full = halton(30, 3, scramble=False)
    assert np.array_equal(halton(10, 3, skip=20, scramble=False), full[20:])


def test_scrambled_halton_properties():
    pts = halton(256, 128, skip=100, scramble=True)
    assert np.all((pts > 0) & (pts < 1))
    assert np.array_equal(pts, halton(256, 128, skip=100, scramble=True))
    assert np.array_equal(pts[:, 0], halton(256, 1, skip=100, scramble=False)[:, 0])  # base 2 untouched
    # per-dimension values stay distinct (a digit permutation is a bijection)
    assert all(len(np.unique(pts[:, j])) == 256 for j in range(128))


def test_scrambling_reduces_dimension_correlation():
    plain = halton(256, 128, skip=100, scramble=False)
    scr = halton(256, 128, skip=100, scramble=True)
    c_plain = np.abs(np.corrcoef(plain[:, 120], plain[:, 121])[0, 1])
    c_scr = np.abs(np.corrcoef(scr[:, 120], scr[:, 121])[0, 1])
    assert c_scr < c_plain


def test_halton_gaussian_cdf_round_trip():
    u = halton(64, 8, skip=7)
    z = halton_gaussian(64, 8, skip=7)
    assert np.allclose(ndtr(z), u, atol=1e-12)


def test_halton_errors():
    with pytest.raises(ValueError):
        halton(0, 2)
    with pytest.raises(ValueError):
        halton(4, len(mppi.PRIMES) + 1)


def test_base_samples_shape_and_moments():
    base = make_base_samples(MppiConfig(N=1024, H=4))
    assert base.shape == (1024, 4, 4)
    assert np.abs(base.mean(axis=0)).max() < 0.05
    assert np.abs(base.std(axis=0) - 1).max() < 0.1


# --------------------------------------------------------------------------
# weights and update algebra
# --------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(costs=st.lists(st.floats(0, 1e4), min_size=1, max_size=64), beta=st.floats(1e-3, 10.0))
def test_weights_normalized(costs, beta):
    w = mppi_weights(np.array(costs), beta)
    assert abs(w.sum() - 1.0) < 1e-9
    assert np.all(w >= 0)


def test_uniform_cost_gives_uniform_weights():
    w = mppi_weights(np.full(16, 3.7), 0.1)
    assert np.allclose(w, 1 / 16, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-1e3, 1e3))
def test_weights_shift_invariant(seed, shift):
    c = np.random.default_rng(seed).uniform(0, 5, 32)
    assert np.max(np.abs(mppi_weights(c, 0.5) - mppi_weights(c + shift, 0.5))) < 1e-12


def _random_problem(seed, N=4, H=2):
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.5, 1.5, (H, 4))
    sigma = rng.uniform(0.05, 0.3, (H, 4))
    u = rng.uniform(0.2, 1.8, (N, H, 4))
    costs = rng.uniform(0, 2, N)
    return PlanParams(mu, sigma), u, costs


def test_update_matches_brute_force():
    params, u, costs = _random_problem(0)
    cfg = MppiConfig(N=4, H=2, beta=0.7, gamma_mu=0.6, gamma_sigma=0.4, sigma_min=1e-6, sigma_max=10.0)
    batch = RolloutBatch(u, costs, mppi_weights(costs, cfg.beta))
    out = mppi_update(params, batch, cfg)
    # explicit loops over samples
    e = [np.exp(-(c - costs.min()) / cfg.beta) for c in costs]
    w = [x / sum(e) for x in e]
    for h in range(2):
        for d in range(4):
            m = sum(w[n] * u[n, h, d] for n in range(4))
            s2 = sum(w[n] * (u[n, h, d] - params.mu[h, d]) ** 2 for n in range(4))
            assert abs(out.mu[h, d] - (0.4 * params.mu[h, d] + 0.6 * m)) < 1e-12
            assert abs(out.sigma[h, d] - np.sqrt(0.6 * params.sigma[h, d] ** 2 + 0.4 * s2)) < 1e-12


def test_zero_step_is_noop():
    params, u, costs = _random_problem(1)
    cfg = MppiConfig(N=4, H=2, gamma_mu=0.0, gamma_sigma=0.0, sigma_min=1e-6, sigma_max=10.0)
    out = mppi_update(params, RolloutBatch(u, costs, mppi_weights(costs, 1.0)), cfg)
    assert np.array_equal(out.mu, params.mu)
    assert np.allclose(out.sigma, params.sigma, atol=1e-15)


def test_unit_step_one_hot_endpoint():
    params, u, costs = _random_problem(2)
    costs[2] = -100.0
    cfg = MppiConfig(N=4, H=2, beta=1e-3, gamma_mu=1.0, gamma_sigma=1.0, sigma_min=1e-9, sigma_max=10.0)
    out = mppi_update(params, RolloutBatch(u, costs, mppi_weights(costs, cfg.beta)), cfg)
    assert np.array_equal(out.mu, u[2])
    assert np.allclose(out.sigma, np.abs(u[2] - params.mu), atol=1e-12)


def test_sigma_clipped():
    params, u, costs = _random_problem(3)
    cfg = MppiConfig(N=4, H=2, gamma_sigma=1.0, sigma_min=0.2, sigma_max=0.25)
    out = mppi_update(params, RolloutBatch(u, costs, mppi_weights(costs, 1.0)), cfg)
    assert np.all((out.sigma >= 0.2) & (out.sigma <= 0.25))


def test_shift_forward():
    cfg = MppiConfig(H=3, N=4)
    params = PlanParams(np.arange(12.0).reshape(3, 4), np.full((3, 4), 0.5))
    out = shift_forward(params, cfg)
    assert np.array_equal(out.mu[:2], params.mu[1:])
    assert np.array_equal(out.mu[2], [1, 0, 0, 0])
    assert np.allclose(out.sigma[2], cfg.sigma_init)


def test_sample_zero_is_mean_and_clamped():
    cfg = MppiConfig(H=4, N=32)
    base = make_base_samples(cfg)
    params = PlanParams(np.tile([1.0, 0.2, 0, 0], (4, 1)), np.full((4, 4), 5.0))
    u = sample_controls(params, base, MODEL)
    lo, hi = control_limits(MODEL)
    assert np.array_equal(u[0], params.mu)
    assert np.all(u >= lo) and np.all(u <= hi)
    assert np.isclose(hi[0], 2.0)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        MppiConfig(beta=0.0)
    with pytest.raises(ValueError):
        MppiConfig(gamma_mu=1.5)
    with pytest.raises(ValueError):
        MppiConfig(sigma_min=2.0, sigma_max=1.0)
    cfg = MppiConfig(H=8, sigma_init=(0.1, 0.2, 0.3, 0.4))
    assert MppiConfig.from_dict(cfg.to_dict()) == cfg


# --------------------------------------------------------------------------
# rollout
# --------------------------------------------------------------------------

def manual_rollout(x0, controls, ref_p, ref_q, model, w):
    """Loop over numpy plant steps and the numpy stage cost."""
    out = np.empty(len(controls))
    for n, seq in enumerate(controls):
        x = x0.copy()
        total = 0.0
        for h, u in enumerate(seq):
            x = step_array(x, denormalize_control(u, model), model, disturbance=False)
            c = stage_cost_array(x, u, ref_p[h], ref_q[h], w)
            total += c * (w.terminal_scale if h == len(seq) - 1 else 1.0)
        out[n] = total
    return out


@pytest.mark.parametrize("terminal", [1.0, 3.0])
def test_rollout_matches_numpy_plant(terminal):
    cfg = MppiConfig(H=10, N=16)
    rng = np.random.default_rng(5)
    x0 = QuadState.hover(MODEL, p=(0.1, -0.2, 0.3)).to_array()
    x0[3:6] = rng.normal(0, 0.3, 3)
    x0[10:13] = x0[14:17] = rng.normal(0, 1.0, 3)
    params = PlanParams(np.tile([1.0, 0, 0, 0], (10, 1)), np.full((10, 4), 0.3))
    u = sample_controls(params, make_base_samples(cfg), MODEL)
    traj = gen_zigzag(0, yaw_flips=True, seg_time=0.1, duration=1.0)
    rp, rq = traj.window(1, 10)
    w = CostWeights(terminal_scale=terminal)
    assert np.allclose(rollout(x0, u, rp, rq, MODEL, w), manual_rollout(x0, u, rp, rq, MODEL, w),
                       rtol=1e-10, atol=1e-12)


def test_rollout_batches_over_environments():
    cfg = MppiConfig(H=6, N=8)
    base = make_base_samples(cfg)
    x0 = np.stack([QuadState.hover(MODEL, p=(0.1 * i, 0, 0)).to_array() for i in range(3)])
    params = PlanParams(np.tile([1.0, 0, 0, 0], (3, 6, 1)), np.full((3, 6, 4), 0.2))
    u = sample_controls(params, base, MODEL)
    rp, rq = np.zeros((6, 3)), np.tile([1.0, 0, 0, 0], (6, 1))
    batched = rollout(x0, u, rp, rq, MODEL, W)
    for i in range(3):
        assert np.array_equal(batched[i], rollout(x0[i], u[i], rp, rq, MODEL, W))


def test_rollout_nonfinite_costs_large():
    x0 = QuadState.hover(MODEL).to_array()
    x0[0] = np.nan
    u = np.ones((2, 3, 4))
    c = rollout(x0, u, np.zeros((3, 3)), np.tile([1.0, 0, 0, 0], (3, 1)), MODEL, W)
    assert np.all(c == mppi.LARGE_COST)


def test_rollout_short_reference_rejected():
    with pytest.raises(ValueError):
        rollout(np.zeros(17), np.ones((2, 5, 4)), np.zeros((3, 3)), np.zeros((3, 4)), MODEL, W)


def test_policy_step_applies_first_updated_row():
    cfg = MppiConfig(H=8, N=32)
    base = make_base_samples(cfg)
    x = QuadState.hover(MODEL).to_array()
    rp, rq = np.tile([0.2, 0, 0], (8, 1)), np.tile([1.0, 0, 0, 0], (8, 1))
    params = PlanParams.default(cfg)
    u, nxt, batch = mppi_policy_step(x, params, rp, rq, cfg, MODEL, W, base)
    updated = mppi_update(params, batch, cfg)
    assert np.array_equal(u, updated.mu[0])
    assert np.array_equal(nxt.mu, shift_forward(updated, cfg).mu)


def test_controller_hovers_in_place():
    cfg = MppiConfig()
    ctl = MppiController(cfg, MODEL, W)
    x = QuadState.hover(MODEL).to_array()
    rp, rq = np.zeros((cfg.H, 3)), np.tile([1.0, 0, 0, 0], (cfg.H, 1))
    errs, thrusts = [], []
    for _ in range(100):
        u = ctl.act(x, rp, rq)
        x = step_array(x, denormalize_control(u, MODEL), MODEL)
        errs.append(np.linalg.norm(x[:3]))
        thrusts.append(u[0])   # multiples of the hover thrust m*g
    assert max(errs) < 0.05
    assert np.all(np.abs(np.array(thrusts[10:]) - 1.0) < 0.1)


# --------------------------------------------------------------------------
# further closed-form cases
# --------------------------------------------------------------------------

def test_median_uniform_maps_to_zero():
    from scipy.special import ndtri
    assert ndtri(0.5) == 0.0
    assert halton_gaussian(1, 1)[0, 0] == 0.0   # first base-2 point is 1/2


def test_two_sample_closed_form_weights():
    beta = 0.37
    w = mppi_weights(np.array([0.0, beta * np.log(2.0)]), beta)
    assert np.allclose(w, [2 / 3, 1 / 3], atol=1e-15)


def test_sampling_degenerate_cases():
    cfg = MppiConfig(H=4, N=16, sigma_min=1e-3)
    base = make_base_samples(cfg)
    mu = np.tile([1.0, 0.1, -0.2, 0.0], (4, 1))
    u = sample_controls(PlanParams(mu, np.full((4, 4), 0.3)), np.zeros_like(base), MODEL)
    assert np.all(u == mu)
    u = sample_controls(PlanParams(mu, np.full((4, 4), cfg.sigma_min)), base, MODEL)
    assert np.max(np.abs(u - mu)) <= cfg.sigma_min * np.abs(base).max() + 1e-15
    sig = np.full((4, 4), 0.05)
    a = sample_controls(PlanParams(mu, sig), base, MODEL)
    b = sample_controls(PlanParams(mu + 0.01, sig), base, MODEL)
    assert np.allclose(b - a, 0.01, atol=1e-15)


def test_identical_sequences_identical_costs():
    cfg = MppiConfig(H=6, N=8)
    x = QuadState.hover(MODEL, p=(0.2, 0.1, -0.3)).to_array()
    seq = np.random.default_rng(0).uniform(0.5, 1.5, (6, 4))
    costs = rollout(x, np.tile(seq, (8, 1, 1)), np.zeros((6, 3)), np.tile([1.0, 0, 0, 0], (6, 1)), MODEL, W)
    assert np.all(costs == costs[0])


def test_hover_sequence_on_reference_costs_nothing():
    x = QuadState.hover(MODEL).to_array()
    hover = np.tile([1.0, 0, 0, 0], (1, 10, 1))
    cost = rollout(x, hover, np.zeros((10, 3)), np.tile([1.0, 0, 0, 0], (10, 1)), MODEL,
                   CostWeights(w_u=0.0))
    assert cost[0] < 1e-20


def test_shift_forward_two_rows_and_fixed_point():
    cfg = MppiConfig(H=2, N=4, sigma_init=(0.3, 0.3, 0.3, 0.3))
    a, b = np.array([1.2, 0.1, 0, 0]), np.array([0.8, 0, 0.2, 0])
    out = shift_forward(PlanParams(np.stack([a, b]), np.array([[0.1] * 4, [0.2] * 4])), cfg)
    assert np.array_equal(out.mu, np.stack([b, cfg.theta_bar[0]]))
    assert np.allclose(out.sigma, [[0.2] * 4, cfg.sigma_init])
    cfg = MppiConfig(H=5, N=4)
    p = PlanParams(np.random.default_rng(1).uniform(0, 1, (5, 4)), np.full((5, 4), 0.4))
    for _ in range(5):
        p = shift_forward(p, cfg)
    assert np.array_equal(p.mu, np.tile(cfg.theta_bar[0], (5, 1)))
    assert np.array_equal(p.sigma, np.tile(cfg.theta_bar[1], (5, 1)))


def test_policy_step_deterministic_and_zero_step_applies_warm_start():
    cfg = MppiConfig(H=8, N=32, gamma_mu=0.0, gamma_sigma=0.0)
    base = make_base_samples(cfg)
    x = QuadState.hover(MODEL, p=(0.1, 0, 0)).to_array()
    rp, rq = np.zeros((8, 3)), np.tile([1.0, 0, 0, 0], (8, 1))
    params = PlanParams(np.tile([1.05, 0.02, 0, 0], (8, 1)), np.full((8, 4), 0.2))
    u1, n1, _ = mppi_policy_step(x, params, rp, rq, cfg, MODEL, W, base)
    u2, n2, _ = mppi_policy_step(x, params, rp, rq, cfg, MODEL, W, base)
    assert np.array_equal(u1, u2) and np.array_equal(n1.mu, n2.mu)
    assert np.array_equal(u1, params.mu[0])
