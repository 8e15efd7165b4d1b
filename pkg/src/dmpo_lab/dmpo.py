"""Learned residual warm start and optimizer around MPPI, plus the auxiliary MDP.

Network input layout (fixed; checkpoints depend on it)::

    shift:           [mu_prev (H*4, row-major), sigma_prev (H*4)]
    mean_opt/cov_opt: [mu_tilde (H*4), sigma_tilde (H*4), standardized costs (N)]

Outputs::

    shift:    [mean residual (H*4), log-variance residual (H*4)]
    mean_opt: [network mean (H*4), gate pre-activation (H*4), log std of mean action (H*4)]
    cov_opt:  [log-variance residual (H*4), log std of that residual (H*4)]

None of the networks sees the system state; only the rollout does.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy.special import expit

from . import mppi
from ._kernels import clamp_slopes
from .mppi import MppiConfig, PlanParams, RolloutBatch
from .neural import DiagGaussian, Mlp, init_mlp
from .sim import P, SimParams, randomize
from .task import Episode, TaskConfig

D_U = mppi.CONTROL_DIM
CRITIC_REF_POINTS = 8
CRITIC_REF_STRIDE = 4
REF_DIM = CRITIC_REF_POINTS * 7


@dataclass(frozen=True)
class DmpoConfig:
    hidden: int = 256
    last_layer_std: float = 1e-3
    gate_bias: float = -4.0
    mean_log_std: float = -3.0   # exploration std of the mean action (normalized units)
    cov_log_std: float = -2.0    # exploration std of the log-variance residual

    def to_dict(self) -> dict:
        return asdict(self)


class DmpoNets:
    def __init__(self, shift: Mlp, mean_opt: Mlp, cov_opt: Mlp):
        self.shift = shift
        self.mean_opt = mean_opt
        self.cov_opt = cov_opt
        k2 = shift.n_in
        if shift.n_out != k2 or k2 % (2 * D_U):
            raise ValueError("shift network must map 2*H*d_u -> 2*H*d_u")
        self.K = k2 // 2
        self.H = self.K // D_U
        self.N = mean_opt.n_in - k2
        if cov_opt.n_in != mean_opt.n_in or mean_opt.n_out != 3 * self.K or cov_opt.n_out != 2 * self.K:
            raise ValueError("optimizer network shapes disagree with the shift network")

    @classmethod
    def init(cls, mcfg: MppiConfig, dcfg: DmpoConfig, rng: np.random.Generator) -> "DmpoNets":
        K = mcfg.H * D_U
        n_in = 2 * K + mcfg.N
        shift = init_mlp([2 * K, dcfg.hidden, 2 * K], dcfg.last_layer_std, 0.0, rng)
        # network mean starts at the hover plan so a partly open gate does not pull thrust to zero
        hover_plan = np.tile(mcfg.theta_bar[0], mcfg.H)
        mean_bias = np.concatenate([hover_plan, np.full(K, dcfg.gate_bias), np.full(K, dcfg.mean_log_std)])
        mean_opt = init_mlp([n_in, dcfg.hidden, 3 * K], dcfg.last_layer_std, mean_bias, rng)
        cov_bias = np.concatenate([np.zeros(K), np.full(K, dcfg.cov_log_std)])
        cov_opt = init_mlp([n_in, dcfg.hidden, 2 * K], dcfg.last_layer_std, cov_bias, rng)
        return cls(shift, mean_opt, cov_opt)

    def as_dict(self) -> dict:
        return {"shift": self.shift, "mean_opt": self.mean_opt, "cov_opt": self.cov_opt}

    @classmethod
    def from_dict(cls, d: dict) -> "DmpoNets":
        return cls(d["shift"], d["mean_opt"], d["cov_opt"])

    def copy(self) -> "DmpoNets":
        return DmpoNets(self.shift.copy(), self.mean_opt.copy(), self.cov_opt.copy())

    def zeroed(self) -> "DmpoNets":
        """Copy whose residuals are exactly zero and whose gate is closed (g = 0)."""
        out = self.copy()
        for net in (out.shift, out.mean_opt, out.cov_opt):
            W, b = net.layer(len(net.sizes) - 2)
            W[...] = 0.0
            b[...] = 0.0
        _, b = out.mean_opt.layer(len(out.mean_opt.sizes) - 2)
        b[self.K:2 * self.K] = -np.inf
        return out


def standardize_costs(costs: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per batch along the sample axis; order kept."""
    mean = costs.mean(axis=-1, keepdims=True)
    std = costs.std(axis=-1, keepdims=True)
    return (costs - mean) / (std + 1e-8)


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[:-2] + (-1,))


def _shift_pass(nets: DmpoNets, prev: PlanParams, cfg: MppiConfig):
    z = np.concatenate([_flat(prev.mu), _flat(prev.sigma)], axis=-1)
    out, cache = nets.shift.forward(z)
    shifted = mppi.shift_forward(prev, cfg)
    shape = prev.mu.shape
    mu = shifted.mu + out[..., :nets.K].reshape(shape)
    raw = shifted.sigma * np.exp(0.5 * out[..., nets.K:].reshape(shape))
    sigma = np.clip(raw, cfg.sigma_min, cfg.sigma_max)
    inside = (raw >= cfg.sigma_min) & (raw <= cfg.sigma_max)
    return PlanParams(mu, sigma), (cache, inside)


def shift_residual(nets: DmpoNets, params: PlanParams, cfg: MppiConfig) -> PlanParams:
    """Shift-forward plus the learned residual (additive mean, multiplicative variance)."""
    return _shift_pass(nets, params, cfg)[0]


@dataclass
class Heads:
    mu_hat: np.ndarray
    gate_pre: np.ndarray
    log_std_mu: np.ndarray
    cov_res: np.ndarray
    log_std_cov: np.ndarray
    caches: tuple

    @property
    def gate(self) -> np.ndarray:
        return expit(self.gate_pre)


def _heads(nets: DmpoNets, tilde: PlanParams, costs_std: np.ndarray) -> Heads:
    z = np.concatenate([_flat(tilde.mu), _flat(tilde.sigma), costs_std], axis=-1)
    out_m, cm = nets.mean_opt.forward(z)
    out_c, cc = nets.cov_opt.forward(z)
    K = nets.K
    return Heads(out_m[..., :K], out_m[..., K:2 * K], out_m[..., 2 * K:], out_c[..., :K], out_c[..., K:],
                 (cm, cc))


@dataclass
class MpcLinearization:
    """First-order model of the MPPI mean proposal around the collection point.

    With the sample weights held fixed, the proposal is piecewise linear in
    (mu_tilde, sigma_tilde) because of control clamping; ``slope_mu`` and
    ``slope_sigma`` are the weighted clamp masks (times the base samples for
    sigma). Exact at the collection point.
    """

    mu_tilde: np.ndarray   # (..., K)
    sigma_tilde: np.ndarray
    mu_mpc: np.ndarray
    slope_mu: np.ndarray
    slope_sigma: np.ndarray

    def proposal(self, mu_tilde: np.ndarray, sigma_tilde: np.ndarray, gamma_mu: float) -> np.ndarray:
        dmu = mu_tilde - self.mu_tilde
        dsig = sigma_tilde - self.sigma_tilde
        return (self.mu_mpc + (1.0 - gamma_mu) * dmu
                + gamma_mu * (self.slope_mu * dmu + self.slope_sigma * dsig))


def linearize_mpc(tilde: PlanParams, batch: RolloutBatch, mpc: PlanParams, base: np.ndarray,
                  model: SimParams) -> MpcLinearization:
    lo, hi = mppi.control_limits(model)
    lead = batch.costs.shape[:-1]
    B = int(np.prod(lead)) if lead else 1
    N, H, d = base.shape
    slope_mu, slope_sigma = clamp_slopes(np.ascontiguousarray(batch.weights.reshape(B, N)),
                                         np.ascontiguousarray(batch.controls.reshape(B, N, H, d)),
                                         np.ascontiguousarray(base, dtype=float), lo, hi)
    return MpcLinearization(_flat(tilde.mu), _flat(tilde.sigma), _flat(mpc.mu),
                            slope_mu.reshape(lead + (H * d,)), slope_sigma.reshape(lead + (H * d,)))


def gated_mean(heads: Heads, mu_mpc: np.ndarray) -> np.ndarray:
    g = heads.gate
    return (1.0 - g) * mu_mpc + g * heads.mu_hat


def optimizer_update(nets: DmpoNets, tilde: PlanParams, mpc: PlanParams, costs: np.ndarray,
                     cfg: MppiConfig, model: SimParams, mode: str = "eval",
                     rng: Optional[np.random.Generator] = None, heads: Optional[Heads] = None):
    """Gated mean blend and multiplicative covariance update on the MPPI proposal.

    Returns (realized params, log_prob, (mean action, covariance action)).
    In eval mode the policy means are used and log_prob is 0.
    """
    if heads is None:
        heads = _heads(nets, tilde, standardize_costs(costs))
    mean = gated_mean(heads, _flat(mpc.mu))
    dist_mu = DiagGaussian(mean, heads.log_std_mu)
    dist_c = DiagGaussian(heads.cov_res, heads.log_std_cov)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
        a_mu = dist_mu.sample(rng)
        a_c = dist_c.sample(rng)
        log_prob = dist_mu.log_prob(a_mu) + dist_c.log_prob(a_c)
    elif mode == "eval":
        a_mu, a_c = mean, heads.cov_res
        log_prob = np.zeros(mean.shape[:-1])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    lo, hi = mppi.control_limits(model)
    shape = mpc.mu.shape
    mu = np.clip(a_mu.reshape(shape), lo, hi)
    sigma = np.clip(mpc.sigma * np.exp(0.5 * a_c.reshape(shape)), cfg.sigma_min, cfg.sigma_max)
    return PlanParams(mu, sigma), log_prob, (a_mu, a_c)


@dataclass
class StepRecord:
    """Everything PPO needs to recompute the log-probability of a step."""

    prev: PlanParams
    costs_std: np.ndarray
    lin: MpcLinearization
    a_mu: np.ndarray
    a_cov: np.ndarray
    log_prob: np.ndarray
    gate_mean: np.ndarray


def dmpo_policy_step(x: np.ndarray, prev: PlanParams, ref_p, ref_q, cfg: MppiConfig, model: SimParams,
                     weights, nets: DmpoNets, base: np.ndarray, mode: str = "eval",
                     rng: Optional[np.random.Generator] = None):
    """Shift, sample, roll out, MPPI-propose, then apply the learned optimizer.

    ``prev`` is the previous (unshifted) plan. Returns
    (normalized control, new plan, rollout batch, StepRecord).
    """
    tilde, _ = _shift_pass(nets, prev, cfg)
    batch = mppi.plan_and_evaluate(x, tilde, ref_p, ref_q, cfg, model, weights, base)
    mpc = mppi.mppi_update(tilde, batch, cfg)
    lin = linearize_mpc(tilde, batch, mpc, base, model)
    costs_std = standardize_costs(batch.costs)
    heads = _heads(nets, tilde, costs_std)
    new, log_prob, (a_mu, a_c) = optimizer_update(nets, tilde, mpc, batch.costs, cfg, model, mode, rng, heads)
    u = new.mu[..., 0, :].copy()
    rec = StepRecord(prev, costs_std, lin, a_mu, a_c, log_prob, heads.gate.mean(axis=-1))
    return u, new, batch, rec


class ActorPass:
    """Differentiable recomputation of the optimizer policy's log-probability.

    Inputs are stored step records (batched along axis 0). ``backward`` takes
    d(objective)/d(log_prob) and d(objective)/d(entropy) per sample and returns
    flat parameter gradients for the three networks.
    """

    def __init__(self, nets: DmpoNets, cfg: MppiConfig, prev_mu, prev_sigma, costs_std,
                 lin: MpcLinearization, a_mu, a_cov):
        self.nets, self.cfg = nets, cfg
        prev = PlanParams(prev_mu, prev_sigma)
        self.tilde, (self.shift_cache, self.sig_inside) = _shift_pass(nets, prev, cfg)
        self.lin = lin
        mu_t, sig_t = _flat(self.tilde.mu), _flat(self.tilde.sigma)
        self.mu_mpc = lin.proposal(mu_t, sig_t, cfg.gamma_mu)
        self.heads = _heads(nets, self.tilde, costs_std)
        self.g = self.heads.gate
        self.mean = (1.0 - self.g) * self.mu_mpc + self.g * self.heads.mu_hat
        self.dist_mu = DiagGaussian(self.mean, self.heads.log_std_mu)
        self.dist_c = DiagGaussian(self.heads.cov_res, self.heads.log_std_cov)
        self.a_mu, self.a_cov = a_mu, a_cov
        self.log_prob = self.dist_mu.log_prob(a_mu) + self.dist_c.log_prob(a_cov)
        self.entropy = self.dist_mu.entropy() + self.dist_c.entropy()

    def backward(self, dlogp: np.ndarray, dent: np.ndarray) -> dict:
        K, cfg, h = self.nets.K, self.cfg, self.heads
        dlogp = dlogp[..., None]
        dent = dent[..., None]
        dmean, dls_mu = self.dist_mu.log_prob_grads(self.a_mu)
        dmean = dmean * dlogp
        dls_mu = dls_mu * dlogp + dent * self.dist_mu.entropy_grad()
        dcov, dls_c = self.dist_c.log_prob_grads(self.a_cov)
        dcov = dcov * dlogp
        dls_c = dls_c * dlogp + dent * self.dist_c.entropy_grad()

        g = self.g
        dmu_mpc = (1.0 - g) * dmean
        dmu_hat = g * dmean
        dgate = np.where(g * (1.0 - g) > 0, (h.mu_hat - self.mu_mpc) * dmean * g * (1.0 - g), 0.0)
        grad_m, dz_m = self.nets.mean_opt.backward(h.caches[0], np.concatenate([dmu_hat, dgate, dls_mu], -1))
        grad_c, dz_c = self.nets.cov_opt.backward(h.caches[1], np.concatenate([dcov, dls_c], -1))
        dz = dz_m + dz_c
        dmu_t = dz[..., :K] + ((1.0 - cfg.gamma_mu) + cfg.gamma_mu * self.lin.slope_mu) * dmu_mpc
        dsig_t = dz[..., K:2 * K] + cfg.gamma_mu * self.lin.slope_sigma * dmu_mpc
        sig_t = _flat(self.tilde.sigma)
        dres = dsig_t * 0.5 * sig_t * _flat(self.sig_inside)
        grad_s, _ = self.nets.shift.backward(self.shift_cache, np.concatenate([dmu_t, dres], -1))
        return {"shift": grad_s, "mean_opt": grad_m, "cov_opt": grad_c}


# --------------------------------------------------------------------------
# auxiliary MDP: state = (system state, previous plan)
# --------------------------------------------------------------------------

@dataclass
class AuxState:
    x: np.ndarray
    theta_prev: PlanParams
    ref_window: np.ndarray   # (56,) critic conditioning
    t: int
    episode: Episode

    @property
    def done(self) -> bool:
        return self.episode.done


def critic_ref_window(episode: Episode, x: np.ndarray) -> np.ndarray:
    """Next 32 reference steps at stride 4: 8 x (position relative to x, quaternion)."""
    if len(episode.traj) == 0:
        return np.zeros(REF_DIM)
    p, q = episode.traj.window(episode.ref_index(), CRITIC_REF_POINTS, CRITIC_REF_STRIDE)
    return np.concatenate([p - x[P], q], axis=-1).ravel()


def state_features(x: np.ndarray, model: SimParams) -> np.ndarray:
    """17 state values with thrust and rates scaled to normalized control units."""
    f = np.array(x, dtype=float)
    f[..., 10:13] /= model.omega_max
    f[..., 13] /= model.hover_thrust
    f[..., 14:17] /= model.omega_max
    return f


def critic_features(aux: AuxState, model: SimParams) -> np.ndarray:
    return np.concatenate([state_features(aux.x, model), aux.theta_prev.flatten(), aux.ref_window])


def aux_reset(seed: int, dr: bool, task_cfg: TaskConfig, mcfg: MppiConfig, nominal: SimParams,
              traj_seed: Optional[int] = None) -> AuxState:
    """Fresh episode: zig-zag from ``traj_seed`` (defaults to ``seed``), randomized
    plant when ``dr``, near-hover start, default plan as the previous parameters."""
    rng = np.random.default_rng(seed)
    traj = task_cfg.trajectory(seed if traj_seed is None else traj_seed)
    plant = randomize(nominal, rng, enabled=dr)
    ep = Episode.start(traj, plant, nominal, task_cfg.weights, rng, task_cfg.init_pos_std, task_cfg.init_vel_std)
    return AuxState(ep.x.copy(), PlanParams.default(mcfg), critic_ref_window(ep, ep.x), 0, ep)


def aux_env_step(aux: AuxState, action: PlanParams, task_cfg: TaskConfig):
    """Apply the first control of ``action`` and move to the next auxiliary state.

    Returns (next aux state, reward, done). A crash adds ``TaskConfig.crash_cost``
    to the cost; ``aux.episode.crashed`` tells crashes from trajectory end.
    """
    ep = aux.episode
    cost = ep.advance(action.mu[0])
    reward = -cost - task_cfg.crash_cost(ep)
    nxt = AuxState(ep.x.copy(), action.copy(), critic_ref_window(ep, ep.x), ep.t, ep)
    return nxt, reward, ep.done


class DmpoController:
    """Stateful DMPO controller for closed-loop evaluation."""

    def __init__(self, cfg: MppiConfig, model: SimParams, weights, nets: DmpoNets,
                 base: Optional[np.ndarray] = None, mode: str = "eval", rng=None):
        self.cfg, self.model, self.weights, self.nets = cfg, model, weights, nets
        self.base = mppi.make_base_samples(cfg) if base is None else base
        self.mode, self.rng = mode, rng
        if nets.H != cfg.H or nets.N != cfg.N:
            raise ValueError(f"networks built for H={nets.H}, N={nets.N}; config has H={cfg.H}, N={cfg.N}")
        self.reset()

    def reset(self) -> None:
        self.params = PlanParams.default(self.cfg)
        self.last_batch = None
        self.last_record = None

    def act(self, x: np.ndarray, ref_p: np.ndarray, ref_q: np.ndarray) -> np.ndarray:
        u, self.params, self.last_batch, self.last_record = dmpo_policy_step(
            x, self.params, ref_p, ref_q, self.cfg, self.model, self.weights, self.nets, self.base,
            self.mode, self.rng)
        return u
