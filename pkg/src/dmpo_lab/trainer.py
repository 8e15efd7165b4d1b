"""PPO with GAE for the DMPO optimizer (auxiliary MDP) and the end-to-end baseline."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import mppi
from .dmpo import (ActorPass, AuxState, DmpoConfig, DmpoNets, MpcLinearization, aux_env_step, aux_reset,
                   critic_features, dmpo_policy_step, state_features)
from .mppi import MppiConfig, PlanParams
from .neural import Adam, DiagGaussian, DivergenceError, Mlp, init_mlp, load_checkpoint, save_checkpoint
from .sim import P, SimParams, randomize
from .task import Episode, TaskConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "mean_ep_cost", "actor_loss", "critic_loss", "mean_gate", "approx_kl", "wall_s"]
TRAIN_SEED_OFFSET = 10_000   # training trajectories never reuse evaluation seeds
E2E_REF_POINTS = 10
E2E_REF_STRIDE = 3           # 10 points every 0.06 s -> 0.6 s ahead at 50 Hz


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    actor_lr: float = 1e-6
    critic_lr: float = 1e-4
    ent_coef: float = 1e-4
    epochs: int = 4
    minibatch: int = 256
    n_envs: int = 16
    steps_per_env: int = 256
    iterations: int = 1000
    checkpoint_every: int = 50
    domain_randomization: bool = True
    reward_scale: float = 0.01   # critic and advantages see reward * reward_scale

    def __post_init__(self):
        if not (0 <= self.gamma < 1 and 0 <= self.lam < 1):
            raise ValueError("gamma and lambda must lie in [0, 1)")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be positive")
        if self.iterations < 0 or self.epochs < 1 or self.minibatch < 1 or self.n_envs < 1:
            raise ValueError("bad batch geometry")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# advantage estimation and losses
# --------------------------------------------------------------------------

def gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimation along axis 0.

    ``values`` has one more entry than ``rewards`` (the bootstrap value).
    Returns (advantages, returns).
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    T = len(rewards)
    if len(values) != T + 1 or len(dones) != T:
        raise ValueError(f"need T+1 values and T dones for T={T} rewards")
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0]) if T else 0.0
    for t in reversed(range(T)):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values[:-1]


def standardize(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (x - x.mean()) / (x.std() + eps)


@dataclass
class PpoLoss:
    actor_loss: float
    critic_loss: float
    stats: dict
    dlogp: np.ndarray      # d actor_loss / d log_probs_new
    dentropy: np.ndarray   # d actor_loss / d entropy
    dvalues: np.ndarray    # d critic_loss / d values_new


def ppo_loss(log_probs_new, log_probs_old, advantages, values_new, returns, entropy,
             cfg: PpoConfig) -> PpoLoss:
    """Clipped surrogate (negated, entropy-regularized) and value MSE, with gradients."""
    n = len(advantages)
    ratio = np.exp(log_probs_new - log_probs_old)
    clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
    unclipped_obj = ratio * advantages
    clipped_obj = clipped * advantages
    surrogate = np.minimum(unclipped_obj, clipped_obj)
    actor_loss = -surrogate.mean() - cfg.ent_coef * np.mean(entropy)
    err = values_new - returns
    critic_loss = np.mean(err * err)
    if not (np.isfinite(actor_loss) and np.isfinite(critic_loss)):
        raise DivergenceError("non-finite PPO loss")
    active = unclipped_obj <= clipped_obj
    dlogp = np.where(active, -advantages * ratio / n, 0.0)
    stats = {
        "approx_kl": float(np.mean(log_probs_old - log_probs_new)),
        "clip_frac": float(np.mean(np.abs(ratio - 1) > cfg.clip_eps)),
        "surrogate": surrogate,
    }
    return PpoLoss(float(actor_loss), float(critic_loss), stats, dlogp,
                   np.full(n, -cfg.ent_coef / n), 2.0 * err / n)


def make_critic(n_in: int, rng: np.random.Generator, hidden: int = 256) -> Mlp:
    return init_mlp([n_in, hidden, 1], 1e-3, 0.0, rng)


def critic_input_dim(mcfg: MppiConfig) -> int:
    return 17 + 2 * mcfg.H * mppi.CONTROL_DIM + 56


# --------------------------------------------------------------------------
# shared PPO machinery
# --------------------------------------------------------------------------

@dataclass
class Batch:
    """Flattened (T*E) transition data plus per-iteration bookkeeping."""

    fields: Dict[str, np.ndarray]
    rewards: np.ndarray      # (T, E)
    dones: np.ndarray        # (T, E)
    values: np.ndarray       # (T + 1, E)
    episode_costs: List[float] = field(default_factory=list)
    gate: float = float("nan")


def _ppo_update(cfg: PpoConfig, batch: Batch, actor_fn: Callable, critic: Mlp,
                actor_opts: Dict[str, Adam], critic_opt: Adam, rng: np.random.Generator) -> dict:
    adv, ret = gae(batch.rewards * cfg.reward_scale, batch.values, batch.dones, cfg.gamma, cfg.lam)
    adv = standardize(adv.reshape(-1))
    ret = ret.reshape(-1)
    obs = batch.fields["critic_obs"]
    logp_old = batch.fields["log_prob"]
    n = len(adv)
    actor_losses, critic_losses, kls = [], [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = order[start:start + cfg.minibatch]
            logp_new, entropy, backward = actor_fn(idx)
            values, vcache = critic.forward(obs[idx])
            loss = ppo_loss(logp_new, logp_old[idx], adv[idx], values[:, 0], ret[idx], entropy, cfg)
            grads = backward(loss.dlogp, loss.dentropy)
            for name, g in grads.items():
                actor_opts[name].step(g)
            cgrad, _ = critic.backward(vcache, loss.dvalues[:, None])
            critic_opt.step(cgrad)
            actor_losses.append(loss.actor_loss)
            critic_losses.append(loss.critic_loss)
            kls.append(loss.stats["approx_kl"])
    return {"actor_loss": float(np.mean(actor_losses)), "critic_loss": float(np.mean(critic_losses)),
            "approx_kl": float(np.mean(kls))}


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


class TrainLog:
    def __init__(self, path: Optional[Path]):
        self.path = path
        self.rows: List[dict] = []
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row["iter"]] + [_fmt(row[c]) for c in LOG_COLUMNS[1:]])


def _train_loop(cfg: PpoConfig, collector, critic: Mlp, actor_opts: Dict[str, Adam], critic_opt: Adam,
                rng: np.random.Generator, out_dir: Optional[Path], save: Callable[[Path], None],
                progress: Optional[Callable[[dict], None]] = None):
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog(out_dir / "train_log.csv" if out_dir is not None else None)
    last_good = None
    if out_dir is not None:
        last_good = out_dir / "checkpoint_0000.ckpt"
        save(last_good)
    t0 = time.perf_counter()
    status = "completed"
    for it in range(1, cfg.iterations + 1):
        try:
            batch = collector.collect(cfg.steps_per_env)
            stats = _ppo_update(cfg, batch, collector.actor_fn(batch), critic, actor_opts, critic_opt, rng)
        except (DivergenceError, FloatingPointError) as exc:
            log.error("training diverged at iteration %d: %s", it, exc)
            status = f"diverged at iteration {it}"
            if last_good is not None:
                collector.restore(last_good)
            break
        row = {
            "iter": it,
            "mean_ep_cost": float(np.mean(batch.episode_costs)) if batch.episode_costs else float("nan"),
            "actor_loss": stats["actor_loss"], "critic_loss": stats["critic_loss"],
            "mean_gate": batch.gate, "approx_kl": stats["approx_kl"],
            "wall_s": time.perf_counter() - t0,
        }
        tlog.append(row)
        if progress is not None:
            progress(row)
        if out_dir is not None and (it % cfg.checkpoint_every == 0 or it == cfg.iterations):
            last_good = out_dir / f"checkpoint_{it:04d}.ckpt"
            save(last_good)
    final = None
    if out_dir is not None:
        final = out_dir / "final.ckpt"
        if last_good is not None and last_good.exists():
            final.write_bytes(last_good.read_bytes())
    return {"status": status, "log": tlog.rows, "checkpoint": final}


# --------------------------------------------------------------------------
# DMPO
# --------------------------------------------------------------------------

class DmpoCollector:
    """Steps ``n_envs`` auxiliary environments in lockstep with one batched policy."""

    def __init__(self, cfg: PpoConfig, nominal: SimParams, task_cfg: TaskConfig, mcfg: MppiConfig,
                 nets: DmpoNets, critic: Mlp, seed: int):
        self.cfg, self.nominal, self.task_cfg, self.mcfg = cfg, nominal, task_cfg, mcfg
        self.nets, self.critic = nets, critic
        self.base = mppi.make_base_samples(mcfg)
        self.rng = np.random.default_rng([seed, 1])
        self.next_seed = TRAIN_SEED_OFFSET + 1_000_000 * seed
        self.envs = [self._reset() for _ in range(cfg.n_envs)]
        self.ep_cost = np.zeros(cfg.n_envs)

    def _reset(self) -> AuxState:
        s = self.next_seed
        self.next_seed += 1
        return aux_reset(s, self.cfg.domain_randomization, self.task_cfg, self.mcfg, self.nominal)

    def _critic_obs(self) -> np.ndarray:
        return np.stack([critic_features(a, self.nominal) for a in self.envs])

    def collect(self, T: int) -> Batch:
        E, K, N = len(self.envs), self.nets.K, self.mcfg.N
        H = self.mcfg.H
        buf = {
            "prev_mu": np.empty((T, E, H, 4)), "prev_sigma": np.empty((T, E, H, 4)),
            "costs_std": np.empty((T, E, N)), "a_mu": np.empty((T, E, K)), "a_cov": np.empty((T, E, K)),
            "log_prob": np.empty((T, E)), "critic_obs": np.empty((T, E, critic_input_dim(self.mcfg))),
        }
        for f in ("mu_tilde", "sigma_tilde", "mu_mpc", "slope_mu", "slope_sigma"):
            buf["lin_" + f] = np.empty((T, E, K))
        rewards = np.zeros((T, E))
        dones = np.zeros((T, E))
        values = np.zeros((T + 1, E))
        gates, finished = [], []
        w = self.task_cfg.weights
        for t in range(T):
            obs = self._critic_obs()
            values[t] = self.critic(obs)[:, 0]
            x = np.stack([a.x for a in self.envs])
            prev = PlanParams(np.stack([a.theta_prev.mu for a in self.envs]),
                              np.stack([a.theta_prev.sigma for a in self.envs]))
            refs = [a.episode.traj.window(a.episode.ref_index(), H) for a in self.envs]
            ref_p = np.stack([r[0] for r in refs])
            ref_q = np.stack([r[1] for r in refs])
            _, new, _, rec = dmpo_policy_step(x, prev, ref_p, ref_q, self.mcfg, self.nominal, w, self.nets,
                                              self.base, "train", self.rng)
            buf["prev_mu"][t], buf["prev_sigma"][t] = prev.mu, prev.sigma
            buf["costs_std"][t] = rec.costs_std
            buf["a_mu"][t], buf["a_cov"][t] = rec.a_mu, rec.a_cov
            buf["log_prob"][t] = rec.log_prob
            buf["critic_obs"][t] = obs
            for f in ("mu_tilde", "sigma_tilde", "mu_mpc", "slope_mu", "slope_sigma"):
                buf["lin_" + f][t] = getattr(rec.lin, f)
            gates.append(rec.gate_mean.mean())
            for i in range(E):
                aux = self.envs[i]
                ep = aux.episode
                nxt, r, done = aux_env_step(aux, PlanParams(new.mu[i], new.sigma[i]), self.task_cfg)
                rewards[t, i] = r
                self.ep_cost[i] += -r - self.task_cfg.crash_cost(ep)
                dones[t, i] = float(done)
                if done:
                    finished.append(self.ep_cost[i])
                    self.ep_cost[i] = 0.0
                    nxt = self._reset()
                self.envs[i] = nxt
        values[T] = self.critic(self._critic_obs())[:, 0]
        flat = {k: v.reshape((T * E,) + v.shape[2:]) for k, v in buf.items()}
        return Batch(flat, rewards, dones, values, finished, float(np.mean(gates)))

    def actor_fn(self, batch: Batch):
        f = batch.fields

        def run(idx):
            lin = MpcLinearization(*(f["lin_" + k][idx] for k in
                                     ("mu_tilde", "sigma_tilde", "mu_mpc", "slope_mu", "slope_sigma")))
            ap = ActorPass(self.nets, self.mcfg, f["prev_mu"][idx], f["prev_sigma"][idx], f["costs_std"][idx],
                           lin, f["a_mu"][idx], f["a_cov"][idx])
            return ap.log_prob, ap.entropy, ap.backward
        return run

    def restore(self, path: Path) -> None:
        nets, _ = load_checkpoint(path)
        for name, net in self.nets.as_dict().items():
            net.theta[...] = nets[name].theta
        self.critic.theta[...] = nets["critic"].theta


def train_dmpo(cfg: PpoConfig, nominal: SimParams, task_cfg: TaskConfig, mcfg: MppiConfig,
               dcfg: DmpoConfig = DmpoConfig(), seed: int = 0, out_dir=None, progress=None,
               init_nets: Optional[DmpoNets] = None) -> dict:
    """Train the residual shift model and optimizer with PPO.

    Returns a dict with ``status``, the per-iteration ``log`` rows, the final
    ``checkpoint`` path (when ``out_dir`` is given) and the trained ``nets``.
    """
    rng = np.random.default_rng(seed)
    nets = init_nets.copy() if init_nets is not None else DmpoNets.init(mcfg, dcfg, rng)
    critic = make_critic(critic_input_dim(mcfg), rng)
    if critic.n_in != critic_input_dim(mcfg):
        raise ValueError("critic input dimension mismatch")
    actor_opts = {name: Adam(net, cfg.actor_lr) for name, net in nets.as_dict().items()}
    critic_opt = Adam(critic, cfg.critic_lr)
    collector = DmpoCollector(cfg, nominal, task_cfg, mcfg, nets, critic, seed)

    def save(path: Path) -> None:
        all_nets = dict(nets.as_dict(), critic=critic)
        states = {n: o.state for n, o in actor_opts.items()}
        states["critic"] = critic_opt.state
        save_checkpoint(path, all_nets, states)

    result = _train_loop(cfg, collector, critic, actor_opts, critic_opt, np.random.default_rng([seed, 2]),
                         out_dir, save, progress)
    result["nets"] = nets
    result["critic"] = critic
    return result


def load_dmpo(path) -> DmpoNets:
    nets, _ = load_checkpoint(path)
    return DmpoNets.from_dict(nets)


# --------------------------------------------------------------------------
# end-to-end baseline
# --------------------------------------------------------------------------

E2E_OBS_DIM = 17 + 3 * E2E_REF_POINTS


def e2e_observation(ep: Episode, model: SimParams) -> np.ndarray:
    """State features plus the next 10 desired positions (t+3 ... t+30), relative to p."""
    p, _ = ep.traj.window(ep.t + E2E_REF_STRIDE, E2E_REF_POINTS, E2E_REF_STRIDE)
    return np.concatenate([state_features(ep.x, model), (p - ep.x[P]).ravel()])


def make_e2e_policy(rng: np.random.Generator, hidden: int = 256, log_std: float = -3.0) -> Mlp:
    bias = np.concatenate([[1.0, 0.0, 0.0, 0.0], np.full(4, log_std)])
    return init_mlp([E2E_OBS_DIM, hidden, hidden, 8], 1e-3, bias, rng)


class E2eController:
    def __init__(self, policy: Mlp, model: SimParams):
        self.policy, self.model = policy, model
        self.lo, self.hi = mppi.control_limits(model)

    def reset(self) -> None:
        pass

    def act_episode(self, ep: Episode) -> np.ndarray:
        out = self.policy(e2e_observation(ep, self.model))
        return np.clip(out[:4], self.lo, self.hi)


class E2eCollector:
    def __init__(self, cfg: PpoConfig, nominal: SimParams, task_cfg: TaskConfig, policy: Mlp, critic: Mlp,
                 seed: int):
        self.cfg, self.nominal, self.task_cfg = cfg, nominal, task_cfg
        self.policy, self.critic = policy, critic
        self.rng = np.random.default_rng([seed, 1])
        self.next_seed = TRAIN_SEED_OFFSET + 1_000_000 * seed
        self.lo, self.hi = mppi.control_limits(nominal)
        self.envs = [self._reset() for _ in range(cfg.n_envs)]
        self.ep_cost = np.zeros(cfg.n_envs)

    def _reset(self) -> Episode:
        s = self.next_seed
        self.next_seed += 1
        rng = np.random.default_rng(s)
        plant = randomize(self.nominal, rng, enabled=self.cfg.domain_randomization)
        return Episode.start(self.task_cfg.trajectory(s), plant, self.nominal, self.task_cfg.weights, rng,
                             self.task_cfg.init_pos_std, self.task_cfg.init_vel_std)

    def collect(self, T: int) -> Batch:
        E = len(self.envs)
        obs_buf = np.empty((T, E, E2E_OBS_DIM))
        act_buf = np.empty((T, E, 4))
        logp = np.empty((T, E))
        rewards, dones, values = np.zeros((T, E)), np.zeros((T, E)), np.zeros((T + 1, E))
        finished = []
        for t in range(T):
            obs = np.stack([e2e_observation(ep, self.nominal) for ep in self.envs])
            values[t] = self.critic(obs)[:, 0]
            out = self.policy(obs)
            dist = DiagGaussian(out[:, :4], out[:, 4:])
            a = dist.sample(self.rng)
            obs_buf[t], act_buf[t], logp[t] = obs, a, dist.log_prob(a)
            for i, ep in enumerate(self.envs):
                cost = ep.advance(np.clip(a[i], self.lo, self.hi))
                self.ep_cost[i] += cost
                rewards[t, i] = -cost - self.task_cfg.crash_cost(ep)
                dones[t, i] = float(ep.done)
                if ep.done:
                    finished.append(self.ep_cost[i])
                    self.ep_cost[i] = 0.0
                    self.envs[i] = self._reset()
        values[T] = self.critic(np.stack([e2e_observation(ep, self.nominal) for ep in self.envs]))[:, 0]
        fields = {"critic_obs": obs_buf.reshape(T * E, -1), "actions": act_buf.reshape(T * E, 4),
                  "log_prob": logp.reshape(-1)}
        return Batch(fields, rewards, dones, values, finished)

    def actor_fn(self, batch: Batch):
        f = batch.fields

        def run(idx):
            out, cache = self.policy.forward(f["critic_obs"][idx])
            dist = DiagGaussian(out[:, :4], out[:, 4:])
            a = f["actions"][idx]

            def backward(dlogp, dent):
                dmean, dls = dist.log_prob_grads(a)
                dls = dls * dlogp[:, None] + dent[:, None] * dist.entropy_grad()
                grad, _ = self.policy.backward(cache, np.concatenate([dmean * dlogp[:, None], dls], axis=1))
                return {"e2e_policy": grad}
            return dist.log_prob(a), dist.entropy(), backward
        return run

    def restore(self, path: Path) -> None:
        nets, _ = load_checkpoint(path)
        self.policy.theta[...] = nets["e2e_policy"].theta
        self.critic.theta[...] = nets["e2e_critic"].theta


def train_e2e(cfg: PpoConfig, nominal: SimParams, task_cfg: TaskConfig, seed: int = 0, out_dir=None,
              progress=None) -> dict:
    """PPO on the plain MDP; both actor and critic use ``cfg.actor_lr``/``cfg.critic_lr``
    (3e-4 for the baseline, see ``E2E_PPO``)."""
    rng = np.random.default_rng(seed)
    policy = make_e2e_policy(rng)
    critic = make_critic(E2E_OBS_DIM, rng)
    actor_opts = {"e2e_policy": Adam(policy, cfg.actor_lr)}
    critic_opt = Adam(critic, cfg.critic_lr)
    collector = E2eCollector(cfg, nominal, task_cfg, policy, critic, seed)

    def save(path: Path) -> None:
        save_checkpoint(path, {"e2e_policy": policy, "e2e_critic": critic},
                        {"e2e_policy": actor_opts["e2e_policy"].state, "e2e_critic": critic_opt.state})

    result = _train_loop(cfg, collector, critic, actor_opts, critic_opt, np.random.default_rng([seed, 2]),
                         out_dir, save, progress)
    result["policy"] = policy
    result["critic"] = critic
    return result


E2E_PPO = PpoConfig(actor_lr=3e-4, critic_lr=3e-4)


def load_e2e(path) -> Mlp:
    nets, _ = load_checkpoint(path)
    return nets["e2e_policy"]
