"""Sampling-based MPC (MPPI) over a factorized Gaussian plan.

Plans live in normalized control units: column 0 is collective thrust as a
multiple of the model's hover thrust, columns 1-3 are body rates as a
fraction of ``omega_max``. All array functions broadcast over leading batch
axes so that several environments can be planned for at once.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from . import sim
from ._kernels import rollout_costs
from .sim import SimParams
from .task import CostWeights

CONTROL_DIM = sim.CONTROL_DIM
LARGE_COST = 1e9


def _primes(limit: int) -> np.ndarray:
    sieve = np.ones(limit + 1, dtype=bool)
    sieve[:2] = False
    for i in range(2, int(limit**0.5) + 1):
        if sieve[i]:
            sieve[i * i::i] = False
    return np.flatnonzero(sieve)


PRIMES = _primes(8192)


def halton(n: int, dims: int, skip: int = 0, scramble: bool = True, seed: int = 0) -> np.ndarray:
    """Points ``skip+1 .. skip+n`` of the ``dims``-dimensional Halton sequence.

    Dimension j uses the j-th prime as base. With ``scramble`` each base gets a
    fixed pseudo-random digit permutation that keeps 0 in place (generalized
    Halton); this breaks the strong correlation between high-prime dimensions
    at small ``n``. Base 2 has only the identity such permutation.
    """
    if n < 1:
        raise ValueError("need at least one point")
    if dims > len(PRIMES):
        raise ValueError(f"{dims} dimensions requested; only {len(PRIMES)} prime bases available")
    rng = np.random.default_rng(seed)
    idx = np.arange(skip + 1, skip + n + 1, dtype=np.int64)
    out = np.empty((n, dims))
    for j, b in enumerate(PRIMES[:dims]):
        b = int(b)
        perm = np.arange(b)
        if scramble and b > 2:
            perm[1:] = 1 + rng.permutation(b - 1)
        i = idx.copy()
        val = np.zeros(n)
        scale = 1.0 / b
        while np.any(i > 0):
            i, digit = np.divmod(i, b)
            val += perm[digit] * scale
            scale /= b
        out[:, j] = val
    return out


def halton_gaussian(n: int, dims: int, skip: int = 0, scramble: bool = True, seed: int = 0) -> np.ndarray:
    """Halton points pushed through the standard-normal inverse CDF."""
    return ndtri(halton(n, dims, skip, scramble, seed))


@dataclass(frozen=True)
class MppiConfig:
    H: int = 32
    N: int = 256
    beta: float = 0.03
    gamma_mu: float = 1.0
    gamma_sigma: float = 0.7
    sigma_init: tuple = (0.15, 0.15, 0.15, 0.15)
    sigma_min: float = 1e-3
    sigma_max: float = 1.0
    halton_skip: int = 100
    halton_scramble: bool = True

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not (0 <= self.gamma_mu <= 1 and 0 <= self.gamma_sigma <= 1):
            raise ValueError("step sizes must lie in [0, 1]")
        if self.N < 1 or self.H < 1:
            raise ValueError("N and H must be >= 1")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")

    @property
    def theta_bar(self):
        """Row appended by the shift: hover mean, initial spread."""
        return np.array([1.0, 0.0, 0.0, 0.0]), np.clip(np.asarray(self.sigma_init, float),
                                                       self.sigma_min, self.sigma_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_init"] = list(self.sigma_init)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MppiConfig":
        d = dict(d)
        if "sigma_init" in d:
            d["sigma_init"] = tuple(d["sigma_init"])
        return cls(**d)


@dataclass
class PlanParams:
    mu: np.ndarray     # (..., H, d_u)
    sigma: np.ndarray  # (..., H, d_u)

    @classmethod
    def default(cls, cfg: MppiConfig) -> "PlanParams":
        mu_bar, sig_bar = cfg.theta_bar
        return cls(np.tile(mu_bar, (cfg.H, 1)), np.tile(sig_bar, (cfg.H, 1)))

    def flatten(self) -> np.ndarray:
        lead = self.mu.shape[:-2]
        return np.concatenate([self.mu.reshape(lead + (-1,)), self.sigma.reshape(lead + (-1,))], axis=-1)

    @classmethod
    def unflatten(cls, flat: np.ndarray, H: int) -> "PlanParams":
        lead = flat.shape[:-1]
        half = H * CONTROL_DIM
        return cls(flat[..., :half].reshape(lead + (H, CONTROL_DIM)),
                   flat[..., half:].reshape(lead + (H, CONTROL_DIM)))

    def copy(self) -> "PlanParams":
        return PlanParams(self.mu.copy(), self.sigma.copy())


@dataclass
class RolloutBatch:
    controls: np.ndarray  # (..., N, H, d_u), clamped
    costs: np.ndarray     # (..., N)
    weights: np.ndarray   # (..., N)

    def diagnostics(self) -> dict:
        return {
            "min_cost": float(np.min(self.costs)),
            "mean_cost": float(np.mean(self.costs)),
            "ess": float(1.0 / np.sum(self.weights**2)),
        }


def control_limits(model: SimParams):
    lo = np.array([0.0, -1.0, -1.0, -1.0])
    hi = np.array([model.f_max / model.hover_thrust, 1.0, 1.0, 1.0])
    return lo, hi


def make_base_samples(cfg: MppiConfig) -> np.ndarray:
    """Fixed standard-normal samples of shape (N, H, d_u)."""
    z = halton_gaussian(cfg.N, cfg.H * CONTROL_DIM, cfg.halton_skip, cfg.halton_scramble)
    return z.reshape(cfg.N, cfg.H, CONTROL_DIM)


def sample_controls(params: PlanParams, base: np.ndarray, model: SimParams) -> np.ndarray:
    """mu + sigma * base for every sample, with sample 0 pinned to mu; clamped."""
    mu = params.mu[..., None, :, :]
    u = mu + params.sigma[..., None, :, :] * base
    u[..., 0, :, :] = params.mu
    lo, hi = control_limits(model)
    return np.clip(u, lo, hi)


def rollout(x0: np.ndarray, controls: np.ndarray, ref_p: np.ndarray, ref_q: np.ndarray,
            model: SimParams, w: CostWeights) -> np.ndarray:
    """Open-loop rollout costs for ``controls`` (..., N, H, d_u) from states ``x0`` (..., 17).

    ``ref_p``/``ref_q`` are the reference for the post-step states, shape
    (..., H, 3) / (..., H, 4). The model runs without disturbances.
    Non-finite rollouts cost ``LARGE_COST``.
    """
    H = controls.shape[-2]
    if ref_p.shape[-2] < H:
        raise ValueError("reference window shorter than horizon")
    lead = controls.shape[:-3]
    N = controls.shape[-3]
    B = int(np.prod(lead)) if lead else 1
    x0 = np.ascontiguousarray(np.broadcast_to(x0, lead + (sim.STATE_DIM,)).reshape(B, sim.STATE_DIM), dtype=float)
    ctrl = np.ascontiguousarray(controls.reshape(B, N, H, CONTROL_DIM), dtype=float)
    rp = np.ascontiguousarray(np.broadcast_to(ref_p[..., :H, :], lead + (H, 3)).reshape(B, H, 3), dtype=float)
    rq = np.ascontiguousarray(np.broadcast_to(ref_q[..., :H, :], lead + (H, 4)).reshape(B, H, 4), dtype=float)
    costs = rollout_costs(x0, ctrl, rp, rq, model.mass, np.asarray(model.g, float), model.k, model.dt,
                          model.f_max, model.omega_max, model.hover_thrust,
                          w.w_p, w.w_q, w.w_u, w.terminal_scale, LARGE_COST)
    return costs.reshape(lead + (N,))


def mppi_weights(costs: np.ndarray, beta: float) -> np.ndarray:
    """Exponential-utility softmax weights, min-shifted along the last axis."""
    z = np.exp(-(costs - costs.min(axis=-1, keepdims=True)) / beta)
    return z / z.sum(axis=-1, keepdims=True)


def mppi_update(params: PlanParams, batch: RolloutBatch, cfg: MppiConfig) -> PlanParams:
    w = batch.weights
    u = batch.controls
    mean_u = np.einsum("...n,...nhd->...hd", w, u)
    dev = u - params.mu[..., None, :, :]
    second = np.einsum("...n,...nhd->...hd", w, dev * dev)
    mu = (1.0 - cfg.gamma_mu) * params.mu + cfg.gamma_mu * mean_u
    var = (1.0 - cfg.gamma_sigma) * params.sigma**2 + cfg.gamma_sigma * second
    sigma = np.clip(np.sqrt(var), cfg.sigma_min, cfg.sigma_max)
    return PlanParams(mu, sigma)


def shift_forward(params: PlanParams, cfg: MppiConfig) -> PlanParams:
    mu_bar, sig_bar = cfg.theta_bar
    mu = np.concatenate([params.mu[..., 1:, :], np.broadcast_to(mu_bar, params.mu[..., :1, :].shape)], axis=-2)
    sigma = np.concatenate([params.sigma[..., 1:, :],
                            np.broadcast_to(sig_bar, params.sigma[..., :1, :].shape)], axis=-2)
    return PlanParams(mu, sigma)


def plan_and_evaluate(x: np.ndarray, params: PlanParams, ref_p, ref_q, cfg: MppiConfig,
                      model: SimParams, w: CostWeights, base: np.ndarray) -> RolloutBatch:
    controls = sample_controls(params, base, model)
    costs = rollout(x, controls, ref_p, ref_q, model, w)
    return RolloutBatch(controls, costs, mppi_weights(costs, cfg.beta))


def mppi_policy_step(x: np.ndarray, params: PlanParams, ref_p, ref_q, cfg: MppiConfig,
                     model: SimParams, w: CostWeights, base: np.ndarray):
    """One MPPI control cycle from the warm-started plan ``params``.

    Returns (normalized control for this step, next warm-started plan, batch).
    """
    batch = plan_and_evaluate(x, params, ref_p, ref_q, cfg, model, w, base)
    updated = mppi_update(params, batch, cfg)
    u = updated.mu[..., 0, :].copy()
    return u, shift_forward(updated, cfg), batch


@dataclass
class MppiController:
    """Stateful wrapper holding the warm-started plan between control steps."""

    cfg: MppiConfig
    model: SimParams
    weights: CostWeights
    base: Optional[np.ndarray] = None
    params: Optional[PlanParams] = field(default=None, init=False)
    last_batch: Optional[RolloutBatch] = field(default=None, init=False)

    def __post_init__(self):
        if self.base is None:
            self.base = make_base_samples(self.cfg)
        self.reset()

    def reset(self) -> None:
        self.params = PlanParams.default(self.cfg)

    def act(self, x: np.ndarray, ref_p: np.ndarray, ref_q: np.ndarray) -> np.ndarray:
        u, self.params, self.last_batch = mppi_policy_step(
            x, self.params, ref_p, ref_q, self.cfg, self.model, self.weights, self.base)
        return u
