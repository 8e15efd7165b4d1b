"""Zig-zag reference trajectories and the tracking cost."""
from __future__ import annotations

import csv
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .sim import P, Q, QuadState, SimParams, step_array, yaw_quat

CONTROL_RATE = 50.0


@dataclass(frozen=True)
class CostWeights:
    w_p: float = 1.0
    w_q: float = 0.5
    w_u: float = 0.05
    terminal_scale: float = 1.0

    def __post_init__(self):
        if min(self.w_p, self.w_q, self.w_u, self.terminal_scale) < 0:
            raise ValueError("cost weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReferenceTraj:
    positions: np.ndarray   # (T, 3)
    quats: np.ndarray       # (T, 4)
    duration: float
    dt: float = 1.0 / CONTROL_RATE

    def __len__(self) -> int:
        return len(self.positions)

    def window(self, t: int, length: int, stride: int = 1):
        """Reference samples t, t+stride, ... (``length`` of them); indices past
        the end repeat the final sample."""
        idx = np.minimum(t + stride * np.arange(length), len(self) - 1)
        return self.positions[idx], self.quats[idx]

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "px", "py", "pz", "qw", "qx", "qy", "qz"])
            for i in range(len(self)):
                w.writerow([f"{i * self.dt:.6f}", *(repr(float(c)) for c in self.positions[i]),
                            *(repr(float(c)) for c in self.quats[i])])

    @classmethod
    def from_csv(cls, path) -> "ReferenceTraj":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        dt = float(rows[1, 0] - rows[0, 0]) if len(rows) > 1 else 1.0 / CONTROL_RATE
        return cls(rows[:, 1:4].copy(), rows[:, 4:8].copy(), len(rows) * dt, dt)


def gen_zigzag(seed: int, yaw_flips: bool = False, volume=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
               seg_time: float = 2.0, duration: float = 10.0) -> ReferenceTraj:
    """Piecewise-linear path through uniformly random waypoints, sampled at 50 Hz.

    With ``yaw_flips`` the desired yaw is 0 on the first segment and changes by
    pi at every waypoint after that.
    """
    lo, hi = np.asarray(volume[0], float), np.asarray(volume[1], float)
    if np.any(hi - lo <= 0):
        raise ValueError(f"degenerate flight volume {volume!r}")
    if not (seg_time > 0 and duration >= seg_time):
        raise ValueError("need duration >= seg_time > 0")
    dt = 1.0 / CONTROL_RATE
    n = int(round(duration * CONTROL_RATE))
    rng = np.random.default_rng(seed)
    n_seg = int(np.ceil(duration / seg_time - 1e-9))
    waypoints = rng.uniform(lo, hi, size=(n_seg + 1, 3))

    t = np.arange(n) * dt
    seg = np.minimum((t / seg_time + 1e-9).astype(int), n_seg - 1)
    frac = (t - seg * seg_time) / seg_time
    positions = waypoints[seg] + frac[:, None] * (waypoints[seg + 1] - waypoints[seg])
    yaw = (seg % 2) * np.pi if yaw_flips else np.zeros(n)
    return ReferenceTraj(positions, yaw_quat(yaw), duration, dt)


def hover_reference(duration: float, p=(0.0, 0.0, 0.0)) -> ReferenceTraj:
    n = int(round(duration * CONTROL_RATE))
    return ReferenceTraj(np.tile(np.asarray(p, float), (n, 1)), np.tile(yaw_quat(0.0), (n, 1)), duration)


# --------------------------------------------------------------------------
# costs
# --------------------------------------------------------------------------

def stage_cost_array(x: np.ndarray, u_norm: np.ndarray, p_des: np.ndarray, q_des: np.ndarray,
                     w: CostWeights) -> np.ndarray:
    """Stage cost on 17-value states and normalized controls.

    Normalized controls are thrust as a multiple of hover thrust and rates as
    a fraction of ``omega_max``, so the control penalty reads
    (thrust - 1)^2 + |rates|^2.
    """
    e = x[..., P] - p_des
    pos = np.sum(e * e, axis=-1)
    dot = np.sum(x[..., Q] * q_des, axis=-1)
    ori = 1.0 - dot * dot
    du = u_norm[..., 0] - 1.0
    ctrl = du * du + np.sum(u_norm[..., 1:] ** 2, axis=-1)
    return w.w_p * pos + w.w_q * ori + w.w_u * ctrl


def normalize_control(u: np.ndarray, params: SimParams) -> np.ndarray:
    """Physical (f_des N, omega_des rad/s) -> normalized units."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    out[..., 0] = u[..., 0] / params.hover_thrust
    out[..., 1:] = u[..., 1:] / params.omega_max
    return out


def denormalize_control(u_norm: np.ndarray, params: SimParams) -> np.ndarray:
    out = np.empty_like(u_norm)
    out[..., 0] = u_norm[..., 0] * params.hover_thrust
    out[..., 1:] = u_norm[..., 1:] * params.omega_max
    return out


def stage_cost(state, u, ref, w: CostWeights, params: SimParams) -> float:
    """Cost of one (state, physical control) pair against ``ref = (p_des, q_des)``.

    ``params`` fixes the thrust and rate scales (nominal hover thrust and
    ``omega_max``).
    """
    x = state.to_array() if hasattr(state, "to_array") else np.asarray(state, float)
    ua = u.to_array() if hasattr(u, "to_array") else np.asarray(u, float)
    p_des, q_des = ref
    return float(stage_cost_array(x, normalize_control(ua, params), np.asarray(p_des, float),
                                  np.asarray(q_des, float), w))


def traj_cost_array(xs: np.ndarray, us_norm: np.ndarray, p_des: np.ndarray, q_des: np.ndarray,
                    w: CostWeights) -> np.ndarray:
    """Sum of stage costs over the horizon axis (-2 for states), last step scaled."""
    c = stage_cost_array(xs, us_norm, p_des, q_des, w)
    c[..., -1] *= w.terminal_scale
    return c.sum(axis=-1)


def traj_cost(states, controls, ref_window, w: CostWeights, params: SimParams) -> float:
    if len(states) != len(controls):
        raise ValueError(f"length mismatch: {len(states)} states vs {len(controls)} controls")
    p_des, q_des = ref_window
    if len(p_des) < len(states) or len(q_des) < len(states):
        raise ValueError("reference window shorter than the sequence")
    xs = np.stack([s.to_array() if hasattr(s, "to_array") else np.asarray(s, float) for s in states])
    us = np.stack([u.to_array() if hasattr(u, "to_array") else np.asarray(u, float) for u in controls])
    H = len(xs)
    return float(traj_cost_array(xs, normalize_control(us, params), np.asarray(p_des, float)[:H],
                                 np.asarray(q_des, float)[:H], w))


# --------------------------------------------------------------------------
# closed-loop tracking episodes
# --------------------------------------------------------------------------

SAFETY_BOX = 3.0  # metres, per axis around the origin


@dataclass(frozen=True)
class TaskConfig:
    yaw_flips: bool = False
    volume: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    seg_time: float = 2.0
    duration: float = 10.0
    weights: CostWeights = CostWeights()
    crash_penalty: float = 10.0    # RL-only cost per step forfeited by a crash
    init_pos_std: float = 0.05
    init_vel_std: float = 0.05

    def trajectory(self, seed: int) -> ReferenceTraj:
        if self.duration == 0:
            return ReferenceTraj(np.zeros((0, 3)), np.zeros((0, 4)), 0.0)
        return gen_zigzag(seed, self.yaw_flips, self.volume, self.seg_time, self.duration)

    def crash_cost(self, ep: "Episode") -> float:
        """RL penalty for a crashed episode: ``crash_penalty`` for the crash step and
        every step it cuts off, so ending early never beats flying on."""
        return self.crash_penalty * (ep.horizon - ep.t + 1) if ep.crashed else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["volume"] = [list(self.volume[0]), list(self.volume[1])]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = CostWeights(**d["weights"])
        if "volume" in d:
            d["volume"] = tuple(tuple(float(c) for c in row) for row in d["volume"])
        return cls(**d)


class Episode:
    """One reference-tracking run on a (possibly randomized) plant.

    Step t applies a normalized control, advances the plant, and scores the
    new state against reference sample t+1 (clamped to the last sample).
    ``model`` fixes the cost's control scales; it is the nominal vehicle.
    """

    def __init__(self, traj: ReferenceTraj, plant: SimParams, model: SimParams, weights: CostWeights,
                 x0: np.ndarray):
        self.traj = traj
        self.plant = plant
        self.model = model
        self.weights = weights
        self.x = np.asarray(x0, dtype=float).copy()
        self.t = 0
        self.done = len(traj) == 0
        self.crashed = False

    @classmethod
    def start(cls, traj: ReferenceTraj, plant: SimParams, model: SimParams, weights: CostWeights,
              rng: np.random.Generator, pos_std: float = 0.05, vel_std: float = 0.05) -> "Episode":
        p0 = traj.positions[0] if len(traj) else np.zeros(3)
        x0 = QuadState.hover(plant, p0).to_array()
        x0[P] += rng.normal(0.0, pos_std, 3)
        x0[3:6] += rng.normal(0.0, vel_std, 3)
        return cls(traj, plant, model, weights, x0)

    @property
    def horizon(self) -> int:
        return len(self.traj)

    def ref_index(self, offset: int = 1) -> int:
        return min(self.t + offset, len(self.traj) - 1)

    def advance(self, u_norm: np.ndarray) -> float:
        """Apply a normalized control; returns the stage cost (NaN-free)."""
        if self.done:
            raise RuntimeError("episode already finished")
        u_phys = denormalize_control(np.asarray(u_norm, float), self.model)
        with np.errstate(all="ignore"):
            x_new = step_array(self.x, u_phys, self.plant)
        i = self.ref_index()
        self.t += 1
        if not np.all(np.isfinite(x_new)) or np.any(np.abs(x_new[P]) > SAFETY_BOX):
            self.crashed = True
            self.done = True
            finite = np.all(np.isfinite(x_new))
            if finite:
                self.x = x_new
            cost = float(stage_cost_array(self.x, u_norm, self.traj.positions[i], self.traj.quats[i],
                                          self.weights))
            return cost if np.isfinite(cost) else 0.0
        self.x = x_new
        if self.t >= len(self.traj):
            self.done = True
        return float(stage_cost_array(x_new, u_norm, self.traj.positions[i], self.traj.quats[i],
                                      self.weights))
