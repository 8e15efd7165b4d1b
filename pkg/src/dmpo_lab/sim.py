"""Quadrotor rigid-body simulator with first-order actuation lag.

State vectors use a flat 17-value layout so the same arrays serve the
plant, the MPC rollout model, and the critic input:

    p (3) | v (3) | q (4, w-x-y-z, world-from-body) | omega (3) | f_act (1) | omega_act (3)

Within a step the lagged thrust and body rates are held constant, which
makes the translational motion integrable in closed form: the attitude
follows R(t) = R0 exp(S(omega) t) exactly, and the thrust direction's
first and second time integrals have analytic expressions.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

STATE_DIM = 17
CONTROL_DIM = 4
GRAVITY = 9.81

P = slice(0, 3)
V = slice(3, 6)
Q = slice(6, 10)
W = slice(10, 13)
F = 13
WA = slice(14, 17)

FIELD_SLICES = {"p": P, "v": V, "q": Q, "omega": W, "f_act": slice(F, F + 1), "omega_act": WA}


class SimulationFault(FloatingPointError):
    """Raised when a simulated state stops being finite."""

    def __init__(self, field_name: str):
        super().__init__(f"non-finite state component: {field_name}")
        self.field = field_name


# --------------------------------------------------------------------------
# quaternion helpers (w, x, y, z), broadcasting over leading axes
# --------------------------------------------------------------------------

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate body-frame vectors ``v`` into the world frame."""
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_exp(phi: np.ndarray) -> np.ndarray:
    """Unit quaternion for the rotation vector ``phi``."""
    angle = np.sqrt(np.sum(phi * phi, axis=-1, keepdims=True))
    half = 0.5 * angle
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    # sin(a/2)/a -> 1/2 - a^2/48 near zero
    scale = np.where(small, 0.5 - angle * angle / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), scale * phi], axis=-1)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def yaw_quat(yaw) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=float)
    z = np.zeros_like(yaw)
    return np.stack([np.cos(yaw / 2), z, z, np.sin(yaw / 2)], axis=-1)


def quat_yaw(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WindField:
    """Static wind velocity samples on a regular grid over ``[lo, hi]``.

    Lookups interpolate trilinearly; points outside the box are clamped onto
    it, so they see the nearest boundary value.
    """

    lo: tuple
    hi: tuple
    values: np.ndarray  # (nx, ny, nz, 3)

    def __call__(self, p: np.ndarray) -> np.ndarray:
        vals = self.values
        shape = np.array(vals.shape[:3])
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        span = np.where(hi > lo, hi - lo, 1.0)
        g = (np.clip(p, lo, hi) - lo) / span * (shape - 1)
        i0 = np.clip(np.floor(g).astype(int), 0, np.maximum(shape - 2, 0))
        frac = g - i0
        i1 = np.minimum(i0 + 1, shape - 1)
        out = np.zeros(p.shape[:-1] + (3,))
        for cx in (0, 1):
            ix = i1[..., 0] if cx else i0[..., 0]
            wx = frac[..., 0] if cx else 1 - frac[..., 0]
            for cy in (0, 1):
                iy = i1[..., 1] if cy else i0[..., 1]
                wy = frac[..., 1] if cy else 1 - frac[..., 1]
                for cz in (0, 1):
                    iz = i1[..., 2] if cz else i0[..., 2]
                    wz = frac[..., 2] if cz else 1 - frac[..., 2]
                    out += (wx * wy * wz)[..., None] * vals[ix, iy, iz]
        return out

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "values": np.asarray(self.values).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "WindField":
        return cls(tuple(d["lo"]), tuple(d["hi"]), np.asarray(d["values"], dtype=float))


def fan_wind_field(lo=(-3.0, -3.0, -3.0), hi=(3.0, 3.0, 3.0), resolution: int = 13,
                   speed: float = 1.5, width: float = 0.8) -> WindField:
    """Wind from three fans placed around the flight volume.

    Each fan blows a Gaussian jet along its axis; speed decays with distance
    from the fan face. Deterministic: the same arguments give the same field.
    """
    fans = [  # (origin, direction)
        (np.array([-3.0, -1.0, 0.0]), np.array([1.0, 0.3, 0.0])),
        (np.array([2.0, -3.0, 0.5]), np.array([-0.2, 1.0, 0.0])),
        (np.array([0.5, 3.0, -0.5]), np.array([0.3, -1.0, 0.2])),
    ]
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = np.zeros(grid.shape)
    for origin, direction in fans:
        d = direction / np.linalg.norm(direction)
        rel = grid - origin
        along = rel @ d
        radial = np.linalg.norm(rel - along[..., None] * d, axis=-1)
        mag = speed * np.exp(-0.5 * (radial / width) ** 2) / (1.0 + 0.25 * np.maximum(along, 0.0))
        mag = np.where(along > 0, mag, 0.0)
        values += mag[..., None] * d
    return WindField(tuple(lo), tuple(hi), values)


@dataclass(frozen=True)
class DisturbanceSpec:
    const_force: tuple = (0.0, 0.0, 0.0)  # newtons, world frame
    drag_coeff: float = 0.0               # kg/m
    wind_field: Optional[WindField] = None

    @property
    def active(self) -> bool:
        return bool(np.any(np.asarray(self.const_force) != 0.0)) or self.drag_coeff != 0.0

    def force(self, p: np.ndarray, v: np.ndarray) -> np.ndarray:
        f = np.broadcast_to(np.asarray(self.const_force, dtype=float), v.shape).copy()
        if self.drag_coeff != 0.0:
            wind = self.wind_field(p) if self.wind_field is not None else 0.0
            v_rel = wind - v
            f += self.drag_coeff * np.linalg.norm(v_rel, axis=-1, keepdims=True) * v_rel
        return f

    def to_dict(self) -> dict:
        return {
            "const_force": list(self.const_force),
            "drag_coeff": self.drag_coeff,
            "wind_field": None if self.wind_field is None else self.wind_field.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DisturbanceSpec":
        wf = d.get("wind_field")
        return cls(tuple(d.get("const_force", (0.0, 0.0, 0.0))), float(d.get("drag_coeff", 0.0)),
                   None if wf is None else WindField.from_dict(wf))


@dataclass(frozen=True)
class SimParams:
    mass: float = 0.04
    g: tuple = (0.0, 0.0, -GRAVITY)
    k: float = 0.4
    dt: float = 0.02
    f_max: Optional[float] = None      # defaults to 2 * nominal weight
    omega_max: float = 10.0
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.k <= 1.0:
            raise ValueError("delay coefficient k must lie in [0, 1]")
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if self.f_max is None:
            object.__setattr__(self, "f_max", 2.0 * self.mass * GRAVITY)

    @property
    def hover_thrust(self) -> float:
        return self.mass * float(np.linalg.norm(self.g))

    def nominal(self) -> "SimParams":
        """Same vehicle with all disturbances removed (the MPC model)."""
        return replace(self, disturbance=DisturbanceSpec())

    def to_dict(self) -> dict:
        return {
            "mass": self.mass, "g": list(self.g), "k": self.k, "dt": self.dt,
            "f_max": self.f_max, "omega_max": self.omega_max,
            "disturbance": self.disturbance.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimParams":
        d = dict(d)
        dist = DisturbanceSpec.from_dict(d.pop("disturbance", {}) or {})
        if "g" in d:
            d["g"] = tuple(d["g"])
        return cls(disturbance=dist, **d)


# --------------------------------------------------------------------------
# state / control containers
# --------------------------------------------------------------------------

@dataclass
class QuadState:
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    f_act: float
    omega_act: np.ndarray

    @classmethod
    def hover(cls, params: SimParams, p=(0.0, 0.0, 0.0), yaw: float = 0.0) -> "QuadState":
        return cls(np.array(p, dtype=float), np.zeros(3), yaw_quat(yaw), np.zeros(3),
                   params.hover_thrust, np.zeros(3))

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.q, self.omega, [self.f_act], self.omega_act]).astype(float)

    @classmethod
    def from_array(cls, x: np.ndarray) -> "QuadState":
        x = np.asarray(x, dtype=float)
        return cls(x[P].copy(), x[V].copy(), x[Q].copy(), x[W].copy(), float(x[F]), x[WA].copy())


@dataclass(frozen=True)
class ControlInput:
    f_des: float
    omega_des: tuple

    @classmethod
    def clamped(cls, f_des: float, omega_des, params: SimParams) -> "ControlInput":
        f = float(np.clip(f_des, 0.0, params.f_max))
        w = np.clip(np.asarray(omega_des, dtype=float), -params.omega_max, params.omega_max)
        return cls(f, tuple(float(c) for c in w))

    def to_array(self) -> np.ndarray:
        return np.array([self.f_des, *self.omega_des], dtype=float)


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------

def apply_delay(prev, des, k):
    """First-order lag: move ``prev`` a fraction ``k`` of the way towards ``des``."""
    return prev + k * (des - prev)


def _thrust_integrals(omega: np.ndarray, dt: float):
    """First and second time integrals of exp(S(omega) t) e3 over [0, dt], body frame."""
    th2 = np.sum(omega * omega, axis=-1)
    th = np.sqrt(th2)
    small = th * dt < 0.05
    ths = np.where(small, 1.0, th)
    th2s = ths * ths
    s, c = np.sin(ths * dt), np.cos(ths * dt)
    T = dt
    t2 = th2 * th2
    a1 = np.where(small, T - th2 * T**3 / 6 + t2 * T**5 / 120, s / ths)
    a2 = np.where(small, T**2 / 2 - th2 * T**4 / 24 + t2 * T**6 / 720, (1 - c) / th2s)
    a3 = np.where(small, T**3 / 6 - th2 * T**5 / 120 + t2 * T**7 / 5040, (T - s / ths) / th2s)
    a4 = np.where(small, T**4 / 24 - th2 * T**6 / 720 + t2 * T**8 / 40320,
                  (T**2 / 2 - (1 - c) / th2s) / th2s)
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    zero = np.zeros_like(wx)
    e3 = np.stack([zero, zero, np.ones_like(wx)], -1)
    w_cross_e3 = np.stack([wy, -wx, zero], -1)
    proj = wz[..., None] * omega
    j1 = e3 * a1[..., None] + w_cross_e3 * a2[..., None] + proj * a3[..., None]
    j2 = e3 * a2[..., None] + w_cross_e3 * a3[..., None] + proj * a4[..., None]
    return j1, j2


def step_array(x: np.ndarray, u: np.ndarray, params: SimParams, disturbance: bool = True) -> np.ndarray:
    """Advance a batch of 17-value states by one ``dt`` under physical controls ``u``.

    ``u`` holds (f_des, omega_des) in newtons and rad/s; it is clamped to the
    actuator limits here. Broadcasts over leading axes.
    """
    dt = params.dt
    f_des = np.clip(u[..., 0], 0.0, params.f_max)
    w_des = np.clip(u[..., 1:4], -params.omega_max, params.omega_max)
    f = apply_delay(x[..., F], f_des, params.k)
    w = apply_delay(x[..., WA], w_des, params.k)

    p, v, q = x[..., P], x[..., V], x[..., Q]
    acc = np.asarray(params.g, dtype=float)
    if disturbance and params.disturbance.active:
        acc = acc + params.disturbance.force(p, v) / params.mass
    j1, j2 = _thrust_integrals(w, dt)
    thrust_acc = (f / params.mass)[..., None]
    v_new = v + acc * dt + thrust_acc * quat_rotate(q, j1)
    p_new = p + v * dt + 0.5 * acc * dt * dt + thrust_acc * quat_rotate(q, j2)
    q_new = quat_mul(q, quat_exp(w * dt))
    q_new = q_new / np.linalg.norm(q_new, axis=-1, keepdims=True)

    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (STATE_DIM,)))
    out[..., P] = p_new
    out[..., V] = v_new
    out[..., Q] = q_new
    out[..., W] = w
    out[..., F] = f
    out[..., WA] = w
    return out


def check_finite(x: np.ndarray) -> None:
    for name, sl in FIELD_SLICES.items():
        if not np.all(np.isfinite(x[..., sl])):
            raise SimulationFault(name)


def step(state: QuadState, u: ControlInput, params: SimParams,
         rng: Optional[np.random.Generator] = None) -> QuadState:
    """One plant step. ``rng`` is accepted for interface symmetry; the
    disturbance model is static so no randomness is consumed."""
    x = step_array(state.to_array(), u.to_array(), params)
    check_finite(x)
    return QuadState.from_array(x)


# --------------------------------------------------------------------------
# domain randomization
# --------------------------------------------------------------------------

MASS_SCALE_RANGE = (0.7, 1.3)
DELAY_RANGE = (0.2, 0.6)
FORCE_RANGE = 3.5  # magnitude, mass-normalized (m/s^2), see randomize()


def randomize(params: SimParams, rng: np.random.Generator, enabled: bool = True) -> SimParams:
    """Per-episode randomization of mass, delay coefficient and a constant force.

    The constant force has a uniformly random direction and a magnitude drawn
    from [0, 3.5] scaled by the randomized mass, i.e. the range is an
    acceleration. At the 40 g nominal mass a literal 3.5 N would be nine
    times the vehicle weight.
    """
    if not enabled:
        return params
    mass = params.mass * rng.uniform(*MASS_SCALE_RANGE)
    k = rng.uniform(*DELAY_RANGE)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    accel = direction * rng.uniform(0.0, FORCE_RANGE)
    dist = replace(params.disturbance, const_force=tuple(float(a) for a in mass * accel))
    return replace(params, mass=float(mass), k=float(k), f_max=params.f_max, disturbance=dist)
