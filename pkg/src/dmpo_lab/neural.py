"""Small numpy MLPs with hand-written backprop, Gaussian heads, and Adam.

Checkpoint layout (all integers uint32/int32 little-endian, floats float64
little-endian)::

    b"DMPO1"
    u32 record_count
    record*            one per network: name, layer sizes, flat parameters
    u32 record_count
    record*            Adam state: "<name>.m", "<name>.v" (dims = layer sizes)
                       and "<name>.t" (dims = [1], the step counter)

    record := u32 name_len | name bytes (utf-8) | u32 ndim | i32 dims[ndim] | f64 data[...]

For network records ``data`` has ``n_params(dims)`` entries laid out layer by
layer as W (fan_in x fan_out, row-major) then b.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
MAGIC = b"DMPO1"


def n_params(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


class Mlp:
    """Fully connected net, ReLU on hidden layers, linear output.

    Parameters live in one flat vector ``theta``; layer weights are views.
    """

    def __init__(self, sizes: Sequence[int], theta: Optional[np.ndarray] = None):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes!r}")
        self.sizes = tuple(int(s) for s in sizes)
        n = n_params(self.sizes)
        if theta is None:
            theta = np.zeros(n)
        if theta.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {theta.shape}")
        self.theta = theta
        self._slices = []
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self._slices.append((slice(off, off + a * b), (a, b), slice(off + a * b, off + a * b + b)))
            off += a * b + b

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def layer(self, i: int):
        ws, shape, bs = self._slices[i]
        return self.theta[ws].reshape(shape), self.theta[bs]

    def forward(self, x: np.ndarray):
        """Returns (output, cache). Accepts a single vector or a (B, n_in) batch."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input has {x.shape[-1]} features, network expects {self.n_in}")
        acts = [x]
        h = x
        last = len(self._slices) - 1
        for i in range(len(self._slices)):
            W, b = self.layer(i)
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, dy: np.ndarray):
        """Reverse pass. ``dy`` matches the output shape; batch gradients are summed.

        Returns (flat parameter gradient, input gradient).
        """
        acts = cache
        grad = np.zeros_like(self.theta)
        g = np.asarray(dy, dtype=float)
        for i in reversed(range(len(self._slices))):
            ws, shape, bs = self._slices[i]
            if i < len(self._slices) - 1:
                g = g * (acts[i + 1] > 0)
            a_in = acts[i]
            if g.ndim == 1:
                grad[ws] = np.outer(a_in, g).ravel()
                grad[bs] = g
            else:
                grad[ws] = (a_in.reshape(-1, shape[0]).T @ g.reshape(-1, shape[1])).ravel()
                grad[bs] = g.reshape(-1, shape[1]).sum(axis=0)
            W = self.theta[ws].reshape(shape)
            g = g @ W.T
        return grad, g

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.theta.copy())


def init_mlp(sizes: Sequence[int], last_layer_std: float = 1e-3, last_layer_bias=0.0,
             rng: Optional[np.random.Generator] = None) -> Mlp:
    """Hidden layers ~ U(+-1/sqrt(fan_in)); output weights ~ N(0, last_layer_std^2)."""
    rng = np.random.default_rng() if rng is None else rng
    net = Mlp(sizes)
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        W, b = net.layer(i)
        if i < n_layers - 1:
            lim = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-lim, lim, size=W.shape)
            b[...] = rng.uniform(-lim, lim, size=b.shape)
        else:
            W[...] = rng.normal(0.0, 1.0, size=W.shape) * last_layer_std
            b[...] = last_layer_bias
    return net


# --------------------------------------------------------------------------
# diagonal Gaussian policy head
# --------------------------------------------------------------------------

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


class DiagGaussian:
    """Diagonal Gaussian; the last axis is the event axis."""

    def __init__(self, mean: np.ndarray, log_std: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        raw = np.asarray(log_std, dtype=float)
        self.log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        self._inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        self.std = np.exp(self.log_std)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.std
        return np.sum(-0.5 * z * z - self.log_std - HALF_LOG_2PI, axis=-1)

    def entropy(self) -> np.ndarray:
        return np.sum(self.log_std + 0.5 + HALF_LOG_2PI, axis=-1)

    def log_prob_grads(self, x: np.ndarray):
        """d log_prob / d mean and d log_prob / d (unclamped) log_std."""
        z = (x - self.mean) / self.std
        return z / self.std, (z * z - 1.0) * self._inside

    def entropy_grad(self) -> np.ndarray:
        """d entropy / d (unclamped) log_std."""
        return self._inside.astype(float)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class NetParams:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def for_net(cls, net: Mlp) -> "NetParams":
        return cls(net.theta, np.zeros_like(net.theta), np.zeros_like(net.theta), 0)


class DivergenceError(FloatingPointError):
    """Non-finite gradient or loss during training."""


def adam_step(params: NetParams, grads: np.ndarray, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> NetParams:
    """One bias-corrected Adam step; returns a new NetParams (inputs untouched)."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.theta.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("non-finite gradient")
    t = params.step + 1
    m = beta1 * params.m + (1 - beta1) * grads
    v = beta2 * params.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    theta = params.theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return NetParams(theta, m, v, t)


class Adam:
    """Keeps a network's parameters and moments in sync across steps."""

    def __init__(self, net: Mlp, lr: float, state: Optional[NetParams] = None):
        self.net = net
        self.lr = lr
        self.state = state if state is not None else NetParams.for_net(net)
        self.state.theta = net.theta

    def step(self, grads: np.ndarray) -> None:
        self.state = adam_step(self.state, grads, self.lr)
        self.net.theta[...] = self.state.theta
        self.state.theta = self.net.theta


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _write_record(fh, name: str, dims: Sequence[int], data: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", len(dims)))
    fh.write(np.asarray(dims, dtype="<i4").tobytes())
    fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise ValueError("truncated checkpoint")
    return b


def _read_record(fh, n_values) :
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = tuple(int(d) for d in np.frombuffer(_read_exact(fh, 4 * ndim), dtype="<i4"))
    count = n_values(name, dims)
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(float)
    return name, dims, data


def save_checkpoint(path, nets: Dict[str, Mlp], adam: Optional[Dict[str, NetParams]] = None) -> None:
    adam = adam or {}
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(nets)))
        for name, net in nets.items():
            _write_record(fh, name, net.sizes, net.theta)
        moment_records = []
        for name, st in adam.items():
            sizes = nets[name].sizes
            moment_records += [(f"{name}.m", sizes, st.m), (f"{name}.v", sizes, st.v),
                               (f"{name}.t", (1,), np.array([float(st.step)]))]
        fh.write(struct.pack("<I", len(moment_records)))
        for rec in moment_records:
            _write_record(fh, *rec)


def load_checkpoint(path):
    """Returns (nets, adam_states) as dicts keyed by network name."""
    with Path(path).open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        nets: Dict[str, Mlp] = {}
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        for _ in range(count):
            name, dims, data = _read_record(fh, lambda n, d: n_params(d))
            nets[name] = Mlp(dims, data.copy())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        raw = {}
        for _ in range(count):
            name, dims, data = _read_record(fh, lambda n, d: 1 if n.endswith(".t") else n_params(d))
            raw[name] = data
        if fh.read(1):
            raise ValueError("trailing bytes in checkpoint")
    adam = {}
    for name, net in nets.items():
        if f"{name}.m" in raw:
            adam[name] = NetParams(net.theta, raw[f"{name}.m"].copy(), raw[f"{name}.v"].copy(),
                                   int(raw[f"{name}.t"][0]))
    return nets, adam
