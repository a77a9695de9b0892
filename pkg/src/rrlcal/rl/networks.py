"""Small tanh MLPs with hand-written backprop, Gaussian policy and snapshots."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import NumericalFault, ResidualAction

LOG_2PI = math.log(2.0 * math.pi)
SNAPSHOT_MAGIC = b"RRLP"
SNAPSHOT_FORMAT = 1

Layers = tuple[tuple[np.ndarray, np.ndarray], ...]


def mlp_forward(layers: Layers, x: np.ndarray):
    """Forward pass; returns (output, cache). Hidden layers tanh, last linear."""
    acts = [x]
    h = x
    n = len(layers)
    for k, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.tanh(z) if k < n - 1 else z
        acts.append(h)
    return h, acts


def mlp_backward(layers: Layers, acts, dout: np.ndarray):
    """Gradients of sum(dout * output) w.r.t. every (W, b)."""
    grads = [None] * len(layers)
    g = dout
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        h_in = acts[k]
        grads[k] = (h_in.T @ g, g.sum(axis=0))
        if k > 0:
            g = (g @ w.T) * (1.0 - acts[k] ** 2)
    return grads


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], out_scale: float = 1.0) -> Layers:
    layers = []
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        scale = out_scale if k == len(sizes) - 2 else 1.0
        w = rng.normal(0.0, scale / math.sqrt(fan_in), size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return tuple(layers)


def _flat(layers: Layers) -> list[np.ndarray]:
    out = []
    for w, b in layers:
        out.append(w.ravel())
        out.append(b.ravel())
    return out


def _unflat(vec: np.ndarray, like: Layers, offset: int) -> tuple[Layers, int]:
    out = []
    for w, b in like:
        nw = vec[offset:offset + w.size].reshape(w.shape)
        offset += w.size
        nb = vec[offset:offset + b.size].reshape(b.shape)
        offset += b.size
        out.append((nw.copy(), nb.copy()))
    return tuple(out), offset


@dataclass(frozen=True)
class PolicyParameters:
    """Immutable snapshot of policy (mu head + state-independent log-sigma) and value nets.

    The policy net outputs the mean in units of ``action_scale``; sigma is
    ``action_scale * exp(log_std)``. Observations are normalized from
    [obs_low, obs_high] to [-1, 1].
    """

    policy: Layers
    log_std: np.ndarray
    value: Layers
    action_scale: float
    obs_low: tuple[float, ...]
    obs_high: tuple[float, ...]
    version: int = 0

    @property
    def obs_dim(self) -> int:
        return self.policy[0][0].shape[0]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w, _ in self.policy[:-1])

    @property
    def value_hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w, _ in self.value[:-1])

    def policy_vector(self) -> np.ndarray:
        return np.concatenate(_flat(self.policy) + [self.log_std.ravel()])

    def with_policy_vector(self, vec: np.ndarray) -> "PolicyParameters":
        layers, off = _unflat(np.asarray(vec, dtype=float), self.policy, 0)
        log_std = np.array(vec[off:off + self.log_std.size], dtype=float)
        return replace(self, policy=layers, log_std=log_std)

    def value_vector(self) -> np.ndarray:
        return np.concatenate(_flat(self.value))

    def with_value_vector(self, vec: np.ndarray) -> "PolicyParameters":
        layers, _ = _unflat(np.asarray(vec, dtype=float), self.value, 0)
        return replace(self, value=layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.policy_vector(), self.value_vector()])

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def zeroed_mean(self) -> "PolicyParameters":
        """Copy whose mean output is identically zero."""
        w, b = self.policy[-1]
        layers = self.policy[:-1] + ((np.zeros_like(w), np.zeros_like(b)),)
        return replace(self, policy=layers)

    def normalize(self, raw) -> np.ndarray:
        lo = np.asarray(self.obs_low, dtype=float)
        hi = np.asarray(self.obs_high, dtype=float)
        z = 2.0 * (np.asarray(raw, dtype=float) - lo) / (hi - lo) - 1.0
        return np.clip(z, -1.0, 1.0)

    def architecture(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "hidden": list(self.hidden),
            "value_hidden": list(self.value_hidden),
            "action_dim": int(self.log_std.size),
            "action_scale": self.action_scale,
            "obs_low": list(self.obs_low),
            "obs_high": list(self.obs_high),
            "version": self.version,
        }

    def __eq__(self, other):
        if not isinstance(other, PolicyParameters):
            return NotImplemented
        return (self.architecture() == other.architecture()
                and np.array_equal(self.flat(), other.flat()))


def init_params(seed_or_rng, obs_low: Sequence[float], obs_high: Sequence[float],
                hidden: Sequence[int] = (32, 32), action_scale: float = 1.0,
                init_log_std: float = 0.0, value_hidden: Sequence[int] | None = None) -> PolicyParameters:
    """Fresh parameters; the mean head starts at exactly zero (identity residual)."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    d = len(obs_low)
    pol = init_mlp(rng, [d, *hidden, 1], out_scale=1.0)
    w, b = pol[-1]
    pol = pol[:-1] + ((np.zeros_like(w), np.zeros_like(b)),)
    val = init_mlp(rng, [d, *(value_hidden or hidden), 1], out_scale=1.0)
    return PolicyParameters(pol, np.array([float(init_log_std)]), val, float(action_scale),
                            tuple(float(v) for v in obs_low), tuple(float(v) for v in obs_high), 0)


def gaussian_logp(x, mu, sigma):
    x = np.asarray(x, dtype=float)
    z = (x - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI


def policy_forward(params: PolicyParameters, obs) -> tuple[np.ndarray, float]:
    """Mean (action units) for a batch or single normalized observation, and sigma."""
    x = np.atleast_2d(np.asarray(obs, dtype=float))
    out, _ = mlp_forward(params.policy, x)
    mu = out[:, 0] * params.action_scale
    sigma = params.action_scale * float(np.exp(params.log_std[0]))
    if not (np.all(np.isfinite(mu)) and math.isfinite(sigma) and sigma > 0):
        raise NumericalFault("non-finite policy output")
    if np.ndim(obs) == 1:
        return mu[:1], sigma
    return mu, sigma


def value_forward(params: PolicyParameters, obs) -> np.ndarray:
    x = np.atleast_2d(np.asarray(obs, dtype=float))
    out, _ = mlp_forward(params.value, x)
    return out[:, 0]


def _mean_single(params: PolicyParameters, x: np.ndarray) -> float:
    # hot path for rollouts: a single observation, no cache
    h = x
    n = len(params.policy)
    for k, (w, b) in enumerate(params.policy):
        h = h @ w + b
        if k < n - 1:
            h = np.tanh(h)
    return float(h[0]) * params.action_scale


def sample_action(params: PolicyParameters, obs, rng: np.random.Generator | None, explore: bool) -> ResidualAction:
    """Draw a delta (explore) or return the mean (validation); logp is pre-clamp."""
    mu = _mean_single(params, np.asarray(obs, dtype=float))
    sigma = params.action_scale * math.exp(float(params.log_std[0]))
    if not (math.isfinite(mu) and math.isfinite(sigma) and sigma > 0):
        raise NumericalFault(f"non-finite policy output (mu={mu}, sigma={sigma})")
    if explore:
        if rng is None:
            raise ValueError("exploration needs an rng")
        a = mu + sigma * float(rng.standard_normal())
    else:
        a = mu
    z = (a - mu) / sigma
    logp = -0.5 * z * z - math.log(sigma) - 0.5 * LOG_2PI
    return ResidualAction(mu, sigma, a, logp)


def entropy(params: PolicyParameters, obs_batch=None) -> float:
    """Mean Gaussian differential entropy over the batch (sigma is state independent)."""
    if obs_batch is not None and len(np.atleast_2d(obs_batch)) == 0:
        raise ValueError("entropy needs a non-empty batch")
    sigma = params.action_scale * math.exp(float(params.log_std[0]))
    return 0.5 * math.log(2.0 * math.pi * math.e * sigma * sigma)


# -- snapshot serialization ------------------------------------------------------

def to_bytes(params: PolicyParameters) -> bytes:
    """Magic, format, JSON architecture header, then big-endian float64 weights."""
    header = json.dumps(params.architecture(), sort_keys=True, separators=(",", ":")).encode()
    flat = params.flat().astype(">f8")
    return (SNAPSHOT_MAGIC + struct.pack(">HI", SNAPSHOT_FORMAT, len(header)) + header
            + struct.pack(">I", flat.size) + flat.tobytes())


def from_bytes(data: bytes) -> PolicyParameters:
    if len(data) < 10 or data[:4] != SNAPSHOT_MAGIC:
        raise ValueError("not a policy snapshot")
    fmt_version, hlen = struct.unpack(">HI", data[4:10])
    if fmt_version != SNAPSHOT_FORMAT:
        raise ValueError(f"unsupported snapshot format {fmt_version}")
    off = 10
    if len(data) < off + hlen + 4:
        raise ValueError("truncated policy snapshot")
    arch = json.loads(data[off:off + hlen].decode())
    off += hlen
    (count,) = struct.unpack(">I", data[off:off + 4])
    off += 4
    if len(data) != off + 8 * count:
        raise ValueError("truncated policy snapshot")
    flat = np.frombuffer(data[off:], dtype=">f8").astype(float)
    d = arch["obs_dim"]
    shell = PolicyParameters(
        _shape_like(d, arch["hidden"], 1), np.zeros(arch["action_dim"]),
        _shape_like(d, arch["value_hidden"], 1), float(arch["action_scale"]),
        tuple(arch["obs_low"]), tuple(arch["obs_high"]), int(arch["version"]),
    )
    n_pol = shell.policy_vector().size
    if flat.size != n_pol + shell.value_vector().size:
        raise ValueError("snapshot weight count does not match its architecture")
    return shell.with_policy_vector(flat[:n_pol]).with_value_vector(flat[n_pol:])


def _shape_like(d: int, hidden, out: int) -> Layers:
    sizes = [d, *hidden, out]
    return tuple((np.zeros((sizes[k], sizes[k + 1])), np.zeros(sizes[k + 1])) for k in range(len(sizes) - 1))


def save_snapshot(params: PolicyParameters, path) -> None:
    from ..io import atomic_write_bytes

    atomic_write_bytes(path, to_bytes(params))


def load_snapshot(path) -> PolicyParameters:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
