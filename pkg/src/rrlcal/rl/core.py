"""Reward, episode containers, discounted return and advantage estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class NumericalFault(ArithmeticError):
    """A network produced a non-finite output or loss."""


@dataclass(frozen=True)
class RewardWeights:
    """Penalty weights: NOx (per mg/s), soot (per mg/s), boost deviation (per kPa)."""

    alpha1: float = 1.0
    alpha2: float = 15.0
    alpha3: float = 0.5

    def __post_init__(self):
        a = (self.alpha1, self.alpha2, self.alpha3)
        if any(not math.isfinite(v) or v < 0 for v in a):
            raise ValueError(f"reward weights must be finite and >= 0, got {a}")
        if max(a) <= 0:
            raise ValueError("at least one reward weight must be positive")

    def scaled(self, k: float) -> "RewardWeights":
        return RewardWeights(self.alpha1 * k, self.alpha2 * k, self.alpha3 * k)


def reward_terms(frame, w: RewardWeights) -> tuple[float, float, float]:
    """The three (non-negative) penalty terms for one sensor frame."""
    return (w.alpha1 * frame.mdot_nox, w.alpha2 * frame.mdot_soot, w.alpha3 * abs(frame.p_boost_dev))


def reward(frame, w: RewardWeights) -> float:
    return -(w.alpha1 * frame.mdot_nox + w.alpha2 * frame.mdot_soot + w.alpha3 * abs(frame.p_boost_dev))


def auto_balance(mean_nox: float, mean_soot: float, mean_abs_dev: float, anchor: float = 1.0) -> RewardWeights:
    """Weights that give each penalty term the same magnitude on a reference run.

    The NOx weight is pinned to ``anchor``; channels with zero mean keep a
    zero weight.
    """
    if mean_nox <= 0:
        raise ValueError("auto-balance needs a positive mean NOx flow")
    target = anchor * mean_nox
    a2 = target / mean_soot if mean_soot > 0 else 0.0
    a3 = target / mean_abs_dev if mean_abs_dev > 0 else 0.0
    return RewardWeights(anchor, a2, a3)


@dataclass(frozen=True)
class ResidualAction:
    mu: float
    sigma: float
    sample: float
    logp: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class Experience:
    s: np.ndarray
    a: ResidualAction
    s_next: np.ndarray
    r: float
    done: bool
    logp: float


@dataclass
class Episode:
    """One rollout stored column-wise.

    ``actions`` are the raw policy samples (before the environment clamp);
    ``applied`` are the deltas actually written to the ECU.
    """

    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    mus: np.ndarray
    sigmas: np.ndarray
    logps: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    applied: np.ndarray | None = None
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)
    cycle_id: str = ""
    seed: int = 0
    policy_version: int = 0
    episode_id: int = 0
    aborted: bool = False
    note: str = ""

    def __post_init__(self):
        t = len(self.rewards)
        for name in ("obs", "next_obs", "actions", "mus", "sigmas", "logps", "dones"):
            if len(getattr(self, name)) != t:
                raise ValueError(f"episode column '{name}' has length {len(getattr(self, name))}, expected {t}")
        if not self.aborted and t:
            if not np.all(np.isfinite(self.rewards)) or not np.all(np.isfinite(self.logps)):
                raise ValueError("episode rewards and log-probabilities must be finite")
            d = np.asarray(self.dones, dtype=bool)
            if not d[-1] or d[:-1].any():
                raise ValueError("exactly the last experience must be terminal")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))

    def experiences(self) -> Iterator[Experience]:
        for t in range(len(self)):
            a = ResidualAction(float(self.mus[t]), float(self.sigmas[t]), float(self.actions[t]), float(self.logps[t]))
            yield Experience(self.obs[t], a, self.next_obs[t], float(self.rewards[t]), bool(self.dones[t]),
                             float(self.logps[t]))


def episode_return(ep: Episode | Sequence[float], gamma: float = 1.0) -> float:
    """Discounted sum of rewards."""
    rewards = ep.rewards if isinstance(ep, Episode) else ep
    total = 0.0
    for r in reversed(list(rewards)):
        total = float(r) + gamma * total
    return total


def compute_gae(rewards, values, dones, gamma: float, lambda_gae: float) -> np.ndarray:
    """Generalized advantage estimates (not normalized).

    ``values`` holds T+1 entries; the last is the bootstrap value of the
    final next-state, masked wherever ``dones`` is set.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    t_len = len(r)
    if len(v) != t_len + 1 or len(d) != t_len:
        raise ValueError(f"GAE needs len(values) == len(rewards) + 1 and matching dones "
                         f"(got {len(v)}, {t_len}, {len(d)})")
    adv = np.zeros(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * live - v[t]
        acc = delta + gamma * lambda_gae * live * acc
        adv[t] = acc
    return adv


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    if adv.size < 2:
        return adv - adv.mean()
    std = adv.std()
    centred = adv - adv.mean()
    if std < 1e-12:
        return centred
    out = centred / std
    # second pass removes the residual rounding in the mean
    return out - out.mean()
