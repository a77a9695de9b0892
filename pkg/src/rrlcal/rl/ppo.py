"""Clipped-surrogate PPO with an entropy bonus, Adam, and hand-derived gradients."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import Episode, compute_gae, normalize_advantages
from .networks import LOG_2PI, PolicyParameters, mlp_backward, mlp_forward


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.9
    lambda_gae: float = 0.95
    clip_ratio: float = 0.2
    entropy_coef: float = 0.0
    learning_rate: float = 3e-3
    value_learning_rate: float | None = None
    epochs: int = 8
    minibatch_size: int = 256
    seed: int = 0
    max_grad_norm: float = 1.0
    reward_scale: float = 1.0
    hidden: tuple[int, ...] = (32, 32)
    init_log_std: float = -0.7

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lambda_gae <= 1.0:
            raise ValueError("lambda_gae must lie in [0, 1]")
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if not self.learning_rate >= 0.0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and >= 0")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("epochs and minibatch_size must be >= 1")


@dataclass
class TrainStats:
    mean_return: float = 0.0
    entropy: float = 0.0
    clip_fraction: float = 0.0
    value_loss: float = 0.0
    policy_loss: float = 0.0
    approx_kl: float = 0.0
    samples: int = 0
    aborted: bool = False
    message: str = ""


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return theta - self.lr * mh / (np.sqrt(vh) + self.eps)

    def copy(self) -> "Adam":
        o = Adam(self.m.size, self.lr, self.b1, self.b2, self.eps)
        o.m, o.v, o.t = self.m.copy(), self.v.copy(), self.t
        return o


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.actions[idx], self.logp_old[idx], self.advantages[idx], self.returns[idx])


def build_batch(params: PolicyParameters, episodes: Sequence[Episode], cfg: TrainConfig) -> Batch:
    """Flatten episodes; GAE per episode against the current value net."""
    obs, acts, logp, adv, ret = [], [], [], [], []
    for ep in episodes:
        v_all, _ = mlp_forward(params.value, np.vstack([ep.obs, ep.next_obs[-1:]]))
        v_all = v_all[:, 0]
        r = np.asarray(ep.rewards, dtype=float) * cfg.reward_scale
        a = compute_gae(r, v_all, ep.dones, cfg.gamma, cfg.lambda_gae)
        obs.append(ep.obs)
        acts.append(ep.actions)
        logp.append(ep.logps)
        adv.append(a)
        ret.append(a + v_all[:-1])
    adv_all = np.concatenate(adv)
    return Batch(np.vstack(obs), np.concatenate(acts), np.concatenate(logp),
                 normalize_advantages(adv_all), np.concatenate(ret))


def policy_loss_and_grad(params: PolicyParameters, batch: Batch, clip_ratio: float, entropy_coef: float):
    """Negated clipped surrogate minus entropy bonus, and its gradient.

    The gradient is returned as a flat vector aligned with
    ``params.policy_vector()``. Also returns (clip fraction, approx KL).
    """
    out, acts = mlp_forward(params.policy, batch.obs)
    scale = params.action_scale
    mu = out[:, 0] * scale
    log_std = float(params.log_std[0])
    log_sigma = log_std + math.log(scale)
    sigma = math.exp(log_sigma)
    z = (batch.actions - mu) / sigma
    logp = -0.5 * z * z - log_sigma - 0.5 * LOG_2PI
    log_ratio = logp - batch.logp_old
    ratio = np.exp(log_ratio)
    adv = batch.advantages
    n = len(adv)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip_ratio, 1 + clip_ratio) * adv
    surr = np.minimum(unclipped, clipped)
    ent = 0.5 * (LOG_2PI + 1.0) + log_sigma
    loss = -surr.mean() - entropy_coef * ent

    # d loss / d logp: only where the unclipped branch is the minimum
    active = unclipped <= clipped
    dlogp = np.where(active, -adv * ratio / n, 0.0)
    dmu = dlogp * z / sigma  # d logp / d mu = (a - mu) / sigma^2
    dout = (dmu * scale)[:, None]
    grads = mlp_backward(params.policy, acts, dout)
    d_log_std = float(np.sum(dlogp * (z * z - 1.0))) - entropy_coef
    flat = [g for gw_gb in grads for g in (gw_gb[0].ravel(), gw_gb[1].ravel())]
    grad = np.concatenate(flat + [np.array([d_log_std])])

    clip_frac = float(np.mean(np.abs(ratio - 1.0) > clip_ratio))
    approx_kl = float(np.mean((ratio - 1.0) - log_ratio))
    return float(loss), grad, clip_frac, approx_kl


def value_loss_and_grad(params: PolicyParameters, batch: Batch):
    out, acts = mlp_forward(params.value, batch.obs)
    err = out[:, 0] - batch.returns
    n = len(err)
    loss = 0.5 * float(np.mean(err * err))
    grads = mlp_backward(params.value, acts, (err / n)[:, None])
    flat = [g for gw_gb in grads for g in (gw_gb[0].ravel(), gw_gb[1].ravel())]
    return loss, np.concatenate(flat)


def _clip_norm(g: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        return g
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


class Optimizers:
    """Adam state for the policy (incl. log-sigma) and the value net."""

    def __init__(self, params: PolicyParameters, cfg: TrainConfig):
        self.policy = Adam(params.policy_vector().size, cfg.learning_rate)
        vlr = cfg.value_learning_rate if cfg.value_learning_rate is not None else cfg.learning_rate
        self.value = Adam(params.value_vector().size, vlr)

    def copy(self) -> "Optimizers":
        o = object.__new__(Optimizers)
        o.policy, o.value = self.policy.copy(), self.value.copy()
        return o


def ppo_update(params: PolicyParameters, episodes: Sequence[Episode], cfg: TrainConfig,
               optim: Optimizers | None = None) -> tuple[PolicyParameters, TrainStats]:
    """One PPO update over ``cfg.epochs`` shuffled minibatch passes.

    ``optim`` is advanced in place on success and left untouched when the
    update aborts on a non-finite loss.
    """
    episodes = [ep for ep in episodes if not ep.aborted and len(ep)]
    if not episodes:
        raise ValueError("ppo_update needs a non-empty batch of completed episodes")
    work = optim.copy() if optim is not None else Optimizers(params, cfg)
    batch = build_batch(params, episodes, cfg)
    stats = TrainStats(mean_return=float(np.mean([ep.total_return for ep in episodes])), samples=len(batch))
    rng = np.random.default_rng([cfg.seed, params.version])
    theta_p = params.policy_vector()
    theta_v = params.value_vector()
    cur = params
    clip_fracs, kls, vlosses, plosses = [], [], [], []
    n = len(batch)
    mb = min(cfg.minibatch_size, n)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, mb):
            sub = batch.subset(order[start:start + mb])
            lp, gp, cf, kl = policy_loss_and_grad(cur, sub, cfg.clip_ratio, cfg.entropy_coef)
            lv, gv = value_loss_and_grad(cur, sub)
            if not (math.isfinite(lp) and math.isfinite(lv) and np.all(np.isfinite(gp)) and np.all(np.isfinite(gv))):
                stats.aborted = True
                stats.message = f"non-finite loss (policy={lp}, value={lv}); update aborted"
                stats.entropy = 0.5 * (LOG_2PI + 1.0) + float(params.log_std[0]) + math.log(params.action_scale)
                return params, stats
            theta_p = work.policy.step(theta_p, _clip_norm(gp, cfg.max_grad_norm))
            theta_v = work.value.step(theta_v, _clip_norm(gv, cfg.max_grad_norm))
            cur = params.with_policy_vector(theta_p).with_value_vector(theta_v)
            clip_fracs.append(cf)
            kls.append(kl)
            vlosses.append(lv)
            plosses.append(lp)
    new = replace(cur, version=params.version + 1)
    if not new.all_finite():
        stats.aborted = True
        stats.message = "update produced non-finite parameters; update aborted"
        return params, stats
    if optim is not None:
        optim.policy, optim.value = work.policy, work.value
    stats.entropy = 0.5 * (LOG_2PI + 1.0) + float(new.log_std[0]) + math.log(new.action_scale)
    stats.clip_fraction = float(np.mean(clip_fracs))
    stats.approx_kl = float(np.mean(kls))
    stats.value_loss = float(np.mean(vlosses))
    stats.policy_loss = float(np.mean(plosses))
    return new, stats


STATS_HEADER = ("iteration", "mean_return", "entropy", "clip_fraction", "value_loss", "approx_kl")


def append_stats_csv(path, iteration: int, stats: TrainStats) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(STATS_HEADER)
        w.writerow([iteration, repr(float(stats.mean_return)), repr(float(stats.entropy)), repr(float(stats.clip_fraction)),
                    repr(float(stats.value_loss)), repr(float(stats.approx_kl))])
