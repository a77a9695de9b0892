"""A one-dimensional tracking task for checking the learner end to end.

Each step draws an observation x ~ U[-1, 1]; the ideal action is -x and the
reward is -(a + x)^2. Evaluation uses the mean action, so the optimum
return is 0.
"""

from __future__ import annotations

import numpy as np

from .core import Episode
from .networks import PolicyParameters, init_params, sample_action
from .ppo import Optimizers, TrainConfig, ppo_update


def rollout(params: PolicyParameters, rng: np.random.Generator, steps: int, explore: bool) -> Episode:
    xs = rng.uniform(-1.0, 1.0, size=steps + 1)
    obs = np.column_stack([xs, np.zeros_like(xs)])
    acts, mus, sig, logp, rew = [], [], [], [], []
    for t in range(steps):
        a = sample_action(params, obs[t], rng, explore)
        acts.append(a.sample)
        mus.append(a.mu)
        sig.append(a.sigma)
        logp.append(a.logp)
        rew.append(-(a.sample + xs[t]) ** 2)
    dones = np.zeros(steps, dtype=bool)
    dones[-1] = True
    return Episode(obs[:-1], obs[1:], np.array(acts), np.array(mus), np.array(sig), np.array(logp),
                   np.array(rew), dones, policy_version=params.version)


def evaluate(params: PolicyParameters, seed: int, episodes: int = 8, steps: int = 32) -> float:
    rng = np.random.default_rng(seed)
    return float(np.mean([rollout(params, rng, steps, explore=False).total_return for _ in range(episodes)]))


def train(seed: int, updates: int = 200, episodes_per_update: int = 4, steps: int = 32,
          cfg: TrainConfig | None = None):
    """Returns (initial eval return, final eval return, params)."""
    cfg = cfg or TrainConfig(gamma=0.5, lambda_gae=0.9, learning_rate=3e-3, epochs=4, minibatch_size=64,
                             seed=seed, init_log_std=-0.5)
    params = init_params(seed, (-1.0, -1.0), (1.0, 1.0), hidden=(16, 16), init_log_std=cfg.init_log_std)
    optim = Optimizers(params, cfg)
    rng = np.random.default_rng(seed + 1)
    initial = evaluate(params, 10_000 + seed)
    for _ in range(updates):
        eps = [rollout(params, rng, steps, explore=True) for _ in range(episodes_per_update)]
        params, _ = ppo_update(params, eps, cfg, optim)
    return initial, evaluate(params, 10_000 + seed), params
