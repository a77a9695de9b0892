"""Residual PPO learner written directly on numpy."""

from .core import (
    Episode,
    Experience,
    NumericalFault,
    ResidualAction,
    RewardWeights,
    auto_balance,
    compute_gae,
    episode_return,
    normalize_advantages,
    reward,
    reward_terms,
)
from .networks import (
    PolicyParameters,
    entropy,
    from_bytes,
    gaussian_logp,
    init_params,
    load_snapshot,
    policy_forward,
    sample_action,
    save_snapshot,
    to_bytes,
    value_forward,
)
from .ppo import (
    Adam,
    Batch,
    Optimizers,
    TrainConfig,
    TrainStats,
    append_stats_csv,
    build_batch,
    policy_loss_and_grad,
    ppo_update,
    value_loss_and_grad,
)

__all__ = [name for name in dir() if not name.startswith("_")]
