"""Static adopter-selection policies used as comparison points."""

from __future__ import annotations

import logging

import numpy as np

from ..agent import episode_seed
from ..dataset import RatingsTable
from ..factorization import EmbeddingMatrix
from .metrics import MetricsReport, summarize_rewards

log = logging.getLogger(__name__)

BASELINES = ("random", "activity", "inactivity", "high_rating", "low_rating")


def rank_baseline_users(table: RatingsTable, kind: str, n: int, seed: int = 0,
                        passes: np.ndarray | None = None) -> list[int]:
    """The first ``n`` users of the baseline ordering that pass the filter.

    Orderings use statistics of ``table`` only, with ties broken by
    ascending user id. ``passes`` is the filter gate (None admits all).
    """
    if n > table.num_users:
        raise ValueError(f"n={n} exceeds the number of users ({table.num_users})")
    ids = np.arange(table.num_users)
    if kind == "random":
        order = np.random.default_rng(seed).permutation(table.num_users)
    elif kind in ("activity", "inactivity"):
        counts = table.user_counts()
        key = -counts if kind == "activity" else counts
        order = np.lexsort((ids, key))
    elif kind in ("high_rating", "low_rating"):
        means = table.user_mean_rating()
        means = np.where(np.isnan(means), -np.inf if kind == "high_rating" else np.inf, means)
        key = -means if kind == "high_rating" else means
        order = np.lexsort((ids, key))
    else:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    if passes is not None:
        order = order[passes[order]]
    chosen = order[:n].tolist()
    if len(chosen) < n:
        log.warning("only %d users survive the filter for baseline %s (wanted %d)",
                    len(chosen), kind, n)
    return chosen


def run_baseline(env, table: RatingsTable, mf: EmbeddingMatrix, kind: str, episodes: int,
                 seed: int, n: int, passes: np.ndarray | None = None
                 ) -> tuple[MetricsReport, list[list[float]]]:
    """Feed the baseline's adopters through the environment, one per step.

    Episode ``e`` uses ``episode_seed(seed, e)`` for the environment, the
    same seeds the agent evaluation uses. With n=0 the single recorded
    reward per episode is the pristine one.
    """
    per_episode = []
    for ep in range(episodes):
        ep_seed = episode_seed(seed, ep)
        env.reset_episode(ep_seed)
        users = rank_baseline_users(table, kind, n, ep_seed, passes)
        if not users:
            per_episode.append([env.compute_reward()])
            continue
        rewards = []
        for u in users:
            env.apply_trial(u, mf)
            rewards.append(env.compute_reward())
        per_episode.append(rewards)
    avg, mx = summarize_rewards(per_episode)
    return MetricsReport(avg_reward=avg, max_reward=mx, k=env.k), per_episode
