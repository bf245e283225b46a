"""Experiment runners: adopter-count sweep and tree-depth sweep."""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from ..action_tree import build_tree, sample_path
from ..agent import PolicySet
from ..environment import Environment, increased_exposure

RQ1_HEADER = ("adopters", "reward", "increased_exposure")
RQ3_HEADER = ("depth", "arity", "mean_sample_time_s", "avg_reward")


def rq1_sweep(env: Environment, mf, counts, seed: int) -> list[tuple[int, float, float]]:
    """Increased exposure after `count` random adopters, for each count.

    Adopters are a prefix of one random permutation. Because the
    environment's fine-tune seed depends only on (episode seed, step), the
    state after the first ``count`` trials is identical to a fresh run with
    that many adopters, so one pass covers every count.
    """
    counts = [int(c) for c in counts]
    if counts != sorted(counts):
        raise ValueError("counts must be ascending")
    if counts and counts[-1] > env.num_users:
        raise ValueError(f"count {counts[-1]} exceeds the number of users")
    env.reset_episode(seed)
    pristine = env.compute_reward()
    order = np.random.default_rng(seed).permutation(env.num_users)
    rows, done = [], 0
    for count in counts:
        while done < count:
            env.apply_trial(int(order[done]), mf)
            done += 1
        reward = pristine if count == 0 else env.compute_reward()
        rows.append((count, reward, increased_exposure(reward, pristine, len(env.promoted))))
    return rows


def time_sampling(tree, policies, s: np.ndarray, trials: int, seed: int = 0) -> float:
    """Mean wall time of one sample_path call with every user available."""
    rng = np.random.default_rng(seed)
    tree.reset_availability()
    sample_path(tree, policies, s, rng)  # warm-up
    start = time.perf_counter()
    for _ in range(trials):
        sample_path(tree, policies, s, rng)
    return (time.perf_counter() - start) / trials


def rq3_depth_sweep(user_emb: np.ndarray, depths, trials: int, d_s: int, seed: int = 0,
                    train_fn=None) -> list[tuple[int, int, float, float]]:
    """Sampling cost (and optionally trained reward) for each tree depth.

    ``train_fn(tree, policies) -> avg_reward`` is called when given;
    otherwise the reward column is NaN.
    """
    rows = []
    state = np.random.default_rng(seed).normal(size=d_s)
    for d in depths:
        if d not in (1, 2, 3, 4):
            raise ValueError(f"depth {d} outside 1..4")
        tree = build_tree(user_emb, d, seed)
        policies = PolicySet.random(tree, d_s, seed)
        t = time_sampling(tree, policies, state, trials, seed)
        reward = float(train_fn(tree, policies)) if train_fn is not None else float("nan")
        rows.append((d, tree.arity, t, reward))
    return rows


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
    return path
