"""Selection and ranking metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from ..dataset import RatingsTable
from ..factorization import BprModel

# Reference values reported for ML-100K; printed beside our numbers, never asserted.
TABLE2_REFERENCE = {
    "random": (4.72, 36.0),
    "activity": (0.14, 7.0),
    "inactivity": (11.57, 54.0),
    "high_rating": (8.54, 55.0),
    "low_rating": (3.93, 24.0),
    "smile": (138.3, 213.0),
}
TABLE3_REFERENCE = {"original": (0.2194, 0.0505), "relative_gain": (0.0775, 0.0653)}


@dataclass
class MetricsReport:
    avg_reward: float | None = None
    max_reward: float | None = None
    precision_at_k: float | None = None
    recall_at_k: float | None = None
    k: int = 10

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def summarize_rewards(per_episode: list[list[float]]) -> tuple[float, float]:
    """Mean and max over every recorded step of every episode."""
    flat = [r for ep in per_episode for r in ep]
    if not flat:
        raise ValueError("no episode recorded a reward (did the filter reject every user?)")
    return float(np.mean(flat)), float(np.max(flat))


def eval_ranking(model: BprModel, test: RatingsTable, k: int = 10,
                 relevance_threshold: float = 4.0,
                 exclude: RatingsTable | None = None) -> tuple[float, float]:
    """Mean Precision@k and Recall@k over users with a relevant test item.

    Each user ranks the whole catalog minus the items they have in
    ``exclude`` (normally the training table). Recall divides by
    min(|relevant|, k).
    """
    if len(test) == 0:
        raise ValueError("test table is empty")
    relevant = test.ratings >= relevance_threshold
    users = np.unique(test.users[relevant])
    if users.size == 0:
        raise ValueError("no user has a relevant test item")
    precisions, recalls = [], []
    for u in users.tolist():
        scores = model.Q @ model.P[u]
        if exclude is not None and exclude.by_user[u]:
            seen = exclude.items[np.asarray(exclude.by_user[u])]
            scores[seen] = -np.inf
        top = np.argsort(-scores, kind="stable")[:k]
        rows = np.asarray(test.by_user[u])
        rel = test.items[rows][test.ratings[rows] >= relevance_threshold]
        hits = np.isin(top, rel).sum()
        precisions.append(hits / k)
        recalls.append(hits / min(rel.size, k))
    return float(np.mean(precisions)), float(np.mean(recalls))
