"""Simulated recommender used as the reward calculator.

The environment owns the live interaction log D and the BPR ranker. Each
trial appends (adopter, promoted item, predicted rating) rows, warm-starts
the ranker on them, and the reward counts how often promoted items land in
users' top-K lists.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dataset import PromotedSet, RatingsTable
from .factorization import BprModel, EmbeddingMatrix, fine_tune_bpr

DEFAULT_K = 10
DEFAULT_CANDIDATE_FRACTION = 0.10
DEFAULT_FINE_TUNE_STEPS = 200


@dataclass
class CandidateSets:
    per_user: np.ndarray  # (num_users, |C_u|), each row sorted by item id
    seed: int

    def __getitem__(self, user: int) -> np.ndarray:
        return self.per_user[user]

    @property
    def size(self) -> int:
        return self.per_user.shape[1]


def candidate_set_size(num_items: int, num_promoted: int, fraction: float) -> int:
    return num_promoted + int(math.floor(fraction * (num_items - num_promoted) + 0.5))


def top_k_by_score(scores: np.ndarray, item_ids: np.ndarray, k: int) -> np.ndarray:
    """Rows of the k highest-scoring items; ties go to the smaller item id.

    ``item_ids`` must be sorted ascending along the last axis so that a
    stable sort on negated scores resolves ties by id.
    """
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.take_along_axis(item_ids, order, axis=-1)


def increased_exposure(reward: float, pristine_reward: float, num_promoted: int) -> float:
    """Extra promoted-item appearances across all top-K lists."""
    return num_promoted * (reward - pristine_reward)


class Environment:
    def __init__(self, table: RatingsTable, ranker: BprModel, promoted: PromotedSet,
                 k: int = DEFAULT_K, candidate_fraction: float = DEFAULT_CANDIDATE_FRACTION,
                 fine_tune_steps: int = DEFAULT_FINE_TUNE_STEPS,
                 fine_tune_lr: float | None = None, seed: int = 0):
        self.table = table
        self.table.snapshot()
        self.promoted = promoted
        self.k = k
        self.candidate_fraction = candidate_fraction
        self.fine_tune_steps = fine_tune_steps
        self.fine_tune_lr = ranker.hyper.get("lr", 0.01) if fine_tune_lr is None else fine_tune_lr
        self.ranker = ranker.copy()
        self._pristine = ranker.copy()
        self.observed = table.observed_matrix()
        self.promoted_mask = promoted.mask(table.num_items)
        self.skipped = 0
        self.episode_seed = seed
        self._step = 0
        self.candidates = self.build_candidates(seed)

    @property
    def num_users(self) -> int:
        return self.table.num_users

    def build_candidates(self, seed: int) -> CandidateSets:
        """Promoted items plus a uniform sample of the other items, per user."""
        others = np.flatnonzero(~self.promoted_mask)
        size = candidate_set_size(self.table.num_items, len(self.promoted),
                                  self.candidate_fraction) - len(self.promoted)
        rng = np.random.default_rng(seed)
        keys = rng.random((self.num_users, others.size))
        if size < others.size:
            picked = np.argpartition(keys, size, axis=1)[:, :size]
        else:
            picked = np.broadcast_to(np.arange(others.size), keys.shape)
        per_user = np.concatenate(
            [np.broadcast_to(self.promoted.item_ids, (self.num_users, len(self.promoted))),
             others[picked]], axis=1)
        per_user.sort(axis=1)
        return CandidateSets(per_user, seed)

    def candidate_scores(self) -> np.ndarray:
        C = self.candidates.per_user
        return np.einsum("ud,ujd->uj", self.ranker.P, self.ranker.Q[C])

    def recommend_all(self) -> np.ndarray:
        if self.k > self.candidates.size:
            raise ValueError(f"K={self.k} exceeds candidate set size {self.candidates.size}")
        return top_k_by_score(self.candidate_scores(), self.candidates.per_user, self.k)

    def recommend_topk(self, user: int) -> np.ndarray:
        if self.k > self.candidates.size:
            raise ValueError(f"K={self.k} exceeds candidate set size {self.candidates.size}")
        C = self.candidates[user]
        return top_k_by_score(self.ranker.score(user, C), C, self.k)

    def promoted_hits(self) -> np.ndarray:
        """Per-user count of promoted items in the top-K list."""
        return self.promoted_mask[self.recommend_all()].sum(axis=1)

    def compute_reward(self) -> float:
        return int(self.promoted_hits().sum()) / len(self.promoted)

    def apply_trial(self, adopter: int, mf: EmbeddingMatrix) -> int:
        """Append the adopter's predicted ratings on every promoted item and
        refresh the ranker on the new rows. Returns the number appended."""
        if not 0 <= adopter < self.num_users:
            raise ValueError(f"adopter {adopter} out of range")
        rows = []
        for item in self.promoted.item_ids.tolist():
            if self.table.has(adopter, item):
                self.skipped += 1
                continue
            y_hat = float(np.clip(mf.U[adopter] @ mf.V[item], 1.0, 5.0))
            rows.append(self.table.append(adopter, item, y_hat))
            self.observed[adopter, item] = True
        self._step += 1
        if rows and self.fine_tune_steps > 0:
            seed = int(np.random.SeedSequence([self.episode_seed, self._step]).generate_state(1)[0])
            fine_tune_bpr(self.ranker, self.table, rows, self.fine_tune_steps,
                          self.fine_tune_lr, seed, observed=self.observed, inplace=True)
        return len(rows)

    def reset_episode(self, seed: int) -> None:
        for u, i in self.table.rollback():
            self.observed[u, i] = False
        self.ranker.P[...] = self._pristine.P
        self.ranker.Q[...] = self._pristine.Q
        self.ranker.trained_on_rows = self._pristine.trained_on_rows
        self.skipped = 0
        self._step = 0
        self.episode_seed = seed
        self.candidates = self.build_candidates(seed)

    @property
    def pristine_ranker(self) -> BprModel:
        return self._pristine.copy()


class EpisodeLog:
    """CSV sink for per-step environment records."""

    HEADER = ("episode", "step", "adopter_id", "reward", "appended", "skipped")

    def __init__(self, path):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.HEADER)

    def write(self, episode, step, adopter, reward, appended, skipped) -> None:
        self._writer.writerow((episode, step, adopter, repr(float(reward)), appended, skipped))

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
