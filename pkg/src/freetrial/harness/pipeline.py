"""Builds every pipeline component from a Config, caching models on disk.

Checkpoints live in the run directory next to a ``.key`` file holding a
fingerprint of the settings that produced them; a mismatch triggers a
rebuild, so editing the config never silently reuses stale models.
"""

from __future__ import annotations

import hashlib
import json
import logging
from functools import cached_property
from pathlib import Path

import numpy as np

from ..action_tree import ClusterTree, build_tree
from ..agent import Agent, PolicySet, TrainConfig, filter_mask
from ..dataset import (PromotedSet, RatingsTable, build_promoted_set, k_core_filter,
                       load_ratings, save_table)
from ..environment import Environment
from ..factorization import BprModel, EmbeddingMatrix, train_bpr, train_mf
from ..state_tracker import RewardEncoding, SruParams
from .config import Config

log = logging.getLogger(__name__)


def fingerprint(cfg: Config, *sections: str) -> str:
    payload = json.dumps({s: cfg.section(s) for s in sections}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


class Workspace:
    def __init__(self, cfg: Config, run_dir=None):
        self.cfg = cfg
        self.run_dir = Path(run_dir if run_dir is not None else cfg.get("run", "dir"))
        self.run_dir.mkdir(parents=True, exist_ok=True)

    # -- data ---------------------------------------------------------------

    @cached_property
    def ratings(self) -> RatingsTable:
        c = self.cfg
        table = load_ratings(c.get("data", "path"), c.get("data", "format"))
        mu, mi = c.int("data", "min_user_interactions"), c.int("data", "min_item_interactions")
        if mu > 1 or mi > 1:
            table = k_core_filter(table, mu, mi)
        return table

    @cached_property
    def split(self) -> tuple[RatingsTable, RatingsTable]:
        from ..dataset import split_train_test
        return split_train_test(self.ratings, self.cfg.float("data", "test_fraction"),
                                self.cfg.int("data", "split_seed"))

    @property
    def train_table(self) -> RatingsTable:
        return self.split[0]

    @property
    def test_table(self) -> RatingsTable:
        return self.split[1]

    @cached_property
    def _promotion(self) -> tuple[PromotedSet, RatingsTable]:
        c = self.cfg
        return build_promoted_set(self.train_table, c.float("data", "top_fraction"),
                                  c.float("data", "retained_fraction"),
                                  c.int("data", "promoted_seed"))

    @property
    def promoted(self) -> PromotedSet:
        return self._promotion[0]

    @property
    def low_table(self) -> RatingsTable:
        """Training table with promoted items thinned out; the environment's D."""
        return self._promotion[1]

    def write_prepared(self) -> Path:
        out = self.run_dir / "data"
        out.mkdir(exist_ok=True)
        seed = self.cfg.int("data", "split_seed")
        save_table(self.train_table, out / "train.csv", seed=seed)
        save_table(self.test_table, out / "test.csv", seed=seed)
        save_table(self.low_table, out / "low_exposure.csv",
                   seed=self.cfg.int("data", "promoted_seed"))
        (out / "promoted.json").write_text(json.dumps(
            {"item_ids": self.promoted.item_ids.tolist(),
             "item_labels": self.ratings.item_labels[self.promoted.item_ids].tolist()}) + "\n")
        return out

    # -- models -------------------------------------------------------------

    def _cached(self, name: str, key: str, build, load):
        path = self.run_dir / f"{name}.bin"
        key_path = self.run_dir / f"{name}.key"
        if path.exists() and key_path.exists() and key_path.read_text().strip() == key:
            return load(path)
        log.info("building %s", name)
        obj = build()
        obj.save(path)
        key_path.write_text(key + "\n")
        return obj

    @cached_property
    def mf(self) -> EmbeddingMatrix:
        c = self.cfg
        return self._cached(
            "mf", fingerprint(c, "data", "mf"),
            lambda: train_mf(self.train_table, d_a=c.int("mf", "d_a"),
                             epochs=c.int("mf", "epochs"), lr=c.float("mf", "lr"),
                             reg=c.float("mf", "reg"), seed=c.int("mf", "seed")),
            EmbeddingMatrix.load)

    @cached_property
    def bpr(self) -> BprModel:
        c = self.cfg
        return self._cached(
            "bpr", fingerprint(c, "data", "bpr"),
            lambda: train_bpr(self.low_table, d_b=c.int("bpr", "d_b"),
                              epochs=c.int("bpr", "epochs"), lr=c.float("bpr", "lr"),
                              reg=c.float("bpr", "reg"), seed=c.int("bpr", "seed")),
            BprModel.load)

    def build_tree(self) -> ClusterTree:
        tree = build_tree(self.mf.U, self.cfg.int("tree", "depth"), self.cfg.int("tree", "seed"))
        tree.save(self.run_dir / "tree.bin")
        return tree

    @property
    def tree(self) -> ClusterTree:
        return build_tree(self.mf.U, self.cfg.int("tree", "depth"), self.cfg.int("tree", "seed"))

    @property
    def encoding(self) -> RewardEncoding:
        c = self.cfg
        r_max = c.optional_float("state", "r_max")
        return RewardEncoding(c.int("state", "h"), c.float("state", "r_min"),
                              float(self.ratings.num_users) if r_max is None else r_max)

    @property
    def sru(self) -> SruParams:
        return SruParams.random(self.mf.d_a + self.encoding.h, self.cfg.int("state", "sru_seed"))

    def policies(self, tree: ClusterTree) -> PolicySet:
        return PolicySet.random(tree, self.mf.d_a + self.encoding.h,
                                self.cfg.int("agent", "policy_seed"),
                                self.cfg.get("agent", "activation"))

    def environment(self) -> Environment:
        c = self.cfg
        return Environment(self.low_table.copy(), self.bpr, self.promoted,
                           k=c.int("env", "k"),
                           candidate_fraction=c.float("env", "candidate_fraction"),
                           fine_tune_steps=c.int("env", "fine_tune_steps"),
                           fine_tune_lr=c.optional_float("env", "fine_tune_lr"),
                           seed=c.int("harness", "eval_seed"))

    @property
    def train_config(self) -> TrainConfig:
        c = self.cfg
        return TrainConfig(n=c.optional_int("agent", "n"), gamma=c.float("agent", "gamma"),
                           eta=c.float("agent", "eta"), episodes=c.int("agent", "episodes"),
                           filter_threshold=c.optional_float("agent", "filter_threshold"),
                           filter_mode=c.get("agent", "filter_mode"),
                           max_retries=c.int("agent", "max_retries"),
                           optimizer=c.get("agent", "optimizer"),
                           baseline=c.get("agent", "baseline"), seed=c.int("agent", "seed"))

    @property
    def passes(self) -> np.ndarray:
        tc = self.train_config
        return filter_mask(self.mf, self.promoted, tc.filter_threshold, tc.filter_mode)

    def agent(self, tree: ClusterTree, policies: PolicySet) -> Agent:
        return Agent(tree, policies, self.sru, self.mf, self.promoted, self.encoding,
                     self.train_config)
