from pathlib import Path

import numpy as np
import pytest

from freetrial.dataset import RatingsTable, load_ratings

ROOT = Path(__file__).resolve().parents[1]
ML100K = ROOT / "data" / "ml-100k" / "u.data"

requires_ml100k = pytest.mark.skipif(not ML100K.exists(),
                                     reason="ML-100K not present; run scripts/fetch_ml100k.py")


@pytest.fixture(scope="session")
def ml100k():
    if not ML100K.exists():
        pytest.skip("ML-100K not present; run scripts/fetch_ml100k.py")
    return load_ratings(ML100K, "tab_100k")


def random_table(rng, num_users=20, num_items=30, density=0.3) -> RatingsTable:
    mask = rng.random((num_users, num_items)) < density
    mask[np.arange(num_users), rng.integers(0, num_items, num_users)] = True
    users, items = np.nonzero(mask)
    ratings = rng.integers(1, 6, size=users.size).astype(float)
    return RatingsTable(users, items, ratings, num_users=num_users, num_items=num_items)


class BanditEnv:
    """Stub environment: reward 1 when the chosen adopter is ``target``."""

    def __init__(self, target: int):
        self.target = target
        self.last = None

    def reset_episode(self, seed):
        self.last = None

    def apply_trial(self, adopter, mf):
        self.last = adopter
        return 1

    def compute_reward(self):
        return 1.0 if self.last == self.target else 0.0


def bandit_setup(activation="elu", d_a=2, h=2, seed=0):
    """Four users on a binary depth-2 tree, a matching frozen SRU and promoted set."""
    from freetrial.action_tree import build_tree
    from freetrial.agent import PolicySet
    from freetrial.dataset import PromotedSet
    from freetrial.factorization import EmbeddingMatrix
    from freetrial.state_tracker import SruParams

    rng = np.random.default_rng(seed)
    mf = EmbeddingMatrix(np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 1.0], [5.1, 1.0]])[:, :d_a],
                         rng.normal(size=(3, d_a)))
    tree = build_tree(mf.U, 2, seed=seed)
    sru = SruParams.random(d_a + h, seed)
    policies = PolicySet.random(tree, d_a + h, seed, activation)
    return tree, policies, sru, mf, PromotedSet(np.array([0]), 0.05)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
