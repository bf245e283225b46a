import math

import numpy as np
import pytest

from freetrial.action_tree import (build_tree, leaf_probabilities, masked_probs, sample_path,
                                   set_available)
from freetrial.agent import (Adam, Agent, EpisodeTrace, NodePolicy, PolicySet, Step, StepBaseline,
                             TrainConfig, compute_returns, filter_mask, filter_user,
                             level_offsets, policy_forward, policy_gradients, reinforce_update, select_adopter,
                             train)
from freetrial.dataset import PromotedSet
from freetrial.errors import FilterRetriesExhausted
from freetrial.factorization import EmbeddingMatrix
from freetrial.state_tracker import RewardEncoding

from conftest import BanditEnv, bandit_setup, requires_ml100k


def masked_log_prob(W, b, s, mask, choice, activation):
    z = W.T @ s + b
    a = np.tanh(z) if activation == "tanh" else np.where(z > 0, z, np.expm1(np.minimum(z, 0)))
    e = np.exp(a - a.max()) * mask
    return math.log(e[choice] / e.sum())


class TestPolicyForward:
    def test_tanh_example(self):
        p = NodePolicy(np.array([[1.0, 0.0]]), np.array([0.0, 0.0]), "tanh")
        probs = policy_forward(p, np.array([10.0]))
        assert probs[0] == pytest.approx(math.exp(1) / (math.exp(1) + 1), abs=1e-4)
        p = NodePolicy(np.array([[2.0, -2.0]]), np.zeros(2), "tanh")
        assert policy_forward(p, np.array([10.0]))[0] == pytest.approx(0.8808, abs=1e-4)

    def test_zero_state_uniform(self):
        for act in ("elu", "tanh"):
            p = NodePolicy(np.ones((3, 4)), np.zeros(4), act)
            np.testing.assert_allclose(policy_forward(p, np.zeros(3)), 0.25)

    def test_elu_is_unbounded_above(self):
        p = NodePolicy(np.array([[1.0, 0.0]]), np.zeros(2), "elu")
        assert policy_forward(p, np.array([10.0]))[0] > 0.9999

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            NodePolicy(np.zeros((1, 2)), np.zeros(2), "relu6")


class TestGradients:
    @pytest.mark.parametrize("activation", ["elu", "tanh"])
    def test_finite_differences(self, activation):
        rng = np.random.default_rng(0)
        eps = 1e-6
        for _ in range(25):
            d, c = int(rng.integers(1, 5)), int(rng.integers(2, 6))
            W, b, s = rng.normal(size=(d, c)), rng.normal(size=c), rng.normal(size=d)
            mask = rng.random(c) < 0.7
            mask[rng.integers(c)] = True
            choice = int(rng.choice(np.flatnonzero(mask)))
            dW, db = NodePolicy(W, b, activation).log_prob_grad(s, mask, choice)
            num_W, num_b = np.zeros_like(W), np.zeros_like(b)
            for idx in np.ndindex(W.shape):
                E = np.zeros_like(W)
                E[idx] = eps
                num_W[idx] = (masked_log_prob(W + E, b, s, mask, choice, activation)
                              - masked_log_prob(W - E, b, s, mask, choice, activation)) / (2 * eps)
            for k in range(c):
                e = np.zeros_like(b)
                e[k] = eps
                num_b[k] = (masked_log_prob(W, b + e, s, mask, choice, activation)
                            - masked_log_prob(W, b - e, s, mask, choice, activation)) / (2 * eps)
            scale = max(np.abs(num_W).max(), np.abs(num_b).max(), 1e-8)
            assert np.abs(dW - num_W).max() / scale < 1e-4
            assert np.abs(db - num_b).max() / scale < 1e-4

    def test_only_visited_nodes_move(self):
        tree, pols, *_ = bandit_setup()
        s = np.ones(4)
        path, lp = sample_path(tree, pols, s, np.random.default_rng(0))
        trace = EpisodeTrace([Step(s, path, lp, path.user, 1.0)])
        before = pols.copy()
        reinforce_update(pols, tree, trace, TrainConfig(eta=0.1))
        touched = {int(tree.policy_id[n]) for n in path.nodes}
        for pid, (a, b) in enumerate(zip(before, pols)):
            assert np.array_equal(a.W, b.W) == (pid not in touched)

    def test_eta_zero_leaves_policy(self):
        tree, pols, *_ = bandit_setup()
        s = np.ones(4)
        path, lp = sample_path(tree, pols, s, np.random.default_rng(0))
        before = pols.copy()
        reinforce_update(pols, tree, EpisodeTrace([Step(s, path, lp, path.user, 2.0)]),
                         TrainConfig(eta=0.0))
        assert all(np.array_equal(a.W, b.W) for a, b in zip(before, pols))

    def test_gradient_sums_match_manual(self):
        tree, pols, *_ = bandit_setup()
        rng = np.random.default_rng(2)
        steps = []
        for t in range(3):
            s = rng.normal(size=4)
            path, lp = sample_path(tree, pols, s, rng)
            set_available(tree, path.user, False)
            steps.append(Step(s, path, lp, path.user, float(t)))
        trace = EpisodeTrace(steps)
        grads = policy_gradients(pols, tree, trace, [1.0, 2.0, 3.0])
        root = int(tree.policy_id[tree.root])
        manual = sum(w * pols[root].log_prob_grad(st.state, st.path.masks[0], st.path.choices[0])[1]
                     for w, st in zip([1.0, 2.0, 3.0], steps))
        np.testing.assert_allclose(grads[root][1], manual, atol=1e-12)


class TestReturns:
    def test_examples(self):
        assert compute_returns([1, 1, 1], 0.9) == pytest.approx([2.71, 1.9, 1.0])
        assert compute_returns([0, 0, 5], 1.0) == [5, 5, 5]
        assert compute_returns([3, 4], 0.0) == [3, 4]
        assert compute_returns([], 0.9) == []

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            r = rng.normal(size=int(rng.integers(1, 20))).tolist()
            g = float(rng.random())
            direct = [sum(g ** (k - t) * r[k] for k in range(t, len(r))) for t in range(len(r))]
            np.testing.assert_allclose(compute_returns(r, g), direct, atol=1e-9)

    def test_step_baseline(self):
        b = StepBaseline(decay=0.5)
        assert b.advantages([4.0, 2.0]).tolist() == [0.0, 0.0]
        assert b.advantages([6.0, 2.0, 1.0]).tolist() == [2.0, 0.0, 0.0]
        assert b.values == [5.0, 2.0, 1.0]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(gamma=1.5)
        with pytest.raises(ValueError):
            TrainConfig(n=0)
        assert TrainConfig().episode_length(943) == 48


class TestFilter:
    def setup_method(self):
        self.mf = EmbeddingMatrix(np.array([[2.0], [1.0], [1.9]]), np.array([[2.0], [1.5]]))
        self.promoted = PromotedSet(np.array([0, 1]), 0.05)

    def test_mean_rule(self):
        # predictions: user0 (4, 3) mean 3.5, user1 (2, 1.5), user2 (3.8, 2.85)
        assert filter_mask(self.mf, self.promoted, 3.5).tolist() == [False, False, False]
        assert filter_mask(self.mf, self.promoted, 3.2).tolist() == [True, False, True]
        assert filter_user(self.mf, 0, self.promoted, 3.4)

    def test_all_rule_and_disabled(self):
        assert filter_mask(self.mf, self.promoted, 2.9, "all").tolist() == [True, False, False]
        assert filter_mask(self.mf, self.promoted, None).all()
        assert filter_user(self.mf, 0, self.promoted, 2.9, "all")

    def test_rejections_consume_users(self):
        tree, pols, *_ = bandit_setup()
        passes = np.array([False, False, False, True])
        user, path, lp, rej = select_adopter(tree, pols, passes, np.zeros(4),
                                             np.random.default_rng(0))
        assert user == 3 and path.user == 3
        assert tree.avail[tree.root] == 4 - 1 - rej

    def test_retries_exhausted(self):
        tree, pols, *_ = bandit_setup()
        with pytest.raises(FilterRetriesExhausted):
            select_adopter(tree, pols, np.zeros(4, bool), np.zeros(4),
                           np.random.default_rng(0), max_retries=1)


class TestTraining:
    def test_bandit_learns(self):
        tree, pols, sru, mf, promoted = bandit_setup()
        cfg = TrainConfig(n=1, eta=0.5, episodes=200, filter_threshold=None, seed=1)
        pols, _ = train(BanditEnv(2), tree, pols, sru, mf, cfg, promoted=promoted)
        agent = Agent(tree, pols, sru, mf, promoted,
                      RewardEncoding(2, 0.0, 4.0), cfg)
        tree.reset_availability()
        probs = leaf_probabilities(tree, pols, agent.initial_state().h_out)
        assert probs[2] > 0.9

    def test_adam_bandit_learns(self):
        tree, pols, sru, mf, promoted = bandit_setup(seed=3)
        cfg = TrainConfig(n=1, eta=0.05, episodes=200, filter_threshold=None, optimizer="adam")
        pols, _ = train(BanditEnv(0), tree, pols, sru, mf, cfg, promoted=promoted)
        tree.reset_availability()
        agent = Agent(tree, pols, sru, mf, promoted, RewardEncoding(2, 0.0, 4.0), cfg)
        assert leaf_probabilities(tree, pols, agent.initial_state().h_out)[0] > 0.9

    def test_logs_and_determinism(self, tmp_path):
        outs = []
        for run in range(2):
            tree, pols, sru, mf, promoted = bandit_setup()
            cfg = TrainConfig(n=3, eta=0.1, episodes=5, filter_threshold=None, seed=4)
            train(BanditEnv(1), tree, pols, sru, mf, cfg, promoted=promoted,
                  log_dir=tmp_path / str(run))
            outs.append(((tmp_path / str(run) / "train_steps.csv").read_bytes(),
                         (tmp_path / str(run) / "train_episodes.csv").read_bytes()))
        assert outs[0] == outs[1]
        lines = outs[0][1].decode().splitlines()
        assert lines[0].startswith("episode,steps,avg_reward") and len(lines) == 6

    def test_truncates_when_users_run_out(self):
        tree, pols, sru, mf, promoted = bandit_setup()
        cfg = TrainConfig(n=6, eta=0.1, episodes=1, filter_threshold=None)
        _, log = train(BanditEnv(0), tree, pols, sru, mf, cfg, promoted=promoted)
        assert log.episodes[0]["steps"] == 4 and log.episodes[0]["truncated"]

    def test_policy_roundtrip(self, tmp_path):
        tree, pols, *_ = bandit_setup(activation="tanh")
        pols.save(tmp_path / "p.bin", tree, 4)
        tree2, back = PolicySet.load(tmp_path / "p.bin")
        assert back[0].activation == "tanh"
        assert all(np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b) for a, b in zip(pols, back))
        assert np.array_equal(tree2.leaf_of_user, tree.leaf_of_user)

    def test_adam_step_size(self):
        opt = Adam(0.1)
        p = np.zeros(3)
        opt.ascent("k", p, np.array([1.0, -2.0, 0.0]))
        np.testing.assert_allclose(p, [0.1, -0.1, 0.0], atol=1e-6)


class TestSpecExamples:
    def test_filter_boundary(self):
        promoted = PromotedSet(np.array([0, 1]), 0.05)
        V = np.ones((2, 1))
        assert filter_user(EmbeddingMatrix(np.full((1, 1), 5.0), V), 0, promoted)
        assert not filter_user(EmbeddingMatrix(np.full((1, 1), 1.0), V), 0, promoted)
        assert not filter_user(EmbeddingMatrix(np.full((1, 1), 3.5), V), 0, promoted)
        assert not filter_mask(EmbeddingMatrix(np.full((1, 1), 3.5), V), promoted, 3.5)[0]

    def test_returns_examples(self):
        assert compute_returns([1, 2], 0.9) == pytest.approx([2.8, 2.0])
        assert compute_returns([1] * 5, 1.0) == [5, 4, 3, 2, 1]
        r = [0.3, -1.0, 2.5, 0.0]
        q = compute_returns(r, 0.7)
        assert all(q[t] == r[t] + 0.7 * q[t + 1] for t in range(3))

    def test_zero_returns_leave_policy(self):
        tree, pols, *_ = bandit_setup()
        s = np.ones(4)
        path, lp = sample_path(tree, pols, s, np.random.default_rng(0))
        before = pols.copy()
        reinforce_update(pols, tree, EpisodeTrace([Step(s, path, lp, path.user, 0.0)]),
                         TrainConfig(eta=1.0))
        assert all(np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)
                   for a, b in zip(before, pols))


class OneShotEnv:
    def reset_episode(self, seed):
        self.n = 0

    def apply_trial(self, adopter, mf):
        self.n += 1
        return 1

    def compute_reward(self):
        return float(self.n % 3)


def test_trace_invariants():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(40, 3))
    tree = build_tree(emb, 2)
    mf = EmbeddingMatrix(emb, rng.normal(size=(4, 3)))
    promoted = PromotedSet(np.array([0, 1]), 0.05)
    cfg = TrainConfig(n=10, eta=0.05, filter_threshold=1.2, optimizer="adam")
    from freetrial.state_tracker import SruParams
    pols = PolicySet.random(tree, 3 + 4, 1)
    agent = Agent(tree, pols, SruParams.random(7, 2), mf, promoted, RewardEncoding(4, 0, 3), cfg)
    env = OneShotEnv()
    for ep in range(5):
        trace = agent.run_episode(env, ep, np.random.default_rng(ep))
        adopters = [st.adopter for st in trace.steps]
        assert len(set(adopters)) == len(adopters)
        assert all(agent.passes[a] for a in adopters)
        for st in trace.steps:
            # recompute the path log-probability from the stored choices
            recomputed = 0.0
            for node, mask, choice in zip(st.path.nodes, st.path.masks, st.path.choices):
                p = masked_probs(pols[tree.policy_id[node]].forward(st.state), mask)
                recomputed += math.log(p[choice])
            assert st.log_prob == pytest.approx(recomputed, abs=1e-12)
        agent.update(trace)


@requires_ml100k
def test_ml100k_filter_fraction(ml100k):
    from freetrial.dataset import build_promoted_set, split_train_test
    from freetrial.factorization import predict_rating, train_mf
    train_tab, _ = split_train_test(ml100k, 0.2, 7)
    mf = train_mf(train_tab, epochs=10, seed=1)
    promoted, _ = build_promoted_set(train_tab, 0.01, 0.05, 3)
    mask = filter_mask(mf, promoted, 3.5)
    scan = [sum(predict_rating(mf, u, int(p)) for p in promoted.item_ids) / len(promoted) > 3.5
            for u in range(ml100k.num_users)]
    assert mask.tolist() == scan
    assert 0.0 < mask.mean() < 1.0


class TestLevelBaseline:
    def test_offsets(self):
        assert level_offsets([1.0, 2.0, 3.0], 0.5) == pytest.approx([0.0, 1.5, 2.0])

    def test_constant_level_gives_zero_residual(self):
        # rewards that never change after step 0 leave no credit for later steps
        r = [2.0] * 5
        resid = np.asarray(compute_returns(r, 0.9)) - level_offsets(r, 0.9)
        assert resid[1:] == pytest.approx(np.zeros(4))

    def test_bandit_learns(self):
        tree, pols, sru, mf, promoted = bandit_setup()
        cfg = TrainConfig(n=1, eta=0.05, episodes=200, optimizer="adam", baseline="level",
                          filter_threshold=None)
        pols, _ = train(BanditEnv(3), tree, pols, sru, mf, cfg, promoted=promoted)
        tree.reset_availability()
        agent = Agent(tree, pols, sru, mf, promoted, RewardEncoding(2, 0.0, 4.0), cfg)
        assert leaf_probabilities(tree, pols, agent.initial_state().h_out)[3] > 0.9
