"""Tree-structured REINFORCE agent.

Every internal tree node holds a one-layer softmax policy over its
children. An episode walks the tree n times (without repeating users),
feeds each accepted adopter to the environment, and afterwards every node
on every walked path is nudged along grad log pi * discounted return.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .action_tree import ClusterTree, Path, masked_probs, sample_path, set_available
from .dataset import PromotedSet
from .errors import ActionSpaceExhausted, DivergenceError, FilterRetriesExhausted
from .factorization import EmbeddingMatrix
from .state_tracker import (RewardEncoding, SruParams, SruState, encode_reward, init_state,
                            make_input, sru_step)

log = logging.getLogger(__name__)

ACTIVATIONS = ("elu", "tanh")
POLICY_INIT_SCALE = 0.05


def _activate(name: str, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activation value and its derivative."""
    if name == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    if name == "elu":
        ez = np.exp(np.minimum(z, 0.0))
        return np.where(z > 0, z, ez - 1.0), np.where(z > 0, 1.0, ez)
    raise ValueError(f"unknown activation {name!r}")


def softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


class NodePolicy:
    """softmax(act(W^T s + b)) over one node's children."""

    def __init__(self, W: np.ndarray, b: np.ndarray, activation: str = "elu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.W = W
        self.b = b
        self.activation = activation

    @property
    def num_children(self) -> int:
        return self.b.size

    def forward(self, s: np.ndarray) -> np.ndarray:
        a, _ = _activate(self.activation, self.W.T @ s + self.b)
        return softmax(a)

    def log_prob_grad(self, s: np.ndarray, mask: np.ndarray, choice: int):
        """Gradient of log p(choice) under the masked, renormalised softmax.

        Returns (dW, db) with the shapes of (W, b).
        """
        a, da = _activate(self.activation, self.W.T @ s + self.b)
        p = masked_probs(softmax(a), mask)
        delta = -p
        delta[choice] += 1.0
        db = delta * da
        return np.outer(s, db), db


def policy_forward(p: NodePolicy, s: np.ndarray) -> np.ndarray:
    return p.forward(s)


class PolicySet(list):
    """Node policies indexed by the tree's policy ids."""

    @classmethod
    def random(cls, tree: ClusterTree, d_s: int, seed: int,
               activation: str = "elu") -> "PolicySet":
        rng = np.random.default_rng(seed)
        out = cls()
        for c_j in tree.child_counts().tolist():
            out.append(NodePolicy(rng.uniform(-POLICY_INIT_SCALE, POLICY_INIT_SCALE, (d_s, c_j)),
                                  rng.uniform(-POLICY_INIT_SCALE, POLICY_INIT_SCALE, c_j),
                                  activation))
        return out

    def copy(self) -> "PolicySet":
        return PolicySet(NodePolicy(p.W.copy(), p.b.copy(), p.activation) for p in self)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"policy_W": np.concatenate([p.W.ravel() for p in self]),
                "policy_b": np.concatenate([p.b for p in self])}

    @classmethod
    def from_arrays(cls, tree: ClusterTree, d_s: int, arrays: dict,
                    activation: str) -> "PolicySet":
        out = cls()
        w_off = b_off = 0
        for c_j in tree.child_counts().tolist():
            W = arrays["policy_W"][w_off:w_off + d_s * c_j].reshape(d_s, c_j).copy()
            b = arrays["policy_b"][b_off:b_off + c_j].copy()
            out.append(NodePolicy(W, b, activation))
            w_off += d_s * c_j
            b_off += c_j
        return out

    def save(self, path, tree: ClusterTree, d_s: int) -> None:
        tree.save(path, extra_arrays=self.to_arrays(),
                  extra_meta={"d_s": d_s, "activation": self[0].activation if self else "elu"})

    @staticmethod
    def load(path) -> tuple[ClusterTree, "PolicySet"]:
        tree, meta, arrays = ClusterTree.load(path)
        return tree, PolicySet.from_arrays(tree, meta["d_s"], arrays, meta["activation"])


# ---------------------------------------------------------------------------
# User filter

def filter_scores(mf: EmbeddingMatrix, promoted: PromotedSet) -> np.ndarray:
    """Predicted ratings of every user on every promoted item, (|U|, |I_p|)."""
    raw = mf.U @ mf.V[promoted.item_ids].T
    return np.clip(raw, 1.0, 5.0)


def filter_mask(mf: EmbeddingMatrix, promoted: PromotedSet, threshold: float | None,
                mode: str = "mean") -> np.ndarray:
    """Users admitted by the filter. ``threshold=None`` admits everyone."""
    if threshold is None:
        return np.ones(mf.U.shape[0], dtype=np.bool_)
    scores = filter_scores(mf, promoted)
    if mode == "mean":
        return scores.mean(axis=1) > threshold
    if mode == "all":
        return np.all(scores > threshold, axis=1)
    raise ValueError(f"unknown filter mode {mode!r}")


def filter_user(mf: EmbeddingMatrix, user: int, promoted: PromotedSet,
                threshold: float = 3.5, mode: str = "mean") -> bool:
    preds = [min(5.0, max(1.0, float(mf.U[user] @ mf.V[p]))) for p in promoted.item_ids]
    if mode == "all":
        return all(y > threshold for y in preds)
    return sum(preds) / len(preds) > threshold


def select_adopter(tree: ClusterTree, policies, passes: np.ndarray, s: np.ndarray,
                   rng: np.random.Generator, max_retries: int = 50):
    """Sample users until one passes the filter.

    Every sampled user, accepted or not, is made unavailable. Returns
    ``(user, path, log_prob, rejections)``.
    """
    rejections = 0
    while True:
        path, log_prob = sample_path(tree, policies, s, rng)
        set_available(tree, path.user, False)
        if passes[path.user]:
            return path.user, path, log_prob, rejections
        rejections += 1
        if rejections > max_retries:
            raise FilterRetriesExhausted(f"filter rejected {rejections} users in a row")


# ---------------------------------------------------------------------------
# REINFORCE

@dataclass
class TrainConfig:
    n: int | None = None
    gamma: float = 0.9
    eta: float = 0.001
    episodes: int = 500
    filter_threshold: float | None = 3.5
    filter_mode: str = "mean"
    max_retries: int = 50
    optimizer: str = "sgd"
    baseline: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.n is not None and self.n < 1:
            raise ValueError("episode length n must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def episode_length(self, num_users: int) -> int:
        return self.n if self.n is not None else math.ceil(0.05 * num_users - 1e-9)


@dataclass
class Step:
    state: np.ndarray
    path: Path
    log_prob: float
    adopter: int
    reward: float


@dataclass
class EpisodeTrace:
    steps: list[Step] = field(default_factory=list)
    rejections: int = 0
    error: str | None = None

    @property
    def rewards(self) -> list[float]:
        return [st.reward for st in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


def compute_returns(rewards, gamma: float) -> list[float]:
    out = [0.0] * len(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {}

    def ascent(self, key, param: np.ndarray, grad: np.ndarray) -> None:
        m, v, t = self.state.get(key, (np.zeros_like(param), np.zeros_like(param), 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.state[key] = (m, v, t)
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        param += self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class StepBaseline:
    """Running mean of the return observed at each step index across episodes."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.values: list[float] = []

    def advantages(self, returns) -> np.ndarray:
        out = np.empty(len(returns))
        for t, q in enumerate(returns):
            if t < len(self.values):
                out[t] = q - self.values[t]
                self.values[t] = self.decay * self.values[t] + (1 - self.decay) * q
            else:
                out[t] = 0.0
                self.values.append(float(q))
        return out


def level_offsets(rewards, gamma: float) -> np.ndarray:
    """r_{t-1} * sum_{k<T-t} gamma^k: the return if step t added nothing.

    r_{t-1} is fixed by earlier actions, so subtracting it keeps the
    gradient unbiased while removing the reward level built up so far.
    """
    T = len(rewards)
    prev = np.concatenate(([0.0], np.asarray(rewards, dtype=np.float64)[:-1]))
    horizon = np.array([sum(gamma ** k for k in range(T - t)) for t in range(T)])
    return prev * horizon


def policy_gradients(policies, tree: ClusterTree, trace: EpisodeTrace, weights) -> dict:
    """Sum over steps of weight_t * grad log pi(path_t | s_t), per policy id."""
    grads: dict[int, list[np.ndarray]] = {}
    for st, w in zip(trace.steps, weights):
        if w == 0.0:
            continue
        for node, mask, choice in zip(st.path.nodes, st.path.masks, st.path.choices):
            pid = int(tree.policy_id[node])
            dW, db = policies[pid].log_prob_grad(st.state, mask, choice)
            if pid in grads:
                grads[pid][0] += w * dW
                grads[pid][1] += w * db
            else:
                grads[pid] = [w * dW, w * db]
    return grads


def reinforce_update(policies, tree: ClusterTree, trace: EpisodeTrace, cfg: TrainConfig,
                     optimizer: Adam | None = None,
                     step_baseline: StepBaseline | None = None) -> list[float]:
    """Apply theta += eta * sum_t Q_t * grad log pi(a_t | s_t).

    All gradients are taken at the parameters that generated the episode.
    Returns the discounted returns used as weights.
    """
    returns = compute_returns(trace.rewards, cfg.gamma)
    weights = np.asarray(returns, dtype=np.float64)
    if cfg.baseline == "mean" and weights.size:
        weights = weights - weights.mean()
    elif cfg.baseline in ("step", "level"):
        if step_baseline is None:
            raise ValueError("step baseline state required")
        if cfg.baseline == "level":
            weights = weights - level_offsets(trace.rewards, cfg.gamma)
        weights = step_baseline.advantages(weights)
    elif cfg.baseline != "none":
        raise ValueError(f"unknown baseline {cfg.baseline!r}")
    grads = policy_gradients(policies, tree, trace, weights.tolist())
    for pid, (dW, db) in sorted(grads.items()):
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise DivergenceError(f"non-finite policy gradient at node policy {pid}")
        pol = policies[pid]
        if cfg.optimizer == "adam":
            if optimizer is None:
                raise ValueError("adam optimizer state required")
            optimizer.ascent((pid, "W"), pol.W, dW)
            optimizer.ascent((pid, "b"), pol.b, db)
        elif cfg.optimizer == "sgd":
            pol.W += cfg.eta * dW
            pol.b += cfg.eta * db
        else:
            raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
        if not (np.all(np.isfinite(pol.W)) and np.all(np.isfinite(pol.b))):
            raise DivergenceError(f"policy {pid} became non-finite after update")
    return returns


# ---------------------------------------------------------------------------
# Episodes and training

def episode_seed(base_seed: int, episode: int) -> int:
    """Per-episode seed shared by the agent and the baselines."""
    return int(np.random.SeedSequence([base_seed, episode]).generate_state(1)[0])


class Agent:
    """Bundles the policy tree, frozen state tracker and user filter."""

    def __init__(self, tree: ClusterTree, policies: PolicySet, sru: SruParams,
                 mf: EmbeddingMatrix, promoted: PromotedSet, encoding: RewardEncoding,
                 cfg: TrainConfig):
        self.tree = tree
        self.policies = policies
        self.sru = sru
        self.mf = mf
        self.promoted = promoted
        self.encoding = encoding
        self.cfg = cfg
        self.passes = filter_mask(mf, promoted, cfg.filter_threshold, cfg.filter_mode)
        self.optimizer = Adam(cfg.eta) if cfg.optimizer == "adam" else None
        self.step_baseline = (StepBaseline() if cfg.baseline in ("step", "level")
                              else None)
        if sru.d_s != mf.d_a + encoding.h:
            raise ValueError("SRU width must equal d_a + h")

    def initial_state(self) -> SruState:
        return init_state(self.mf.V[self.promoted.item_ids], self.sru.d_s)

    def run_episode(self, env, seed: int, rng: np.random.Generator) -> EpisodeTrace:
        env.reset_episode(seed)
        self.tree.reset_availability()
        n = self.cfg.episode_length(self.tree.num_users)
        state = self.initial_state()
        trace = EpisodeTrace()
        for _ in range(n):
            try:
                user, path, log_prob, rejected = select_adopter(
                    self.tree, self.policies, self.passes, state.h_out, rng, self.cfg.max_retries)
            except (ActionSpaceExhausted, FilterRetriesExhausted) as exc:
                trace.error = str(exc)
                log.warning("episode truncated at step %d: %s", len(trace) + 1, exc)
                break
            trace.rejections += rejected
            env.apply_trial(user, self.mf)
            reward = env.compute_reward()
            trace.steps.append(Step(state.h_out, path, log_prob, user, reward))
            x = make_input(self.mf.U[user], encode_reward(self.encoding, reward))
            state = sru_step(self.sru, state, x)
        return trace

    def update(self, trace: EpisodeTrace) -> list[float]:
        if not trace.steps:
            return []
        return reinforce_update(self.policies, self.tree, trace, self.cfg, self.optimizer,
                                self.step_baseline)


STEP_HEADER = ("episode", "step", "adopter", "reward", "return", "log_prob")
EPISODE_HEADER = ("episode", "steps", "avg_reward", "max_reward", "running_max_reward",
                  "filter_rejections", "truncated")


@dataclass
class TrainingLog:
    episodes: list[dict] = field(default_factory=list)
    steps: list[tuple] = field(default_factory=list)

    def avg_rewards(self) -> np.ndarray:
        return np.array([e["avg_reward"] for e in self.episodes])


class _CsvSink:
    def __init__(self, path, header):
        self.fh = open(path, "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(header)

    def rows(self, rows):
        self.writer.writerows(rows)
        self.fh.flush()

    def close(self):
        self.fh.close()


def _fmt(x: float) -> str:
    return repr(float(x))


def train(env, tree: ClusterTree, policies: PolicySet, sru: SruParams, mf: EmbeddingMatrix,
          cfg: TrainConfig, promoted: PromotedSet | None = None,
          encoding: RewardEncoding | None = None, log_dir=None,
          agent: Agent | None = None) -> tuple[PolicySet, TrainingLog]:
    """Run ``cfg.episodes`` episodes of collect-then-update REINFORCE.

    With ``log_dir`` set, per-step and per-episode CSVs are written and
    flushed after every episode, so partial logs survive a failure.
    """
    promoted = promoted if promoted is not None else env.promoted
    if encoding is None:
        encoding = RewardEncoding(h=sru.d_s - mf.d_a, r_min=0.0, r_max=float(tree.num_users))
    agent = agent or Agent(tree, policies, sru, mf, promoted, encoding, cfg)
    training = TrainingLog()
    sinks = None
    if log_dir is not None:
        log_dir = FsPath(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        sinks = (_CsvSink(log_dir / "train_steps.csv", STEP_HEADER),
                 _CsvSink(log_dir / "train_episodes.csv", EPISODE_HEADER))
    running_max = -math.inf
    try:
        for ep in range(cfg.episodes):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, ep, 1]))
            trace = agent.run_episode(env, episode_seed(cfg.seed, ep), rng)
            returns = agent.update(trace)
            rewards = trace.rewards
            avg = float(np.mean(rewards)) if rewards else 0.0
            mx = float(max(rewards)) if rewards else 0.0
            running_max = max(running_max, mx)
            summary = {"episode": ep, "steps": len(trace), "avg_reward": avg, "max_reward": mx,
                       "running_max_reward": running_max, "filter_rejections": trace.rejections,
                       "truncated": trace.error is not None}
            training.episodes.append(summary)
            step_rows = [(ep, t + 1, st.adopter, _fmt(st.reward), _fmt(q), _fmt(st.log_prob))
                         for t, (st, q) in enumerate(zip(trace.steps, returns))]
            training.steps.extend(step_rows)
            if sinks:
                sinks[0].rows(step_rows)
                sinks[1].rows([(ep, len(trace), _fmt(avg), _fmt(mx), _fmt(running_max),
                                trace.rejections, int(trace.error is not None))])
            log.info("episode %d avg_reward %.3f max_reward %.3f", ep, avg, mx)
    finally:
        if sinks:
            for sink in sinks:
                sink.close()
    return agent.policies, training


def evaluate_policy(agent: Agent, env, episodes: int, base_seed: int) -> list[list[float]]:
    """Roll out the current policy without learning; per-episode reward lists."""
    out = []
    for ep in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence([base_seed, ep, 2]))
        trace = agent.run_episode(env, episode_seed(base_seed, ep), rng)
        out.append(trace.rewards)
    return out


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
