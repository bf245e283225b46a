"""State tracking: reward one-hot encoding and a single SRU cell.

The SRU weights are randomly initialised once and then frozen; the cell
only turns the (user embedding, reward bucket) history into a state vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .binio import load_checkpoint, save_checkpoint
from .errors import DivergenceError

INIT_SCALE = 0.05


@dataclass(frozen=True)
class RewardEncoding:
    h: int = 10
    r_min: float = 0.0
    r_max: float = 1.0

    def __post_init__(self):
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if not self.r_max > self.r_min:
            raise ValueError("r_max must exceed r_min")


def reward_bucket(enc: RewardEncoding, r: float) -> int:
    """1-based bucket index of reward ``r``, clamped to [1, h]."""
    r = min(max(r, enc.r_min), enc.r_max)
    idx = enc.h - math.floor(enc.h * (enc.r_max - r) / (enc.r_max - enc.r_min))
    return min(max(idx, 1), enc.h)


def encode_reward(enc: RewardEncoding, r: float) -> np.ndarray:
    out = np.zeros(enc.h)
    out[reward_bucket(enc, r) - 1] = 1.0
    return out


def make_input(user_emb: np.ndarray, reward_onehot: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(user_emb, dtype=np.float64),
                           np.asarray(reward_onehot, dtype=np.float64)])


@dataclass
class SruParams:
    W: np.ndarray
    W_f: np.ndarray
    W_g: np.ndarray
    b_f: np.ndarray
    b_g: np.ndarray

    @property
    def d_s(self) -> int:
        return self.W.shape[0]

    @classmethod
    def random(cls, d_s: int, seed: int) -> "SruParams":
        rng = np.random.default_rng(seed)
        mats = [rng.uniform(-INIT_SCALE, INIT_SCALE, size=(d_s, d_s)) for _ in range(3)]
        vecs = [rng.uniform(-INIT_SCALE, INIT_SCALE, size=d_s) for _ in range(2)]
        return cls(*mats, *vecs)

    @classmethod
    def zeros(cls, d_s: int) -> "SruParams":
        return cls(*(np.zeros((d_s, d_s)) for _ in range(3)), np.zeros(d_s), np.zeros(d_s))

    def save(self, path) -> None:
        save_checkpoint(path, {"kind": "sru", "d_s": self.d_s},
                        {"W": self.W, "W_f": self.W_f, "W_g": self.W_g,
                         "b_f": self.b_f, "b_g": self.b_g})

    @classmethod
    def load(cls, path) -> "SruParams":
        meta, a = load_checkpoint(path)
        if meta.get("kind") != "sru":
            raise ValueError(f"{path} is not an SRU checkpoint")
        return cls(a["W"], a["W_f"], a["W_g"], a["b_f"], a["b_g"])


@dataclass
class SruState:
    c: np.ndarray
    h_out: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sru_step(params: SruParams, state: SruState, x: np.ndarray) -> SruState:
    if x.shape != (params.d_s,) or state.c.shape != (params.d_s,):
        raise ValueError(f"SRU expects vectors of length {params.d_s}")
    x_tilde = params.W @ x
    f = _sigmoid(params.W_f @ x + params.b_f)
    g = _sigmoid(params.W_g @ x + params.b_g)
    c = f * state.c + (1.0 - f) * x_tilde
    h = g * np.tanh(c) + (1.0 - g) * x
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(h))):
        raise DivergenceError("SRU produced a non-finite state")
    return SruState(c, h)


def init_state(item_embs, d_s: int | None = None) -> SruState:
    """Mean of the promoted item vectors, zero-padded to ``d_s``."""
    embs = np.atleast_2d(np.asarray(item_embs, dtype=np.float64))
    if embs.shape[0] == 0:
        raise ValueError("init_state needs at least one item vector")
    mean = embs.mean(axis=0)
    d_s = mean.size if d_s is None else d_s
    if d_s < mean.size:
        raise ValueError("d_s smaller than the item embedding size")
    h = np.zeros(d_s)
    h[:mean.size] = mean
    return SruState(np.zeros(d_s), h)
