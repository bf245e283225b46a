"""Latent-factor models: rating MF (user/item embeddings, predicted ratings)
and the BPR ranker that drives the simulated recommender.

The SGD inner loops are compiled with numba. They are single-threaded and
draw all randomness from the seed they are handed, so a given seed always
yields bit-identical factors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .binio import load_checkpoint, save_checkpoint
from .dataset import RATING_MAX, RATING_MIN, RatingsTable
from .errors import DataError, DivergenceError

log = logging.getLogger(__name__)

INIT_SCALE = 0.05
MAX_ROW_NORM = 100.0


def _init_factors(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=(rows, dim))


def _check_finite(name: str, *arrays: np.ndarray, epoch=None) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            where = f" at epoch {epoch}" if epoch is not None else ""
            raise DivergenceError(f"{name} diverged{where}: non-finite factor entries")


# ---------------------------------------------------------------------------
# Rating MF

@dataclass
class EmbeddingMatrix:
    U: np.ndarray
    V: np.ndarray
    seed: int = 0
    hyper: dict = field(default_factory=dict)
    rmse_history: list = field(default_factory=list)

    @property
    def d_a(self) -> int:
        return self.U.shape[1]

    def predict(self, users, items) -> np.ndarray:
        """Vectorised :func:`predict_rating`."""
        raw = np.einsum("ij,ij->i", self.U[users], self.V[items])
        return np.clip(raw, RATING_MIN, RATING_MAX)

    def save(self, path) -> None:
        save_checkpoint(path, {"kind": "mf", "seed": self.seed, "hyper": self.hyper,
                               "rmse_history": self.rmse_history},
                        {"U": self.U, "V": self.V})

    @classmethod
    def load(cls, path) -> "EmbeddingMatrix":
        meta, arrays = load_checkpoint(path)
        if meta.get("kind") != "mf":
            raise ValueError(f"{path} is not an MF checkpoint")
        return cls(arrays["U"], arrays["V"], meta["seed"], meta["hyper"], meta["rmse_history"])


def mf_entry_gradient(u: np.ndarray, v: np.ndarray, y: float, reg: float):
    """Gradient of 0.5*(y - u.v)^2 + 0.5*reg*(|u|^2 + |v|^2) w.r.t. (u, v)."""
    err = y - u @ v
    return -err * v + reg * u, -err * u + reg * v


def mf_entry_loss(u, v, y, reg) -> float:
    return 0.5 * (y - u @ v) ** 2 + 0.5 * reg * (u @ u + v @ v)


@numba.njit(cache=True)
def _mf_epoch(U, V, users, items, ratings, order, lr, reg):
    d = U.shape[1]
    for k in range(order.shape[0]):
        r = order[k]
        u = users[r]
        i = items[r]
        pred = 0.0
        for f in range(d):
            pred += U[u, f] * V[i, f]
        err = ratings[r] - pred
        for f in range(d):
            uf = U[u, f]
            vf = V[i, f]
            U[u, f] = uf - lr * (-err * vf + reg * uf)
            V[i, f] = vf - lr * (-err * uf + reg * vf)


def rmse(emb: EmbeddingMatrix, table: RatingsTable, clamp: bool = False) -> float:
    pred = np.einsum("ij,ij->i", emb.U[table.users], emb.V[table.items])
    if clamp:
        pred = np.clip(pred, RATING_MIN, RATING_MAX)
    return float(np.sqrt(np.mean((table.ratings - pred) ** 2)))


def train_mf(table: RatingsTable, d_a: int = 32, epochs: int = 50, lr: float = 0.005,
             reg: float = 0.02, seed: int = 0) -> EmbeddingMatrix:
    """SGD on observed squared error with L2 regularisation; no bias terms."""
    if d_a < 1:
        raise DataError("d_a must be >= 1")
    if len(table) == 0:
        raise DataError("cannot train MF on an empty table")
    rng = np.random.default_rng(seed)
    emb = EmbeddingMatrix(_init_factors(rng, table.num_users, d_a),
                          _init_factors(rng, table.num_items, d_a), seed,
                          {"d_a": d_a, "epochs": epochs, "lr": lr, "reg": reg})
    users = np.ascontiguousarray(table.users)
    items = np.ascontiguousarray(table.items)
    ratings = np.ascontiguousarray(table.ratings)
    for epoch in range(epochs):
        _mf_epoch(emb.U, emb.V, users, items, ratings, rng.permutation(len(table)), lr, reg)
        _check_finite("MF", emb.U, emb.V, epoch=epoch)
        emb.rmse_history.append(rmse(emb, table))
        log.debug("mf epoch %d rmse %.4f", epoch, emb.rmse_history[-1])
    norms = max(np.linalg.norm(emb.U, axis=1).max(), np.linalg.norm(emb.V, axis=1).max())
    if norms > MAX_ROW_NORM:
        raise DivergenceError(f"MF row norm {norms:.1f} exceeds {MAX_ROW_NORM}")
    return emb


def predict_rating(emb: EmbeddingMatrix, user: int, item: int) -> float:
    return float(min(RATING_MAX, max(RATING_MIN, emb.U[user] @ emb.V[item])))


# ---------------------------------------------------------------------------
# BPR ranker

@dataclass
class BprModel:
    P: np.ndarray
    Q: np.ndarray
    seed: int = 0
    hyper: dict = field(default_factory=dict)
    trained_on_rows: int = 0
    auc_history: list = field(default_factory=list)

    @property
    def d_b(self) -> int:
        return self.P.shape[1]

    def score(self, user: int, items) -> np.ndarray:
        return self.Q[items] @ self.P[user]

    def score_matrix(self) -> np.ndarray:
        return self.P @ self.Q.T

    def copy(self) -> "BprModel":
        return BprModel(self.P.copy(), self.Q.copy(), self.seed, dict(self.hyper),
                        self.trained_on_rows, list(self.auc_history))

    def save(self, path) -> None:
        save_checkpoint(path, {"kind": "bpr", "seed": self.seed, "hyper": self.hyper,
                               "trained_on_rows": self.trained_on_rows,
                               "auc_history": self.auc_history},
                        {"P": self.P, "Q": self.Q})

    @classmethod
    def load(cls, path) -> "BprModel":
        meta, arrays = load_checkpoint(path)
        if meta.get("kind") != "bpr":
            raise ValueError(f"{path} is not a BPR checkpoint")
        return cls(arrays["P"], arrays["Q"], meta["seed"], meta["hyper"],
                   meta["trained_on_rows"], meta["auc_history"])


def bpr_triple_gradient(p, qi, qj, reg: float):
    """Gradient of -log sigmoid(p.(qi - qj)) + 0.5*reg*(|p|^2+|qi|^2+|qj|^2)."""
    x = p @ (qi - qj)
    s = 1.0 / (1.0 + np.exp(x))  # sigmoid(-x)
    return -s * (qi - qj) + reg * p, -s * p + reg * qi, s * p + reg * qj


def bpr_triple_loss(p, qi, qj, reg) -> float:
    x = p @ (qi - qj)
    return float(np.logaddexp(0.0, -x) + 0.5 * reg * (p @ p + qi @ qi + qj @ qj))


@numba.njit(cache=True)
def _bpr_steps(P, Q, users, items, rows, observed, lr, reg, seed):
    np.random.seed(seed)
    n_items = Q.shape[0]
    d = P.shape[1]
    for k in range(rows.shape[0]):
        r = rows[k]
        u = users[r]
        i = items[r]
        j = -1
        for _ in range(1000):
            cand = np.random.randint(0, n_items)
            if not observed[u, cand]:
                j = cand
                break
        if j < 0:
            continue
        x = 0.0
        for f in range(d):
            x += P[u, f] * (Q[i, f] - Q[j, f])
        s = 1.0 / (1.0 + np.exp(x))
        for f in range(d):
            pf = P[u, f]
            qif = Q[i, f]
            qjf = Q[j, f]
            P[u, f] = pf - lr * (-s * (qif - qjf) + reg * pf)
            Q[i, f] = qif - lr * (-s * pf + reg * qif)
            Q[j, f] = qjf - lr * (s * pf + reg * qjf)


def sampled_auc(model: BprModel, table: RatingsTable, observed: np.ndarray,
                n_samples: int, rng: np.random.Generator) -> float:
    """Fraction of sampled (u, i+, i-) triples ranked correctly (ties count half)."""
    rows = rng.integers(0, len(table), size=n_samples)
    users, pos = table.users[rows], table.items[rows]
    neg = rng.integers(0, table.num_items, size=n_samples)
    ok = ~observed[users, neg]
    users, pos, neg = users[ok], pos[ok], neg[ok]
    sp = np.einsum("ij,ij->i", model.P[users], model.Q[pos])
    sn = np.einsum("ij,ij->i", model.P[users], model.Q[neg])
    return float(np.mean((sp > sn) + 0.5 * (sp == sn)))


def train_bpr(table: RatingsTable, d_b: int = 32, epochs: int = 30, lr: float = 0.01,
              reg: float = 0.01, seed: int = 0, observed: np.ndarray | None = None) -> BprModel:
    """Pairwise BPR with uniform positive sampling and uniform negatives."""
    if len(table) == 0:
        raise DataError("cannot train BPR on an empty table")
    rng = np.random.default_rng(seed)
    model = BprModel(_init_factors(rng, table.num_users, d_b),
                     _init_factors(rng, table.num_items, d_b), seed,
                     {"d_b": d_b, "epochs": epochs, "lr": lr, "reg": reg},
                     trained_on_rows=len(table))
    if observed is None:
        observed = table.observed_matrix()
    users = np.ascontiguousarray(table.users)
    items = np.ascontiguousarray(table.items)
    for epoch in range(epochs):
        rows = rng.integers(0, len(table), size=len(table))
        _bpr_steps(model.P, model.Q, users, items, rows, observed, lr, reg,
                   int(rng.integers(2**31 - 1)))
        _check_finite("BPR", model.P, model.Q, epoch=epoch)
        model.auc_history.append(sampled_auc(model, table, observed, 10_000, rng))
        log.debug("bpr epoch %d auc %.4f", epoch, model.auc_history[-1])
    return model


def fine_tune_bpr(model: BprModel, table: RatingsTable, new_rows, steps: int, lr: float,
                  seed: int, observed: np.ndarray | None = None,
                  inplace: bool = False) -> BprModel:
    """Warm-start pairwise updates on freshly appended rows.

    Positives alternate between ``new_rows`` and uniformly drawn historical
    rows (those before the first new row), one to one.
    """
    out = model if inplace else model.copy()
    if steps <= 0:
        return out
    new_rows = np.asarray(new_rows, dtype=np.int64)
    if new_rows.size == 0:
        raise DataError("fine_tune_bpr needs at least one new row")
    rng = np.random.default_rng(seed)
    n_hist = int(new_rows.min())
    picks = new_rows[rng.integers(0, new_rows.size, size=steps)]
    if n_hist > 0:
        picks[1::2] = rng.integers(0, n_hist, size=picks[1::2].size)
    if observed is None:
        observed = table.observed_matrix()
    _bpr_steps(out.P, out.Q, np.ascontiguousarray(table.users),
               np.ascontiguousarray(table.items), picks, observed, lr,
               out.hyper.get("reg", 0.01), int(rng.integers(2**31 - 1)))
    _check_finite("BPR fine-tune", out.P, out.Q)
    out.trained_on_rows = len(table)
    return out
