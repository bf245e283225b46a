"""Rating logs: loading, k-core filtering, splitting and the promoted-item setup.

All tables use dense integer ids. The original labels from the raw file are
kept alongside so results can be mapped back.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

FORMATS = ("tab_100k", "doublecolon_1m", "ciao_csv")
MAX_MALFORMED_FRACTION = 0.001
RATING_MIN, RATING_MAX = 1.0, 5.0
NO_TIMESTAMP = -1


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    rating: float
    timestamp: int = NO_TIMESTAMP


class RatingsTable:
    """Append-only interaction log with per-user/per-item row indices.

    ``snapshot()`` records the current row count; ``rollback()`` truncates
    back to it, restoring rows and indices exactly.
    """

    def __init__(self, users, items, ratings, timestamps=None, *, num_users=None,
                 num_items=None, user_labels=None, item_labels=None):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=np.float64)
        n = len(users)
        if len(items) != n or len(ratings) != n:
            raise DataError("users, items and ratings must have equal length")
        if timestamps is None:
            timestamps = np.full(n, NO_TIMESTAMP, dtype=np.int64)
        timestamps = np.asarray(timestamps, dtype=np.int64)

        self.num_users = int(num_users if num_users is not None else (users.max() + 1 if n else 0))
        self.num_items = int(num_items if num_items is not None else (items.max() + 1 if n else 0))
        if n and (users.min() < 0 or users.max() >= self.num_users):
            raise DataError("user id out of range")
        if n and (items.min() < 0 or items.max() >= self.num_items):
            raise DataError("item id out of range")
        self.user_labels = (np.asarray(user_labels) if user_labels is not None
                            else np.arange(self.num_users).astype(str))
        self.item_labels = (np.asarray(item_labels) if item_labels is not None
                            else np.arange(self.num_items).astype(str))

        cap = max(16, n)
        self._users = np.empty(cap, dtype=np.int64)
        self._items = np.empty(cap, dtype=np.int64)
        self._ratings = np.empty(cap, dtype=np.float64)
        self._timestamps = np.empty(cap, dtype=np.int64)
        self._users[:n] = users
        self._items[:n] = items
        self._ratings[:n] = ratings
        self._timestamps[:n] = timestamps
        self._n = n

        self.by_user: list[list[int]] = [[] for _ in range(self.num_users)]
        self.by_item: list[list[int]] = [[] for _ in range(self.num_items)]
        self._pairs: dict[tuple[int, int], int] = {}
        for row, (u, i) in enumerate(zip(users.tolist(), items.tolist())):
            if (u, i) in self._pairs:
                raise DataError(f"duplicate interaction ({u}, {i})")
            self._pairs[(u, i)] = row
            self.by_user[u].append(row)
            self.by_item[i].append(row)
        self.snapshot_mark = n

    # -- views ---------------------------------------------------------
    @property
    def users(self) -> np.ndarray:
        return self._users[:self._n]

    @property
    def items(self) -> np.ndarray:
        return self._items[:self._n]

    @property
    def ratings(self) -> np.ndarray:
        return self._ratings[:self._n]

    @property
    def timestamps(self) -> np.ndarray:
        return self._timestamps[:self._n]

    def __len__(self) -> int:
        return self._n

    def __iter__(self) -> Iterator[Interaction]:
        for row in range(self._n):
            yield self.row(row)

    def row(self, row: int) -> Interaction:
        if not 0 <= row < self._n:
            raise IndexError(row)
        return Interaction(int(self._users[row]), int(self._items[row]),
                           float(self._ratings[row]), int(self._timestamps[row]))

    def has(self, user: int, item: int) -> bool:
        return (user, item) in self._pairs

    @property
    def density(self) -> float:
        return self._n / (self.num_users * self.num_items)

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.num_users)

    def item_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.num_items)

    def user_mean_rating(self) -> np.ndarray:
        """Mean rating per user; NaN for users without rows."""
        sums = np.bincount(self.users, weights=self.ratings, minlength=self.num_users)
        counts = self.user_counts()
        with np.errstate(invalid="ignore", divide="ignore"):
            return sums / counts

    def observed_matrix(self) -> np.ndarray:
        mat = np.zeros((self.num_users, self.num_items), dtype=np.bool_)
        mat[self.users, self.items] = True
        return mat

    # -- mutation ------------------------------------------------------
    def append(self, user: int, item: int, rating: float, timestamp: int = NO_TIMESTAMP) -> int:
        if not (0 <= user < self.num_users and 0 <= item < self.num_items):
            raise DataError(f"interaction ({user}, {item}) outside table bounds")
        if (user, item) in self._pairs:
            raise DataError(f"duplicate interaction ({user}, {item})")
        if self._n == len(self._users):
            self._grow()
        row = self._n
        self._users[row] = user
        self._items[row] = item
        self._ratings[row] = rating
        self._timestamps[row] = timestamp
        self._n += 1
        self._pairs[(user, item)] = row
        self.by_user[user].append(row)
        self.by_item[item].append(row)
        return row

    def _grow(self) -> None:
        cap = 2 * len(self._users)
        for name in ("_users", "_items", "_ratings", "_timestamps"):
            old = getattr(self, name)
            new = np.empty(cap, dtype=old.dtype)
            new[:self._n] = old[:self._n]
            setattr(self, name, new)

    def snapshot(self) -> int:
        self.snapshot_mark = self._n
        return self.snapshot_mark

    def rollback(self) -> list[tuple[int, int]]:
        """Drop every row appended since the last snapshot.

        Returns the removed ``(user, item)`` pairs, newest first.
        """
        removed = []
        while self._n > self.snapshot_mark:
            row = self._n - 1
            u, i = int(self._users[row]), int(self._items[row])
            self.by_user[u].pop()
            self.by_item[i].pop()
            del self._pairs[(u, i)]
            removed.append((u, i))
            self._n -= 1
        return removed

    def copy(self) -> "RatingsTable":
        return self.take(np.arange(self._n))

    def take(self, rows) -> "RatingsTable":
        """New table with the given rows, same id space and labels."""
        rows = np.asarray(rows, dtype=np.int64)
        return RatingsTable(self.users[rows], self.items[rows], self.ratings[rows],
                            self.timestamps[rows], num_users=self.num_users,
                            num_items=self.num_items, user_labels=self.user_labels,
                            item_labels=self.item_labels)

    def __repr__(self) -> str:
        return (f"RatingsTable(users={self.num_users}, items={self.num_items}, "
                f"rows={self._n}, density={self.density:.4%})")


@dataclass(frozen=True)
class PromotedSet:
    item_ids: np.ndarray
    retained_fraction: float
    top_fraction: float = float("nan")

    def __post_init__(self):
        ids = np.unique(np.asarray(self.item_ids, dtype=np.int64))
        if ids.size == 0:
            raise DataError("promoted set is empty")
        if not 0 < self.retained_fraction <= 1:
            raise DataError("retained_fraction must lie in (0, 1]")
        object.__setattr__(self, "item_ids", ids)

    def __len__(self) -> int:
        return int(self.item_ids.size)

    def __contains__(self, item) -> bool:
        return bool(np.isin(item, self.item_ids))

    def mask(self, num_items: int) -> np.ndarray:
        m = np.zeros(num_items, dtype=np.bool_)
        m[self.item_ids] = True
        return m


# ---------------------------------------------------------------------------
# Loading

_SPLITTERS = {
    "tab_100k": lambda line: line.split("\t"),
    "doublecolon_1m": lambda line: line.split("::"),
    "ciao_csv": lambda line: re.split(r"[,\s]+", line.strip()),
}
_FIELDS = {"tab_100k": (4, 4), "doublecolon_1m": (4, 4), "ciao_csv": (3, None)}


def _densify(labels: list[str]) -> tuple[np.ndarray, np.ndarray]:
    uniq = sorted(set(labels), key=_label_key)
    index = {lab: k for k, lab in enumerate(uniq)}
    return np.array([index[lab] for lab in labels], dtype=np.int64), np.array(uniq)


def _label_key(label: str):
    # numeric ids sort numerically, anything else after them lexicographically
    try:
        return (0, int(label), "")
    except ValueError:
        return (1, 0, label)


def load_ratings(path, fmt: str) -> RatingsTable:
    """Parse a raw rating log into a densified :class:`RatingsTable`.

    Malformed lines are skipped with a warning; more than 0.1% of them is
    treated as a format mismatch. Duplicate (user, item) pairs keep the last
    occurrence.
    """
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    try:
        text = path.read_text(encoding="latin-1")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    split = _SPLITTERS[fmt]
    lo, hi = _FIELDS[fmt]
    latest: dict[tuple[str, str], tuple[float, int]] = {}
    total = malformed = 0
    for line in text.splitlines():
        if not line.strip():
            continue
        total += 1
        parts = split(line.strip())
        if len(parts) < lo or (hi is not None and len(parts) > hi):
            malformed += 1
            continue
        try:
            rating = float(parts[2])
            ts = int(parts[3]) if fmt != "ciao_csv" else NO_TIMESTAMP
        except ValueError:
            malformed += 1
            continue
        if not (RATING_MIN <= rating <= RATING_MAX):
            malformed += 1
            continue
        key = (parts[0], parts[1])
        latest.pop(key, None)  # re-insert so the last occurrence keeps its position
        latest[key] = (rating, ts)

    if total == 0 or not latest:
        raise DataError(f"{path}: empty result")
    if malformed:
        frac = malformed / total
        if frac > MAX_MALFORMED_FRACTION:
            raise DataError(f"{path}: {malformed}/{total} lines do not match format {fmt!r}")
        log.warning("%s: skipped %d malformed line(s) of %d", path, malformed, total)

    keys = list(latest)
    users, user_labels = _densify([k[0] for k in keys])
    items, item_labels = _densify([k[1] for k in keys])
    vals = list(latest.values())
    table = RatingsTable(users, items, [v[0] for v in vals], [v[1] for v in vals],
                         num_users=len(user_labels), num_items=len(item_labels),
                         user_labels=user_labels, item_labels=item_labels)
    log.info("loaded %s: %d users, %d items, %d ratings", path.name,
             table.num_users, table.num_items, len(table))
    return table


# ---------------------------------------------------------------------------
# Filtering and splitting

def k_core_filter(table: RatingsTable, min_user: int, min_item: int) -> RatingsTable:
    """Repeatedly drop users/items below the degree thresholds, then re-densify."""
    if min_user < 1 or min_item < 1:
        raise DataError("k-core thresholds must be >= 1")
    keep = np.ones(len(table), dtype=np.bool_)
    users, items = table.users, table.items
    while True:
        uc = np.bincount(users[keep], minlength=table.num_users)
        ic = np.bincount(items[keep], minlength=table.num_items)
        bad = keep & ((uc[users] < min_user) | (ic[items] < min_item))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise DataError("k-core filter left an empty table; thresholds too aggressive")

    rows = np.flatnonzero(keep)
    live_users = np.unique(users[rows])
    live_items = np.unique(items[rows])
    umap = np.full(table.num_users, -1, dtype=np.int64)
    imap = np.full(table.num_items, -1, dtype=np.int64)
    umap[live_users] = np.arange(live_users.size)
    imap[live_items] = np.arange(live_items.size)
    out = RatingsTable(umap[users[rows]], imap[items[rows]], table.ratings[rows],
                       table.timestamps[rows], num_users=live_users.size,
                       num_items=live_items.size, user_labels=table.user_labels[live_users],
                       item_labels=table.item_labels[live_items])
    log.info("k-core(%d, %d): %d users, %d items, %d ratings", min_user, min_item,
             out.num_users, out.num_items, len(out))
    return out


def split_train_test(table: RatingsTable, test_fraction: float,
                     seed: int) -> tuple[RatingsTable, RatingsTable]:
    """Per-user stratified random split; both halves keep the full id space."""
    if not 0 < test_fraction < 1:
        raise DataError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_rows = []
    for u in range(table.num_users):
        rows = np.asarray(table.by_user[u], dtype=np.int64)
        n = rows.size
        if n < 2:
            continue
        n_test = min(int(math.floor(test_fraction * n + 0.5)), n - 1)
        if n_test:
            test_rows.append(rng.permutation(rows)[:n_test])
    test_mask = np.zeros(len(table), dtype=np.bool_)
    if test_rows:
        test_mask[np.concatenate(test_rows)] = True
    return table.take(np.flatnonzero(~test_mask)), table.take(np.flatnonzero(test_mask))


def _safe_ceil(x: float) -> int:
    return int(math.ceil(x - 1e-9))


def build_promoted_set(table: RatingsTable, top_fraction: float, retained_fraction: float,
                       seed: int) -> tuple[PromotedSet, RatingsTable]:
    """Pick the most-rated items as the promoted set and thin out their rows.

    Each promoted item keeps round(retained_fraction * count) of its rows
    (at least one), chosen uniformly at random. Rows of other items are
    untouched.
    """
    if not (0 < top_fraction <= 1 and 0 < retained_fraction <= 1):
        raise DataError("fractions must lie in (0, 1]")
    counts = table.item_counts()
    n_promoted = max(1, _safe_ceil(top_fraction * table.num_items))
    # most rated first, ties by ascending item id
    order = np.lexsort((np.arange(table.num_items), -counts))
    promoted = PromotedSet(order[:n_promoted], retained_fraction, top_fraction)

    rng = np.random.default_rng(seed)
    drop = []
    for item in promoted.item_ids.tolist():
        rows = np.asarray(table.by_item[item], dtype=np.int64)
        if rows.size == 0:
            continue
        n_keep = max(1, int(math.floor(retained_fraction * rows.size + 0.5)))
        if n_keep < rows.size:
            drop.append(rng.permutation(rows)[n_keep:])
    keep = np.ones(len(table), dtype=np.bool_)
    if drop:
        keep[np.concatenate(drop)] = False
    return promoted, table.take(np.flatnonzero(keep))


# ---------------------------------------------------------------------------
# CSV cache

def save_table(table: RatingsTable, path, **meta) -> None:
    """Write a CSV cache whose first line is a ``#``-prefixed JSON header."""
    header = {"num_users": table.num_users, "num_items": table.num_items,
              "rows": len(table), **meta}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write("user,item,rating,timestamp,user_label,item_label\n")
        for u, i, r, t in zip(table.users.tolist(), table.items.tolist(),
                              table.ratings.tolist(), table.timestamps.tolist()):
            fh.write(f"{u},{i},{r!r},{t},{table.user_labels[u]},{table.item_labels[i]}\n")


def load_table(path) -> tuple[RatingsTable, dict]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise DataError(f"{path}: missing cache header")
        header = json.loads(first[2:])
        fh.readline()
        users, items, ratings, stamps = [], [], [], []
        ulab = np.arange(header["num_users"]).astype(str).astype(object)
        ilab = np.arange(header["num_items"]).astype(str).astype(object)
        for line in fh:
            u, i, r, t, ul, il = line.rstrip("\n").split(",")
            u, i = int(u), int(i)
            users.append(u)
            items.append(i)
            ratings.append(float(r))
            stamps.append(int(t))
            ulab[u], ilab[i] = ul, il
    table = RatingsTable(users, items, ratings, stamps, num_users=header["num_users"],
                         num_items=header["num_items"], user_labels=ulab.astype(str),
                         item_labels=ilab.astype(str))
    return table, header
