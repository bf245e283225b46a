"""Balanced c-ary clustering tree over users.

Leaves map one-to-one onto users; every internal node owns a policy that
picks one of its children. Selecting a user is a root-to-leaf walk, so one
decision costs O(depth * arity) instead of O(|U|).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .binio import load_checkpoint, save_checkpoint
from .errors import ActionSpaceExhausted

PCA_ITERATIONS = 100


def compute_arity(num_users: int, d: int) -> int:
    """Smallest integer c with c**d >= num_users."""
    if d < 1 or num_users < 1:
        raise ValueError("need d >= 1 and num_users >= 1")
    c = max(1, int(round(num_users ** (1.0 / d))))
    while c ** d < num_users:
        c += 1
    while c > 1 and (c - 1) ** d >= num_users:
        c -= 1
    return c


def count_nonleaf(c: int, d: int) -> int:
    """Internal node count of a full c-ary tree of height d."""
    if c == 1:
        return d
    return (c ** d - 1) // (c - 1)


@dataclass
class Path:
    """A root-to-leaf walk.

    ``choices`` are 0-based child positions; ``masks`` record which children
    were available at each step, so the walk's probability can be recomputed
    later under the same mask.
    """
    choices: list[int] = field(default_factory=list)
    nodes: list[int] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    user: int = -1


class ClusterTree:
    def __init__(self, children, parent, leaf_user, arity: int, depth: int, seed: int = 0):
        self.children: list[np.ndarray] = [np.asarray(ch, dtype=np.int64) for ch in children]
        self.parent = np.asarray(parent, dtype=np.int64)
        self.leaf_user = np.asarray(leaf_user, dtype=np.int64)
        self.arity = arity
        self.depth = depth
        self.seed = seed
        self.root = 0
        n_nodes = len(self.children)
        self.policy_id = np.full(n_nodes, -1, dtype=np.int64)
        internal = [k for k in range(n_nodes) if self.leaf_user[k] < 0]
        self.policy_id[internal] = np.arange(len(internal))
        self.internal_nodes = np.asarray(internal, dtype=np.int64)
        leaves = np.flatnonzero(self.leaf_user >= 0)
        self.num_users = leaves.size
        self.leaf_of_user = np.full(self.num_users, -1, dtype=np.int64)
        self.leaf_of_user[self.leaf_user[leaves]] = leaves
        self.avail = np.zeros(n_nodes, dtype=np.int64)
        self.reset_availability()

    @property
    def num_nodes(self) -> int:
        return len(self.children)

    @property
    def num_policies(self) -> int:
        return self.internal_nodes.size

    def child_counts(self) -> np.ndarray:
        """Number of children of each internal node, in policy-id order."""
        return np.array([self.children[k].size for k in self.internal_nodes], dtype=np.int64)

    def reset_availability(self) -> None:
        self.avail[:] = 0
        self.avail[self.leaf_user >= 0] = 1
        # children always carry larger ids than their parent
        for k in range(self.num_nodes - 1, 0, -1):
            self.avail[self.parent[k]] += self.avail[k]

    def height(self, node: int | None = None) -> int:
        node = self.root if node is None else node
        if self.leaf_user[node] >= 0:
            return 0
        return 1 + max(self.height(ch) for ch in self.children[node].tolist())

    def save(self, path, extra_arrays: dict | None = None, extra_meta: dict | None = None) -> None:
        sizes = np.array([ch.size for ch in self.children], dtype=np.int64)
        flat = np.concatenate(self.children) if self.num_nodes else np.zeros(0, np.int64)
        meta = {"kind": "tree", "arity": self.arity, "depth": self.depth, "seed": self.seed}
        meta.update(extra_meta or {})
        arrays = {"child_sizes": sizes, "children": flat, "parent": self.parent,
                  "leaf_user": self.leaf_user}
        arrays.update(extra_arrays or {})
        save_checkpoint(path, meta, arrays)

    @classmethod
    def load(cls, path) -> tuple["ClusterTree", dict, dict]:
        """Returns the tree plus any extra metadata and arrays stored with it."""
        meta, arrays = load_checkpoint(path)
        if meta.get("kind") != "tree":
            raise ValueError(f"{path} is not a tree checkpoint")
        bounds = np.concatenate([[0], np.cumsum(arrays.pop("child_sizes"))])
        flat = arrays.pop("children")
        children = [flat[bounds[k]:bounds[k + 1]] for k in range(bounds.size - 1)]
        tree = cls(children, arrays.pop("parent"), arrays.pop("leaf_user"),
                   meta["arity"], meta["depth"], meta["seed"])
        return tree, meta, arrays


def first_principal_component(X: np.ndarray, start: np.ndarray) -> np.ndarray:
    """Power iteration on the centred covariance; sign fixed so the first
    non-negligible entry is positive. Returns zeros for degenerate input."""
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / X.shape[0]
    v = start / np.linalg.norm(start)
    for _ in range(PCA_ITERATIONS):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return np.zeros_like(v)
        v = w / norm
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def build_tree(user_emb: np.ndarray, d: int, seed: int = 0) -> ClusterTree:
    """Divisive PCA clustering into a balanced tree of height <= d.

    Each node's users are sorted by their projection on the first principal
    component (ties by user id) and cut into ``c`` contiguous blocks whose
    sizes differ by at most one.
    """
    user_emb = np.asarray(user_emb, dtype=np.float64)
    num_users = user_emb.shape[0]
    c = compute_arity(num_users, d)
    start = np.random.default_rng(seed).standard_normal(user_emb.shape[1])
    if not np.any(start):
        start[0] = 1.0

    children: list[list[int]] = []
    parent: list[int] = []
    leaf_user: list[int] = []

    def new_node(par: int, users: np.ndarray) -> int:
        children.append([])
        parent.append(par)
        leaf_user.append(int(users[0]) if users.size == 1 else -1)
        return len(children) - 1

    queue = deque([(new_node(-1, np.arange(num_users)), np.arange(num_users))])
    while queue:
        node, users = queue.popleft()
        if users.size == 1:
            continue
        pc = first_principal_component(user_emb[users], start)
        proj = (user_emb[users] - user_emb[users].mean(axis=0)) @ pc
        ordered = users[np.lexsort((users, proj))]
        for block in np.array_split(ordered, c):
            if block.size == 0:
                continue
            child = new_node(node, block)
            children[node].append(child)
            queue.append((child, block))
    return ClusterTree(children, parent, leaf_user, c, d, seed)


def set_available(tree: ClusterTree, user: int, available: bool) -> None:
    leaf = tree.leaf_of_user[user]
    delta = int(available) - int(tree.avail[leaf])
    node = leaf
    while delta and node >= 0:
        tree.avail[node] += delta
        node = tree.parent[node]


def masked_probs(probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero out unavailable children and renormalise.

    Falls back to uniform over available children if every available
    probability underflowed to zero.
    """
    p = np.where(mask, probs, 0.0)
    total = p.sum()
    if total <= 0.0:
        p = mask.astype(np.float64)
        total = p.sum()
    return p / total


def _categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(p)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, p.size - 1)
    while p[k] == 0.0:  # only reachable through float round-off at the edges
        k -= 1
    return k


def sample_path(tree: ClusterTree, policies, s: np.ndarray,
                rng: np.random.Generator) -> tuple[Path, float]:
    """Walk from the root, sampling among available children at each node.

    ``policies[policy_id].forward(s)`` must return a probability vector over
    that node's children. Returns the path and the log-probability of the
    walk under the masked, renormalised distributions.
    """
    if tree.avail[tree.root] <= 0:
        raise ActionSpaceExhausted("action space exhausted")
    path = Path()
    log_prob = 0.0
    node = tree.root
    while tree.leaf_user[node] < 0:
        kids = tree.children[node]
        mask = tree.avail[kids] > 0
        p = masked_probs(policies[tree.policy_id[node]].forward(s), mask)
        k = _categorical(p, rng)
        log_prob += float(np.log(p[k]))
        path.nodes.append(int(node))
        path.choices.append(k)
        path.masks.append(mask)
        node = int(kids[k])
    path.user = int(tree.leaf_user[node])
    return path, log_prob


def leaf_probabilities(tree: ClusterTree, policies, s: np.ndarray) -> np.ndarray:
    """Exact selection probability of every user under the current mask."""
    out = np.zeros(tree.num_users)
    if tree.avail[tree.root] <= 0:
        return out
    stack = [(tree.root, 1.0)]
    while stack:
        node, mass = stack.pop()
        if tree.leaf_user[node] >= 0:
            out[tree.leaf_user[node]] = mass
            continue
        kids = tree.children[node]
        mask = tree.avail[kids] > 0
        p = masked_probs(policies[tree.policy_id[node]].forward(s), mask)
        for k in np.flatnonzero(p > 0):
            stack.append((int(kids[k]), mass * p[k]))
    return out


def audit(tree: ClusterTree) -> list[str]:
    """Check the structural invariants; returns a list of violations."""
    problems = []
    users = tree.leaf_user[tree.leaf_user >= 0]
    if np.unique(users).size != users.size or users.size != tree.num_users:
        problems.append("leaves do not biject onto users")
    if tree.height() > tree.depth:
        problems.append(f"height {tree.height()} exceeds depth {tree.depth}")
    if tree.num_policies > count_nonleaf(max(tree.arity, 1), tree.depth):
        problems.append("too many internal nodes")
    heights = {}
    for node in range(tree.num_nodes - 1, -1, -1):
        kids = tree.children[node].tolist()
        if tree.leaf_user[node] >= 0:
            heights[node] = 0
            if kids:
                problems.append(f"leaf {node} has children")
            continue
        if not 1 <= len(kids) <= tree.arity:
            problems.append(f"node {node} has {len(kids)} children")
        hs = [heights[k] for k in kids]
        heights[node] = 1 + max(hs)
        if max(hs) - min(hs) > 1:
            problems.append(f"node {node} is unbalanced")
        if tree.avail[node] != sum(tree.avail[k] for k in kids):
            problems.append(f"node {node} avail counter inconsistent")
    return problems
