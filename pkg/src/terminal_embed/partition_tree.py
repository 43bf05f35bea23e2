"""Randomized partition tree over a deduplicated point set.

Each internal node holds a fine partition (c_low), a coarse partition
(c_high) and one representative per coarse block; children are the fine
blocks plus the representative set.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as sparse_components

from .geometry import Partition, as_array

ROUND_CONSTANT = 10
PROB_CONSTANT = 0.1
MAX_ATTEMPTS = 8


class TreeConstructionError(RuntimeError):
    pass


def refines(A: Partition, B: Partition) -> bool:
    """True iff every block of B lies inside a block of A."""
    if A.n != B.n:
        raise ValueError("partitions are over different ground sets")
    # each B block must map to a single A label
    first = np.full(B.num_blocks, -1, dtype=np.int64)
    first[B.labels[::-1]] = A.labels[::-1]
    return bool(np.all(first[B.labels] == A.labels))


def comp_rmed(Z, delta: float, rng) -> float:
    """Upper estimate of the median radius: never below the exact value."""
    Z = as_array(Z)
    n = Z.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    rng = np.random.default_rng(rng)
    rounds = math.ceil(ROUND_CONSTANT * math.log(1 / delta))
    kth = max(2, math.ceil(n / 2)) - 1
    anchors = rng.integers(0, n, size=rounds)
    best = math.inf
    for a in np.unique(anchors):
        dist = np.linalg.norm(Z - Z[a], axis=1)
        best = min(best, float(np.partition(dist, kth)[kth]))
    return best


def partition_edges(Z, r: float, delta: float, rng):
    """Edges accumulated by the projected sliding-window rounds.

    Returns an (E, 2) array of index pairs, each at distance <= 1000 n^2 r.
    """
    Z = as_array(Z)
    n, d = Z.shape
    if r <= 0:
        raise ValueError("r must be positive")
    rng = np.random.default_rng(rng)
    rounds = math.ceil(ROUND_CONSTANT * math.log(n / delta))
    window = 10 * r
    cutoff = 1000 * n * n * r
    proj = Z @ rng.standard_normal((d, rounds))
    chunks = []
    for k in range(rounds):
        order = np.argsort(proj[:, k], kind="stable")
        v = proj[order, k]
        nxt = np.searchsorted(v, v + window, side="right") - 1
        wide = np.nonzero(nxt > np.arange(n))[0]
        i = 0
        while True:
            # indices with empty windows just advance by one
            pos = np.searchsorted(wide, i)
            if pos == len(wide):
                break
            i = int(wide[pos])
            j = np.arange(i + 1, nxt[i] + 1)
            a, b = order[i], order[j]
            close = np.linalg.norm(Z[b] - Z[a], axis=1) <= cutoff
            if np.any(close):
                chunks.append(np.column_stack([np.full(int(close.sum()), a), b[close]]))
            i = int(nxt[i])
    if not chunks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(chunks).astype(np.int64)


def construct_partition(Z, r: float, delta: float, rng) -> Partition:
    n = as_array(Z).shape[0]
    edges = partition_edges(Z, r, delta, rng)
    graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    _, labels = sparse_components(graph, directed=False)
    return Partition(labels)


@dataclass
class TreeNode:
    node_id: int
    indices: np.ndarray  # sorted global indices
    r_apx: float = 0.0
    c_low: Partition = None
    c_high: Partition = None
    reps: np.ndarray = None
    children_low: list = field(default_factory=list)
    child_rep: "TreeNode" = None

    @property
    def is_leaf(self):
        return len(self.indices) == 1

    @property
    def size(self):
        return len(self.indices)

    def local(self, global_index):
        return int(np.searchsorted(self.indices, global_index))

    def low_child_of(self, global_index):
        return self.children_low[self.c_low.labels[self.local(global_index)]]

    def children(self):
        if self.is_leaf:
            return []
        return self.children_low + [self.child_rep]


@dataclass
class PartitionTree:
    root: TreeNode
    points: np.ndarray
    delta: float
    seed: int
    nodes: list = field(default_factory=list, repr=False)
    oversized_children: int = 0

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def total_size(self):
        return sum(node.size for node in self.nodes)

    @property
    def depth(self):
        def walk(node):
            return 1 + max((walk(c) for c in node.children()), default=0)
        return walk(self.root)


def construct_partition_tree(X, delta: float, seed: int) -> PartitionTree:
    """Build the tree over X (assumed free of duplicate points)."""
    X = as_array(X)
    n = X.shape[0]
    if n < 1:
        raise ValueError("empty point set")
    tree = PartitionTree(None, X, delta, seed)
    sub_delta = PROB_CONSTANT * delta / (n * n)
    low_scale = 1000.0 * n ** 3

    def build(indices):
        node = TreeNode(len(tree.nodes), indices)
        tree.nodes.append(node)
        size = len(indices)
        if size == 1:
            return node
        Z = X[indices]
        fallback = None
        for attempt in range(MAX_ATTEMPTS):
            rng = np.random.default_rng([seed, node.node_id, attempt])
            r_apx = comp_rmed(Z, sub_delta, rng)
            c_low = construct_partition(Z, r_apx / low_scale, sub_delta, rng)
            c_high = construct_partition(Z, r_apx, sub_delta, rng)
            reps = np.array([block[0] for block in c_high.blocks], dtype=np.int64)
            largest = max(int(c_low.block_sizes().max()), len(reps))
            if largest < size:
                fallback = (r_apx, c_low, c_high, reps)
            if 2 * largest <= size:
                break
        else:
            if fallback is None:
                raise TreeConstructionError(f"tree construction failed at node {node.node_id}")
            tree.oversized_children += 1
        node.r_apx, node.c_low, node.c_high, reps = fallback
        node.reps = indices[reps]
        node.children_low = [build(indices[np.array(block)]) for block in node.c_low.blocks]
        node.child_rep = build(node.reps)
        return node

    tree.root = build(np.arange(n, dtype=np.int64))
    return tree
