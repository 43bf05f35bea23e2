"""Point sets, partitions and the exact reference oracles."""

import math

import numpy as np

TOL = 1e-12


def leq(a, b):
    """a <= b up to an absolute tolerance scaled by the operands."""
    return a <= b + TOL * np.maximum(np.abs(a), np.abs(b))


class PointSet:
    """n points in R^d stored as a read-only float64 array."""

    def __init__(self, points):
        arr = np.array(points, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("point set must be a non-empty n x d array")
        if not np.all(np.isfinite(arr)):
            raise ValueError("point coordinates must be finite")
        arr.setflags(write=False)
        self.points = arr

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        return self.points[i]


def as_array(X):
    if isinstance(X, PointSet):
        return X.points
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


class Partition:
    """Disjoint blocks covering range(n), stored as canonical labels.

    Labels are renumbered in order of first appearance, so two partitions
    with the same blocks compare equal.
    """

    def __init__(self, labels):
        labels = np.asarray(labels, dtype=np.int64)
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first)] = np.arange(len(first))
        self.labels = rank[inverse.reshape(-1)]
        self.labels.setflags(write=False)

    @classmethod
    def from_blocks(cls, blocks, n):
        labels = np.full(n, -1, dtype=np.int64)
        for b, block in enumerate(blocks):
            for i in block:
                if labels[i] != -1:
                    raise ValueError("blocks are not disjoint")
                labels[i] = b
        if np.any(labels < 0):
            raise ValueError("blocks do not cover the ground set")
        return cls(labels)

    @property
    def n(self):
        return len(self.labels)

    @property
    def num_blocks(self):
        return int(self.labels.max()) + 1 if self.n else 0

    @property
    def blocks(self):
        order = np.argsort(self.labels, kind="stable")
        counts = np.bincount(self.labels)
        return [sorted(chunk.tolist()) for chunk in np.split(order, np.cumsum(counts)[:-1])]

    def block_sizes(self):
        return np.bincount(self.labels)

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.labels, other.labels)

    def __repr__(self):
        return f"Partition({self.blocks})"


class UnionFind:
    def __init__(self, size):
        self.parent = list(range(size))
        self.size = [1] * size

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def labels(self):
        return [self.find(i) for i in range(len(self.parent))]


def pairwise_distances(X):
    X = as_array(X)
    sq = np.einsum("ij,ij->i", X, X)
    G = X @ X.T
    D2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * G, 0.0)
    # recompute rows where cancellation could matter
    D = np.sqrt(D2)
    scale = np.sqrt(sq[:, None] + sq[None, :])
    shaky = D < 1e-6 * np.maximum(scale, 1e-300)
    if np.any(shaky):
        ii, jj = np.nonzero(shaky)
        D[ii, jj] = np.linalg.norm(X[ii] - X[jj], axis=1)
    np.fill_diagonal(D, 0.0)
    return D


def connected_components(X, r):
    """Blocks of the graph joining points at distance <= r (exact, O(n^2 d))."""
    if r < 0:
        raise ValueError("radius must be nonnegative")
    X = as_array(X)
    n = X.shape[0]
    uf = UnionFind(n)
    for i in range(n - 1):
        dist = np.linalg.norm(X[i + 1:] - X[i], axis=1)
        for j in np.nonzero(leq(dist, r))[0]:
            uf.union(i, i + 1 + int(j))
    return Partition(uf.labels())


def r_med_exact(X):
    """Smallest radius at which some component holds max(2, ceil(n/2)) points."""
    X = as_array(X)
    n = X.shape[0]
    if n < 2:
        raise ValueError("r_med undefined for a single point")
    need = max(2, math.ceil(n / 2))
    iu, ju = np.triu_indices(n, k=1)
    dist = np.linalg.norm(X[iu] - X[ju], axis=1)
    order = np.argsort(dist, kind="stable")
    uf = UnionFind(n)
    for e in order:
        root = uf.union(int(iu[e]), int(ju[e]))
        if uf.size[root] >= need:
            return float(dist[e])
    raise AssertionError("unreachable: the full graph is connected")


def _sketch_matrix(P):
    return P.matrix if hasattr(P, "matrix") else np.asarray(P, dtype=np.float64)


def lifted_direction(y, z, P):
    """Unit vector (y - z, P(y - z)) / norm."""
    M = _sketch_matrix(P)
    diff = np.asarray(y, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    if not np.any(diff):
        raise ValueError("zero direction")
    return _unit(np.concatenate([diff, M @ diff]))


def lifted_query(q, y, v, P):
    """Unit vector (q - y, -(v - P y)) / norm."""
    M = _sketch_matrix(P)
    y = np.asarray(y, dtype=np.float64)
    vec = np.concatenate([np.asarray(q, dtype=np.float64) - y, M @ y - np.asarray(v, dtype=np.float64)])
    if not np.any(vec):
        raise ValueError("zero vector")
    return _unit(vec)


def _unit(vec):
    # rescale first so tiny coordinates do not underflow when squared
    vec = vec / np.max(np.abs(vec))
    return vec / np.linalg.norm(vec)


def brute_nearest(X, q):
    """Exact nearest neighbour; ties go to the smallest index."""
    X = as_array(X)
    dist = np.linalg.norm(X - np.asarray(q, dtype=np.float64), axis=1)
    i = int(np.argmin(dist))
    return i, float(dist[i])


def deduplicate(X):
    """Drop coincident points.

    Returns (unique_points, keep, remap) where keep lists the original index
    of each unique point (first occurrence) and remap sends every original
    index to its unique index.
    """
    X = as_array(X)
    _, first, inverse = np.unique(X, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty(len(first), dtype=np.int64)
    rank[order] = np.arange(len(first))
    keep = first[order]
    return X[keep], keep, rank[inverse.reshape(-1)]
