"""Approximate partitioning, near-neighbor backends and the adaptive
nearest-neighbor walk over the partition tree."""

import math
from dataclasses import dataclass

import numpy as np


def lsh_tradeoff(c: float, rho_u: float) -> float:
    """rho_c on the curve c²√ρ_c + (c²−1)√ρ_u = √(2c²−1)."""
    if c <= 1 or rho_u < 0:
        raise ValueError("need c > 1 and rho_u >= 0")
    bracket = math.sqrt(2 * c * c - 1) - (c * c - 1) * math.sqrt(rho_u)
    if bracket < -1e-15:
        raise ValueError("rho_u too large for this c")
    return (max(bracket, 0.0) / (c * c)) ** 2


def snap_to_grid(q, nu: float):
    if not nu > 0:
        raise ValueError("grid step must be positive")
    return np.floor(np.asarray(q, dtype=np.float64) / nu) * nu


class ProjectionBuckets:
    """Groups of L tables of t quantized random projections.

    A bucket in a table is the set of points whose t codes
    floor(<a, x>/w + b) all agree.  Lookups run on per-column sorted
    projections, so one projection pass serves every bucket width w, and one
    searchsorted call covers every column of every group.
    """

    def __init__(self, points, tables: int, bits: int, rng, groups: int = 1):
        self.points = np.asarray(points, dtype=np.float64)
        n, d = self.points.shape
        self.n = n
        self.groups, self.tables, self.bits = groups, tables, bits
        cols = groups * tables * bits
        self.directions = rng.standard_normal((d, cols))
        self.offsets = rng.random(cols)
        # projections are not kept; only the per-column order and the
        # sorted values, built a few columns at a time
        self.order = np.empty((n, cols), dtype=np.int32)
        sorted_cols = np.empty((cols, n))
        step = max(1, 2 ** 22 // max(n, 1))
        for c in range(0, cols, step):
            P = self.points @ self.directions[:, c:c + step]
            o = np.argsort(P, axis=0, kind="stable")
            self.order[:, c:c + step] = o
            sorted_cols[c:c + step] = np.take_along_axis(P, o, axis=0).T
        self.limit = float(np.abs(sorted_cols).max()) + 1.0 if n else 1.0
        self.shift = 4.0 * self.limit * np.arange(cols)
        sorted_cols += self.shift[:, None]
        self.flat = sorted_cols.reshape(-1)

    def project(self, rows, cols=slice(None)):
        return self.points[rows] @ self.directions[:, cols]

    def codes(self, width, rows=None):
        P = self.project(slice(None) if rows is None else rows)
        return np.floor(P / width + self.offsets).astype(np.int64)

    def lookup(self, qproj, width):
        """Bucket bounds and sorted-position spans of the query, per column."""
        code = np.floor(qproj / width + self.offsets)
        lo_val = (code - self.offsets) * width
        hi_val = (code + 1 - self.offsets) * width
        base = np.arange(len(code)) * self.n
        pos = np.searchsorted(self.flat, np.concatenate([
            np.clip(lo_val, -2 * self.limit, 2 * self.limit) + self.shift,
            np.clip(hi_val, -2 * self.limit, 2 * self.limit) + self.shift]))
        lo, hi = pos[:len(code)] - base, pos[len(code):] - base
        return lo_val, hi_val, lo, hi

    def grouped_members(self, found):
        """Dict from group id to the sorted union of its query buckets."""
        lo_val, hi_val, lo, hi = found
        G, T, B = self.groups, self.tables, self.bits
        span = (hi - lo).reshape(G * T, B)
        pick = np.argmin(span, axis=1)
        width = span[np.arange(G * T), pick]
        live = np.nonzero(width > 0)[0]
        if not len(live):
            return {}
        cols = live * B + pick[live]
        counts = width[live]
        rows = np.repeat(lo[cols] - np.cumsum(counts) + counts, counts) + np.arange(counts.sum())
        members = self.order[rows, np.repeat(cols, counts)].astype(np.int64)
        block = np.repeat(live * B, counts)[:, None] + np.arange(B)
        # recompute only the (member, column) projections the filter needs
        P = np.einsum("md,mdb->mb", self.points[members], self.directions[:, block].transpose(1, 0, 2))
        inside = np.all((P >= lo_val[block]) & (P < hi_val[block]), axis=1)
        group = np.repeat(live // T, counts)[inside]
        key = np.unique(group * self.n + members[inside])
        if not len(key):
            return {}
        gid, pts = key // self.n, key % self.n
        cuts = np.nonzero(np.diff(gid))[0] + 1
        return {int(g[0]): p for g, p in zip(np.split(gid, cuts), np.split(pts, cuts))}

    def group_members(self, g, found):
        """Per table of group g, the point indices sharing the query's bucket."""
        lo_val, hi_val, lo, hi = found
        out = []
        for t in range(self.tables):
            start = (g * self.tables + t) * self.bits
            stop = start + self.bits
            span = hi[start:stop] - lo[start:stop]
            best = start + int(np.argmin(span))
            if span.min() <= 0:
                continue
            members = self.order[lo[best]:hi[best], best].astype(np.int64)
            P = self.project(members, slice(start, stop))
            inside = np.all((P >= lo_val[start:stop]) & (P < hi_val[start:stop]), axis=1)
            out.append(members[inside])
        return out

    def members(self, q, width, g=0):
        return self.group_members(g, self.lookup(np.asarray(q) @ self.directions, width))


@dataclass
class ApParams:
    tables: int = 16
    bits: int = 0  # 0 means ceil(log2 n)
    width: float = 4.0
    probe_cap: int = 0  # 0 means no truncation
    space_cap: int = 0


class ApStructure:
    """Candidate sets S_1..S_m with a hash h mapping a point to set ids."""

    def __init__(self, sets, hasher, backend, caps):
        self.sets = sets
        self._hasher = hasher
        self.backend = backend
        self.probe_cap, self.space_cap = caps

    def hash(self, x):
        ids = self._hasher(np.asarray(x, dtype=np.float64))
        return ids[:self.probe_cap] if self.probe_cap else ids

    def candidates(self, x):
        ids = self.hash(x)
        if not ids:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate([self.sets[i] for i in ids]))


def build_ap(points, r: float, backend: str, params: ApParams = None, seed=0) -> ApStructure:
    if r <= 0:
        raise ValueError("radius must be positive")
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    params = params or ApParams()
    caps = (params.probe_cap, params.space_cap)
    if backend == "trivial":
        return ApStructure([np.arange(n)], lambda x: [0], backend, caps)
    if backend != "hyperplane-lsh":
        raise ValueError(f"unknown AP backend {backend!r}")
    bits = params.bits or max(1, math.ceil(math.log2(max(n, 2))))
    rng = np.random.default_rng(seed)
    buckets = ProjectionBuckets(points, params.tables, bits, rng)
    width = params.width * r
    codes = buckets.codes(width)
    sets, keys = [], {}
    budget = params.space_cap or math.inf
    for t in range(params.tables):
        block = codes[:, t * bits:(t + 1) * bits]
        uniq, inverse = np.unique(block, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        bounds = np.cumsum(np.bincount(inverse, minlength=len(uniq)))[:-1]
        for code, members in zip(uniq, np.split(order, bounds)):
            if budget < len(members):
                break
            budget -= len(members)
            keys[(t, code.tobytes())] = len(sets)
            sets.append(members)

    def hasher(x):
        qcode = np.floor((x @ buckets.directions) / width + buckets.offsets).astype(np.int64)
        ids = []
        for t in range(params.tables):
            sid = keys.get((t, qcode[t * bits:(t + 1) * bits].tobytes()))
            if sid is not None:
                ids.append(sid)
        return ids

    return ApStructure(sets, hasher, backend, caps)


class AnnStructure:
    """Near-neighbor structure at one radius; answers are distance-certified."""

    def __init__(self, points, r, c, backend, buckets=None, width=4.0):
        self.points = np.asarray(points, dtype=np.float64)
        self.r, self.c, self.backend = r, c, backend
        self.buckets = buckets
        self.width = width

    def query(self, q):
        """Return (index or None, probes)."""
        q = np.asarray(q, dtype=np.float64)
        if self.backend == "brute":
            cand = np.arange(len(self.points))
        else:
            cand = _union(self.buckets.members(q, self.width * self.r))
        if not len(cand):
            return None, 0
        dist = np.linalg.norm(self.points[cand] - q, axis=1)
        best = int(np.argmin(dist))
        if dist[best] <= self.c * self.r:
            return int(cand[best]), len(cand)
        return None, len(cand)


def _union(groups):
    groups = [g for g in groups if len(g)]
    if not groups:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(groups))


def build_ann(points, r: float, c: float, backend: str, seed=0, params: ApParams = None) -> AnnStructure:
    if r <= 0 or c <= 1:
        raise ValueError("need r > 0 and c > 1")
    if backend == "brute":
        return AnnStructure(points, r, c, backend)
    if backend != "lsh":
        raise ValueError(f"unknown ANN backend {backend!r}")
    params = params or ApParams()
    points = np.asarray(points, dtype=np.float64)
    bits = params.bits or max(1, math.ceil(math.log2(max(len(points), 2))))
    buckets = ProjectionBuckets(points, params.tables, bits, np.random.default_rng(seed))
    return AnnStructure(points, r, c, backend, buckets, params.width)


@dataclass
class AannParams:
    backend: str = "brute"
    c: float = 1.2
    gamma: float = 0.1
    alpha: float = 3.0
    beta: float = 6.0
    c_range: float = 1.0
    copies_constant: float = 3.0
    lsh_tables: int = 8
    lsh_bits: int = 0
    lsh_width: float = 4.0
    bound_directions: int = 4


@dataclass
class AannAnswer:
    index: int
    node: object
    scale_hit: object  # int i*, or "leaf"
    probes: int = 0


class AannIndex:
    """Scale ladders per tree node; LSH copies materialize on first use.

    A node's s copies are the groups of one bucket structure seeded from
    (seed, node id), so lazy and eager construction agree.
    """

    def __init__(self, tree, delta, params: AannParams, seed):
        self.tree, self.delta, self.params, self.seed = tree, delta, params, seed
        n, d = tree.points.shape
        self.nd = n * d
        self.copies = math.ceil(params.copies_constant * math.log(max(n, 2) / delta))
        self.spread = params.c_range * self.nd ** params.alpha
        self.ratio = 1 + params.gamma
        self.levels = math.ceil(math.log(self.spread ** 2) / params.gamma)
        self._copies = {}
        self._bounds = {}

    def r_low(self, node):
        return node.r_apx / self.spread

    def radius(self, node, i):
        return self.r_low(node) * self.ratio ** i

    def snap_step(self, node):
        return self.params.gamma / (1000 * self.nd ** self.params.beta) * self.r_low(node)

    def _copies_of(self, node):
        if node.node_id not in self._copies:
            p = self.params
            bits = p.lsh_bits or max(1, math.ceil(math.log2(max(node.size, 2))))
            rng = np.random.default_rng([self.seed, node.node_id])
            self._copies[node.node_id] = ProjectionBuckets(
                self.tree.points[node.indices], p.lsh_tables, bits, rng, groups=self.copies)
        return self._copies[node.node_id]

    def _lower_bound(self, node, q):
        """A distance lower bound from a few sorted 1-d projections (no probes)."""
        key = node.node_id
        if key not in self._bounds:
            rng = np.random.default_rng([self.seed, node.node_id, 2 ** 32 - 1])
            U = rng.standard_normal((self.tree.points.shape[1], self.params.bound_directions))
            U /= np.linalg.norm(U, axis=0)
            self._bounds[key] = (U, np.sort(self.tree.points[node.indices] @ U, axis=0))
        U, S = self._bounds[key]
        qp = q @ U
        best = 0.0
        for c in range(U.shape[1]):
            pos = np.searchsorted(S[:, c], qp[c])
            gaps = [abs(S[p, c] - qp[c]) for p in (pos - 1, pos) if 0 <= p < len(S)]
            best = max(best, min(gaps))
        return best

    def first_hit(self, node, q, rng):
        """(i*, local index, probes); i* is None when every scale fails."""
        p = self.params
        Z = self.tree.points[node.indices]
        if p.backend == "brute":
            dist = np.linalg.norm(Z - q, axis=1)
            j = int(np.argmin(dist))
            # smallest i with dist <= c (1+γ)^i r_low, nudged against rounding
            r0 = p.c * self.r_low(node)
            i = 0 if dist[j] <= r0 else math.ceil(math.log(dist[j] / r0) / math.log(self.ratio))
            while i > 0 and dist[j] <= r0 * self.ratio ** (i - 1):
                i -= 1
            while dist[j] > r0 * self.ratio ** i:
                i += 1
            return (i if i <= self.levels else None), j, len(Z)
        probes = 0
        lb = self._lower_bound(node, q)
        r0 = p.c * self.r_low(node)
        start = 0 if lb <= r0 else max(0, math.floor(math.log(lb / r0) / math.log(self.ratio)))
        buckets = self._copies_of(node)
        qproj = q @ buckets.directions
        for i in range(start, self.levels + 1):
            r = self.radius(node, i)
            found = buckets.lookup(qproj, p.lsh_width * r)
            live = buckets.grouped_members(found)
            for j in rng.permutation(self.copies):
                cand = live.get(int(j))
                if cand is None:
                    continue
                probes += len(cand)
                dist = np.linalg.norm(Z[cand] - q, axis=1)
                k = int(np.argmin(dist))
                if dist[k] <= p.c * r:
                    return i, int(cand[k]), probes
        return None, None, probes


def build_aann(tree, delta: float, params: AannParams = None, seed: int = 0) -> AannIndex:
    return AannIndex(tree, delta, params or AannParams(), seed)


def query_aann(D: AannIndex, q, rng) -> AannAnswer:
    q = np.asarray(q, dtype=np.float64)
    rng = np.random.default_rng(rng)
    node = D.tree.root
    probes = 0
    while True:
        if node.is_leaf:
            return AannAnswer(int(node.indices[0]), node, "leaf", probes)
        snapped = snap_to_grid(q, D.snap_step(node))
        i_star, local, used = D.first_hit(node, snapped, rng)
        probes += used
        if i_star is None:
            node = node.child_rep
        elif i_star == 0:
            node = node.children_low[node.c_low.labels[local]]
        else:
            return AannAnswer(int(node.indices[local]), node, i_star, probes)
