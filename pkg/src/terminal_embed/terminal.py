"""Violator detection for the terminal-embedding constraint system and the
assembly of the final (k+1)-dimensional image.

For a query q, candidate v ∈ R^k and point set Z the constraints are

    |<v - Πx, Π(y - x)> - <q - x, y - x>| <= 20 e ||q - x|| ||y - x||
    ||v - Πx|| <= (1 + 10 e) ||q - x||

for all x, y in Z, with e the oracle tolerance.  Pair constraints centered
at y are searched as near-neighbour problems over unit "lifted" vectors
(x - y, Π(x - y))/norm against (q - y, -(v - Πy))/norm.
"""

import hashlib
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .ann import ProjectionBuckets, build_aann, query_aann, AannParams
from .ellipsoid import DegenerateEllipsoidError, EllipsoidCapError, iteration_cap, run_ellipsoid
from .errors import CertificationError
from .geometry import as_array, brute_nearest, deduplicate
from .partition_tree import construct_partition_tree


# -- the constraint system -------------------------------------------------

@dataclass(frozen=True)
class Violator:
    """A violated constraint: distance at x, or the pair x centered at y."""
    x: int
    center: int = -1

    @property
    def is_pair(self):
        return self.center >= 0


def pair_defect(X, PX, q, v, x, y):
    """<v - Πy, Π(x - y)> - <q - y, x - y>."""
    return float((v - PX[y]) @ (PX[x] - PX[y]) - (q - X[y]) @ (X[x] - X[y]))


def violator_holds(w: Violator, X, PX, q, v, eps_dag) -> bool:
    """Re-check the recorded inequality from (q, v, Π) alone."""
    if w.is_pair:
        bound = 20 * eps_dag * np.linalg.norm(q - X[w.center]) * np.linalg.norm(X[w.x] - X[w.center])
        return abs(pair_defect(X, PX, q, v, w.x, w.center)) >= bound and np.any(PX[w.x] != PX[w.center])
    return np.linalg.norm(v - PX[w.x]) >= (1 + 10 * eps_dag) * np.linalg.norm(q - X[w.x])


def violator_to_hyperplane(w: Violator, X, PX, q, v, eps_dag=None):
    """Normal n with <y - v, n> >= 0 for every feasible y."""
    if w.is_pair:
        s = pair_defect(X, PX, q, v, w.x, w.center)
        normal = -math.copysign(1.0, s) * (PX[w.x] - PX[w.center])
    else:
        normal = PX[w.x] - v
    if not np.any(normal):
        raise ValueError("degenerate violator: zero normal")
    return normal


class ReqScan:
    """Exhaustive evaluation of every constraint, used as the reference oracle.

    Coordinates are shifted so that q sits at the origin, which keeps the
    Gram-matrix arithmetic well conditioned.
    """

    def __init__(self, X, PX, q, eps_dag):
        self.q = np.asarray(q, dtype=np.float64)
        self.X = as_array(X)
        self.PX = np.asarray(PX, dtype=np.float64)
        self.eps_dag = eps_dag
        self.shift = self.PX.mean(axis=0)
        Xc = self.X - self.q
        Pc = self.PX - self.shift
        self.Xc, self.Pc = Xc, Pc
        G = Xc @ Xc.T
        self.M = Pc @ Pc.T
        sq = np.diag(G)
        self.qdist = np.sqrt(np.maximum(sq, 0))
        # <q - y, x - y> with q = 0 is <y, y> - <x, y>, indexed [y, x]
        self.true_ip = sq[:, None] - G
        D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * G, 0))
        self.bound = 20 * eps_dag * self.qdist[:, None] * D
        self.radius = (1 + 10 * eps_dag) * self.qdist

    def violations(self, v):
        vc = np.asarray(v, dtype=np.float64) - self.shift
        dist = np.linalg.norm(vc - self.Pc, axis=1)
        pv = self.Pc @ vc
        # <v - Πy, Π(x - y)>, indexed [y, x]
        proj_ip = pv[None, :] - pv[:, None] - self.M + np.diag(self.M)[:, None]
        s = proj_ip - self.true_ip
        return dist, s

    def most_violated(self, v):
        """Most violated constraint by normalized margin, or None."""
        dist, s = self.violations(v)
        with np.errstate(divide="ignore", invalid="ignore"):
            d_ratio = np.where(self.radius > 0, dist / self.radius, np.where(dist > 0, np.inf, 0.0))
            p_ratio = np.where(self.bound > 0, np.abs(s) / self.bound, 0.0)
        np.fill_diagonal(p_ratio, 0.0)
        xd = int(np.argmax(d_ratio))
        y, x = np.unravel_index(int(np.argmax(p_ratio)), p_ratio.shape)
        best_d, best_p = d_ratio[xd], p_ratio[y, x]
        if max(best_d, best_p) <= 1.0:
            return None
        if best_d >= best_p:
            return Violator(xd)
        return Violator(int(x), int(y))

    def feasible(self, v):
        return self.most_violated(v) is None


def direct_feasible_point(X, P, q, eps_dag, center=None, max_iters=None):
    """A point satisfying every constraint, found by the ellipsoid method
    with an exhaustive scan as the separation oracle."""
    X = as_array(X)
    M = P.matrix if hasattr(P, "matrix") else np.asarray(P)
    PX = X @ M.T
    q = np.asarray(q, dtype=np.float64)
    if center is None:
        center, r_hat = brute_nearest(X, q)
    else:
        r_hat = float(np.linalg.norm(q - X[center]))
    if r_hat == 0:
        return PX[center].copy(), 0
    scan = ReqScan(X, PX, q, eps_dag)
    k = M.shape[0]
    cap = max_iters if max_iters is not None else iteration_cap(k, 2 * r_hat, eps_dag * r_hat)

    def oracle(v):
        w = scan.most_violated(v)
        return None if w is None else violator_to_hyperplane(w, X, PX, q, v)

    try:
        state = run_ellipsoid(PX[center], 2 * r_hat, oracle, cap)
    except EllipsoidCapError as err:
        raise CertificationError(f"no feasible point within {cap} ellipsoid steps") from err
    except DegenerateEllipsoidError as err:
        raise CertificationError("constraint set is empty to working precision") from err
    return state.x, state.t


def verify_embedding(X, P, q, z_q):
    """(max_over, max_under) of ||z_q - (Πx, 0)|| / ||q - x|| around 1."""
    X = as_array(X)
    M = P.matrix if hasattr(P, "matrix") else np.asarray(P)
    q = np.asarray(q, dtype=np.float64)
    z_q = np.asarray(z_q, dtype=np.float64)
    true = np.linalg.norm(X - q, axis=1)
    keep = true > 0
    if not np.any(keep):
        return 0.0, 0.0
    img = X[keep] @ M.T
    emb = np.sqrt(np.sum((z_q[:-1] - img) ** 2, axis=1) + z_q[-1] ** 2)
    ratio = emb / true[keep]
    return float(max(ratio.max() - 1, 0.0)), float(max(1 - ratio.min(), 0.0))


# -- lifted near-neighbour search -------------------------------------------

class ProbeCounter:
    def __init__(self):
        self.total = 0
        self.calls = 0

    def add(self, count):
        self.total += int(count)


class LiftedView:
    """Lifted coordinates of one tree node for one choice of first block.

    The first block is x itself, or Π'x for a small ensemble sketch Π'.
    """

    def __init__(self, first, PX, first_map=None):
        self.first = first
        self.PX = PX
        self.first_map = first_map
        self._hyperplanes = None

    def query_first(self, q):
        return q if self.first_map is None else self.first_map @ q

    def inner_products(self, members, center, qf, v):
        """<lifted query at center, lifted direction of each member>."""
        a = qf - self.first[center]
        b = self.PX[center] - v
        qn = math.sqrt(a @ a + b @ b)
        Dx = self.first[members] - self.first[center]
        Px = self.PX[members] - self.PX[center]
        xn = np.sqrt(np.einsum("ij,ij->i", Dx, Dx) + np.einsum("ij,ij->i", Px, Px))
        if qn == 0:
            return np.zeros(len(members))
        with np.errstate(divide="ignore", invalid="ignore"):
            ip = (Dx @ a + Px @ b) / (qn * xn)
        return np.where(xn > 0, ip, 0.0)

    def hyperplanes(self, tables, bits, rng):
        if self._hyperplanes is None:
            width = self.first.shape[1] + self.PX.shape[1]
            H = rng.standard_normal((tables * bits, width))
            proj = np.hstack([self.first, self.PX]) @ H.T
            self._hyperplanes = (H, proj, tables, bits)
        return self._hyperplanes


# -- fixed-scale and multi-scale oracles -------------------------------------

@dataclass
class FixedScaleIndex:
    node: object
    radius: float
    anchors: np.ndarray  # local positions, in sample order
    ap_count: int
    witnesses: int
    seed: tuple
    _sets: dict = field(default_factory=dict, repr=False)


class QueryContext:
    """Per-oracle-call state: the candidate v and a memo of checks already
    made, so repeated scales never re-inspect the same constraint."""

    def __init__(self, q, v, xhat, eps_dag, probes, rng, variants):
        self.q, self.v, self.xhat = q, v, xhat
        self.eps_dag = eps_dag
        self.probes = probes
        self.rng = rng
        self.variants = variants
        self.seen_dist = {}
        self.seen_pair = set()
        self.seen_search = {}


class MultiScaleIndex:
    """Per tree node, a geometric ladder of fixed-scale indexes.

    Indexes are materialized on first use from seeds derived from the build
    seed, which yields exactly the structures an eager build would.
    """

    def __init__(self, X, PX, tree, config, seed, ensemble=None):
        self.X, self.PX, self.tree = X, PX, tree
        self.cfg = config
        self.seed = seed
        self.ensemble = ensemble
        n, d = X.shape
        self.nd = n * d
        self.ratio = 1 + config.gamma_t
        self.levels = math.ceil(math.log(self.nd ** (2 * config.beta_t)) / config.gamma_t)
        self.sub_delta = config.delta / (n * n * d)
        self._fixed = {}
        self._views = {}
        self._ap = {}
        self._xhat_dist = {}

    # ladder geometry
    def r_low(self, node):
        return node.r_apx / self.nd ** self.cfg.beta_t

    def radius(self, node, i):
        return self.r_low(node) * self.ratio ** i

    def fixed_scale(self, node, i):
        key = (node.node_id, i)
        if key not in self._fixed:
            self._fixed[key] = fixed_scale_instantiate(
                node, self.radius(node, i), self.cfg, self.sub_delta, (self.seed, node.node_id, i))
        return self._fixed[key]

    def view(self, node, variant):
        key = (node.node_id, variant)
        if key not in self._views:
            idx = node.indices
            if variant < 0:
                self._views[key] = LiftedView(self.X[idx], self.PX[idx])
            else:
                S = self.ensemble.sketches[variant]
                self._views[key] = LiftedView(self.X[idx] @ S.T, self.PX[idx], S)
        return self._views[key]

    def ap_buckets(self, node, i):
        key = (node.node_id, i)
        if key not in self._ap:
            cfg = self.cfg
            bits = cfg.ap_bits or max(1, math.ceil(math.log2(max(node.size, 2))))
            rng = np.random.default_rng([self.seed, node.node_id, 1 << 20, i])
            self._ap[key] = ProjectionBuckets(self.X[node.indices], cfg.ap_tables, bits, rng)
        return self._ap[key]

    def xhat_distances(self, node, local):
        key = (node.node_id, local)
        if key not in self._xhat_dist:
            Z = self.X[node.indices]
            self._xhat_dist[key] = np.linalg.norm(Z - Z[local], axis=1)
        return self._xhat_dist[key]


def fixed_scale_instantiate(node, r, cfg, delta, seed) -> FixedScaleIndex:
    if r <= 0:
        raise ValueError("scale must be positive")
    m = node.size
    # one anchor order per node, shared by every scale of its ladder
    rng = np.random.default_rng(list(seed[:2]))
    n_rep = math.ceil(cfg.c_rep * m ** cfg.rho_rep * math.log(max(m, 2) / delta))
    anchors = rng.integers(0, m, size=n_rep)
    # only the first occurrence of an anchor matters for assignment
    _, first = np.unique(anchors, return_index=True)
    anchors = anchors[np.sort(first)]
    l = math.ceil(cfg.c_ap * math.log(max(m, 2) / delta))
    p = math.ceil(cfg.c_witness * math.log(1 / cfg.delta_witness))
    return FixedScaleIndex(node, r, anchors, l, p, seed)


def _assigned_anchor(M, D, xhat_local, ctx_cache=None):
    dist = M.xhat_distances(D.node, xhat_local)
    hits = np.nonzero(dist[D.anchors] <= 2 * D.radius)[0]
    return int(D.anchors[hits[0]]) if len(hits) else None


def _ap_sets(M, D, i, xhat_local):
    """h_i(x̂) as (key, members) pairs, with witnesses and assignments."""
    node, cfg = D.node, M.cfg
    if cfg.ap_backend == "trivial":
        groups = [((i, "all"), np.arange(node.size))]
    else:
        buckets = M.ap_buckets(node, i)
        width = cfg.ap_width * D.radius
        found = buckets.lookup(buckets.project(xhat_local), width)
        codes = buckets.codes(width, [xhat_local])[0]
        groups = []
        for t, members in enumerate(buckets.group_members(0, found)):
            if len(members) == 0:
                continue
            code = codes[t * buckets.bits:(t + 1) * buckets.bits]
            groups.append(((i, t, code.tobytes()), np.sort(members)))
    out = []
    for key, members in groups:
        if key not in D._sets:
            tag = zlib.crc32(repr(key).encode())
            rng = np.random.default_rng(list(D.seed) + [i, tag])
            W = members[rng.integers(0, len(members), size=D.witnesses)]
            Z = M.X[node.indices]
            near = np.min(np.linalg.norm(Z[members][:, None, :] - Z[W][None, :, :], axis=2), axis=1)
            D._sets[key] = (members, W, near <= 4 * D.radius)
        out.append((key,) + D._sets[key])
    return out


def _distance_check(M, node, ctx, local):
    g = int(node.indices[local])
    if g not in ctx.seen_dist:
        ctx.probes.add(1)
        ctx.seen_dist[g] = violator_holds(Violator(g), M.X, M.PX, ctx.q, ctx.v, ctx.eps_dag)
    return Violator(g) if ctx.seen_dist[g] else None


def _pair_checks(M, node, ctx, members, center):
    """Threshold-check the given members centered at `center` (local ids)."""
    fresh = [x for x in members if x != center and (x, center) not in ctx.seen_pair]
    if not fresh:
        return None
    ctx.seen_pair.update((x, center) for x in fresh)
    fresh = np.asarray(fresh)
    ctx.probes.add(len(fresh))
    view = M.view(node, -1)
    ip = view.inner_products(fresh, center, ctx.q, ctx.v)
    for j in np.nonzero(np.abs(ip) >= 20 * ctx.eps_dag)[0]:
        w = Violator(int(node.indices[fresh[j]]), int(node.indices[center]))
        if violator_holds(w, M.X, M.PX, ctx.q, ctx.v, ctx.eps_dag):
            return w
    return None


def _lifted_search(M, node, ctx, set_key, members, center):
    """Query the lifted structure over `members` centered at `center` with
    both signs of the lifted query; return a certified violator or None."""
    key = (set_key, center)
    if key in ctx.seen_search:
        return ctx.seen_search[key]
    result = None
    cfg = M.cfg
    for variant in ctx.variants:
        view = M.view(node, variant)
        qf = view.query_first(ctx.q)
        if cfg.lifted_backend == "brute":
            cand = members[members != center]
        else:
            cand = _simhash_candidates(M, node, view, members, center, qf, ctx.v)
        if not len(cand):
            continue
        ctx.probes.add(len(cand))
        ip = view.inner_products(cand, center, qf, ctx.v)
        # the nearest neighbours of +query and -query
        picks = {int(np.argmax(ip)), int(np.argmin(ip))}
        for j in sorted(picks, key=lambda j: -abs(ip[j])):
            if abs(ip[j]) < 20 * ctx.eps_dag:
                continue
            w = Violator(int(node.indices[cand[j]]), int(node.indices[center]))
            if violator_holds(w, M.X, M.PX, ctx.q, ctx.v, ctx.eps_dag):
                result = w
                break
        if result is not None:
            break
    ctx.seen_search[key] = result
    return result


def _simhash_candidates(M, node, view, members, center, qf, v):
    cfg = M.cfg
    bits = cfg.lifted_bits or max(1, math.ceil(cfg.lifted_bits_factor * math.log2(max(node.size, 2))))
    rng = np.random.default_rng([M.seed, node.node_id, 1 << 21])
    H, proj, tables, bits = view.hyperplanes(cfg.lifted_tables, bits, rng)
    qvec = np.concatenate([qf - view.first[center], view.PX[center] - v])
    qsign = (H @ qvec) > 0
    side = (proj[members] - proj[center]) > 0  # (|S|, tables*bits)
    hit = np.zeros(len(members), dtype=bool)
    for sign in (qsign, ~qsign):
        same = (side == sign).reshape(len(members), tables, bits).all(axis=2)
        hit |= same.any(axis=1)
    hit &= members != center
    return members[hit]


def fixed_scale_query(M, D: FixedScaleIndex, ctx: QueryContext, xhat_local: int):
    node = D.node
    w = _distance_check(M, node, ctx, xhat_local)
    if w:
        return w
    z = _assigned_anchor(M, D, xhat_local)
    if z is not None:
        if z != xhat_local:
            w = _distance_check(M, node, ctx, z) or _pair_checks(M, node, ctx, [z], xhat_local)
            if w:
                return w
        return _lifted_search(M, node, ctx, "all", np.arange(node.size), z)

    cfg = M.cfg
    m = node.size
    cap_free = cfg.c_cap * m ** cfg.rho4
    cap_assigned = cfg.c_cap * m ** (1 - cfg.rho_rep + cfg.rho3)
    for i in range(D.ap_count):
        sets = _ap_sets(M, D, i, xhat_local)
        free = sum(int((~assigned).sum()) for _, _, _, assigned in sets)
        taken = sum(int(assigned.sum()) for _, _, _, assigned in sets)
        if free > cap_free or taken > cap_assigned:
            continue
        for key, members, witnesses, assigned in sets:
            w = _pair_checks(M, node, ctx, members[~assigned].tolist(), xhat_local)
            if w:
                return w
            for wit in witnesses:
                wit = int(wit)
                w = _distance_check(M, node, ctx, wit)
                if not w and wit != xhat_local:
                    w = _pair_checks(M, node, ctx, [wit], xhat_local)
                if not w:
                    w = _lifted_search(M, node, ctx, key, members, wit)
                if w:
                    return w
    return None


def multi_scale_query(M: MultiScaleIndex, node, ctx: QueryContext, xhat_local: int):
    ctx.probes.calls += 1
    for i in range(M.levels + 1):
        w = fixed_scale_query(M, M.fixed_scale(node, i), ctx, xhat_local)
        if w is not None:
            return w
    return None


# -- the embedding index ----------------------------------------------------

@dataclass
class EmbeddingResult:
    z_q: np.ndarray
    xhat: int
    iterations: int
    probes: int
    oracle_calls: int
    aann_probes: int

    @property
    def probes_per_call(self):
        return self.probes / max(self.oracle_calls, 1)


class TerminalEmbedding:
    """Index over a terminal set X: sketch, partition tree, adaptive NN
    structure and the multi-scale violator detector."""

    def __init__(self, X, config, sketch, tree, keep, remap, ensemble=None):
        self.X_input = as_array(X)
        self.cfg = config
        self.sketch = sketch
        self.tree = tree
        self.keep, self.remap = keep, remap
        self.points = tree.points
        self.PX = self.points @ sketch.matrix.T
        self.ensemble = ensemble
        self.aann = build_aann(tree, config.delta, aann_params(config), seed=_derive(config.seed, "aann"))
        self.multi = MultiScaleIndex(self.points, self.PX, tree, config, _derive(config.seed, "multi"), ensemble)
        self._counter = 0

    @property
    def k(self):
        return self.sketch.k

    @property
    def d(self):
        return self.points.shape[1]

    def query_rng(self, q, query_seed=None):
        if self.cfg.deterministic_repeat:
            digest = hashlib.sha256(np.asarray(q, dtype=np.float64).tobytes()).digest()
            return np.random.default_rng([self.cfg.seed, int.from_bytes(digest[:8], "little")])
        if query_seed is None:
            self._counter += 1
            return np.random.default_rng([self.cfg.seed, 1 << 30, self._counter])
        return np.random.default_rng(query_seed)

    def embed(self, q, rng=None) -> EmbeddingResult:
        return compute_terminal_embedding(self, q, rng if rng is not None else self.query_rng(q))

    def verify(self, q, z_q):
        return verify_embedding(self.X_input, self.sketch, q, z_q)


def _derive(seed, label):
    return int.from_bytes(hashlib.sha256(f"{seed}:{label}".encode()).digest()[:8], "little")


def aann_params(cfg):
    return AannParams(backend=cfg.aann_backend, c=cfg.aann_c, gamma=cfg.gamma, alpha=cfg.alpha,
                      beta=cfg.beta, c_range=cfg.c_range, copies_constant=cfg.aann_copies,
                      lsh_tables=cfg.aann_lsh_tables, lsh_width=cfg.aann_lsh_width)


def build_index(X, config, sketch=None, ensemble=None) -> TerminalEmbedding:
    from .medjl import build_ensemble, default_ensemble_size, default_sketch_rows
    from .sketch import certified_sketch

    X = as_array(X)
    unique, keep, remap = deduplicate(X)
    n, d = unique.shape
    if sketch is None:
        k = config.sketch_rows(n)
        sketch = certified_sketch(unique, k, config.certify_factor * config.eps,
                                  _derive(config.seed, "sketch"), config.sketch_retries)
    tree = construct_partition_tree(unique, config.delta, _derive(config.seed, "tree"))
    if ensemble is None and config.median_jl:
        m = config.medjl_m or default_ensemble_size(n, d)
        rows = config.medjl_rows or default_sketch_rows(n)
        ensemble = build_ensemble(unique, m, rows, config.eps, _derive(config.seed, "medjl"),
                                  store_projections=False)
    return TerminalEmbedding(X, config, sketch, tree, keep, remap, ensemble)


def compute_terminal_embedding(index: TerminalEmbedding, q, rng) -> EmbeddingResult:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.d,):
        raise ValueError(f"query has shape {q.shape}, expected ({index.d},)")
    rng = np.random.default_rng(rng)
    answer = query_aann(index.aann, q, rng)
    xhat = answer.index
    node = answer.node
    r_hat = float(np.linalg.norm(q - index.points[xhat]))
    base = index.PX[xhat]
    if node.is_leaf or r_hat == 0:
        z = np.concatenate([base, [r_hat]])
        return EmbeddingResult(z, int(index.keep[xhat]), 0, 0, 0, answer.probes)

    cfg = index.cfg
    eps_dag = cfg.eps_dagger
    variants = [-1]
    if index.ensemble is not None:
        count = cfg.medjl_samples or min(index.ensemble.m, math.ceil(math.log(max(index.points.shape[0], 2))))
        variants = [int(i) for i in rng.choice(index.ensemble.m, size=count, replace=False)]
    probes = ProbeCounter()
    local = node.local(xhat)

    def oracle(v):
        ctx = QueryContext(q, v, xhat, eps_dag, probes, rng, variants)
        w = multi_scale_query(index.multi, node, ctx, local)
        return None if w is None else violator_to_hyperplane(w, index.points, index.PX, q, v)

    cap = iteration_cap(index.k, 2 * r_hat, eps_dag * r_hat)
    state = run_ellipsoid(base, 2 * r_hat, oracle, cap)
    v = state.x
    height = math.sqrt(max(0.0, r_hat ** 2 - float(np.sum((v - base) ** 2))))
    return EmbeddingResult(np.concatenate([v, [height]]), int(index.keep[xhat]), state.t,
                           probes.total, probes.calls, answer.probes)
