"""Ensembles of small Gaussian sketches, most of which preserve every
three-point inner product of the data plus any single query."""

import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CapExceededError
from .geometry import as_array

TRIPLE_SAMPLE = 100_000
EXACT_LIMIT = 64


def default_ensemble_size(n: int, d: int) -> int:
    return min(512, math.ceil(4 * (d + 10) * math.log(max(n * d, 2))))


def default_sketch_rows(n: int, c: float = 4.0) -> int:
    n = max(n, 3)
    return max(1, math.ceil(c * math.log(n) * math.log(math.log(n))))


@dataclass
class MedianEnsemble:
    sketches: np.ndarray  # (m, k', d)
    frobenius_cap: float
    seed: int
    projections: np.ndarray = field(default=None, repr=False)  # (m, n, k')
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def m(self):
        return self.sketches.shape[0]

    @property
    def rows(self):
        return self.sketches.shape[1]

    @property
    def d(self):
        return self.sketches.shape[2]

    def grams(self, lo=0, hi=None):
        """Π_iᵀ Π_i for sketches lo..hi."""
        S = self.sketches[lo:hi]
        return np.einsum("mkd,mke->mde", S, S)


def build_ensemble(X, m: int, rows: int, eps: float, seed: int, c_frob: float = 2.0,
                   identity: bool = False, retries: int = 64,
                   store_projections: bool = True) -> MedianEnsemble:
    X = as_array(X)
    n, d = X.shape
    if m < 1:
        raise ValueError("ensemble size must be positive")
    if eps <= 1.0 / math.sqrt(n * d):
        warnings.warn(f"eps={eps} is at or below 1/sqrt(nd); the ensemble guarantee does not cover it")
    cap = c_frob * math.sqrt(d)
    if identity:
        if rows != d:
            raise ValueError("identity ensemble needs rows == d")
        sketches = np.broadcast_to(np.eye(d), (m, d, d)).copy()
    else:
        rng = np.random.default_rng(seed)
        sketches = np.empty((m, rows, d))
        for i in range(m):
            for _ in range(retries):
                S = rng.standard_normal((rows, d)) / math.sqrt(rows)
                if np.linalg.norm(S) <= cap:
                    break
            else:
                raise CapExceededError("Frobenius filter rejected too many sketches")
            sketches[i] = S
    proj = np.einsum("mkd,nd->mnk", sketches, X) if store_projections else None
    return MedianEnsemble(sketches, cap, seed, proj)


def ap_ip_defect(P, x, y, z) -> float:
    M = P.matrix if hasattr(P, "matrix") else np.asarray(P, dtype=np.float64)
    a = np.asarray(x, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64) - np.asarray(z, dtype=np.float64)
    scale = np.linalg.norm(a) * np.linalg.norm(b)
    if scale == 0:
        return 0.0
    return abs(float((M @ a) @ (M @ b) - a @ b)) / scale


def _triples(n_total, seed):
    if n_total <= EXACT_LIMIT + 1:
        grid = np.indices((n_total,) * 3).reshape(3, -1)
        return grid[0], grid[1], grid[2]
    rng = np.random.default_rng(seed)
    t = rng.integers(0, n_total, size=(3, TRIPLE_SAMPLE))
    return t[0], t[1], t[2]


def _defects(G, PG, x, y, z):
    """Normalized defects for index triples given true and projected Grams.

    PG may carry a leading sketch axis.
    """
    true_ip = G[x, y] - G[x, z] - G[y, z] + G[z, z]
    nx = np.maximum(G[x, x] - 2 * G[x, z] + G[z, z], 0.0)
    ny = np.maximum(G[y, y] - 2 * G[y, z] + G[z, z], 0.0)
    scale = np.sqrt(nx * ny)
    proj_ip = PG[..., x, y] - PG[..., x, z] - PG[..., y, z] + PG[..., z, z]
    out = np.abs(proj_ip - true_ip)
    ok = scale > 1e-12 * (G[x, x] + G[y, y] + G[z, z] + 1e-300)
    return np.where(ok, out / np.where(ok, scale, 1.0), 0.0)


def _static_worst(E: MedianEnsemble, Xc, seed):
    """Per-sketch max defect over sampled triples that avoid the query slot."""
    key = (hashlib.sha1(Xc.tobytes()).hexdigest(), seed)
    if key in E._cache:
        return E._cache[key]
    n = Xc.shape[0]
    x, y, z = _triples(n + 1, seed)
    keep = (x < n) & (y < n) & (z < n)
    x, y, z = x[keep], y[keep], z[keep]
    G = Xc @ Xc.T
    worst = np.zeros(E.m)
    step = max(1, 2 ** 24 // max(n * n, 1))
    for lo in range(0, E.m, step):
        hi = min(E.m, lo + step)
        PX = np.einsum("mkd,nd->mnk", E.sketches[lo:hi], Xc)
        PG = np.einsum("mnk,mpk->mnp", PX, PX)
        if len(x):
            worst[lo:hi] = _defects(G, PG, x, y, z).max(axis=-1)
    E._cache[key] = worst
    return worst


def _factors(E: MedianEnsemble, Xc):
    """(F, H) with Π_i x·Π_i y = F[i, x]·H[(i,) x, y]; cached per dataset."""
    key = ("factors", hashlib.sha1(Xc.tobytes()).hexdigest())
    if key not in E._cache:
        if E.rows <= E.d:
            PX = np.einsum("mkd,nd->mnk", E.sketches, Xc)
            E._cache[key] = (PX, PX)
        else:
            E._cache[key] = (np.einsum("nd,mde->mne", Xc, E.grams()), Xc)
    return E._cache[key]


def good_fraction(E: MedianEnsemble, X, q, eps: float, seed: int = 0) -> float:
    """Fraction of sketches whose max defect over triples of X ∪ {q} is <= eps.

    Exact over all triples for n <= 64, otherwise over a fixed seeded sample.
    """
    X = as_array(X)
    mean = X.mean(axis=0)
    Xc = X - mean
    qc = np.asarray(q, dtype=np.float64) - mean
    n = Xc.shape[0]
    worst = _static_worst(E, Xc, seed).copy()

    x, y, z = _triples(n + 1, seed)
    keep = (x == n) | (y == n) | (z == n)
    x, y, z = x[keep], y[keep], z[keep]
    if not len(x):
        return float(np.mean(worst <= eps))
    T = np.vstack([Xc, qc])
    G = T @ T.T
    F, H = _factors(E, Xc)
    # the query row of every projected Gram
    Pq = np.einsum("mkd,d->mk", E.sketches, qc)
    w = np.einsum("mkd,mk->md", E.sketches, Pq)
    row = np.concatenate([w @ Xc.T, (w @ qc)[:, None]], axis=1)  # (m, n+1)

    def lookup(a, b):
        out = np.empty((E.m, len(a)))
        qa, qb = a == n, b == n
        out[:, qa] = row[:, b[qa]]
        out[:, qb & ~qa] = row[:, a[qb & ~qa]]
        both = ~(qa | qb)
        if np.any(both):
            Hb = H[:, b[both]] if H.ndim == 3 else H[b[both]][None]
            out[:, both] = np.einsum("mlr,mlr->ml", F[:, a[both]], np.broadcast_to(Hb, F[:, a[both]].shape))
        return out

    true_ip = G[x, y] - G[x, z] - G[y, z] + G[z, z]
    nx = np.maximum(G[x, x] - 2 * G[x, z] + G[z, z], 0.0)
    ny = np.maximum(G[y, y] - 2 * G[y, z] + G[z, z], 0.0)
    scale = np.sqrt(nx * ny)
    ok = scale > 1e-12 * (G[x, x] + G[y, y] + G[z, z] + 1e-300)
    proj_ip = lookup(x, y) - lookup(x, z) - lookup(y, z) + lookup(z, z)
    defect = np.where(ok, np.abs(proj_ip - true_ip) / np.where(ok, scale, 1.0), 0.0)
    worst = np.maximum(worst, defect.max(axis=1))
    return float(np.mean(worst <= eps))


def sample_sketch_indices(E: MedianEnsemble, count: int, rng) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be positive")
    if count > E.m:
        raise ValueError(f"cannot sample {count} of {E.m} sketches without replacement")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return rng.choice(E.m, size=count, replace=False)


def query_rng(index_seed: int, counter: int) -> np.random.Generator:
    return np.random.default_rng([index_seed, counter])
