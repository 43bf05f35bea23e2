"""Dense Gaussian sketches and distortion checks."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CertificationError
from .geometry import as_array


@dataclass(frozen=True)
class Sketch:
    matrix: np.ndarray
    seed: int = 0

    @property
    def k(self):
        return self.matrix.shape[0]

    @property
    def d(self):
        return self.matrix.shape[1]

    def apply(self, x):
        """Project a vector or the rows of a matrix."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.matrix.T if x.ndim == 2 else self.matrix @ x


@dataclass
class DistortionReport:
    max_pair_violation: float
    max_sampled_hull_violation: float
    samples: int
    violations: np.ndarray = field(repr=False, default=None)

    def violation_fraction(self, eps):
        return float(np.mean(self.violations > eps))


def sample_sketch(d: int, k: int, seed: int) -> Sketch:
    if d < 1 or k < 1:
        raise ValueError("sketch dimensions must be positive")
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((k, d)) / math.sqrt(k)
    matrix.setflags(write=False)
    return Sketch(matrix, seed)


def identity_sketch(d: int) -> Sketch:
    return Sketch(np.eye(d))


def default_k(n: int, eps: float, c_k: float = 8.0) -> int:
    return max(1, math.ceil(c_k * eps ** -2 * math.log(max(n, 2))))


def _normalized_differences(X):
    n = X.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    diff = X[iu] - X[ju]
    norms = np.linalg.norm(diff, axis=1)
    keep = norms > 0
    return diff[keep] / norms[keep, None], iu[keep], ju[keep]


def pair_distortion(P: Sketch, X) -> float:
    """Max over distinct pairs of |‖Π(x − y)‖/‖x − y‖ − 1|.

    Row blocks are evaluated through Gram matrices; pairs whose squared
    distance is tiny next to their norms are redone from explicit differences.
    """
    X = as_array(X)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    Xc = X - X.mean(axis=0)
    PX = P.apply(Xc)
    sq = np.einsum("ij,ij->i", Xc, Xc)
    psq = np.einsum("ij,ij->i", PX, PX)
    worst = 0.0
    block = max(1, 2 ** 22 // n)
    for a in range(0, n - 1, block):
        b = min(n - 1, a + block)
        cols = slice(a + 1, n)
        D2 = sq[a:b, None] + sq[None, cols] - 2 * Xc[a:b] @ Xc[cols].T
        P2 = psq[a:b, None] + psq[None, cols] - 2 * PX[a:b] @ PX[cols].T
        upper = np.arange(a, b)[:, None] < np.arange(a + 1, n)[None, :]
        risky = upper & (D2 <= 1e-6 * (sq[a:b, None] + sq[None, cols]))
        safe = upper & ~risky
        if np.any(safe):
            ratio = np.sqrt(np.maximum(P2[safe], 0.0) / D2[safe])
            worst = max(worst, float(np.max(np.abs(ratio - 1.0))))
        i, j = np.nonzero(risky)
        if len(i):
            diff = X[a + i] - X[a + 1 + j]
            norms = np.linalg.norm(diff, axis=1)
            keep = norms > 0
            if np.any(keep):
                ratio = np.linalg.norm(P.apply(diff[keep]), axis=1) / norms[keep]
                worst = max(worst, float(np.max(np.abs(ratio - 1.0))))
    return worst


def sampled_hull_distortion(P: Sketch, X, samples: int, seed: int) -> DistortionReport:
    """Max |‖Πz‖ − ‖z‖| over random points z of the hull of signed unit differences.

    Every pure difference and the origin are always included on top of the
    random Dirichlet combinations.
    """
    X = as_array(X)
    n = X.shape[0]
    if n < 2 or samples < 1:
        raise ValueError("need n >= 2 and samples >= 1")
    units, _, _ = _normalized_differences(X)
    rng = np.random.default_rng(seed)

    pure = np.abs(np.linalg.norm(P.apply(units), axis=1) - 1.0) if len(units) else np.zeros(0)
    npairs = len(units)
    per_sample = min(50, 2 * npairs) if npairs else 0
    random_viol = np.zeros(samples)
    if npairs:
        batch = max(1, 200000 // max(per_sample, 1))
        for start in range(0, samples, batch):
            b = min(batch, samples - start)
            picks = rng.integers(0, npairs, size=(b, per_sample))
            signs = rng.choice((-1.0, 1.0), size=(b, per_sample))
            weights = rng.dirichlet(np.ones(per_sample), size=b) * signs
            z = np.einsum("bs,bsd->bd", weights, units[picks])
            random_viol[start:start + b] = np.abs(
                np.linalg.norm(P.apply(z), axis=1) - np.linalg.norm(z, axis=1))
    violations = np.concatenate([random_viol, pure, [0.0]])
    return DistortionReport(
        max_pair_violation=float(pure.max()) if len(pure) else 0.0,
        max_sampled_hull_violation=float(violations.max()),
        samples=len(violations),
        violations=violations,
    )


def inner_product_defect(P: Sketch, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return abs(float(P.apply(x) @ P.apply(y) - x @ y))


def certified_sketch(X, k: int, eps: float, seed: int, retries: int = 8) -> Sketch:
    """Sample sketches until one has pair distortion at most eps."""
    X = as_array(X)
    rng = np.random.default_rng(seed)
    for _ in range(retries):
        P = sample_sketch(X.shape[1], k, int(rng.integers(2 ** 63)))
        if X.shape[0] < 2 or pair_distortion(P, X) <= eps:
            return P
    raise CertificationError(f"no sketch with pair distortion <= {eps} after {retries} tries")
