"""Central-cut ellipsoid method driven by a weak separation oracle.

The oracle receives the current center and returns either None (FAIL, the
center is accepted) or a nonzero normal v such that every feasible y has
<y - x, v> >= 0.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import CapExceededError

MIN_QUADRATIC = 1e-300


class DegenerateEllipsoidError(ArithmeticError):
    pass


class EllipsoidCapError(CapExceededError):
    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class EllipsoidState:
    x: np.ndarray
    A: np.ndarray
    t: int = 0

    @classmethod
    def ball(cls, center, radius):
        center = np.asarray(center, dtype=np.float64)
        return cls(center.copy(), np.eye(len(center)) * radius ** 2, 0)

    @property
    def k(self):
        return len(self.x)

    def contains(self, y):
        diff = np.asarray(y, dtype=np.float64) - self.x
        return float(diff @ np.linalg.solve(self.A, diff)) <= 1.0 + 1e-12


def ellipsoid_update(state: EllipsoidState, v) -> EllipsoidState:
    v = np.asarray(v, dtype=np.float64)
    k = state.k
    Av = state.A @ v
    quad = float(v @ Av)
    if not quad >= MIN_QUADRATIC:
        raise DegenerateEllipsoidError(f"v^T A v = {quad} is below tolerance")
    u = Av / math.sqrt(quad)
    x = state.x + u / (k + 1)
    if k == 1:
        # the half interval is itself the minimal ellipsoid
        A = state.A / 4.0
    else:
        A = (k * k / (k * k - 1.0)) * (state.A - (2.0 / (k + 1)) * np.outer(u, u))
        A = 0.5 * (A + A.T)
    return EllipsoidState(x, A, state.t + 1)


def volume_ratio(k: int) -> float:
    """det(A')/det(A) for one central cut in dimension k >= 2."""
    return (k * k / (k * k - 1.0)) ** k * (1.0 - 2.0 / (k + 1))


def iteration_cap(k: int, R: float, eps_ball: float) -> int:
    return math.ceil(2 * k * (k + 1) * math.log(max(R / eps_ball, 1.0))) + 1


def run_ellipsoid(x0, R: float, oracle, max_iters: int) -> EllipsoidState:
    """Iterate until the oracle reports FAIL; return the accepting state.

    The returned state's x is the accepted point and t the number of updates.
    """
    if R <= 0:
        raise ValueError("R must be positive")
    state = EllipsoidState.ball(x0, R)
    while True:
        normal = oracle(state.x)
        if normal is None:
            return state
        if state.t >= max_iters:
            raise EllipsoidCapError(f"ellipsoid exceeded {max_iters} iterations", state)
        state = ellipsoid_update(state, normal)
