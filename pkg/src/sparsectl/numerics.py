"""Dense linear algebra for LTI/LTV systems.

Matrix exponentials, state-transition matrices, zero-order-hold
discretization blocks, and forward propagation of piecewise-constant
controlled trajectories. Everything here is plain dense numpy; systems
stay small enough (n up to a few hundred) that sparsity buys nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm as _scipy_expm

__all__ = [
    "TimeGrid",
    "LtiSystem",
    "LtvSystem",
    "matrix_exponential",
    "transition_matrix",
    "zoh_blocks",
    "propagate_state",
]


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be nonempty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def matrix_exponential(a, t: float = 1.0) -> np.ndarray:
    """Return e^{a t} for a square matrix ``a``.

    Backed by scipy's scaling-and-squaring Pade implementation; relative
    accuracy is far better than the 1e-10 this package relies on for
    ``norm(a t) <= 50``.
    """
    a = _as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix_exponential needs a square matrix, got {a.shape}")
    if not math.isfinite(t):
        raise ValueError("t must be finite")
    return _scipy_expm(a * t)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_K = horizon with step dt."""

    steps: int
    dt: float

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("grid needs at least one step")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive and finite")

    @classmethod
    def from_horizon(cls, horizon: float, steps: int) -> "TimeGrid":
        if not (horizon > 0 and math.isfinite(horizon)):
            raise ValueError("horizon must be positive and finite")
        return cls(steps=int(steps), dt=horizon / int(steps))

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    @property
    def knots(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.steps) + 0.5) * self.dt

    def matches(self, other: "TimeGrid", rtol: float = 1e-12) -> bool:
        return self.steps == other.steps and math.isclose(
            self.dt, other.dt, rel_tol=rtol, abs_tol=0.0
        )


@dataclass(frozen=True)
class LtiSystem:
    """Time-invariant pair (A, B) with a control horizon."""

    a: np.ndarray
    b: np.ndarray
    horizon: float

    def __post_init__(self):
        a = _as_matrix(self.a, "a")
        b = _as_matrix(self.b, "b")
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"a must be square, got {a.shape}")
        if b.shape[0] != a.shape[0]:
            raise ValueError(f"b must have {a.shape[0]} rows, got {b.shape}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError("horizon must be positive and finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[1]

    def as_ltv(self) -> "LtvSystem":
        a, b = self.a, self.b
        return LtvSystem(
            n=self.n, m=self.m, provider=lambda t: (a, b), horizon=self.horizon
        )


@dataclass(frozen=True)
class LtvSystem:
    """Time-varying system given by a provider t -> (A(t), B(t)) on [0, horizon]."""

    n: int
    m: int
    provider: Callable[[float], tuple[np.ndarray, np.ndarray]]
    horizon: float

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("state and input dimensions must be >= 1")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError("horizon must be positive and finite")

    @classmethod
    def from_lti(cls, sys: LtiSystem) -> "LtvSystem":
        return sys.as_ltv()

    def matrices_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.provider(t)
        a = _as_matrix(a, f"A({t})")
        b = _as_matrix(b, f"B({t})")
        if a.shape != (self.n, self.n) or b.shape != (self.n, self.m):
            raise ValueError(
                f"provider returned shapes {a.shape}/{b.shape}, "
                f"expected ({self.n},{self.n})/({self.n},{self.m})"
            )
        return a, b


def transition_matrix(
    sys: LtvSystem, t1: float, t0: float, max_step: float = 1.0 / 256.0
) -> np.ndarray:
    """State-transition matrix Phi(t1, t0) of dx/dt = A(t)x.

    Integrates the matrix ODE dPhi/dt = A(t) Phi, Phi(t0, t0) = I with
    classical fixed-step RK4. ``max_step`` bounds the substep so the
    composition property Phi(t2,t0) = Phi(t2,t1) Phi(t1,t0) holds to
    better than 1e-8 at desk scale.
    """
    if not (0.0 <= t0 <= t1 <= sys.horizon + 1e-12):
        raise ValueError(f"need 0 <= t0 <= t1 <= horizon, got t0={t0}, t1={t1}")
    n = sys.n
    phi = np.eye(n)
    span = t1 - t0
    if span == 0.0:
        return phi
    nsub = max(1, int(math.ceil(span / max_step)))
    h = span / nsub

    def rhs(t, p):
        a, _ = sys.matrices_at(t)
        return a @ p

    t = t0
    for _ in range(nsub):
        k1 = rhs(t, phi)
        k2 = rhs(t + 0.5 * h, phi + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, phi + 0.5 * h * k2)
        k4 = rhs(t + h, phi + h * k3)
        phi = phi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
    return phi


def zoh_blocks(
    sys: LtvSystem, grid: TimeGrid
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-step transition and zero-order-hold input blocks (E_k, G_k).

    A and B are frozen at the step midpoint and the pair is read off the
    augmented exponential exp(dt * [[A, B], [0, 0]]), so that

        x_{k+1} = E_k x_k + G_k u_k

    with local error O(dt^3) (midpoint sampling), O(dt^2) accumulated.
    For a time-invariant provider the blocks are computed once and reused.
    """
    n, m = sys.n, sys.m
    dt = grid.dt
    aug = np.zeros((n + m, n + m))

    def one(t_mid):
        a, b = sys.matrices_at(t_mid)
        aug[:n, :n] = a * dt
        aug[:n, n:] = b * dt
        big = _scipy_expm(aug)
        return big[:n, :n].copy(), big[:n, n:].copy()

    mids = grid.midpoints
    a0, b0 = sys.matrices_at(mids[0])
    invariant = True
    for t in (mids[len(mids) // 2], mids[-1]):
        a1, b1 = sys.matrices_at(t)
        if not (np.array_equal(a0, a1) and np.array_equal(b0, b1)):
            invariant = False
            break
    if invariant:
        e, g = one(mids[0])
        return [e] * grid.steps, [g] * grid.steps
    es, gs = [], []
    for t in mids:
        e, g = one(t)
        es.append(e)
        gs.append(g)
    return es, gs


def propagate_state(
    sys: LtvSystem,
    x0: Sequence[float],
    u,
    grid: TimeGrid,
    blocks: tuple[list[np.ndarray], list[np.ndarray]] | None = None,
) -> np.ndarray:
    """Forward-simulate x_{k+1} = E_k x_k + G_k u_k; returns (K+1, n) states.

    ``u`` is a (K, m) array of piecewise-constant inputs (anything with a
    ``values`` attribute of that shape is also accepted). Precomputed
    ``blocks`` from :func:`zoh_blocks` may be passed to avoid recomputation.
    """
    values = np.asarray(getattr(u, "values", u), dtype=float)
    if values.shape != (grid.steps, sys.m):
        raise ValueError(
            f"control must have shape ({grid.steps}, {sys.m}), got {values.shape}"
        )
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (sys.n,):
        raise ValueError(f"x0 must have shape ({sys.n},), got {x0.shape}")
    if blocks is None:
        blocks = zoh_blocks(sys, grid)
    es, gs = blocks
    out = np.empty((grid.steps + 1, sys.n))
    out[0] = x0
    x = x0
    for k in range(grid.steps):
        x = es[k] @ x + gs[k] @ values[k]
        out[k + 1] = x
    return out
