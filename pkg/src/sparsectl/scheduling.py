"""Control-node scheduling under per-channel duration and simultaneity budgets.

The combinatorial problem — pick a binary activation schedule v(t) that
maximizes the Gramian-trace objective while each channel is on for at
most alpha_j time and at most beta channels are on at once — is solved
through its box/l1 relaxation, a linear program on a uniform grid. Under
the regularity condition checked by :func:`check_regularity` the relaxed
optimum is binary, so the LP vertex *is* the combinatorial answer.

A dual characterization is also provided: nonpositive budget multipliers
gamma_j such that the pointwise rule "activate the top-beta channels
among those with score f_j(t) + gamma_j > 0" reproduces the optimal
schedule. :func:`solve_schedule_dual` finds gamma by coordinate
bisection and cross-validates against the LP.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import lp as lpmod
from .numerics import LtiSystem, TimeGrid, matrix_exponential

__all__ = [
    "ScheduleInstance",
    "ScoreTable",
    "Schedule",
    "DualReport",
    "RegularityReport",
    "NonBinaryScheduleError",
    "DualConvergenceError",
    "controllability_scores",
    "objective_value",
    "check_regularity",
    "solve_relaxed_schedule",
    "recover_binary_schedule",
    "solve_schedule_dual",
    "top_slice_schedule",
    "schedule_to_csv",
    "gantt_intervals",
]


class NonBinaryScheduleError(RuntimeError):
    """Relaxed solution is not binary within tolerance (regularity likely fails)."""

    def __init__(self, fraction: float):
        super().__init__(f"non-binary mass fraction {fraction:.3e} exceeds 1e-4")
        self.fraction = fraction


class DualConvergenceError(RuntimeError):
    """Coordinate bisection did not reach a consistent multiplier vector."""

    def __init__(self, residual: float, gamma: np.ndarray):
        super().__init__(f"dual solver stalled at budget residual {residual:.3e}")
        self.residual = residual
        self.gamma = gamma


@dataclass(frozen=True)
class ScheduleInstance:
    """LTI system with per-channel duration budgets and a simultaneity bound.

    ``beta == m`` is accepted and means the simultaneity constraint is
    absent, which bridges to the aggregate-budget baseline problem.
    """

    system: LtiSystem
    alpha: np.ndarray
    beta: int

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        m = self.system.m
        if alpha.size != m:
            raise ValueError(f"alpha needs {m} entries, got {alpha.size}")
        t = self.system.horizon
        if np.any(alpha <= 0) or np.any(alpha > t + 1e-12):
            raise ValueError("each alpha_j must lie in (0, horizon]")
        if not (1 <= int(self.beta) <= m):
            raise ValueError(f"beta must be in 1..{m}, got {self.beta}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", int(self.beta))


@dataclass(frozen=True)
class ScoreTable:
    """Channel scores f_j sampled at interval midpoints; shape (K, m)."""

    grid: TimeGrid
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 2 or s.shape[0] != self.grid.steps:
            raise ValueError(f"scores must be (K, m) with K={self.grid.steps}")
        if np.any(s < -1e-12):
            raise ValueError("scores are squared norms and cannot be negative")
        object.__setattr__(self, "scores", s)

    @property
    def n_channels(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant activation values on a grid plus solution metadata.

    ``discreteness_fraction`` is the Lebesgue measure of cells farther
    than ``tol`` from {0,1}, divided by m*T.
    """

    grid: TimeGrid
    values: np.ndarray
    objective: float
    channel_usage: np.ndarray
    discreteness_fraction: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != self.grid.steps:
            raise ValueError("values must be (K, m)")
        if np.any(v < -1e-8) or np.any(v > 1 + 1e-8):
            raise ValueError("activation values must lie in [0, 1]")
        object.__setattr__(self, "values", v)
        object.__setattr__(
            self, "channel_usage", np.asarray(self.channel_usage, dtype=float)
        )

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class DualReport:
    """Budget multipliers and their complementary-slackness residual."""

    gamma: np.ndarray
    eta: int
    comp_slack_residual: float
    sweeps: int


@dataclass(frozen=True)
class RegularityReport:
    """CONSTANT flags for channels f_j and pairs f_j - f_i over the grid."""

    channel_flags: tuple
    pair_flags: tuple
    tol: float

    @property
    def passed(self) -> bool:
        return not self.channel_flags and not self.pair_flags


def _discreteness_fraction(values: np.ndarray, grid: TimeGrid, tol: float) -> float:
    off = np.minimum(np.abs(values), np.abs(1.0 - values)) > tol
    total = values.shape[1] * grid.horizon
    return float(off.sum() * grid.dt / total)


def _make_schedule(values, scores: ScoreTable, tol: float = 1e-6) -> Schedule:
    grid = scores.grid
    values = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    return Schedule(
        grid=grid,
        values=values,
        objective=float(grid.dt * np.sum(scores.scores * values)),
        channel_usage=grid.dt * values.sum(axis=0),
        discreteness_fraction=_discreteness_fraction(values, grid, tol),
    )


def controllability_scores(instance: ScheduleInstance, grid: TimeGrid) -> ScoreTable:
    """Scores f_j(t) = ||e^{At} b_j||^2 at the interval midpoints.

    f_j is the rate at which channel j contributes to the Gramian trace,
    so the scheduling objective is the score-weighted activation measure.
    """
    a, b = instance.system.a, instance.system.b
    out = np.empty((grid.steps, instance.system.m))
    for k, t in enumerate(grid.midpoints):
        eb = matrix_exponential(a, t) @ b
        out[k] = np.sum(eb * eb, axis=0)
    return ScoreTable(grid=grid, scores=out)


def objective_value(schedule: Schedule, scores: ScoreTable) -> float:
    """Rectangle-rule value of the schedule under the given score table."""
    if not schedule.grid.matches(scores.grid):
        raise ValueError("schedule and scores use different grids")
    if schedule.values.shape != scores.scores.shape:
        raise ValueError("schedule and scores have different channel counts")
    return float(scores.grid.dt * np.sum(scores.scores * schedule.values))


def check_regularity(scores: ScoreTable, tol: float = 1e-9) -> RegularityReport:
    """Flag channels and channel pairs whose scores are constant on the grid.

    Constancy of f_j or f_j - f_i breaks the binary-recovery guarantee,
    so callers should treat any flag as "the LP optimum may be fractional
    or non-unique".
    """
    f = scores.scores
    m = f.shape[1]
    channel = tuple(
        j for j in range(m) if float(f[:, j].max() - f[:, j].min()) < tol
    )
    pair = tuple(
        (i, j)
        for i in range(m)
        for j in range(i + 1, m)
        if float((f[:, j] - f[:, i]).max() - (f[:, j] - f[:, i]).min()) < tol
    )
    return RegularityReport(channel_flags=channel, pair_flags=pair, tol=tol)


def _schedule_lp(
    instance: ScheduleInstance, scores: ScoreTable
) -> lpmod.LinearProgram:
    """Grid transcription of the relaxed problem, variables v[k, j] row-major."""
    grid = scores.grid
    k_steps, m = scores.scores.shape
    dt = grid.dt
    nv = k_steps * m
    rows = []
    rhs = []
    # per-channel duration budgets: dt * sum_k v_kj <= alpha_j
    for j in range(m):
        row = np.zeros(nv)
        row[j::m] = dt
        rows.append(row)
        rhs.append(instance.alpha[j])
    # simultaneity rows: sum_j v_kj <= beta (dropped when beta == m)
    if instance.beta < m:
        for k in range(k_steps):
            row = np.zeros(nv)
            row[k * m : (k + 1) * m] = 1.0
            rows.append(row)
            rhs.append(float(instance.beta))
    return lpmod.LinearProgram(
        c=-dt * scores.scores.ravel(),
        a_in=np.array(rows),
        b_in=np.array(rhs),
        lower=0.0,
        upper=1.0,
    )


def solve_relaxed_schedule(
    instance: ScheduleInstance, grid: TimeGrid, scores: ScoreTable | None = None
) -> Schedule:
    """Solve the relaxed scheduling LP on the grid and package the vertex."""
    if scores is None:
        scores = controllability_scores(instance, grid)
    sol = lpmod.solve_lp(_schedule_lp(instance, scores))
    if sol.status is not lpmod.LpStatus.OPTIMAL:
        # v = 0 is always feasible, so anything else is a solver defect
        raise lpmod.LpError(f"schedule LP unexpectedly {sol.status.value}")
    return _make_schedule(sol.z.reshape(scores.scores.shape), scores)


def recover_binary_schedule(
    schedule: Schedule, scores: ScoreTable, tol: float = 1e-6
) -> Schedule:
    """Snap near-binary values to {0, 1} and recompute the objective.

    Raises :class:`NonBinaryScheduleError` when the mass farther than
    ``tol`` from {0,1} exceeds 1e-4 of m*T, which signals a regularity
    violation or a degenerate tie rather than a solver bug.
    """
    v = schedule.values
    frac = _discreteness_fraction(v, schedule.grid, tol)
    if frac > 1e-4:
        raise NonBinaryScheduleError(frac)
    snapped = np.where(v > 0.5, 1.0, 0.0)
    return _make_schedule(snapped, scores, tol)


def _pointwise_schedule(scores: np.ndarray, gamma: np.ndarray, beta: int) -> np.ndarray:
    """Activate the top-beta channels among those with f_j + gamma_j > 0.

    Ties are broken toward the lower channel index (stable argsort on
    the negated values).
    """
    k_steps, m = scores.shape
    shifted = scores + gamma
    v = np.zeros((k_steps, m))
    order = np.argsort(-shifted, axis=1, kind="stable")
    ranks = np.argsort(order, axis=1, kind="stable")
    v[(shifted > 0) & (ranks < beta)] = 1.0
    return v


def solve_schedule_dual(
    instance: ScheduleInstance,
    grid: TimeGrid,
    scores: ScoreTable | None = None,
    max_sweeps: int = 80,
) -> tuple[Schedule, DualReport]:
    """Find budget multipliers gamma <= 0 whose pointwise rule meets the budgets.

    Each gamma_j is updated by bisection on its own budget residual with
    the others frozen (Gauss-Seidel sweeps). Afterwards, cells sitting on
    the f_j + gamma_j = 0 boundary are truncated so that binding budgets
    hold exactly; those cells are measure-zero in the continuum rule, so
    the truncation is a tie-break, not a relaxation.
    """
    if scores is None:
        scores = controllability_scores(instance, grid)
    f = scores.scores
    dt = grid.dt
    m = f.shape[1]
    alpha = instance.alpha
    beta = instance.beta
    gamma = np.zeros(m)

    def usage(g):
        return dt * _pointwise_schedule(f, g, beta).sum(axis=0)

    best_residual = math.inf
    sweeps_used = max_sweeps
    for sweep in range(max_sweeps):
        changed = False
        for j in range(m):
            y_j = usage(gamma)[j]
            if gamma[j] == 0.0 and y_j <= alpha[j] + 1e-12:
                continue
            # largest gamma_j <= 0 keeping channel j within budget
            lo, hi = -float(f[:, j].max()) - 1.0, 0.0
            if usage(np.where(np.arange(m) == j, hi, gamma))[j] <= alpha[j] + 1e-12:
                if gamma[j] != 0.0:
                    gamma[j] = 0.0
                    changed = True
                continue
            g2 = gamma.copy()
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                g2[j] = mid
                if usage(g2)[j] <= alpha[j] + 1e-12:
                    lo = mid
                else:
                    hi = mid
            if gamma[j] != lo:
                gamma[j] = lo
                changed = True
        y = usage(gamma)
        resid = float(np.max(np.maximum(y - alpha, 0.0)))
        best_residual = min(best_residual, resid)
        if not changed or resid <= dt + 1e-12:
            sweeps_used = sweep + 1
            break
    v = _pointwise_schedule(f, gamma, beta)
    y = dt * v.sum(axis=0)
    if float(np.max(y - alpha)) > dt + 1e-9:
        raise DualConvergenceError(best_residual, gamma)

    # budget-exact tie resolution: drop boundary cells of over-budget channels
    shifted = f + gamma
    for j in range(m):
        while y[j] > alpha[j] + 1e-12:
            active = np.where(v[:, j] > 0.5)[0]
            if active.size == 0:
                break
            k_drop = active[np.argmin(shifted[active, j])]
            v[k_drop, j] = 0.0
            y[j] -= dt
    report = DualReport(
        gamma=gamma,
        eta=1,
        comp_slack_residual=float(np.max(np.abs(gamma * (y - alpha)), initial=0.0)),
        sweeps=sweeps_used,
    )
    return _make_schedule(v, scores), report


def top_slice_schedule(
    system: LtiSystem,
    alpha_total: float,
    grid: TimeGrid,
    scores: ScoreTable | None = None,
) -> Schedule:
    """Aggregate-budget baseline: activate the superlevel set {f_j(t) > c}.

    Bisection on the scalar threshold c until the activated measure
    matches ``alpha_total`` to within one grid cell. This is the optimal
    construction for the problem with a single pooled duration budget and
    no simultaneity bound, and dominates the per-channel problem.
    """
    if scores is None:
        instance = ScheduleInstance(
            system=system, alpha=np.full(system.m, system.horizon), beta=system.m
        )
        scores = controllability_scores(instance, grid)
    f = scores.scores
    m = f.shape[1]
    total = m * grid.horizon
    if not (0.0 < alpha_total < total):
        raise ValueError(f"alpha_total must lie in (0, {total})")
    dt = grid.dt
    lo, hi = 0.0, float(f.max()) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if dt * np.sum(f > mid) > alpha_total:
            lo = mid
        else:
            hi = mid
    v = (f > hi).astype(float)
    # fill from the boundary band if bisection landed between cell values
    deficit = int(round(alpha_total / dt)) - int(v.sum())
    if deficit > 0:
        band = np.argwhere((f <= hi) & (f > lo - 1e-300))
        order = np.argsort(-f[band[:, 0], band[:, 1]], kind="stable")
        for idx in order[:deficit]:
            k, j = band[idx]
            v[k, j] = 1.0
    return _make_schedule(v, scores)


def schedule_to_csv(schedule: Schedule, path) -> None:
    """Write (t_k, v_1..v_m) rows; t_k is the left edge of each interval."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"v_{j + 1}" for j in range(schedule.n_channels)])
        for k in range(schedule.grid.steps):
            writer.writerow(
                [f"{k * schedule.grid.dt:.12g}"]
                + [f"{val:.12g}" for val in schedule.values[k]]
            )


def gantt_intervals(schedule: Schedule, tol: float = 0.5) -> dict:
    """Active [start, end] intervals per channel, for Gantt-style plots."""
    dt = schedule.grid.dt
    out = {}
    for j in range(schedule.n_channels):
        on = schedule.values[:, j] > tol
        intervals = []
        start = None
        for k, flag in enumerate(on):
            if flag and start is None:
                start = k * dt
            elif not flag and start is not None:
                intervals.append([start, k * dt])
                start = None
        if start is not None:
            intervals.append([start, schedule.grid.horizon])
        out[f"channel_{j + 1}"] = intervals
    return out
