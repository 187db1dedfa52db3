"""Sparse rebalancing of an LTV network through its L1/l1 relaxation.

The relaxed problem — minimize the L1 mass of a box-bounded control that
steers x0 to xd under a per-instant l1 budget — is transcribed with
explicit stage states,

    x_{k+1} = E_k x_k + G_k u_k,   x_K pinned to xd,

rather than by eliminating states through the terminal reachability map.
The dense eliminated form stacks products of per-step transitions whose
in-transit rows decay like exp(-gamma (T - t)); at mobility scales that
mixes magnitudes across ~20 orders, and HiGHS cannot factor it reliably.
The stage form keeps every coefficient O(1), and its basis accounting
also caps how many control cells can sit strictly inside the box. The
terminal pin carries an explicit tolerance: exact equality onto a state
with an empty in-transit block is only ever meaningful up to solver
feasibility anyway.

The reachability map (transition to T plus per-step input blocks) is
still computed: the minimum-energy comparison baseline, terminal-residual
checks, and the impulse-response regularity diagnostic all use it.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from . import lp as lpmod
from .mobility import MobilityModel
from .numerics import LtvSystem, TimeGrid, propagate_state, zoh_blocks

__all__ = [
    "BoundsMode",
    "RebalanceInstance",
    "ReachabilityDiscretization",
    "CostCensus",
    "ControlTrajectory",
    "RebalanceSolution",
    "AssumptionReport",
    "NonBinaryControlError",
    "TerminalDriftError",
    "RankDeficientError",
    "discretize_reachability",
    "solve_relaxed_rebalance",
    "extract_sparse_control",
    "interior_mass_fraction",
    "check_assumption",
    "cost_census",
    "min_energy_baseline",
    "controls_to_json",
    "states_to_csv",
]


class BoundsMode(enum.Enum):
    NON_NEGATIVE = "nonnegative"   # u in [0, 1], snap set {0, 1}
    SIGNED = "signed"              # u in [-1, 1], snap set {0, +-1}

    @property
    def box(self):
        return (0.0, 1.0) if self is BoundsMode.NON_NEGATIVE else (-1.0, 1.0)


class NonBinaryControlError(RuntimeError):
    def __init__(self, fraction: float):
        super().__init__(f"interior-mass fraction {fraction:.3e} exceeds 1e-3")
        self.fraction = fraction


class TerminalDriftError(RuntimeError):
    def __init__(self, residual: float, tolerance: float):
        super().__init__(
            f"snapped control drifts the terminal state by {residual:.3e} "
            f"(tolerance {tolerance:.3e})"
        )
        self.residual = residual
        self.tolerance = tolerance


class RankDeficientError(RuntimeError):
    def __init__(self, rank: int, expected: int, residual: float):
        super().__init__(
            f"reachability map rank {rank} < {expected}; "
            f"least-squares residual {residual:.3e}"
        )
        self.rank = rank
        self.expected = expected
        self.residual = residual


def _system_of(model_or_system) -> LtvSystem:
    if isinstance(model_or_system, MobilityModel):
        return model_or_system.system
    return model_or_system


@dataclass(frozen=True)
class RebalanceInstance:
    """Steering data: system, boundary states, staff bound, bounds mode.

    ``terminal_tolerance`` is the half-width of the box the terminal
    state is pinned into (absolute, per component).
    """

    model: object                  # MobilityModel or LtvSystem
    x0: np.ndarray
    xd: np.ndarray
    beta: int
    mode: BoundsMode = BoundsMode.NON_NEGATIVE
    terminal_tolerance: float = 1e-6

    def __post_init__(self):
        system = _system_of(self.model)
        x0 = np.asarray(self.x0, dtype=float).ravel()
        xd = np.asarray(self.xd, dtype=float).ravel()
        if x0.shape != (system.n,) or xd.shape != (system.n,):
            raise ValueError(f"x0/xd must have {system.n} components")
        if not (1 <= int(self.beta) <= system.m - 1):
            raise ValueError(f"beta must be in 1..{system.m - 1}")
        if self.terminal_tolerance < 0:
            raise ValueError("terminal tolerance cannot be negative")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "xd", xd)
        object.__setattr__(self, "beta", int(self.beta))

    @property
    def system(self) -> LtvSystem:
        return _system_of(self.model)


@dataclass(frozen=True)
class ReachabilityDiscretization:
    """Transition to the horizon and per-step input blocks.

    ``input_blocks[k]`` maps the step-k control (held over one cell)
    to its contribution to x(T): Phi(T, t_{k+1}) @ G_k.
    """

    grid: TimeGrid
    phi_final: np.ndarray
    input_blocks: tuple
    step_transitions: tuple
    step_inputs: tuple

    def terminal_state(self, x0, values) -> np.ndarray:
        x = self.phi_final @ np.asarray(x0, dtype=float)
        values = np.asarray(values, dtype=float)
        for k, block in enumerate(self.input_blocks):
            x = x + block @ values[k]
        return x

    def stacked(self) -> np.ndarray:
        return np.hstack(self.input_blocks)


def discretize_reachability(model_or_system, grid: TimeGrid) -> ReachabilityDiscretization:
    """Midpoint-frozen ZOH blocks chained to the horizon; O(dt^2) accurate."""
    system = _system_of(model_or_system)
    es, gs = zoh_blocks(system, grid)
    k_steps = grid.steps
    blocks = [None] * k_steps
    suffix = np.eye(system.n)           # Phi(T, t_{k+1}) built from the back
    for k in range(k_steps - 1, -1, -1):
        blocks[k] = suffix @ gs[k]
        suffix = suffix @ es[k]
    return ReachabilityDiscretization(
        grid=grid,
        phi_final=suffix,
        input_blocks=tuple(blocks),
        step_transitions=tuple(es),
        step_inputs=tuple(gs),
    )


@dataclass(frozen=True)
class CostCensus:
    """Support and mass costs of a piecewise-constant control."""

    l0_per_channel: np.ndarray
    l0_total: float
    l1_total: float
    l0_step_max: int
    l1_step_max: float


def cost_census(values_or_traj, grid: TimeGrid, tol: float = 1e-9) -> CostCensus:
    """L0 (support measure), L1 mass, and per-step l0/l1 peaks.

    A cell counts as active when |u| > tol; the census is what the
    sparsity comparison against the dense baseline is scored on.
    """
    values = np.asarray(getattr(values_or_traj, "values", values_or_traj), dtype=float)
    active = np.abs(values) > tol
    return CostCensus(
        l0_per_channel=grid.dt * active.sum(axis=0),
        l0_total=float(grid.dt * active.sum()),
        l1_total=float(grid.dt * np.abs(values).sum()),
        l0_step_max=int(active.sum(axis=1).max(initial=0)),
        l1_step_max=float(np.abs(values).sum(axis=1).max(initial=0.0)),
    )


def interior_mass_fraction(values, grid: TimeGrid, mode: BoundsMode,
                           tol: float = 1e-6) -> float:
    """Mass farther than ``tol`` from the snap set, relative to m*T.

    Distance to the nearest snap value ({0,1} or {0,+-1}) integrated over
    cells, so a handful of near-bound cells barely register while a
    genuinely fractional solution does.
    """
    values = np.asarray(getattr(values, "values", values), dtype=float)
    if mode is BoundsMode.NON_NEGATIVE:
        dist = np.minimum(np.abs(values), np.abs(1.0 - values))
    else:
        dist = np.minimum(np.abs(values), np.abs(1.0 - np.abs(values)))
    dist = np.where(dist > tol, dist, 0.0)
    total = values.shape[1] * grid.horizon
    return float(dist.sum() * grid.dt / total)


def _snap(values: np.ndarray, mode: BoundsMode) -> np.ndarray:
    if mode is BoundsMode.NON_NEGATIVE:
        return np.where(values > 0.5, 1.0, 0.0)
    return np.sign(values) * (np.abs(values) > 0.5)


@dataclass(frozen=True)
class ControlTrajectory:
    """Piecewise-constant control with its cost census."""

    grid: TimeGrid
    values: np.ndarray
    mode: BoundsMode
    census: CostCensus

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != self.grid.steps:
            raise ValueError("control values must be (K, m)")
        lo, hi = self.mode.box
        if np.any(v < lo - 1e-8) or np.any(v > hi + 1e-8):
            raise ValueError(f"control values leave the {self.mode.value} box")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_values(cls, values, grid: TimeGrid,
                    mode: BoundsMode = BoundsMode.NON_NEGATIVE) -> "ControlTrajectory":
        return cls(grid=grid, values=np.asarray(values, dtype=float), mode=mode,
                   census=cost_census(values, grid))


@dataclass(frozen=True)
class RebalanceSolution:
    """Relaxed solve output: control, state trajectory, and LP status."""

    status: lpmod.LpStatus
    control: Optional[ControlTrajectory]
    states: Optional[np.ndarray]
    objective: Optional[float]
    terminal_residual: Optional[float]
    interior_fraction: Optional[float]
    mass_gap: float
    instance: RebalanceInstance
    reach: ReachabilityDiscretization
    lp_solution: Optional[lpmod.LpSolution]


def _stage_lp(instance: RebalanceInstance, grid: TimeGrid,
              es, gs) -> tuple[lpmod.LinearProgram, int, int]:
    """Sparse stage transcription; returns (lp, n_state_vars, n_u_vars)."""
    system = instance.system
    n, m, k_steps = system.n, system.m, grid.steps
    signed = instance.mode is BoundsMode.SIGNED
    nx = k_steps * n
    nu = k_steps * m
    nv = nx + nu + (nu if signed else 0)

    rows, cols, data = [], [], []
    # +I on x_{k+1}
    eye_rows = np.arange(nx)
    rows.append(eye_rows)
    cols.append(eye_rows)
    data.append(np.ones(nx))
    # -E_k on x_k (k >= 1), -G_k on u_k, +G_k on the negative split
    r_e, c_e = np.nonzero(np.ones((n, n)))
    r_g, c_g = np.nonzero(np.ones((n, m)))
    for k in range(k_steps):
        if k >= 1:
            rows.append(k * n + r_e)
            cols.append((k - 1) * n + c_e)
            data.append(-es[k].ravel())
        rows.append(k * n + r_g)
        cols.append(nx + k * m + c_g)
        data.append(-gs[k].ravel())
        if signed:
            rows.append(k * n + r_g)
            cols.append(nx + nu + k * m + c_g)
            data.append(gs[k].ravel())
    a_eq = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx, nv),
    )
    b_eq = np.zeros(nx)
    b_eq[:n] = es[0] @ instance.x0

    # per-step occupancy rows: sum_j |u_kj| <= beta (split parts add)
    occ_cols = nx + np.arange(nu if not signed else 2 * nu)
    occ_rows = np.tile(np.repeat(np.arange(k_steps), m), 2 if signed else 1)
    a_in = sp.csr_matrix(
        (np.ones(occ_cols.size), (occ_rows, occ_cols)), shape=(k_steps, nv)
    )
    b_in = np.full(k_steps, float(instance.beta))

    lower = np.full(nv, -np.inf)
    upper = np.full(nv, np.inf)
    lower[nx:] = 0.0
    upper[nx:] = 1.0
    eps = instance.terminal_tolerance
    lower[(k_steps - 1) * n : nx] = instance.xd - eps
    upper[(k_steps - 1) * n : nx] = instance.xd + eps

    c = np.zeros(nv)
    c[nx:] = grid.dt
    return (
        lpmod.LinearProgram(c=c, a_eq=a_eq, b_eq=b_eq, a_in=a_in, b_in=b_in,
                            lower=lower, upper=upper),
        nx,
        nu,
    )


def solve_relaxed_rebalance(
    instance: RebalanceInstance,
    grid: TimeGrid,
    method: str = "highs-ipm",
    reach: ReachabilityDiscretization | None = None,
) -> RebalanceSolution:
    """Solve the relaxed steering LP; Infeasible is a status, not an error.

    The interior-point path (with HiGHS crossover, so the answer is still
    a vertex) is the default: it is markedly faster than dual simplex on
    the stage structure. The state trajectory is re-derived by forward
    propagation of the returned control rather than read off the LP,
    which cross-checks the transcription.
    """
    system = instance.system
    if reach is None:
        reach = discretize_reachability(instance.model, grid)
    es, gs = list(reach.step_transitions), list(reach.step_inputs)
    problem, nx, nu = _stage_lp(instance, grid, es, gs)
    sol = lpmod.solve_lp(problem, method=method)
    mass_gap = float(instance.xd.sum() - instance.x0.sum())
    if sol.status is not lpmod.LpStatus.OPTIMAL:
        return RebalanceSolution(
            status=sol.status, control=None, states=None, objective=None,
            terminal_residual=None, interior_fraction=None, mass_gap=mass_gap,
            instance=instance, reach=reach, lp_solution=sol,
        )
    signed = instance.mode is BoundsMode.SIGNED
    u = sol.z[nx : nx + nu].reshape(grid.steps, system.m)
    if signed:
        u = u - sol.z[nx + nu :].reshape(grid.steps, system.m)
    lo, hi = instance.mode.box
    u = np.clip(u, lo, hi)
    states = propagate_state(system, instance.x0, u, grid, blocks=(es, gs))
    control = ControlTrajectory.from_values(u, grid, instance.mode)
    return RebalanceSolution(
        status=sol.status,
        control=control,
        states=states,
        objective=float(grid.dt * np.abs(u).sum()),
        terminal_residual=float(np.max(np.abs(states[-1] - instance.xd))),
        interior_fraction=interior_mass_fraction(u, grid, instance.mode),
        mass_gap=mass_gap,
        instance=instance,
        reach=reach,
        lp_solution=sol,
    )


def extract_sparse_control(
    source: Union[ControlTrajectory, RebalanceSolution],
    tol: float = 1e-6,
    drift_tolerance: float = 1e-4,
) -> ControlTrajectory:
    """Snap a relaxed control onto its binary value set.

    Raises :class:`NonBinaryControlError` when the interior-mass fraction
    (beyond ``tol``) exceeds 1e-3. When called on a full
    :class:`RebalanceSolution`, additionally recomputes the terminal state
    under the snapped control and raises :class:`TerminalDriftError` if it
    moved by more than ``drift_tolerance * max|xd|``.
    """
    if isinstance(source, RebalanceSolution):
        if source.control is None:
            raise ValueError("cannot extract from a non-Optimal solution")
        traj = source.control
        context = source
    else:
        traj = source
        context = None
    fraction = interior_mass_fraction(traj.values, traj.grid, traj.mode, tol)
    if fraction > 1e-3:
        raise NonBinaryControlError(fraction)
    snapped = _snap(traj.values, traj.mode)
    result = ControlTrajectory.from_values(snapped, traj.grid, traj.mode)
    if context is not None:
        xd = context.instance.xd
        terminal = context.reach.terminal_state(context.instance.x0, snapped)
        residual = float(np.max(np.abs(terminal - xd)))
        limit = drift_tolerance * float(np.max(np.abs(xd)))
        if residual > limit:
            raise TerminalDriftError(residual, limit)
    return result


@dataclass(frozen=True)
class AssumptionReport:
    """Sampling diagnostic for the impulse-response regularity condition.

    For random unit costates rho, the functions w_j(t) = rho' Phi(T,t) b_j(t)
    should not dwell at 0, at 1, or on each other. ``flags`` lists
    (trial, kind, detail) events where a function stayed within
    ``gap_tol`` of a level or of a sibling for at least ``dwell`` knots.
    A pass is evidence, not proof.
    """

    trials: int
    gap_tol: float
    dwell: int
    flags: tuple
    min_level_gap: float
    min_pair_gap: float

    @property
    def passed(self) -> bool:
        return not self.flags


def check_assumption(
    model_or_system,
    grid: TimeGrid,
    trials: int = 64,
    seed: int = 0,
    gap_tol: float = 1e-9,
    dwell: int = 3,
) -> AssumptionReport:
    """Sample costates and flag dwelling coincidences of rho' Phi(T,t) b_j(t)."""
    system = _system_of(model_or_system)
    reach = discretize_reachability(system, grid)
    k_steps = grid.steps
    # Phi(T, t_k) at knots, assembled from per-step transitions
    phis = [None] * (k_steps + 1)
    acc = np.eye(system.n)
    phis[k_steps] = acc
    for k in range(k_steps - 1, -1, -1):
        acc = acc @ reach.step_transitions[k]
        phis[k] = acc
    pb = np.empty((k_steps + 1, system.n, system.m))
    for k in range(k_steps + 1):
        t = min(k * grid.dt, system.horizon)
        _, b = system.matrices_at(t)
        pb[k] = phis[k] @ b

    rng = np.random.default_rng(seed)
    flags = []
    min_level = math.inf
    min_pair = math.inf
    for trial in range(trials):
        rho = rng.standard_normal(system.n)
        rho /= np.linalg.norm(rho)
        w = np.tensordot(rho, pb, axes=(0, 1))      # (K+1, m)
        for eta in (0.0, 1.0):
            close = np.abs(w - eta) < gap_tol
            min_level = min(min_level, float(np.abs(w - eta).min()))
            runs = _longest_true_run(close)
            for j in np.where(runs >= dwell)[0]:
                flags.append((trial, "level", (j, eta)))
        for i in range(system.m):
            diff = np.abs(w[:, i + 1 :] - w[:, [i]])
            if diff.size:
                min_pair = min(min_pair, float(diff.min()))
            close = diff < gap_tol
            runs = _longest_true_run(close)
            for off in np.where(runs >= dwell)[0]:
                flags.append((trial, "pair", (i, i + 1 + off)))
    return AssumptionReport(
        trials=trials,
        gap_tol=gap_tol,
        dwell=dwell,
        flags=tuple(flags),
        min_level_gap=min_level,
        min_pair_gap=min_pair,
    )


def _longest_true_run(mask: np.ndarray) -> np.ndarray:
    """Longest consecutive-True run per column of a (K, m) boolean mask."""
    out = np.zeros(mask.shape[1], dtype=int)
    current = np.zeros(mask.shape[1], dtype=int)
    for row in mask:
        current = np.where(row, current + 1, 0)
        out = np.maximum(out, current)
    return out


def min_energy_baseline(
    instance: RebalanceInstance,
    grid: TimeGrid,
    reach: ReachabilityDiscretization | None = None,
) -> tuple[ControlTrajectory, dict]:
    """Least-squares comparison control through the reachability map.

    Pseudo-inverse steering: the minimum-energy control that meets the
    terminal condition, then clipped to the instance's box. Dense by
    construction (it spreads effort over nearly every cell), which is
    exactly why it makes a useful foil for the sparse solution. Returns
    the trajectory and a report with pre-clip residual, clip count, and
    post-clip residual.
    """
    system = instance.system
    if reach is None:
        reach = discretize_reachability(instance.model, grid)
    stacked = reach.stacked()
    rhs = instance.xd - reach.phi_final @ instance.x0
    u_flat, _, rank, _ = np.linalg.lstsq(stacked, rhs, rcond=None)
    pre_residual = float(np.max(np.abs(stacked @ u_flat - rhs)))
    # conservation removes one direction from the column space; anything
    # below that is a genuine deficiency
    expected = system.n - 1
    if rank < expected and pre_residual > 1e-8 * (1.0 + float(np.abs(rhs).max())):
        raise RankDeficientError(rank, expected, pre_residual)
    lo, hi = instance.mode.box
    clipped = np.clip(u_flat, lo, hi)
    n_clipped = int(np.sum(np.abs(clipped - u_flat) > 0))
    post_residual = float(np.max(np.abs(stacked @ clipped - rhs)))
    values = clipped.reshape(grid.steps, system.m)
    report = {
        "rank": int(rank),
        "pre_clip_residual": pre_residual,
        "clipped_cells": n_clipped,
        "post_clip_residual": post_residual,
        # support of the raw least-squares control; clipping a one-sided
        # box zeroes whatever pointed the wrong way, halving the density
        "support_fraction_unclipped": float(np.mean(np.abs(u_flat) > 1e-9)),
    }
    return ControlTrajectory.from_values(values, grid, instance.mode), report


def controls_to_json(
    solution: RebalanceSolution,
    pairs: tuple | None = None,
    tol: float = 1e-9,
) -> dict:
    """Result document: status, costs, residual, sparse control triplets.

    ``pairs`` supplies (destination, origin) labels for mobility models;
    without it the triplet's middle entry is the raw channel index.
    """
    doc = {
        "status": solution.status.value,
        "mass_gap": solution.mass_gap,
    }
    if solution.control is None:
        return doc
    census = solution.control.census
    values = solution.control.values
    triplets = [
        [int(k), list(pairs[a]) if pairs is not None else int(a), float(values[k, a])]
        for k, a in zip(*np.nonzero(np.abs(values) > tol))
    ]
    doc.update(
        {
            "costs": {
                "L0": census.l0_total,
                "L1": census.l1_total,
                "l0_max": census.l0_step_max,
            },
            "terminal_residual": solution.terminal_residual,
            "interior_mass_fraction": solution.interior_fraction,
            "controls": triplets,
        }
    )
    return doc


def states_to_csv(states: np.ndarray, grid: TimeGrid, path) -> None:
    """State trajectory as (t, x_1..x_n) rows."""
    states = np.asarray(states, dtype=float)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x_{i + 1}" for i in range(states.shape[1])])
        for k, t in enumerate(grid.knots):
            writer.writerow([f"{t:.12g}"] + [f"{v:.12g}" for v in states[k]])
