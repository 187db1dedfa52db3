"""Integer-state Monte-Carlo simulator of the vehicle-sharing network.

Within one interval of width delta, per directed pair (i, j):

  * customer departures are Poisson with mean g_ij * delta (negative
    pricing-driven demand is clamped to zero for sampling, and the
    clamped mass is reported);
  * rebalancing departures are deterministic: u_ij * delta accumulates in
    a per-pair fractional bucket that emits a unit vehicle each time it
    crosses one;
  * arrivals are Binomial(F_ij, 1 - exp(-gamma_ij * delta)), the
    exponential travel-time law restricted to the interval.

Departures in excess of the origin station's parked count are truncated
uniformly at random among that station's requests (multivariate
hypergeometric over pairs); truncated units are dropped, not re-queued,
and the count is reported. With truncation inactive the total vehicle
count is conserved exactly, and the per-knot sample mean converges to the
mean-field ODE that the deterministic modules integrate — that agreement
(z-scores against the ODE reference) is the point of this module.

Randomness comes from a counter-based Philox generator keyed by the
run seed; draws are batched across runs, so a summary is bitwise
reproducible for a fixed seed. Means use numpy pairwise summation over
the run axis, which is order-stable.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .mobility import MobilityModel, MobilityScenario, build_mobility_model
from .numerics import TimeGrid, propagate_state

__all__ = [
    "StochasticState",
    "StepRates",
    "StepInfo",
    "SimulationConfig",
    "RouteRates",
    "MonteCarloSummary",
    "step",
    "run_monte_carlo",
    "summary_to_csv",
]


@dataclass(frozen=True)
class StochasticState:
    """Integer vehicle counts: in transit per pair, parked per station.

    ``pending`` is the fractional rebalancing accumulator (see module
    docstring); it is continuous bookkeeping, not vehicle mass.
    """

    f: np.ndarray
    v: np.ndarray
    pending: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.f, dtype=np.int64)
        v = np.asarray(self.v, dtype=np.int64)
        pending = np.asarray(self.pending, dtype=float)
        if np.any(f < 0) or np.any(v < 0):
            raise ValueError("vehicle counts cannot be negative")
        if pending.shape != f.shape:
            raise ValueError("pending accumulator must match the pair count")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "pending", pending)

    @classmethod
    def fresh(cls, v, m: int) -> "StochasticState":
        v = np.asarray(v, dtype=np.int64)
        return cls(f=np.zeros(m, dtype=np.int64), v=v, pending=np.zeros(m))

    @property
    def total(self) -> int:
        return int(self.f.sum() + self.v.sum())


@dataclass(frozen=True)
class StepRates:
    """Rates over one interval: demand g, rebalancing u, arrival gamma."""

    g: np.ndarray
    u: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True)
class StepInfo:
    truncated: int
    clamped_demand: float


@dataclass(frozen=True)
class RouteRates:
    """Explicit-rate source: fixed station/pair structure with constant rates."""

    s: int
    pairs: tuple
    gamma: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=float))
        m = len(self.pairs)
        if self.gamma.shape != (m,) or self.g.shape != (m,):
            raise ValueError("gamma and g must have one entry per pair")
        if np.any(self.gamma <= 0):
            raise ValueError("arrival rates must be positive")


@dataclass(frozen=True)
class SimulationConfig:
    delta: float
    horizon: float
    runs: int
    seed: int
    clamp_demand: bool = True
    record_every: int = 1

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.runs < 1:
            raise ValueError("need at least one run")
        steps = self.horizon / self.delta
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("horizon must be an integer number of deltas")
        if round(steps) % self.record_every != 0:
            raise ValueError("record_every must divide the step count")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.delta))


@dataclass(frozen=True)
class MonteCarloSummary:
    """Per-knot ensemble statistics next to the mean-field reference.

    Components follow the [v-block, f-block] state layout. ``zscores``
    are (mean - ode) / standard-error with zero-variance knots scored 0
    when the deviation is zero and inf otherwise.
    """

    knots: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    se: np.ndarray
    ode: np.ndarray
    zscores: np.ndarray
    max_abs_z: float
    max_deviation: float
    truncated: int
    clamped_demand: float
    runs: int
    seed: int

    @property
    def clamping_inactive(self) -> bool:
        return self.truncated == 0 and self.clamped_demand == 0.0


def _structure(source):
    """(s, pairs, gamma, demand_fn, ode_mode) for a rate source.

    demand_fn maps a (N, s) station-count batch to (N, m) *unclamped*
    demand rates.
    """
    if isinstance(source, MobilityScenario):
        source = build_mobility_model(source)
    if isinstance(source, MobilityModel):
        scenario = source.scenario
        imap = source.index_map
        gamma, theta, lam, _ = scenario.coefficient_arrays()
        lam_rev = np.array([scenario.lam[(j, i)] for (i, j) in imap.pairs])
        dest = np.array([i - 1 for (i, j) in imap.pairs])
        orig = np.array([j - 1 for (i, j) in imap.pairs])

        def demand(v_batch):
            tilt = lam * v_batch[:, dest] - lam_rev * v_batch[:, orig]
            return -theta * tilt

        return imap.s, imap.pairs, gamma, demand, "pricing"
    if isinstance(source, RouteRates):
        g = source.g

        def demand(v_batch):
            return np.broadcast_to(g, (v_batch.shape[0], g.size))

        return source.s, tuple(source.pairs), source.gamma, demand, "constant"
    raise TypeError(f"unsupported rate source: {type(source).__name__}")


def _batch_step(f, v, pending, g_rates, u_rates, arrive_p, origin_of, dest_of,
                s, delta, rng, clamp_demand):
    """Advance all runs by one interval; returns (f, v, pending, info)."""
    clamped_mass = 0.0
    if clamp_demand:
        neg = g_rates < 0
        if np.any(neg):
            clamped_mass = float(-(g_rates[neg]).sum() * delta)
            g_rates = np.where(neg, 0.0, g_rates)
    departures_g = rng.poisson(np.broadcast_to(g_rates * delta, f.shape))
    arrivals = rng.binomial(f, arrive_p)

    pending = pending + u_rates * delta
    departures_u = np.floor(pending).astype(np.int64)
    pending = pending - departures_u

    requests = departures_g + departures_u
    dep_by_station = np.zeros((f.shape[0], s), dtype=np.int64)
    for st in range(s):
        dep_by_station[:, st] = requests[:, origin_of == st].sum(axis=1)

    truncated = 0
    over = dep_by_station > v
    if np.any(over):
        for run, st in zip(*np.nonzero(over)):
            sel = np.where(origin_of == st)[0]
            counts = requests[run, sel]
            keep = rng.multivariate_hypergeometric(counts, int(v[run, st]))
            truncated += int(counts.sum() - v[run, st])
            requests[run, sel] = keep
            dep_by_station[run, st] = int(v[run, st])

    f = f + requests - arrivals
    arr_by_station = np.zeros_like(dep_by_station)
    for st in range(s):
        arr_by_station[:, st] = arrivals[:, dest_of == st].sum(axis=1)
    v = v + arr_by_station - dep_by_station
    return f, v, pending, StepInfo(truncated=truncated, clamped_demand=clamped_mass)


def step(
    state: StochasticState,
    rates: StepRates,
    delta: float,
    rng: np.random.Generator,
    s: Optional[int] = None,
    pairs: Optional[tuple] = None,
    clamp_demand: bool = True,
) -> tuple[StochasticState, StepInfo]:
    """Advance a single state by one interval.

    ``pairs`` gives the (destination, origin) structure; by default a
    fully-connected layout matching the state dimensions is assumed.
    Rates with g * delta or u * delta above 1 are legal but defeat the
    small-interval reading of the event model, so they warn.
    """
    m = state.f.size
    s = state.v.size
    if pairs is None:
        pairs = tuple((i, j) for i in range(1, s + 1) for j in range(1, s + 1) if i != j)
        if len(pairs) != m:
            raise ValueError("state shape does not match a fully-connected layout")
    if np.max(np.asarray(rates.g) * delta, initial=0.0) > 1.0 or np.max(
        np.asarray(rates.u) * delta, initial=0.0
    ) > 1.0:
        import warnings

        warnings.warn("g*delta or u*delta exceeds 1; shrink the interval",
                      stacklevel=2)
    origin_of = np.array([j - 1 for (i, j) in pairs])
    dest_of = np.array([i - 1 for (i, j) in pairs])
    arrive_p = 1.0 - np.exp(-np.asarray(rates.gamma, dtype=float) * delta)
    f, v, pending, info = _batch_step(
        state.f[None, :].copy(),
        state.v[None, :].copy(),
        state.pending[None, :].copy(),
        np.asarray(rates.g, dtype=float),
        np.asarray(rates.u, dtype=float),
        arrive_p,
        origin_of,
        dest_of,
        s,
        delta,
        rng,
        clamp_demand,
    )
    return StochasticState(f=f[0], v=v[0], pending=pending[0]), info


def _ode_reference(source, s, pairs, gamma, u_steps, x0, config: SimulationConfig):
    """Mean-field trajectory on the recording knots.

    Explicit constant rates integrate exactly via the zero-order-hold
    blocks of the linear system; pricing-coupled (clamped) demand falls
    back to RK4 on the nonlinear right-hand side with 4 substeps per
    interval.
    """
    m = len(pairs)
    n = s + m
    steps = config.steps
    if isinstance(source, RouteRates):
        a = np.zeros((n, n))
        b = np.zeros((n, m))
        for idx, (i, j) in enumerate(pairs):
            a[s + idx, s + idx] = -gamma[idx]
            a[i - 1, s + idx] = gamma[idx]
            b[j - 1, idx] = -1.0
            b[s + idx, idx] = 1.0
        from .numerics import LtvSystem

        sys = LtvSystem(n=n, m=m, provider=lambda t: (a, b), horizon=config.horizon)
        grid = TimeGrid(steps=steps, dt=config.delta)
        drive = np.broadcast_to(source.g, (steps, m)) + u_steps
        states = propagate_state(sys, x0, drive, grid)
        return states[:: config.record_every]

    model = source if isinstance(source, MobilityModel) else build_mobility_model(source)
    scenario = model.scenario
    theta = np.array([scenario.theta[p] for p in pairs])
    lam = np.array([scenario.lam[p] for p in pairs])
    lam_rev = np.array([scenario.lam[(j, i)] for (i, j) in pairs])
    dest = np.array([i - 1 for (i, j) in pairs])
    orig = np.array([j - 1 for (i, j) in pairs])

    def rhs(x, u):
        v = x[:s]
        f = x[s:]
        g = -theta * (lam * v[dest] - lam_rev * v[orig])
        if config.clamp_demand:
            g = np.maximum(g, 0.0)
        df = -gamma * f + g + u
        dv = np.zeros(s)
        np.add.at(dv, dest, gamma * f)
        np.add.at(dv, orig, -(g + u))
        return np.concatenate([dv, df])

    x = np.asarray(x0, dtype=float).copy()
    out = [x.copy()]
    h = config.delta / 4.0
    for k in range(steps):
        u = u_steps[k]
        for _ in range(4):
            k1 = rhs(x, u)
            k2 = rhs(x + 0.5 * h * k1, u)
            k3 = rhs(x + 0.5 * h * k2, u)
            k4 = rhs(x + h * k3, u)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if (k + 1) % config.record_every == 0:
            out.append(x.copy())
    return np.array(out)


def run_monte_carlo(
    source: Union[MobilityScenario, MobilityModel, RouteRates],
    config: SimulationConfig,
    u=None,
    x0=None,
) -> MonteCarloSummary:
    """Ensemble-simulate the event model and score it against the ODE.

    ``u`` is a (steps, m) rebalancing-rate table on the delta grid (or
    None for zero). ``x0`` defaults to the scenario's initial state for
    scenario sources and must be given for explicit rates. All runs
    advance in lockstep with batched draws from Philox(seed).
    """
    s, pairs, gamma, demand_fn, _mode = _structure(source)
    m = len(pairs)
    steps = config.steps
    if u is None:
        u_steps = np.zeros((steps, m))
    else:
        u_steps = np.asarray(u, dtype=float)
        if u_steps.shape != (steps, m):
            raise ValueError(f"u must have shape ({steps}, {m})")
        if np.any(u_steps < 0):
            raise ValueError("rebalancing rates must be nonnegative")
    if x0 is None:
        if isinstance(source, RouteRates):
            raise ValueError("explicit-rate sources need an initial state")
        scenario = source.scenario if isinstance(source, MobilityModel) else source
        x0 = scenario.x0
    x0 = np.asarray(x0, dtype=float)
    v0 = np.round(x0[:s]).astype(np.int64)
    f0 = np.round(x0[s:]).astype(np.int64)
    if np.any(np.abs(x0[:s] - v0) > 1e-9) or np.any(np.abs(x0[s:] - f0) > 1e-9):
        raise ValueError("stochastic runs need integer initial counts")

    origin_of = np.array([j - 1 for (i, j) in pairs])
    dest_of = np.array([i - 1 for (i, j) in pairs])
    arrive_p = 1.0 - np.exp(-gamma * config.delta)

    n_runs = config.runs
    rng = np.random.Generator(np.random.Philox(key=config.seed))
    f = np.tile(f0, (n_runs, 1))
    v = np.tile(v0, (n_runs, 1))
    pending = np.zeros((n_runs, m))

    nrec = steps // config.record_every + 1
    n = s + m
    mean = np.empty((nrec, n))
    variance = np.empty((nrec, n))

    def record(idx):
        batch = np.hstack([v, f]).astype(float)
        mu = batch.mean(axis=0)
        mean[idx] = mu
        variance[idx] = batch.var(axis=0)

    record(0)
    truncated = 0
    clamped = 0.0
    rec = 1
    for k in range(steps):
        g_rates = demand_fn(v.astype(float))
        f, v, pending, info = _batch_step(
            f, v, pending, g_rates, u_steps[k], arrive_p, origin_of, dest_of,
            s, config.delta, rng, config.clamp_demand,
        )
        truncated += info.truncated
        clamped += info.clamped_demand
        if (k + 1) % config.record_every == 0:
            record(rec)
            rec += 1

    ode = _ode_reference(source, s, pairs, gamma, u_steps, x0, config)
    se = np.sqrt(variance / n_runs)
    deviation = np.abs(mean - ode)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, deviation / np.where(se > 0, se, 1.0),
                     np.where(deviation > 0, np.inf, 0.0))
    knots = np.arange(nrec) * config.record_every * config.delta
    return MonteCarloSummary(
        knots=knots,
        mean=mean,
        variance=variance,
        se=se,
        ode=ode,
        zscores=z,
        max_abs_z=float(np.max(z)),
        max_deviation=float(deviation.max()),
        truncated=truncated,
        clamped_demand=clamped,
        runs=n_runs,
        seed=config.seed,
    )


def summary_to_csv(summary: MonteCarloSummary, path, s: int, pairs) -> None:
    """(t, component, mc_mean, mc_se, ode_value, zscore) rows."""
    names = [f"v_{i + 1}" for i in range(s)] + [f"f_{i}_{j}" for (i, j) in pairs]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "component", "mc_mean", "mc_se", "ode_value", "zscore"])
        for row, t in enumerate(summary.knots):
            for col, name in enumerate(names):
                writer.writerow(
                    [
                        f"{t:.12g}",
                        name,
                        f"{summary.mean[row, col]:.12g}",
                        f"{summary.se[row, col]:.12g}",
                        f"{summary.ode[row, col]:.12g}",
                        f"{summary.zscores[row, col]:.6g}",
                    ]
                )
