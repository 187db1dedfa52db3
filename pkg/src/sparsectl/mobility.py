"""One-way vehicle-sharing network model with pricing-coupled demand.

State layout is [v_1 .. v_s, f-block in pair order]: parked counts per
station followed by in-transit expectations per directed pair (i, j),
where i is the destination and j the origin, enumerated lexicographically.
The drift matrix is assembled from four blocks,

    A(t) = [[Xi * Lam, Gam], [-Lam, -Delta]],   B = [[-Xi], [I_m]],

whose columns all sum to zero: customer flows and rebalancing moves
conserve the total vehicle count exactly.

Demand follows the standard-price substitution: the base demand cancels
against the base price, leaving g_ij = -theta_ij (lam_ij v_i - lam_ji v_j).
Negative g is meaningful in the linear model (oversupply pricing) and is
flagged in reports rather than altered; the stochastic simulator clamps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import lp as lpmod
from .numerics import LtvSystem, TimeGrid, zoh_blocks

__all__ = [
    "Station",
    "IndexMap",
    "MobilityScenario",
    "MobilityModel",
    "ScenarioConfig",
    "DemandReport",
    "build_index_map",
    "build_system_matrices",
    "build_mobility_model",
    "effective_demand",
    "generate_random_scenario",
    "build_staff_problem",
    "StaffTranscription",
    "scenario_to_json",
    "scenario_from_json",
    "save_scenario",
    "load_scenario",
]


@dataclass(frozen=True)
class Station:
    ident: int          # 1-based
    x_km: float
    y_km: float
    initial: float      # parked vehicles at t=0

    def __post_init__(self):
        if self.initial < 0:
            raise ValueError("initial vehicle count cannot be negative")


@dataclass(frozen=True)
class IndexMap:
    """Directed-pair enumeration and the state layout built on it."""

    s: int
    pairs: tuple
    _lookup: dict = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        if not self._lookup:
            object.__setattr__(
                self, "_lookup", {p: a for a, p in enumerate(self.pairs)}
            )

    @property
    def m(self) -> int:
        return self.s * self.s - self.s

    @property
    def n(self) -> int:
        return self.s * self.s

    def pair_index(self, i: int, j: int) -> int:
        try:
            return self._lookup[(i, j)]
        except KeyError:
            raise KeyError(f"no directed pair ({i}, {j}) for s={self.s}") from None

    def pair_at(self, a: int):
        return self.pairs[a]

    def station_state(self, i: int) -> int:
        if not 1 <= i <= self.s:
            raise KeyError(f"station {i} out of range 1..{self.s}")
        return i - 1

    def pair_state(self, i: int, j: int) -> int:
        return self.s + self.pair_index(i, j)


def build_index_map(s: int) -> IndexMap:
    """Enumerate directed pairs (destination, origin) lexicographically."""
    if s < 2:
        raise ValueError("need at least two stations")
    pairs = tuple((i, j) for i in range(1, s + 1) for j in range(1, s + 1) if i != j)
    return IndexMap(s=s, pairs=pairs)


@dataclass(frozen=True)
class MobilityScenario:
    """Stations, pair coefficients, horizon, staff count, and boundary states.

    Coefficient dicts are keyed by 1-based (destination, origin) pairs.
    ``x0``/``xd`` follow the [stations, pair-block] state layout.
    """

    stations: tuple
    gamma: dict
    theta: dict
    lam: dict
    gbar: dict
    horizon: float
    beta: int
    x0: np.ndarray
    xd: np.ndarray

    def __post_init__(self):
        s = len(self.stations)
        if s < 2:
            raise ValueError("need at least two stations")
        imap = build_index_map(s)
        for name, table in (
            ("gamma", self.gamma),
            ("theta", self.theta),
            ("lam", self.lam),
            ("gbar", self.gbar),
        ):
            missing = [p for p in imap.pairs if p not in table]
            if missing:
                raise ValueError(f"{name} missing pairs, e.g. {missing[0]}")
        if any(v <= 0 for v in self.gamma.values()):
            raise ValueError("travel rates gamma must be positive")
        if any(v <= 0 for v in self.theta.values()):
            raise ValueError("price elasticities theta must be positive")
        if any(v < 0 for v in self.lam.values()):
            raise ValueError("price-adjustment coefficients lam must be nonnegative")
        if any(v < 0 for v in self.gbar.values()):
            raise ValueError("base demand gbar must be nonnegative")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError("horizon must be positive and finite")
        if not (1 <= int(self.beta) <= imap.m - 1):
            raise ValueError(f"beta must be in 1..{imap.m - 1}")
        x0 = np.asarray(self.x0, dtype=float).ravel()
        xd = np.asarray(self.xd, dtype=float).ravel()
        if x0.shape != (imap.n,) or xd.shape != (imap.n,):
            raise ValueError(f"x0/xd must have {imap.n} components")
        if abs(x0.sum() - xd.sum()) > 1e-9 * max(1.0, abs(x0.sum())):
            raise ValueError(
                "total vehicle mass of x0 and xd must match "
                f"({x0.sum()} vs {xd.sum()}): conservation makes anything "
                "else unreachable"
            )
        object.__setattr__(self, "stations", tuple(self.stations))
        object.__setattr__(self, "beta", int(self.beta))
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "xd", xd)

    @property
    def s(self) -> int:
        return len(self.stations)

    @property
    def index_map(self) -> IndexMap:
        return build_index_map(self.s)

    def coefficient_arrays(self):
        """(gamma, theta, lam, gbar) as arrays in pair order."""
        imap = self.index_map
        return tuple(
            np.array([table[p] for p in imap.pairs])
            for table in (self.gamma, self.theta, self.lam, self.gbar)
        )


def build_system_matrices(scenario: MobilityScenario, t: float = 0.0):
    """Assemble (A(t), B) for the scenario's state layout.

    Coefficients are time-invariant here; ``t`` is accepted so the
    signature matches a time-varying provider.
    """
    imap = scenario.index_map
    s, m, n = imap.s, imap.m, imap.n
    gamma, theta, lam, _ = scenario.coefficient_arrays()
    lam_of = {p: scenario.lam[p] for p in imap.pairs}

    a = np.zeros((n, n))
    b = np.zeros((n, m))
    for idx, (i, j) in enumerate(imap.pairs):
        fi = s + idx
        vi = i - 1
        vj = j - 1
        lam_ij = lam[idx]
        lam_ji = lam_of[(j, i)]
        th = theta[idx]
        # in-transit row: df_ij = -gamma f_ij - theta_ij (lam_ij v_i - lam_ji v_j) + u_ij
        a[fi, fi] = -gamma[idx]
        a[fi, vi] -= th * lam_ij
        a[fi, vj] += th * lam_ji
        # destination station receives arrivals
        a[vi, fi] += gamma[idx]
        # origin station loses the (possibly negative) demand departures
        a[vj, vi] += th * lam_ij
        a[vj, vj] -= th * lam_ji
        # rebalancing input: origin loses a parked vehicle, pair gains transit
        b[vj, idx] = -1.0
        b[fi, idx] = 1.0
    return a, b


@dataclass(frozen=True)
class MobilityModel:
    scenario: MobilityScenario
    index_map: IndexMap
    system: LtvSystem


def build_mobility_model(scenario: MobilityScenario) -> MobilityModel:
    imap = scenario.index_map
    a, b = build_system_matrices(scenario, 0.0)

    def provider(t):
        return a, b

    system = LtvSystem(n=imap.n, m=imap.m, provider=provider, horizon=scenario.horizon)
    return MobilityModel(scenario=scenario, index_map=imap, system=system)


@dataclass(frozen=True)
class DemandReport:
    """Effective demand g and prices p in pair order, negative pairs flagged."""

    g: np.ndarray
    p: np.ndarray
    negative_pairs: tuple


def effective_demand(scenario: MobilityScenario, x, t: float = 0.0) -> DemandReport:
    """Demand after the standard-price substitution; base demand cancels.

    g_ij = -theta_ij (lam_ij v_i - lam_ji v_j);
    p_ij = gbar_ij / theta_ij + lam_ij v_i - lam_ji v_j.
    """
    imap = scenario.index_map
    x = np.asarray(x, dtype=float).ravel()
    if x.shape != (imap.n,):
        raise ValueError(f"state must have {imap.n} components")
    v = x[: imap.s]
    gamma, theta, lam, gbar = scenario.coefficient_arrays()
    lam_rev = np.array([scenario.lam[(j, i)] for (i, j) in imap.pairs])
    dest = np.array([i - 1 for (i, j) in imap.pairs])
    orig = np.array([j - 1 for (i, j) in imap.pairs])
    tilt = lam * v[dest] - lam_rev * v[orig]
    g = -theta * tilt
    p = gbar / theta + tilt
    negative = tuple(imap.pairs[a] for a in np.where(g < 0)[0])
    return DemandReport(g=g, p=p, negative_pairs=negative)


def _default_congestion(radius_km: float, amplitude: float) -> Callable[[float, float], float]:
    sigma2 = 2.0 * (radius_km / 2.0) ** 2

    def cong(x_km: float, y_km: float) -> float:
        return 1.0 + amplitude * math.exp(-(x_km * x_km + y_km * y_km) / sigma2)

    return cong


@dataclass(frozen=True)
class ScenarioConfig:
    """Knobs for the random scenario generator.

    Travel times are handling plus congested distance over speed,
    tau_ij = handling_h + d_ij * congestion(midpoint) / speed_kmh, and
    gamma_ij = 1 / tau_ij. The handling term keeps every pair's rate
    finite and, with the compact default radius, fast enough that the
    in-transit block can actually empty by the end of the horizon; with
    ``handling_h = 0`` the rule reduces to speed / (distance * congestion).

    ``lam`` is drawn once per unordered pair (symmetric pricing): the
    pricing drift then equalizes stations instead of sustaining permanent
    circulation, which is what makes the all-equal terminal state with an
    empty in-transit block reachable.
    """

    total_vehicles: float = 200.0
    radius_km: float = 1.0
    speed_kmh: float = 30.0
    handling_h: float = 1.0 / 12.0
    coeff_low: float = 0.0
    coeff_high: float = 0.3
    theta_min: float = 0.01
    congestion_amplitude: float = 0.3
    congestion: Optional[Callable[[float, float], float]] = None
    skew_low: float = 0.7
    skew_high: float = 1.4
    gbar_high: float = 2.0
    horizon_hours: float = 4.0
    beta: Optional[int] = None


def generate_random_scenario(
    s: int, seed: int, config: ScenarioConfig | None = None
) -> MobilityScenario:
    """Deterministically draw a scenario: positions, coefficients, x0, xd.

    theta and lam are uniform on [coeff_low, coeff_high] (theta clamped
    to at least theta_min); x0 spreads the fleet unevenly over stations
    by largest-remainder integer split of random weights; xd targets the
    even split with an empty in-transit block.
    """
    if s < 2:
        raise ValueError("need at least two stations")
    cfg = config or ScenarioConfig()
    rng = np.random.default_rng(seed)
    cong = cfg.congestion or _default_congestion(cfg.radius_km, cfg.congestion_amplitude)
    imap = build_index_map(s)

    positions = np.empty((s, 2))
    count = 0
    while count < s:
        p = rng.uniform(-cfg.radius_km, cfg.radius_km, size=2)
        if math.hypot(p[0], p[1]) <= cfg.radius_km:
            positions[count] = p
            count += 1

    theta = {}
    gbar = {}
    for pair in imap.pairs:
        theta[pair] = max(rng.uniform(cfg.coeff_low, cfg.coeff_high), cfg.theta_min)
    lam = {}
    for i in range(1, s + 1):
        for j in range(i + 1, s + 1):
            val = rng.uniform(cfg.coeff_low, cfg.coeff_high)
            lam[(i, j)] = val
            lam[(j, i)] = val
    for pair in imap.pairs:
        gbar[pair] = rng.uniform(0.0, cfg.gbar_high)

    gamma = {}
    for (i, j) in imap.pairs:
        pi, pj = positions[i - 1], positions[j - 1]
        mid = 0.5 * (pi + pj)
        d = float(np.hypot(*(pi - pj)))
        tau = cfg.handling_h + d * cong(mid[0], mid[1]) / cfg.speed_kmh
        if tau <= 0:
            raise ValueError("travel-time rule produced a nonpositive tau")
        gamma[(i, j)] = 1.0 / tau

    weights = rng.uniform(cfg.skew_low, cfg.skew_high, size=s)
    exact = cfg.total_vehicles * weights / weights.sum()
    counts = np.floor(exact)
    remainder = int(round(cfg.total_vehicles - counts.sum()))
    for idx in np.argsort(-(exact - counts))[:remainder]:
        counts[idx] += 1

    stations = tuple(
        Station(ident=i + 1, x_km=float(positions[i, 0]), y_km=float(positions[i, 1]),
                initial=float(counts[i]))
        for i in range(s)
    )
    x0 = np.concatenate([counts, np.zeros(imap.m)])
    xd = np.concatenate(
        [np.full(s, cfg.total_vehicles / s), np.zeros(imap.m)]
    )
    beta = cfg.beta if cfg.beta is not None else min(s, imap.m - 1)
    return MobilityScenario(
        stations=stations,
        gamma=gamma,
        theta=theta,
        lam=lam,
        gbar=gbar,
        horizon=cfg.horizon_hours,
        beta=beta,
        x0=x0,
        xd=xd,
    )


# -- scenario (de)serialization ---------------------------------------------

def _pairs_to_json(table: dict) -> dict:
    return {f"{i}-{j}": v for (i, j), v in sorted(table.items())}


def _pairs_from_json(obj: dict) -> dict:
    out = {}
    for key, v in obj.items():
        i, j = key.split("-")
        out[(int(i), int(j))] = float(v)
    return out


def scenario_to_json(scenario: MobilityScenario) -> dict:
    return {
        "stations": [
            {"id": st.ident, "x_km": st.x_km, "y_km": st.y_km, "initial": st.initial}
            for st in scenario.stations
        ],
        "gamma": _pairs_to_json(scenario.gamma),
        "theta": _pairs_to_json(scenario.theta),
        "lambda": _pairs_to_json(scenario.lam),
        "gbar": _pairs_to_json(scenario.gbar),
        "horizon_hours": scenario.horizon,
        "beta": scenario.beta,
        "x0": list(scenario.x0),
        "target": list(scenario.xd),
    }


def scenario_from_json(obj: dict) -> MobilityScenario:
    stations = tuple(
        Station(
            ident=int(st["id"]),
            x_km=float(st["x_km"]),
            y_km=float(st["y_km"]),
            initial=float(st["initial"]),
        )
        for st in obj["stations"]
    )
    return MobilityScenario(
        stations=stations,
        gamma=_pairs_from_json(obj["gamma"]),
        theta=_pairs_from_json(obj["theta"]),
        lam=_pairs_from_json(obj["lambda"]),
        gbar=_pairs_from_json(obj["gbar"]),
        horizon=float(obj["horizon_hours"]),
        beta=int(obj["beta"]),
        x0=np.asarray(obj["x0"], dtype=float),
        xd=np.asarray(obj["target"], dtype=float),
    )


def save_scenario(scenario: MobilityScenario, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_json(scenario), fh, indent=1)
        fh.write("\n")


def load_scenario(path) -> MobilityScenario:
    with open(path) as fh:
        return scenario_from_json(json.load(fh))


# -- staff-team extension ----------------------------------------------------

@dataclass(frozen=True)
class StaffTranscription:
    """Relaxed per-team rebalancing LP plus the variable/row layout.

    Variables are [u then uhat], each laid out team-major then step-major
    then pair: index = team * (K * m) + step * m + pair. ``coupling_rows``
    counts the uhat >= u inequalities (one per team/step/pair).
    """

    lp: lpmod.LinearProgram
    n_teams: int
    steps: int
    n_pairs: int
    coupling_rows: int
    staff_nonneg_rows: int
    team_l1_rows: int

    def split(self, z: np.ndarray):
        """(u, uhat) with shape (teams, K, m) each from a solution vector."""
        half = self.n_teams * self.steps * self.n_pairs
        shape = (self.n_teams, self.steps, self.n_pairs)
        return z[:half].reshape(shape), z[half : 2 * half].reshape(shape)


def build_staff_problem(
    scenario: MobilityScenario,
    grid: TimeGrid,
    staff_start: Optional[np.ndarray] = None,
    terminal_tolerance: float = 1e-6,
    max_variables: int = 400_000,
) -> StaffTranscription:
    """Transcribe the relaxed staff-team rebalancing problem.

    Per team k there are customer-move rates u_{.,k} and staff-car rates
    uhat_{.,k}; staff cars follow the same network dynamics without
    pricing. Constraints per team and step: uhat >= u (a staff car must
    accompany every move), parked staff-car counts stay nonnegative at
    every knot, and the l1 row sum of uhat is at most 1 (one car per
    team, relaxing the one-route-at-a-time rule to its convex hull). The
    customer fleet must reach ``scenario.xd`` within ``terminal_tolerance``.
    Objective: total moved plus staff-travel L1 mass.

    The binary per-team structure is *not* recovered here; no equivalence
    between this relaxation and the combinatorial problem is claimed.
    """
    imap = scenario.index_map
    s, m, n = imap.s, imap.m, imap.n
    k_steps = grid.steps
    beta = scenario.beta
    dt = grid.dt
    half = beta * k_steps * m
    if 2 * half > max_variables:
        raise ValueError(
            f"staff transcription needs {2 * half} variables, cap is {max_variables}"
        )

    model = build_mobility_model(scenario)
    es, gs = zoh_blocks(model.system, grid)
    # customer terminal map: Phi(T,0) x0 + sum_k Gamma_k u_k(total)
    phi = np.eye(n)
    gammas = [None] * k_steps
    suffix = np.eye(n)
    for k in range(k_steps - 1, -1, -1):
        gammas[k] = suffix @ gs[k]
        suffix = suffix @ es[k]
    phi = suffix
    rhs_terminal = scenario.xd - phi @ scenario.x0

    # staff cars follow the same network without pricing coupling
    gamma_arr, _, _, _ = scenario.coefficient_arrays()
    a_staff = np.zeros((n, n))
    b_staff = np.zeros((n, m))
    for idx, (i, j) in enumerate(imap.pairs):
        fi = s + idx
        a_staff[fi, fi] = -gamma_arr[idx]
        a_staff[i - 1, fi] = gamma_arr[idx]
        b_staff[j - 1, idx] = -1.0
        b_staff[fi, idx] = 1.0
    staff_sys = LtvSystem(
        n=n, m=m, provider=lambda t: (a_staff, b_staff), horizon=grid.horizon
    )
    e_list, g_list = zoh_blocks(staff_sys, grid)
    e_hat, g_hat = e_list[0], g_list[0]

    if staff_start is None:
        # one car per team, parked round-robin over stations
        staff_start = np.zeros((beta, s))
        for k in range(beta):
            staff_start[k, k % s] = 1.0
    staff_start = np.asarray(staff_start, dtype=float)
    if staff_start.shape != (beta, s):
        raise ValueError(f"staff_start must have shape ({beta}, {s})")
    staff_x0 = np.hstack([staff_start, np.zeros((beta, m))])

    def u_index(team, step, pair):
        return team * k_steps * m + step * m + pair

    nv = 2 * half
    c = np.full(nv, dt)

    rows_in = []
    rhs_in = []
    # uhat >= u  ->  u - uhat <= 0
    for team in range(beta):
        for step in range(k_steps):
            for pair in range(m):
                row = np.zeros(nv)
                row[u_index(team, step, pair)] = 1.0
                row[half + u_index(team, step, pair)] = -1.0
                rows_in.append(row)
                rhs_in.append(0.0)
    coupling_rows = len(rows_in)

    # per-team parked staff counts nonnegative at every knot l >= 1:
    #   -(v-rows of sum_{k<l} E^{l-1-k} G uhat_{k,team}) <= (v-rows of E^l x0_team)
    powers = [np.eye(n)]
    for _ in range(k_steps):
        powers.append(e_hat @ powers[-1])
    staff_rows = 0
    for ell in range(1, k_steps + 1):
        coeffs = [powers[ell - 1 - k] @ g_hat for k in range(ell)]
        for team in range(beta):
            base = powers[ell] @ staff_x0[team]
            for st in range(s):
                row = np.zeros(nv)
                for k in range(ell):
                    cols = half + u_index(team, k, 0) + np.arange(m)
                    row[cols] = -coeffs[k][st]
                rows_in.append(row)
                rhs_in.append(base[st])
                staff_rows += 1

    # per-team per-step l1 occupancy
    for team in range(beta):
        for step in range(k_steps):
            row = np.zeros(nv)
            row[half + u_index(team, step, 0) + np.arange(m)] = 1.0
            rows_in.append(row)
            rhs_in.append(1.0)
    team_rows = beta * k_steps

    # customer terminal within tolerance: |sum Gamma_k (sum_team u) - rhs| <= tol
    rows_term = []
    rhs_term = []
    for sign in (1.0, -1.0):
        for comp in range(n):
            row = np.zeros(nv)
            for team in range(beta):
                for k in range(k_steps):
                    cols = u_index(team, k, 0) + np.arange(m)
                    row[cols] += sign * gammas[k][comp]
            rows_term.append(row)
            rhs_term.append(sign * rhs_terminal[comp] + terminal_tolerance)
    rows_in.extend(rows_term)
    rhs_in.extend(rhs_term)

    problem = lpmod.LinearProgram(
        c=c,
        a_in=np.array(rows_in),
        b_in=np.array(rhs_in),
        lower=0.0,
        upper=1.0,
    )
    return StaffTranscription(
        lp=problem,
        n_teams=beta,
        steps=k_steps,
        n_pairs=m,
        coupling_rows=coupling_rows,
        staff_nonneg_rows=staff_rows,
        team_l1_rows=team_rows,
    )
