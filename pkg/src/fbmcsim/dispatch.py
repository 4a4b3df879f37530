"""Multi-period economic dispatch under nodal / NTC / flow-based / unconstrained exchange,
and redispatch-based congestion management on the full nodal network.

Time steps are decoupled, so every stage is solved as one LP per time step.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import GeneratorFleet, GridCase, SeriesData, build_ptdf
from .solver import ConicProgram, InfeasibleError, SolverError, UnboundedError

log = logging.getLogger(__name__)

REPRESENTATIONS = ("nodal", "ntc", "flow_based", "unconstrained")
DEFAULT_CURTAILMENT_PENALTY = 5.0
DEFAULT_REDISPATCH_COST = 30.0
DEFAULT_EXCHANGE_PENALTY = 0.01


class DispatchInfeasible(SolverError):
    """An LP stage has no feasible point; carries the time step and a diagnosis."""

    def __init__(self, stage, timestep, reason):
        super().__init__(f"{stage} infeasible at timestep {timestep!r}: {reason}")
        self.stage = stage
        self.timestep = timestep
        self.reason = reason


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NtcTable:
    """Directed zone-pair exchange limits, ``limits[i, j]`` from zone i to zone j."""

    zones: tuple
    limits: np.ndarray

    def __post_init__(self):
        if self.limits.shape != (len(self.zones), len(self.zones)):
            raise ConfigurationError("NTC table shape does not match the zone list")
        if np.any(self.limits < 0):
            raise ConfigurationError("NTC limits must be non-negative")

    @classmethod
    def uniform(cls, zones, value: float) -> "NtcTable":
        lim = np.full((len(zones), len(zones)), float(value))
        np.fill_diagonal(lim, 0.0)
        return cls(tuple(zones), lim)

    @classmethod
    def from_pairs(cls, zones, pairs: dict) -> "NtcTable":
        zones = tuple(zones)
        lim = np.zeros((len(zones), len(zones)))
        for (a, b), v in pairs.items():
            if a not in zones or b not in zones:
                raise ConfigurationError(f"NTC pair ({a}, {b}) references an unknown zone")
            lim[zones.index(a), zones.index(b)] = v
        return cls(zones, lim)

    def scaled(self, factor: float) -> "NtcTable":
        return NtcTable(self.zones, self.limits * factor)


@dataclass(eq=False)
class EdProblem:
    case: GridCase
    fleet: GeneratorFleet
    series: SeriesData
    representation: str = "nodal"
    ntc: NtcTable | None = None
    fb: object | None = None   # FbParameters
    curtailment_penalty: float = DEFAULT_CURTAILMENT_PENALTY
    exchange_penalty: float = DEFAULT_EXCHANGE_PENALTY
    stage: str = "market"

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ConfigurationError(f"unknown network representation {self.representation!r}")
        if self.representation == "ntc" and self.ntc is None:
            raise ConfigurationError("ntc representation requires an NtcTable")
        if self.representation == "flow_based" and self.fb is None:
            raise ConfigurationError("flow_based representation requires FbParameters")
        if self.curtailment_penalty < 0 or self.exchange_penalty < 0:
            raise ConfigurationError("penalties must be non-negative")
        if self.ntc is not None and tuple(self.ntc.zones) != tuple(self.case.zones):
            raise ConfigurationError("NTC table zones differ from the case zones")


@dataclass(eq=False)
class DispatchResult:
    case: GridCase
    fleet: GeneratorFleet
    timesteps: tuple
    representation: str
    generation: np.ndarray       # (T, generators); intermittent columns hold the realised infeed
    curtailment: np.ndarray      # (T, intermittent)
    availability: np.ndarray     # (T, intermittent)
    demand: np.ndarray           # (T, nodes)
    injections: np.ndarray       # (T, nodes)
    net_positions: np.ndarray    # (T, zones)
    exchanges: np.ndarray        # (T, zones, zones)
    flows: np.ndarray            # (T, lines)
    generation_cost: np.ndarray  # (T,)
    curtailment_cost: np.ndarray
    exchange_cost: np.ndarray
    curtailment_penalty: float = DEFAULT_CURTAILMENT_PENALTY
    metadata: dict = field(default_factory=dict)

    @property
    def dispatchable(self) -> np.ndarray:
        return self.generation[:, self.fleet.dispatchable_idx]

    @property
    def objective(self) -> float:
        return float(np.sum(self.generation_cost + self.curtailment_cost + self.exchange_cost))

    @property
    def system_cost(self) -> float:
        """Generation plus curtailment cost; excludes the exchange penalty."""
        return float(np.sum(self.generation_cost + self.curtailment_cost))

    @property
    def curtailment_volume(self) -> float:
        return float(self.curtailment.sum())


@dataclass(eq=False)
class RedispatchResult:
    market: DispatchResult
    reference: np.ndarray        # (T, dispatchable) schedule redispatch is measured from
    redispatch: np.ndarray       # (T, dispatchable), signed
    generation: np.ndarray       # (T, generators)
    curtailment: np.ndarray      # (T, intermittent)
    availability: np.ndarray
    injections: np.ndarray
    flows: np.ndarray
    shed: np.ndarray             # (T, nodes) load shedding slack, zero unless enabled
    generation_cost: np.ndarray
    curtailment_cost: np.ndarray
    curtailment_delta_cost: np.ndarray
    redispatch_cost: np.ndarray
    shed_cost: np.ndarray
    c_red: float = DEFAULT_REDISPATCH_COST

    @property
    def redispatch_volume(self) -> float:
        return float(np.abs(self.redispatch).sum())

    @property
    def curtailment_volume(self) -> float:
        return float(self.curtailment.sum())

    @property
    def cm_cost(self) -> np.ndarray:
        """Per-timestep congestion management cost: curtailment + redispatch (+ shedding)."""
        return self.curtailment_cost + self.redispatch_cost + self.shed_cost

    @property
    def objective(self) -> float:
        return float(np.sum(self.generation_cost + self.curtailment_cost + self.redispatch_cost + self.shed_cost))

    @property
    def max_overload(self) -> float:
        return float(np.max(np.abs(self.flows) - self.market.case.capacity, initial=-np.inf))

    def feasibility_report(self, tol: float = 1e-6) -> dict:
        over = np.abs(self.flows) - self.market.case.capacity
        bad = np.argwhere(over > tol)
        return {
            "feasible": bad.size == 0,
            "max_overload_mw": float(max(over.max(initial=0.0), 0.0)),
            "violations": [(self.market.timesteps[t], self.market.case.line_ids[j]) for t, j in bad],
        }


def proportional_exchanges(net_positions: np.ndarray) -> np.ndarray:
    """Minimum-volume bilateral exchanges realising the given net positions.

    Exporters ship to importers in proportion to import size; total exchange
    equals the sum of positive net positions, the least possible.
    """
    np_ = np.asarray(net_positions, float)
    exp = np.clip(np_, 0, None)
    imp = np.clip(-np_, 0, None)
    tot = imp.sum(axis=-1, keepdims=True)
    share = np.divide(imp, tot, out=np.zeros_like(imp), where=tot > 0)
    return exp[..., :, None] * share[..., None, :]


def _maps(case: GridCase, fleet: GeneratorFleet):
    disp = fleet.dispatchable_idx
    res = fleet.res_idx
    return disp, res, fleet.node_map(case.n_nodes, disp), fleet.node_map(case.n_nodes, res)


def _map_threads(fn, items, threads):
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _diagnose(case, fleet, demand_t, avail_t):
    supply = fleet.capacity[fleet.dispatchable_idx].sum() + avail_t.sum()
    if supply < demand_t.sum() - 1e-6:
        return f"generation adequacy: demand {demand_t.sum():.1f} MW exceeds supply {supply:.1f} MW"
    return "network or exchange constraints cannot accommodate the balance"


def _ed_step(problem: EdProblem, ptdf, t: int):
    case, fleet, series = problem.case, problem.fleet, problem.series
    disp, res, Mg, Mr = _maps(case, fleet)
    d = series.demand[t]
    r = series.availability[t]
    lp = ConicProgram()
    G = lp.add_variables("G", disp.size, 0.0, fleet.capacity[disp])
    C = lp.add_variables("C", res.size, 0.0, r)
    lp.add_objective(fleet.cost[disp], G)
    lp.add_objective(np.full(res.size, problem.curtailment_penalty), C)
    fixed_inj = Mr @ r - d
    lp.add_eq([(np.ones((1, disp.size)), G), (-np.ones((1, res.size)), C)], [-fixed_inj.sum()])

    rep = problem.representation
    Zm = case.zone_map
    EX = None
    if rep == "nodal":
        P = ptdf.matrix
        lp.add_le([(P @ Mg, G), (-P @ Mr, C)], case.capacity - P @ fixed_inj)
        lp.add_le([(-P @ Mg, G), (P @ Mr, C)], case.capacity + P @ fixed_inj)
    elif rep == "flow_based":
        H = problem.fb.ptdf_z[t]
        lp.add_le([(H @ Zm @ Mg, G), (-H @ Zm @ Mr, C)], problem.fb.ram[t] - H @ Zm @ fixed_inj)
    elif rep == "ntc":
        Z = case.n_zones
        pairs = [(a, b) for a in range(Z) for b in range(Z) if a != b]
        EX = lp.add_variables("EX", len(pairs), 0.0, [problem.ntc.limits[a, b] for a, b in pairs])
        E = np.zeros((Z, len(pairs)))
        for k, (a, b) in enumerate(pairs):
            E[a, k] = 1.0
            E[b, k] = -1.0
        lp.add_eq([(Zm @ Mg, G), (-Zm @ Mr, C), (-E, EX)], -Zm @ fixed_inj)
        lp.add_objective(np.full(len(pairs), problem.exchange_penalty), EX)
    try:
        sol = lp.solve()
    except InfeasibleError:
        raise DispatchInfeasible(problem.stage, series.timesteps[t], _diagnose(case, fleet, d, r)) from None
    except UnboundedError as exc:
        raise ConfigurationError(f"{problem.stage} unbounded at timestep {series.timesteps[t]!r}: {exc}") from None
    g = np.clip(sol[G], 0.0, fleet.capacity[disp])
    c = np.clip(sol[C], 0.0, r)
    ex = None
    if EX is not None:
        ex = np.zeros((case.n_zones, case.n_zones))
        for k, (a, b) in enumerate(pairs):
            ex[a, b] = max(sol[EX][k], 0.0)
    return g, c, ex


def assemble_dispatch(problem: EdProblem, g: np.ndarray, c: np.ndarray, exch=None, cls=None,
                      **extra) -> DispatchResult:
    """Build a DispatchResult from per-timestep dispatchable output ``g`` and curtailment ``c``."""
    case, fleet, series = problem.case, problem.fleet, problem.series
    disp, res, Mg, Mr = _maps(case, fleet)
    T = series.n_steps
    gen = np.zeros((T, fleet.n))
    gen[:, disp] = g
    gen[:, res] = series.availability - c
    inj = g @ Mg.T + gen[:, res] @ Mr.T - series.demand
    nps = inj @ case.zone_map.T
    if exch is None:
        exch = proportional_exchanges(nps)
    else:
        # net positions follow from EX exactly; they match the injections to LP tolerance
        nps = exch.sum(axis=2) - exch.sum(axis=1)
    pen = problem.exchange_penalty if problem.representation == "ntc" else 0.0
    cls = cls or DispatchResult
    return cls(
        case=case, fleet=fleet, timesteps=series.timesteps, representation=problem.representation,
        generation=gen, curtailment=np.asarray(c, float).reshape(T, res.size),
        availability=series.availability.copy(), demand=series.demand.copy(), injections=inj,
        net_positions=nps, exchanges=exch, flows=inj @ build_ptdf(case).matrix.T,
        generation_cost=g @ fleet.cost[disp],
        curtailment_cost=problem.curtailment_penalty * np.asarray(c).sum(axis=1),
        exchange_cost=pen * exch.sum(axis=(1, 2)),
        curtailment_penalty=problem.curtailment_penalty,
        metadata={"stage": problem.stage},
        **extra,
    )


def solve_ed(problem: EdProblem, threads: int = 1) -> DispatchResult:
    """Least-cost dispatch for every time step of ``problem``."""
    case, fleet, series = problem.case, problem.fleet, problem.series
    ptdf = build_ptdf(case)
    steps = _map_threads(lambda t: _ed_step(problem, ptdf, t), range(series.n_steps), threads)
    T = series.n_steps
    g = np.array([s[0] for s in steps]).reshape(T, fleet.dispatchable_idx.size)
    c = np.array([s[1] for s in steps]).reshape(T, fleet.res_idx.size)
    exch = None
    if problem.representation == "ntc":
        exch = np.array([s[2] for s in steps]).reshape(T, case.n_zones, case.n_zones)
    return assemble_dispatch(problem, g, c, exch)


def solve_redispatch(market: DispatchResult, case: GridCase | None = None,
                     c_red: float = DEFAULT_REDISPATCH_COST, *, reference=None, availability=None,
                     curtailment_floor=None, shed_penalty: float | None = None,
                     threads: int = 1) -> RedispatchResult:
    """Cheapest nodally feasible deviation from a market schedule.

    ``reference``, ``availability`` and ``curtailment_floor`` default to the
    market's dispatch, forecast availability and curtailment; real-time
    evaluation overrides them.  ``shed_penalty`` enables priced nodal load
    shedding so that the problem always has a feasible point.
    """
    case = case or market.case
    fleet = market.fleet
    disp, res, Mg, Mr = _maps(case, fleet)
    ref = market.dispatchable if reference is None else np.asarray(reference, float)
    avail = market.availability if availability is None else np.asarray(availability, float)
    floor = market.curtailment if curtailment_floor is None else np.asarray(curtailment_floor, float)
    floor = np.minimum(floor, avail)
    p = market.curtailment_penalty
    ptdf = build_ptdf(case)
    P = ptdf.matrix
    n_nodes = case.n_nodes

    def step(t):
        d = market.demand[t]
        lp = ConicProgram()
        G = lp.add_variables("G", disp.size, 0.0, fleet.capacity[disp])
        up = lp.add_variables("up", disp.size)
        dn = lp.add_variables("down", disp.size)
        C = lp.add_variables("C", res.size, floor[t], avail[t])
        lp.add_objective(fleet.cost[disp], G)
        lp.add_objective(np.full(disp.size, c_red), up)
        lp.add_objective(np.full(disp.size, c_red), dn)
        lp.add_objective(np.full(res.size, p), C)
        eye = np.eye(disp.size)
        lp.add_eq([(eye, G), (-eye, up), (eye, dn)], ref[t])
        fixed = Mr @ avail[t] - d
        terms_bal = [(np.ones((1, disp.size)), G), (-np.ones((1, res.size)), C)]
        terms_pos = [(P @ Mg, G), (-P @ Mr, C)]
        terms_neg = [(-P @ Mg, G), (P @ Mr, C)]
        S = None
        if shed_penalty is not None:
            S = lp.add_variables("shed", n_nodes, 0.0, d)
            lp.add_objective(np.full(n_nodes, shed_penalty), S)
            terms_bal.append((np.ones((1, n_nodes)), S))
            terms_pos.append((P, S))
            terms_neg.append((-P, S))
        lp.add_eq(terms_bal, [-fixed.sum()])
        lp.add_le(terms_pos, case.capacity - P @ fixed)
        lp.add_le(terms_neg, case.capacity + P @ fixed)
        try:
            sol = lp.solve()
        except InfeasibleError:
            raise DispatchInfeasible("redispatch", market.timesteps[t],
                                     _diagnose(case, fleet, d, avail[t])) from None
        shed = np.zeros(n_nodes) if S is None else np.clip(sol[S], 0.0, None)
        return np.clip(sol[G], 0.0, fleet.capacity[disp]), np.clip(sol[C], 0.0, avail[t]), shed

    T = len(market.timesteps)
    steps = _map_threads(step, range(T), threads)
    gen = np.zeros((T, fleet.n))
    curt = np.zeros((T, res.size))
    shed = np.zeros((T, n_nodes))
    for t, (g, c, s) in enumerate(steps):
        gen[t, disp] = g
        gen[t, res] = avail[t] - c
        curt[t] = c
        shed[t] = s
    red = gen[:, disp] - ref
    inj = gen[:, disp] @ Mg.T + gen[:, res] @ Mr.T - market.demand + shed
    return RedispatchResult(
        market=market, reference=ref, redispatch=red, generation=gen, curtailment=curt,
        availability=avail, injections=inj, flows=inj @ P.T, shed=shed,
        generation_cost=gen[:, disp] @ fleet.cost[disp],
        curtailment_cost=p * curt.sum(axis=1),
        curtailment_delta_cost=p * (curt - floor).sum(axis=1),
        redispatch_cost=c_red * np.abs(red).sum(axis=1),
        shed_cost=(shed_penalty or 0.0) * shed.sum(axis=1),
        c_red=c_red,
    )
