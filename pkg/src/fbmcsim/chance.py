"""Chance-constrained zonal dispatch with endogenous flow reliability margins.

Forecast errors of intermittent infeed are Gaussian, ``omega_t ~ N(0, Sigma_t)``.
Dispatchable units absorb the aggregate error through participation factors
``alpha_t`` (``G(omega) = G - alpha * sum(omega)``).  Each scalar chance
constraint ``P[x <= bound] >= 1 - eps`` becomes ``mean + z_eps * std <= bound``,
where the std of a CNEC flow is a second-order cone in ``alpha``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .dispatch import (DispatchInfeasible, DispatchResult, EdProblem, _map_threads, _maps,
                       assemble_dispatch)
from .grid import SeriesData
from .solver import ConicProgram, InfeasibleError

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.05
DEFAULT_RELATIVE_STD = 0.10
PSD_CLIP = -1e-10


class ParameterError(ValueError):
    pass


def quantile_std_normal(eps: float) -> float:
    """``Phi^{-1}(1 - eps)``, evaluated as ``-Phi^{-1}(eps)`` to keep precision for small eps."""
    if not 0 < eps < 1:
        raise ParameterError(f"risk level must lie in (0, 1), got {eps}")
    return float(-ndtri(eps))


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; tiny negative eigenvalues are clipped."""
    cov = np.asarray(cov, float)
    if cov.size == 0:
        return cov.copy()
    if not np.allclose(cov, cov.T, atol=1e-9):
        raise ParameterError("covariance matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < PSD_CLIP * scale:
        raise ParameterError(f"covariance matrix is not positive semidefinite (eigenvalue {w.min():.3g})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass(frozen=True, eq=False)
class UncertaintyModel:
    timesteps: tuple
    covariance: np.ndarray   # (T, R, R) in MW^2
    eps: float = DEFAULT_EPSILON

    def __post_init__(self):
        quantile_std_normal(self.eps)
        if not 0 < self.eps < 0.5:
            raise ParameterError("risk level must lie in (0, 0.5)")
        object.__setattr__(self, "_sqrt", np.array([psd_sqrt(c) for c in self.covariance]))

    @property
    def z(self) -> float:
        return quantile_std_normal(self.eps)

    @property
    def sqrt(self) -> np.ndarray:
        return self._sqrt

    @property
    def aggregate_std(self) -> np.ndarray:
        """``S_t = sqrt(e' Sigma_t e)`` per time step."""
        return np.sqrt(np.clip(self.covariance.sum(axis=(1, 2)), 0.0, None))

    @property
    def n_units(self) -> int:
        return self.covariance.shape[1]


def build_covariance(series: SeriesData, relative_std: float = DEFAULT_RELATIVE_STD,
                     correlation: float = 0.0, eps: float = DEFAULT_EPSILON) -> UncertaintyModel:
    """Covariance with per-unit std ``relative_std * forecast`` and constant correlation."""
    if relative_std < 0:
        raise ParameterError("relative std must be non-negative")
    if not 0 <= correlation < 1:
        raise ParameterError(f"correlation must lie in [0, 1), got {correlation}")
    sd = relative_std * series.availability
    R = sd.shape[1]
    corr = np.full((R, R), correlation)
    np.fill_diagonal(corr, 1.0)
    cov = sd[:, :, None] * corr[None] * sd[:, None, :]
    return UncertaintyModel(tuple(series.timesteps), cov, eps)


@dataclass(eq=False)
class CcDispatchResult(DispatchResult):
    alpha: np.ndarray = None        # (T, dispatchable)
    flow_std: np.ndarray = None     # (T, CNECs)
    z: float = 0.0
    eps: float = DEFAULT_EPSILON
    fb: object = None
    uncertainty: UncertaintyModel = None

    @property
    def margins(self) -> np.ndarray:
        return self.z * self.flow_std


def _flow_std_terms(fb, t, case, fleet):
    """Per-CNEC zonal PTDF weights for intermittent units (a) and dispatchable units (w)."""
    disp, res = fleet.dispatchable_idx, fleet.res_idx
    zi = case.node_zone_idx
    pos = fb.direction > 0
    rows = np.zeros((len(fb.cnecs), fb.ptdf_z.shape[2]))
    rows[fb.row_cnec[pos]] = fb.ptdf_z[t][pos]
    a = rows[:, zi[fleet.node[res]]]
    w = rows[:, zi[fleet.node[disp]]]
    return a, w


def flow_std(fb, unc: UncertaintyModel, alpha: np.ndarray, t: int, case, fleet) -> np.ndarray:
    """Analytic std of every CNEC's zonal flow, ``||rho (m_r - m_g alpha e') Sigma^{1/2}||``."""
    a, w = _flow_std_terms(fb, t, case, fleet)
    if a.shape[1] == 0:
        return np.zeros(a.shape[0])
    u = a - (w @ alpha)[:, None]
    return np.linalg.norm(u @ unc.sqrt[t], axis=1)


def _cc_step(problem: EdProblem, unc: UncertaintyModel, t: int, alpha_fixed, flow_margin=True):
    case, fleet, series, fb = problem.case, problem.fleet, problem.series, problem.fb
    disp, res, Mg, Mr = _maps(case, fleet)
    Zm = case.zone_map
    d = series.demand[t]
    r = series.availability[t]
    z = unc.z
    S = unc.aggregate_std[t]
    n_cnec = len(fb.cnecs)
    lp = ConicProgram()
    G = lp.add_variables("G", disp.size, 0.0, fleet.capacity[disp])
    if alpha_fixed is None:
        A = lp.add_variables("alpha", disp.size, 0.0, np.inf)
    else:
        A = lp.add_variables("alpha", disp.size, alpha_fixed[t], alpha_fixed[t])
    C = lp.add_variables("C", res.size, 0.0, r)
    T = lp.add_variables("T", n_cnec, 0.0, np.inf)
    lp.add_objective(fleet.cost[disp], G)
    lp.add_objective(np.full(res.size, problem.curtailment_penalty), C)

    eye = np.eye(disp.size)
    lp.add_le([(eye, G), (z * S * eye, A)], fleet.capacity[disp])
    lp.add_le([(-eye, G), (z * S * eye, A)], np.zeros(disp.size))
    fixed = Mr @ r - d
    lp.add_eq([(np.ones((1, disp.size)), G), (-np.ones((1, res.size)), C)], [-fixed.sum()])
    lp.add_eq([(np.ones((1, disp.size)), A)], [1.0])

    H = fb.ptdf_z[t]
    sel = np.zeros((fb.n_rows, n_cnec))
    sel[np.arange(fb.n_rows), fb.row_cnec] = z if flow_margin else 0.0
    lp.add_le([(H @ Zm @ Mg, G), (-H @ Zm @ Mr, C), (sel, T)], fb.ram[t] - H @ Zm @ fixed)

    if res.size:
        a, w = _flow_std_terms(fb, t, case, fleet)
        L = unc.sqrt[t]
        Le = L.T @ np.ones(res.size)
        for c in range(n_cnec):
            lp.add_soc(T[c], [(-np.outer(Le, w[c]), A)], L.T @ a[c])
    sol = lp.solve()
    return (np.clip(sol[G], 0.0, fleet.capacity[disp]), np.clip(sol[C], 0.0, r),
            np.clip(sol[A], 0.0, None))


def _diagnose_cc(problem, unc, t, alpha_fixed):
    try:
        _cc_step(problem, unc, t, alpha_fixed, flow_margin=False)
    except InfeasibleError:
        return "generator headroom for the balancing response cannot be met"
    return "CNEC flow reliability margins exceed the available RAM"


def solve_cc_ed(problem: EdProblem, unc: UncertaintyModel, alpha_mode: str = "optimized",
                alpha=None, threads: int = 1) -> CcDispatchResult:
    """Chance-constrained flow-based dispatch (SOCP per time step).

    ``alpha_mode="fixed"`` takes participation factors from ``alpha`` (shape
    ``(T, dispatchable)`` or ``(dispatchable,)``) instead of optimising them.
    """
    if problem.representation != "flow_based" or problem.fb is None:
        raise ParameterError("chance-constrained dispatch needs a flow_based problem with FbParameters")
    case, fleet, series = problem.case, problem.fleet, problem.series
    disp, res = fleet.dispatchable_idx, fleet.res_idx
    if unc.n_units != res.size:
        raise ParameterError(f"uncertainty model covers {unc.n_units} units, fleet has {res.size} intermittent")
    if len(unc.covariance) != series.n_steps:
        raise ParameterError("uncertainty model and series differ in horizon length")
    if alpha_mode not in ("optimized", "fixed"):
        raise ParameterError(f"unknown alpha mode {alpha_mode!r}")
    alpha_fixed = None
    if alpha_mode == "fixed":
        if alpha is None:
            raise ParameterError("fixed alpha mode needs alpha values")
        alpha_fixed = np.broadcast_to(np.asarray(alpha, float), (series.n_steps, disp.size)).copy()
        if np.any(alpha_fixed < 0) or not np.allclose(alpha_fixed.sum(axis=1), 1.0, atol=1e-9):
            raise ParameterError("fixed participation factors must be non-negative and sum to 1")

    def step(t):
        try:
            return _cc_step(problem, unc, t, alpha_fixed)
        except InfeasibleError:
            raise DispatchInfeasible("chance-constrained market", series.timesteps[t],
                                     _diagnose_cc(problem, unc, t, alpha_fixed)) from None

    steps = _map_threads(step, range(series.n_steps), threads)
    T = series.n_steps
    g = np.array([s[0] for s in steps]).reshape(T, disp.size)
    c = np.array([s[1] for s in steps]).reshape(T, res.size)
    al = np.array([s[2] for s in steps]).reshape(T, disp.size)
    al = al / al.sum(axis=1, keepdims=True)
    std = np.array([flow_std(problem.fb, unc, al[t], t, case, fleet) for t in range(T)])
    return assemble_dispatch(problem, g, c, cls=CcDispatchResult, alpha=al, flow_std=std, z=unc.z,
                             eps=unc.eps, fb=problem.fb, uncertainty=unc)


def endogenous_frm(result: CcDispatchResult) -> np.ndarray:
    """Per-timestep, per-CNEC margin ``z_eps * T`` (MW)."""
    return result.z * result.flow_std


def frm_rows(result: CcDispatchResult) -> np.ndarray:
    """Endogenous margins expanded to the directional rows of the FbParameters."""
    return endogenous_frm(result)[:, result.fb.row_cnec]


def zonal_flow_moments(result: CcDispatchResult, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of every directional FB row flow at time step index ``t``."""
    fb = result.fb
    mean = fb.ptdf_z[t] @ result.net_positions[t]
    std = flow_std(fb, result.uncertainty, result.alpha[t], t, result.case, result.fleet)
    return mean, std[fb.row_cnec]


def zonal_flow_samples(result: CcDispatchResult, t: int, omega: np.ndarray) -> np.ndarray:
    """Directional FB row flows for sampled forecast errors ``omega`` (n, R)."""
    case, fleet = result.case, result.fleet
    disp, res, Mg, Mr = _maps(case, fleet)
    Zm = case.zone_map
    omega = np.atleast_2d(omega)
    total = omega.sum(axis=1)
    dnp = omega @ (Zm @ Mr).T - total[:, None] * (Zm @ Mg @ result.alpha[t])[None, :]
    return (result.net_positions[t][None, :] + dnp) @ result.fb.ptdf_z[t].T


@dataclass
class ChanceCheck:
    """Analytic satisfaction probabilities of every reformulated constraint."""

    generator_upper: np.ndarray = field(default=None)
    generator_lower: np.ndarray = field(default=None)
    cnec: np.ndarray = field(default=None)


def analytic_satisfaction(result: CcDispatchResult) -> ChanceCheck:
    """Gaussian probabilities that each chance constraint holds at the solution."""
    from scipy.stats import norm

    fleet = result.fleet
    disp = fleet.dispatchable_idx
    S = result.uncertainty.aggregate_std
    G = result.dispatchable
    sd_g = result.alpha * S[:, None]
    # interior-point noise leaves alpha ~1e-13 on idle units; treat sub-uW spreads as deterministic
    live = sd_g > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(live, norm.cdf((fleet.capacity[disp] - G) / sd_g),
                      (G <= fleet.capacity[disp] + 1e-6).astype(float))
        lo = np.where(live, norm.cdf(G / sd_g), (G >= -1e-6).astype(float))
    cn = np.ones_like(result.fb.ram)
    for t in range(len(result.timesteps)):
        mean, std = zonal_flow_moments(result, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            cn[t] = np.where(std > 0, norm.cdf((result.fb.ram[t] - mean) / std),
                             (mean <= result.fb.ram[t] + 1e-6).astype(float))
    return ChanceCheck(up, lo, cn)
