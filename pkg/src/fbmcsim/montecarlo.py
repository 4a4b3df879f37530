"""Real-time evaluation: sample forecast errors, apply the balancing response, rerun redispatch."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chance import UncertaintyModel
from .dispatch import DEFAULT_REDISPATCH_COST, DispatchInfeasible, DispatchResult, _maps, solve_redispatch

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 20
DEFAULT_SHED_PENALTY = 1000.0


@dataclass(frozen=True, eq=False)
class DeviationSample:
    sample_id: int
    seed: int
    omega: np.ndarray            # (T, R) deviations after clamping the realised infeed
    clamped_mw: np.ndarray       # (T,) total deviation removed by clamping


def sample_deviations(unc: UncertaintyModel, n_samples: int = DEFAULT_SAMPLES, seed: int = 0,
                      availability=None, capacity=None) -> list[DeviationSample]:
    """Independent ``N(0, Sigma_t)`` draws per time step.

    Sample ``k`` uses the generator seeded by ``(seed, k)``, so any single
    sample is reproducible on its own.  With ``availability`` (T, R) and
    ``capacity`` (R,) the realised infeed is clamped to ``[0, capacity]``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    L = unc.sqrt
    T, R = unc.covariance.shape[:2]
    out = []
    for k in range(n_samples):
        rng = np.random.default_rng([seed, k])
        xi = rng.standard_normal((T, R))
        raw = np.einsum("tij,tj->ti", L, xi) if R else np.zeros((T, 0))
        omega = raw
        clamped = np.zeros(T)
        if availability is not None:
            avail = np.asarray(availability, float)
            upper = np.full(R, np.inf) if capacity is None else np.asarray(capacity, float)
            omega = np.clip(avail + raw, 0.0, upper) - avail
            clamped = np.abs(raw - omega).sum(axis=1)
            if clamped.any():
                log.debug("sample %d: clamped %.3f MW of deviation", k, clamped.sum())
        out.append(DeviationSample(k, seed, omega, clamped))
    return out


def zero_sample(T: int, R: int, sample_id: int = -1) -> DeviationSample:
    return DeviationSample(sample_id, 0, np.zeros((T, R)), np.zeros(T))


@dataclass(frozen=True, eq=False)
class RealtimeState:
    generation: np.ndarray      # dispatchable output after the balancing response
    availability: np.ndarray    # realised intermittent infeed potential
    curtailment: np.ndarray     # market curtailment carried into real time
    injections: np.ndarray      # nodal injections
    imbalance: float            # sum of injections; non-zero only when clamping bites
    flagged: bool


def realtime_state(market: DispatchResult, alpha, sample: DeviationSample, t: int) -> RealtimeState:
    """Apply ``G(omega) = g_da - alpha * sum(omega)`` and the realised infeed at time step ``t``."""
    fleet = market.fleet
    case = market.case
    disp, res, Mg, Mr = _maps(case, fleet)
    a = np.asarray(alpha, float)
    a = a[t] if a.ndim == 2 else a
    if not np.isclose(a.sum(), 1.0, atol=1e-8):
        raise ValueError("participation factors must sum to one")
    omega = sample.omega[t]
    target = market.dispatchable[t] - a * omega.sum()
    g = np.clip(target, 0.0, fleet.capacity[disp])
    avail = market.availability[t] + omega
    curt = np.minimum(market.curtailment[t], avail)
    inj = Mg @ g + Mr @ (avail - curt) - market.demand[t]
    imbalance = float(inj.sum())
    flagged = not np.allclose(g, target, atol=1e-9) or not np.allclose(curt, market.curtailment[t], atol=1e-9)
    if flagged:
        log.debug("timestep %s sample %d: clamped response leaves %.4f MW imbalance",
                  market.timesteps[t], sample.sample_id, imbalance)
    return RealtimeState(g, avail, curt, inj, imbalance, flagged)


@dataclass(eq=False)
class CmStatistics:
    timesteps: tuple
    sample_ids: np.ndarray
    redispatch_cost: np.ndarray      # (S, T)
    curtailment_cost: np.ndarray     # (S, T)
    shed_cost: np.ndarray            # (S, T)
    deterministic: dict              # component -> (T,), the omega = 0 baseline
    failed: list = field(default_factory=list)
    imbalance_mw: np.ndarray = None  # (S, T) clamping residual handed to redispatch

    @property
    def total(self) -> np.ndarray:
        return self.redispatch_cost + self.curtailment_cost + self.shed_cost

    @property
    def deterministic_total(self) -> np.ndarray:
        d = self.deterministic
        return d["redispatch"] + d["curtailment"] + d["shed"]

    def envelope(self) -> dict:
        tot = self.total
        if tot.shape[0] == 0:
            empty = np.full(len(self.timesteps), np.nan)
            return {"min": empty, "mean": empty, "max": empty, "deterministic": self.deterministic_total}
        return {"min": tot.min(axis=0), "mean": tot.mean(axis=0), "max": tot.max(axis=0),
                "deterministic": self.deterministic_total}

    @property
    def mean_cost(self) -> float:
        """Expected CM cost over the horizon: the sum of per-timestep sample means."""
        if self.total.shape[0] == 0:
            return float("nan")
        return float(self.total.mean(axis=0).sum())

    def mean_components(self) -> dict:
        if self.total.shape[0] == 0:
            return {"curtailment": float("nan"), "redispatch": float("nan"), "shed": float("nan")}
        return {"curtailment": float(self.curtailment_cost.mean(axis=0).sum()),
                "redispatch": float(self.redispatch_cost.mean(axis=0).sum()),
                "shed": float(self.shed_cost.mean(axis=0).sum())}

    def export_csv(self, stats_path, envelope_path) -> tuple[Path, Path]:
        from .fbmc_params import _fmt

        stats_path, envelope_path = Path(stats_path), Path(envelope_path)
        with stats_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "timestep", "redispatch_cost", "curtailment_cost", "shed_cost"])
            for s, sid in enumerate(self.sample_ids):
                for t, ts in enumerate(self.timesteps):
                    w.writerow([int(sid), ts, _fmt(self.redispatch_cost[s, t]),
                                _fmt(self.curtailment_cost[s, t]), _fmt(self.shed_cost[s, t])])
        env = self.envelope()
        with envelope_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestep", "min", "mean", "max", "deterministic"])
            for t, ts in enumerate(self.timesteps):
                w.writerow([ts, *(_fmt(env[k][t]) for k in ("min", "mean", "max", "deterministic"))])
        return stats_path, envelope_path


def _realised_inputs(market, alpha, sample):
    T = len(market.timesteps)
    states = [realtime_state(market, alpha, sample, t) for t in range(T)]
    nd = market.fleet.dispatchable_idx.size
    nr = market.fleet.res_idx.size
    ref = np.array([s.generation for s in states]).reshape(T, nd)
    avail = np.array([s.availability for s in states]).reshape(T, nr)
    floor = np.array([s.curtailment for s in states]).reshape(T, nr)
    imb = np.array([s.imbalance for s in states])
    return ref, avail, floor, imb


def evaluate_cm(case, market: DispatchResult, alpha, samples: list[DeviationSample],
                c_red: float = DEFAULT_REDISPATCH_COST, shed_penalty: float = DEFAULT_SHED_PENALTY,
                threads: int = 1) -> CmStatistics:
    """Rerun redispatch for every realised sample and collect cost statistics.

    The schedule after the balancing response is the redispatch reference, so
    any imbalance left by clamped responses is closed by priced redispatch
    (or, failing that, by load shedding at ``shed_penalty``).
    """
    T = len(market.timesteps)
    R = market.fleet.res_idx.size

    def run(sample):
        ref, avail, floor, imb = _realised_inputs(market, alpha, sample)
        try:
            rd = solve_redispatch(market, case, c_red, reference=ref, availability=avail,
                                  curtailment_floor=floor, shed_penalty=shed_penalty)
        except DispatchInfeasible as exc:
            log.warning("sample %d excluded: %s", sample.sample_id, exc)
            return sample.sample_id, None, imb
        return sample.sample_id, rd, imb

    base = run(zero_sample(T, R))[1]
    if base is None:
        raise DispatchInfeasible("real-time baseline", None, "deterministic redispatch failed")
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(run, samples))
    else:
        runs = [run(s) for s in samples]
    ok = [(sid, rd, imb) for sid, rd, imb in runs if rd is not None]
    failed = [sid for sid, rd, _ in runs if rd is None]

    def stack(attr):
        if not ok:
            return np.zeros((0, T))
        return np.array([getattr(rd, attr) for _, rd, _ in ok]).reshape(len(ok), T)

    return CmStatistics(
        timesteps=tuple(market.timesteps),
        sample_ids=np.array([sid for sid, _, _ in ok], dtype=int),
        redispatch_cost=stack("redispatch_cost"),
        curtailment_cost=stack("curtailment_cost"),
        shed_cost=stack("shed_cost"),
        deterministic={"redispatch": base.redispatch_cost, "curtailment": base.curtailment_cost,
                       "shed": base.shed_cost},
        failed=failed,
        imbalance_mw=np.array([imb for _, _, imb in ok]).reshape(len(ok), T),
    )
