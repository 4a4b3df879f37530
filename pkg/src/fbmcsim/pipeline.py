"""Scenario orchestration: basecase -> flow-based parameters -> D-1 market -> D-0 redispatch.

Stage composition per mode:

=========  ===============================  ==========================  ===========
mode       D-2 basecase                     D-1 market                  D-0
=========  ===============================  ==========================  ===========
fbmc       nodal                            flow-based                  redispatch
fbmc_plus  nodal                            flow-based (cross-border)   redispatch
fbmc_cc    nodal                            chance-constrained FB       redispatch
ntc        --                               bilateral NTC               redispatch
nodal      --                               nodal (one shot)            --
uniform    --                               unconstrained exchange      redispatch
=========  ===============================  ==========================  ===========
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import fixture_path
from .chance import (DEFAULT_EPSILON, DEFAULT_RELATIVE_STD, CcDispatchResult, build_covariance,
                     endogenous_frm, frm_rows, solve_cc_ed)
from .dispatch import (DEFAULT_CURTAILMENT_PENALTY, DEFAULT_EXCHANGE_PENALTY, DEFAULT_REDISPATCH_COST,
                       ConfigurationError, DispatchInfeasible, EdProblem, NtcTable, solve_ed,
                       solve_redispatch)
from .fbmc_params import build_fb_parameters, fb_domain_slice, _fmt
from .grid import DATA_FILES, build_lodf, build_ptdf, load_grid_data, select_cnecs
from .montecarlo import DEFAULT_SHED_PENALTY, evaluate_cm, sample_deviations

log = logging.getLogger(__name__)

MODES = ("fbmc", "fbmc_plus", "fbmc_cc", "ntc", "nodal", "uniform")
FB_MODES = ("fbmc", "fbmc_plus", "fbmc_cc")
MODE_DEFAULTS = {
    "fbmc": {"minram": 0.2, "cross_border_only": False},
    "fbmc_plus": {"minram": 0.7, "cross_border_only": True},
    "fbmc_cc": {"minram": 0.7, "cross_border_only": True},
}
STAGE_PLAN = {
    "fbmc": ("basecase:nodal", "fb_parameters", "market:flow_based", "redispatch:nodal"),
    "fbmc_plus": ("basecase:nodal", "fb_parameters", "market:flow_based", "redispatch:nodal"),
    "fbmc_cc": ("basecase:nodal", "fb_parameters", "market:flow_based_cc", "redispatch:nodal"),
    "ntc": ("market:ntc", "redispatch:nodal"),
    "nodal": ("market:nodal",),
    "uniform": ("market:unconstrained", "redispatch:nodal"),
}


class StageError(RuntimeError):
    """A pipeline stage failed; names the stage and the config hash."""

    def __init__(self, stage, config_hash, cause):
        super().__init__(f"stage {stage!r} failed (config {config_hash[:12]}): {cause}")
        self.stage = stage
        self.config_hash = config_hash
        self.cause = cause


@dataclass
class ScenarioConfig:
    dataset: str = ""
    mode: str = "fbmc"
    minram: float | None = None
    z2z_threshold: float = 0.05
    outage_sensitivity: float = 0.2
    cross_border_only: bool | None = None
    long_term_allocation: float | None = None
    ntc: float | dict | None = None
    epsilon: float = DEFAULT_EPSILON
    relative_std: float = DEFAULT_RELATIVE_STD
    correlation: float = 0.0
    alpha_source: str | None = None
    curtailment_penalty: float = DEFAULT_CURTAILMENT_PENALTY
    redispatch_cost: float = DEFAULT_REDISPATCH_COST
    exchange_penalty: float = DEFAULT_EXCHANGE_PENALTY
    shed_penalty: float = DEFAULT_SHED_PENALTY
    capacity_scale: float = 1.0
    samples: int = 0
    seed: int = 0
    threads: int = 1
    figures: bool = True
    slice_timestep: str | None = None
    slice_axes: str | None = None
    label: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.mode == "ntc" and self.ntc is None:
            raise ConfigurationError("ntc mode needs an ntc value or table")
        if self.capacity_scale <= 0:
            raise ConfigurationError("capacity_scale must be positive")
        if self.long_term_allocation not in (None, 0, 0.0):
            raise ConfigurationError("long-term allocations are not modelled; leave long_term_allocation unset")
        if self.minram is not None and not 0 <= self.minram <= 1:
            raise ConfigurationError("minram must lie in [0, 1]")
        if self.samples < 0:
            raise ConfigurationError("samples must be non-negative")
        if self.alpha_source not in (None, "cc", "capacity"):
            raise ConfigurationError("alpha_source must be 'cc' or 'capacity'")
        for name in ("curtailment_penalty", "redispatch_cost", "exchange_penalty", "shed_penalty"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")

    @property
    def effective_minram(self) -> float:
        if self.minram is not None:
            return self.minram
        return MODE_DEFAULTS.get(self.mode, {"minram": 0.2})["minram"]

    @property
    def effective_cross_border_only(self) -> bool:
        if self.cross_border_only is not None:
            return self.cross_border_only
        return MODE_DEFAULTS.get(self.mode, {"cross_border_only": False})["cross_border_only"]

    @property
    def effective_alpha_source(self) -> str:
        if self.alpha_source:
            return self.alpha_source
        return "cc" if self.mode in FB_MODES else "capacity"

    @property
    def name(self) -> str:
        return self.label or self.mode

    def dataset_dir(self) -> Path:
        return Path(self.dataset) if self.dataset else Path(str(fixture_path()))

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("threads")
        d["dataset"] = str(self.dataset)
        if isinstance(self.ntc, dict):
            d["ntc"] = {"default": self.ntc.get("default"),
                        "pairs": {f"{a}->{b}": v for (a, b), v in sorted(self.ntc["pairs"].items())}}
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "scenario": ("dataset", "mode", "capacity_scale", "label"),
    "fbmc": ("minram", "z2z_threshold", "outage_sensitivity", "cross_border_only", "long_term_allocation"),
    "ntc": ("ntc",),
    "chance": ("epsilon", "relative_std", "correlation", "alpha_source"),
    "costs": ("curtailment_penalty", "redispatch_cost", "exchange_penalty", "shed_penalty"),
    "montecarlo": ("samples", "seed", "threads"),
    "report": ("figures", "slice_timestep", "slice_axes"),
}


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(ScenarioConfig)}
    t = str(types[name])
    raw = raw.strip()
    if raw.lower() in ("", "none", "null"):
        return None
    if "bool" in t:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{name}: not a boolean: {raw!r}")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    if name == "ntc":
        return float(raw)
    return raw


def _key_section(key: str) -> str:
    for section, keys in _SECTIONS.items():
        if key in keys:
            return section
    raise ConfigurationError(f"unknown configuration key {key!r}")


def load_config(path=None, overrides: list[str] | tuple = (), **kwargs) -> ScenarioConfig:
    """Read an INI-style scenario file and apply ``section.key=value`` / ``key=value`` overrides.

    An ``[ntc]`` section may hold ``default`` plus directed pairs such as
    ``Z1->Z2 = 500``.
    """
    values: dict = {}
    ntc_pairs: dict = {}
    base = Path(path).parent if path else Path.cwd()
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                if section == "ntc" and key not in ("ntc", "default"):
                    if "->" not in key:
                        raise ConfigurationError(f"[ntc] entry {key!r} is not of the form A->B")
                    a, b = (s.strip() for s in key.split("->"))
                    ntc_pairs[(a, b)] = float(raw)
                    continue
                if section == "ntc" and key == "default":
                    key = "ntc"
                if section not in _SECTIONS or key not in _SECTIONS[section]:
                    raise ConfigurationError(f"unknown configuration key [{section}] {key}")
                values[key] = _coerce(key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if "." in key:
            section, key = key.split(".", 1)
            if section not in _SECTIONS or key not in _SECTIONS[section]:
                raise ConfigurationError(f"unknown configuration key {section}.{key}")
        else:
            _key_section(key)
        values[key] = _coerce(key, raw)
    values.update({k: v for k, v in kwargs.items() if v is not None})
    if ntc_pairs:
        default = values.get("ntc")
        values["ntc"] = {"default": default, "pairs": ntc_pairs}
    ds = values.get("dataset")
    if ds and not Path(ds).is_absolute():
        values["dataset"] = str((base / ds).resolve())
    return ScenarioConfig(**values)


def dataset_hash(directory) -> str:
    h = hashlib.sha256()
    for name in DATA_FILES:
        h.update(name.encode())
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()


def _ntc_table(config: ScenarioConfig, zones) -> NtcTable:
    if isinstance(config.ntc, dict):
        default = config.ntc.get("default")
        table = NtcTable.uniform(zones, default or 0.0)
        lim = table.limits.copy()
        for (a, b), v in config.ntc["pairs"].items():
            if a not in zones or b not in zones:
                raise ConfigurationError(f"NTC pair {a}->{b} references an unknown zone")
            lim[zones.index(a), zones.index(b)] = v
        return NtcTable(tuple(zones), lim)
    return NtcTable.uniform(zones, float(config.ntc))


@dataclass(eq=False)
class ScenarioReport:
    name: str
    mode: str
    stages: tuple
    costs: dict                      # stage -> {generation, curtailment, redispatch, total}
    volumes: dict                    # {"C", "R", "C+R"} in MWh at D-0
    metadata: dict
    realtime: dict | None = None     # Monte-Carlo congestion management summary
    timings: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.costs["D-0"]["total"]

    def summary(self) -> dict:
        return {"name": self.name, "mode": self.mode, "stages": list(self.stages), "costs": self.costs,
                "volumes": self.volumes, "realtime": self.realtime, "metadata": self.metadata}


def _cost_row(generation, curtailment, redispatch=0.0) -> dict:
    g, c, r = (round(float(v), 6) for v in (generation, curtailment, redispatch))
    return {"generation": g, "curtailment": c, "redispatch": r, "total": round(g + c + r, 6)}


def run_scenario(config: ScenarioConfig) -> ScenarioReport:
    """Execute the stage sequence of ``config.mode``; raises StageError on failure."""
    chash = config.hash()
    timings: dict = {}
    results: dict = {}
    data_dir = config.dataset_dir()

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except (DispatchInfeasible, ConfigurationError) as exc:
            raise StageError(name, chash, exc) from exc
        timings[name] = time.perf_counter() - t0
        log.info("%s: stage %s done in %.2fs", config.name, name, timings[name])
        return out

    case, fleet, series = stage("load", lambda: load_grid_data(data_dir))
    case = case.scaled(config.capacity_scale)
    p = config.curtailment_penalty
    executed = []
    threads = config.threads

    def problem(rep, **kw):
        return EdProblem(case, fleet, series, rep, curtailment_penalty=p,
                         exchange_penalty=config.exchange_penalty, **kw)

    fb = None
    if config.mode in FB_MODES:
        bc = stage("basecase", lambda: solve_ed(problem("nodal", stage="basecase"), threads))
        executed.append("basecase:nodal")
        results["basecase"] = bc

        def params():
            ptdf = build_ptdf(case)
            cnecs = select_cnecs(case, ptdf, build_lodf(case, ptdf), config.z2z_threshold,
                                 config.outage_sensitivity, config.effective_cross_border_only)
            return build_fb_parameters(case, fleet, bc, cnecs, config.effective_minram)

        fb = stage("fb_parameters", params)
        executed.append("fb_parameters")
        results["fb"] = fb

    unc = None
    if config.mode == "fbmc_cc" or (config.samples > 0 or config.mode in FB_MODES):
        unc = build_covariance(series, config.relative_std, config.correlation, config.epsilon)

    if config.mode in ("fbmc", "fbmc_plus"):
        market = stage("market", lambda: solve_ed(problem("flow_based", fb=fb), threads))
        executed.append("market:flow_based")
    elif config.mode == "fbmc_cc":
        market = stage("market", lambda: solve_cc_ed(problem("flow_based", fb=fb), unc, threads=threads))
        executed.append("market:flow_based_cc")
    elif config.mode == "ntc":
        table = _ntc_table(config, list(case.zones))
        market = stage("market", lambda: solve_ed(problem("ntc", ntc=table), threads))
        executed.append("market:ntc")
    elif config.mode == "nodal":
        market = stage("market", lambda: solve_ed(problem("nodal"), threads))
        executed.append("market:nodal")
    else:
        market = stage("market", lambda: solve_ed(problem("unconstrained"), threads))
        executed.append("market:unconstrained")
    results["market"] = market

    costs = {}
    if "basecase" in results:
        b = results["basecase"]
        costs["basecase"] = _cost_row(b.generation_cost.sum(), b.curtailment_cost.sum())
    costs["D-1"] = _cost_row(market.generation_cost.sum(), market.curtailment_cost.sum())
    if config.mode == "nodal":
        costs["D-0"] = dict(costs["D-1"])
        volumes = {"C": market.curtailment_volume, "R": 0.0}
        rd = None
    else:
        rd = stage("redispatch", lambda: solve_redispatch(market, case, config.redispatch_cost, threads=threads))
        executed.append("redispatch:nodal")
        results["redispatch"] = rd
        costs["D-0"] = _cost_row(rd.generation_cost.sum(), rd.curtailment_cost.sum(), rd.redispatch_cost.sum())
        volumes = {"C": rd.curtailment_volume, "R": rd.redispatch_volume}
    volumes = {k: round(v, 6) for k, v in volumes.items()}
    volumes["C+R"] = round(volumes["C"] + volumes["R"], 6)

    alpha = None
    alpha_source = config.effective_alpha_source
    if isinstance(market, CcDispatchResult):
        alpha = market.alpha
        alpha_source = "cc"
    elif config.samples > 0:
        if alpha_source == "cc" and fb is not None:
            cc = stage("alpha", lambda: solve_cc_ed(problem("flow_based", fb=fb), unc, threads=threads))
            alpha = cc.alpha
            results["alpha_source_result"] = cc
        else:
            alpha_source = "capacity"
            cap = fleet.capacity[fleet.dispatchable_idx]
            alpha = np.tile(cap / cap.sum(), (series.n_steps, 1))
    results["alpha"] = alpha

    realtime = None
    if config.samples > 0:
        def mc():
            samples = sample_deviations(unc, config.samples, config.seed, series.availability,
                                        fleet.capacity[fleet.res_idx])
            return evaluate_cm(case, market, alpha, samples, config.redispatch_cost,
                               config.shed_penalty, threads)

        stats = stage("realtime_cm", mc)
        executed.append("realtime_cm")
        results["cm_stats"] = stats
        comp = stats.mean_components()
        det = stats.deterministic
        realtime = {
            "samples": config.samples,
            "seed": config.seed,
            "failed_samples": list(map(int, stats.failed)),
            "alpha_source": alpha_source,
            "omega_zero": _cm_row(det["curtailment"].sum(), det["redispatch"].sum(), det["shed"].sum()),
            "omega_sampled": _cm_row(comp["curtailment"], comp["redispatch"], comp["shed"]),
        }

    meta = {
        "config_hash": chash,
        "dataset_hash": dataset_hash(data_dir),
        "stage_plan": list(STAGE_PLAN[config.mode]),
        "minram": config.effective_minram if config.mode in FB_MODES else None,
        "cross_border_only": config.effective_cross_border_only if config.mode in FB_MODES else None,
        "capacity_scale": config.capacity_scale,
        "cost_unit": "dataset currency units",
        "n_timesteps": series.n_steps,
    }
    if fb is not None:
        meta["n_cnecs"] = len(fb.cnecs)
        meta["cnec_screening"] = {k: v for k, v in fb.metadata.items() if k != "gsk_fallbacks"}
        meta["gsk_fallbacks"] = fb.metadata.get("gsk_fallbacks", {})
    if alpha is not None:
        meta["alpha_source"] = alpha_source
    report = ScenarioReport(config.name, config.mode, tuple(executed), costs, volumes, meta, realtime,
                            timings, results)
    report.results["config"] = config
    return report


def _cm_row(curtailment, redispatch, shed) -> dict:
    c, r, s = (round(float(v), 6) for v in (curtailment, redispatch, shed))
    return {"C": c, "R": r, "shed": s, "C+R": round(c + r + s, 6)}


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _stage_results(report: ScenarioReport):
    res = report.results
    out = []
    if "basecase" in res:
        out.append(("basecase", res["basecase"]))
    out.append(("D-1", res["market"]))
    out.append(("D-0", res.get("redispatch") or res["market"]))
    return out


def emit_reports(report: ScenarioReport, outdir, figures: bool | None = None,
                 slice_request: dict | None = None) -> dict:
    """Write CSV results, ``summary.json``, optional figures and a hashed ``manifest.json``."""
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {outdir}: {exc}") from exc
    res = report.results
    config = res.get("config")
    figures = config.figures if figures is None and config is not None else bool(figures)
    market = res["market"]
    fleet, case = market.fleet, market.case
    ts = market.timesteps
    written: list[Path] = []
    stages = _stage_results(report)
    res_ids = [fleet.gen_ids[g] for g in fleet.res_idx]

    written.append(_write_rows(outdir / "dispatch.csv", ["stage", "timestep", "gen_id", "mw"], [
        (s, t, fleet.gen_ids[g], _fmt(r.generation[i, g]))
        for s, r in stages for i, t in enumerate(ts) for g in range(fleet.n)]))
    written.append(_write_rows(outdir / "curtailment.csv", ["stage", "timestep", "gen_id", "mw"], [
        (s, t, res_ids[k], _fmt(r.curtailment[i, k]))
        for s, r in stages for i, t in enumerate(ts) for k in range(len(res_ids))]))
    written.append(_write_rows(outdir / "net_positions.csv", ["stage", "timestep", "zone", "mw"], [
        (s, t, z, _fmt((r.injections[i] @ case.zone_map.T)[k] if s == "D-0" else r.net_positions[i, k]))
        for s, r in stages for i, t in enumerate(ts) for k, z in enumerate(case.zones)]))
    written.append(_write_rows(outdir / "exchanges.csv", ["stage", "timestep", "from_zone", "to_zone", "mw"], [
        (s, t, a, b, _fmt(r.exchanges[i, ia, ib]))
        for s, r in stages if hasattr(r, "exchanges") for i, t in enumerate(ts)
        for ia, a in enumerate(case.zones) for ib, b in enumerate(case.zones) if ia != ib]))
    written.append(_write_rows(outdir / "flows.csv", ["stage", "timestep", "line_id", "mw"], [
        (s, t, l, _fmt(r.flows[i, j]))
        for s, r in stages for i, t in enumerate(ts) for j, l in enumerate(case.line_ids)]))
    written.append(_write_rows(outdir / "costs.csv",
                               ["stage", "generation_cost", "curtailment_cost", "redispatch_cost", "total_cost"],
                               [(s, _fmt(c["generation"]), _fmt(c["curtailment"]), _fmt(c["redispatch"]),
                                 _fmt(c["total"])) for s, c in report.costs.items()]))
    fb = res.get("fb")
    if fb is not None:
        written.append(fb.export_csv(outdir / "fb_parameters.csv"))
    alpha = res.get("alpha")
    if alpha is not None:
        disp_ids = [fleet.gen_ids[g] for g in fleet.dispatchable_idx]
        written.append(_write_rows(outdir / "alpha.csv", ["timestep", "gen_id", "alpha"], [
            (t, g, _fmt(alpha[i, k])) for i, t in enumerate(ts) for k, g in enumerate(disp_ids)]))
    if isinstance(market, CcDispatchResult):
        margins = endogenous_frm(market)
        labels = market.fb.cnecs.labels
        written.append(_write_rows(outdir / "frm.csv", ["timestep", "cnec_id", "t_mw", "margin_mw"], [
            (t, labels[c], _fmt(market.flow_std[i, c]), _fmt(margins[i, c]))
            for i, t in enumerate(ts) for c in range(len(labels))]))
    stats = res.get("cm_stats")
    if stats is not None:
        written += list(stats.export_csv(outdir / "cm_stats.csv", outdir / "cm_envelope.csv"))

    summary_path = outdir / "summary.json"
    summary_path.write_text(json.dumps(report.summary(), indent=2, sort_keys=True, default=_json_default) + "\n",
                            encoding="utf-8")
    written.append(summary_path)

    if figures:
        from . import plotting

        written.append(plotting.plot_stage_costs([report], outdir / "costs.png"))
        if stats is not None:
            written.append(plotting.plot_cm_envelope({report.name: stats}, outdir / "cm_envelope.png"))
    if slice_request is None and config is not None and config.slice_axes and fb is not None:
        slice_request = {"timestep": config.slice_timestep, "axes": config.slice_axes}
    if slice_request is not None and fb is not None:
        written += write_domain_slice(report, outdir, slice_request.get("timestep"),
                                      slice_request.get("axes"), figures=figures)
    return write_manifest(outdir, written)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def parse_axes(text: str, zones) -> tuple:
    """``"Z1:Z2,Z2:Z3"`` -> ``(("Z1", "Z2"), ("Z2", "Z3"))``."""
    if not text:
        zones = list(zones)
        if len(zones) < 3:
            raise ConfigurationError("domain slices need at least three zones or explicit axes")
        return (zones[0], zones[1]), (zones[1], zones[2])
    try:
        a, b = text.split(",")
        pa = tuple(s.strip() for s in a.split(":"))
        pb = tuple(s.strip() for s in b.split(":"))
    except ValueError:
        raise ConfigurationError(f"slice axes {text!r} are not of the form A:B,C:D") from None
    for z in pa + pb:
        if z not in zones:
            raise ConfigurationError(f"slice axis zone {z!r} unknown")
    return pa, pb


def write_domain_slice(report: ScenarioReport, outdir, timestep=None, axes=None, figures=True) -> list[Path]:
    """Slice of the D-1 flow-based domain; CC runs add the FRM-reduced domain alongside."""
    outdir = Path(outdir)
    res = report.results
    fb = res["fb"]
    market = res["market"]
    ts = list(fb.timesteps)
    if not ts:
        return []
    t = ts.index(str(timestep)) if timestep not in (None, "") else 0
    ax = parse_axes(axes, fb.zones)
    base = np.zeros(len(fb.zones))
    # slice through the origin; with three zones the two axes span every balanced NP
    slices = {"without FRM": fb_domain_slice(fb, t, ax, base, market_np=market.net_positions[t])}
    cc = market if isinstance(market, CcDispatchResult) else res.get("alpha_source_result")
    if cc is not None:
        slices["with FRM"] = fb_domain_slice(fb.with_frm(frm_rows(cc)), t, ax, base,
                                             market_np=market.net_positions[t])
    out = []
    for label, sl in slices.items():
        tag = "frm" if label == "with FRM" else "base"
        out += list(sl.export_csv(outdir / f"domain_halfplanes_{tag}.csv", outdir / f"domain_vertices_{tag}.csv"))
    if figures:
        from . import plotting

        out.append(plotting.plot_domain_slice(slices, outdir / "domain_slice.svg",
                                              title=f"timestep {ts[t]}"))
    return out


def write_manifest(outdir, paths) -> dict:
    outdir = Path(outdir)
    entries = {}
    for p in sorted(set(Path(p) for p in paths), key=lambda p: p.name):
        entries[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {"files": entries}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def compare_scenarios(reports: list, outdir=None, figures: bool = True) -> list[dict]:
    """Side-by-side stage/cost table in long format; optionally written as CSV and a figure."""
    if not reports:
        raise ValueError("nothing to compare")
    hashes = {_dataset_hash_of(r) for r in reports}
    if len(hashes) > 1:
        raise ValueError("reports were produced from different datasets and cannot be compared")
    rows = []
    for r in reports:
        costs = r.costs if isinstance(r, ScenarioReport) else r["costs"]
        name = r.name if isinstance(r, ScenarioReport) else r["name"]
        for stage, comp in costs.items():
            for k in ("generation", "curtailment", "redispatch", "total"):
                rows.append({"scenario": name, "stage": stage, "component": k, "value": comp[k]})
    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = [_write_rows(outdir / "comparison_long.csv", ["scenario", "stage", "component", "value"],
                             [(x["scenario"], x["stage"], x["component"], _fmt(x["value"])) for x in rows])]
        names = list(dict.fromkeys(x["scenario"] for x in rows))
        wide = []
        for stage in ("basecase", "D-1", "D-0"):
            for k in ("generation", "curtailment", "redispatch", "total"):
                vals = {x["scenario"]: x["value"] for x in rows if x["stage"] == stage and x["component"] == k}
                if vals:
                    wide.append((stage, k, *(_fmt(vals[n]) if n in vals else "" for n in names)))
        paths.append(_write_rows(outdir / "comparison.csv", ["stage", "component", *names], wide))
        if figures:
            from . import plotting

            paths.append(plotting.plot_stage_costs(reports, outdir / "comparison.png"))
        write_manifest(outdir, paths)
    return rows


def _dataset_hash_of(r) -> str:
    meta = r.metadata if isinstance(r, ScenarioReport) else r["metadata"]
    return meta["dataset_hash"]


def load_summary(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "summary.json"
    return json.loads(path.read_text(encoding="utf-8"))
