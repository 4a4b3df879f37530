import csv
import json
import shutil
from collections import defaultdict

import numpy as np
import pytest

from fbmcsim.dispatch import ConfigurationError
from fbmcsim.pipeline import (STAGE_PLAN, ScenarioConfig, StageError, compare_scenarios, emit_reports, load_config,
                              load_summary, run_scenario)


@pytest.fixture(scope="module")
def runs():
    out = {}
    for mode in ("nodal", "fbmc", "fbmc_plus", "uniform"):
        out[mode] = run_scenario(ScenarioConfig(mode=mode))
    out["ntc"] = run_scenario(ScenarioConfig(mode="ntc", ntc=100.0))
    out["fbmc_cc"] = run_scenario(ScenarioConfig(mode="fbmc_cc", samples=4, seed=3))
    return out


def _cents(x):
    return round(x * 100)


def test_stage_plan_followed(runs):
    for mode, rep in runs.items():
        plan = tuple(s for s in rep.stages if s != "realtime_cm")
        assert plan == STAGE_PLAN[mode], mode
        assert rep.metadata["stage_plan"] == list(STAGE_PLAN[mode])


def test_nodal_has_no_redispatch(runs):
    rep = runs["nodal"]
    assert rep.costs["D-0"]["redispatch"] == 0.0
    assert rep.volumes["R"] == 0.0
    assert rep.costs["D-0"] == rep.costs["D-1"]


def test_accounting_closure(runs):
    for rep in runs.values():
        for c in rep.costs.values():
            assert _cents(c["total"]) == _cents(c["generation"] + c["curtailment"] + c["redispatch"])
        assert rep.volumes["C+R"] == pytest.approx(rep.volumes["C"] + rep.volumes["R"])
        rd = rep.results.get("redispatch")
        if rd is not None:
            assert rep.volumes["R"] == pytest.approx(rd.redispatch_volume, abs=1e-6)
            assert rep.volumes["C"] == pytest.approx(rd.curtailment_volume, abs=1e-6)


def test_fbmc_plus_against_fbmc(runs):
    a, b = runs["fbmc"], runs["fbmc_plus"]
    assert b.costs["D-1"]["generation"] <= a.costs["D-1"]["generation"] + 1e-6
    assert b.volumes["C+R"] >= a.volumes["C+R"] - 1e-6
    assert b.metadata["minram"] == 0.7 and b.metadata["cross_border_only"] is True
    assert a.metadata["minram"] == 0.2 and a.metadata["cross_border_only"] is False


def test_uniform_below_ntc():
    uni = run_scenario(ScenarioConfig(mode="uniform"))
    for v in (0.0, 50.0, 150.0):
        ntc = run_scenario(ScenarioConfig(mode="ntc", ntc=v))
        assert uni.costs["D-1"]["generation"] <= ntc.costs["D-1"]["generation"] + 1e-6


def test_nodal_cheapest_after_cm(runs):
    nod = runs["nodal"].total
    for mode, rep in runs.items():
        assert nod <= rep.total + 1e-6, mode


def test_realtime_summary(runs):
    rt = runs["fbmc_cc"].realtime
    assert rt["samples"] == 4 and rt["seed"] == 3
    assert rt["alpha_source"] == "cc"
    for key in ("omega_zero", "omega_sampled"):
        row = rt[key]
        assert row["C+R"] == pytest.approx(row["C"] + row["R"] + row["shed"])


def test_fbmc_plus_alpha_from_cc_solve():
    rep = run_scenario(ScenarioConfig(mode="fbmc_plus", samples=2))
    assert rep.realtime["alpha_source"] == "cc"
    assert "alpha" in rep.stages or "alpha_source_result" in rep.results
    assert np.allclose(rep.results["alpha"].sum(axis=1), 1.0)
    cap = run_scenario(ScenarioConfig(mode="uniform", samples=2))
    assert cap.realtime["alpha_source"] == "capacity"


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_summary_matches_csv_sums(runs, tmp_path, fixture_data):
    _, fleet, _ = fixture_data
    rep = runs["fbmc"]
    cfg = rep.results["config"]
    emit_reports(rep, tmp_path, figures=False)
    summary = json.loads((tmp_path / "summary.json").read_text())
    cost = dict(zip(fleet.gen_ids, fleet.cost))
    gen = defaultdict(float)
    mw = defaultdict(dict)
    for row in _read(tmp_path / "dispatch.csv"):
        gen[row["stage"]] += cost[row["gen_id"]] * float(row["mw"])
        mw[row["stage"]][(row["timestep"], row["gen_id"])] = float(row["mw"])
    curt = defaultdict(float)
    for row in _read(tmp_path / "curtailment.csv"):
        curt[row["stage"]] += cfg.curtailment_penalty * float(row["mw"])
    disp = {fleet.gen_ids[g] for g in fleet.dispatchable_idx}
    red = sum(abs(v - mw["D-1"][k]) for k, v in mw["D-0"].items() if k[1] in disp) * cfg.redispatch_cost
    for stage in ("basecase", "D-1", "D-0"):
        s = summary["costs"][stage]
        assert s["generation"] == pytest.approx(gen[stage], abs=1e-3)
        assert s["curtailment"] == pytest.approx(curt[stage], abs=1e-3)
    assert summary["costs"]["D-0"]["redispatch"] == pytest.approx(red, abs=1e-3)
    costs = {r["stage"]: r for r in _read(tmp_path / "costs.csv")}
    for stage, c in summary["costs"].items():
        assert float(costs[stage]["total_cost"]) == pytest.approx(c["total"], abs=1e-3)


def test_outputs_and_manifest(runs, tmp_path):
    m = emit_reports(runs["fbmc_cc"], tmp_path, figures=True, slice_request={"timestep": "t12", "axes": None})
    names = set(m["files"])
    for f in ("dispatch.csv", "curtailment.csv", "net_positions.csv", "exchanges.csv", "flows.csv", "costs.csv",
              "fb_parameters.csv", "alpha.csv", "frm.csv", "cm_stats.csv", "cm_envelope.csv", "summary.json",
              "costs.png", "cm_envelope.png", "domain_vertices_base.csv", "domain_vertices_frm.csv",
              "domain_halfplanes_base.csv", "domain_halfplanes_frm.csv", "domain_slice.svg"):
        assert f in names, f
        assert (tmp_path / f).stat().st_size > 0
    assert json.loads((tmp_path / "manifest.json").read_text()) == m
    assert _read(tmp_path / "alpha.csv")[0].keys() == {"timestep", "gen_id", "alpha"}
    assert _read(tmp_path / "frm.csv")[0].keys() == {"timestep", "cnec_id", "t_mw", "margin_mw"}


def test_frm_slice_inside_base(runs, tmp_path):
    emit_reports(runs["fbmc_cc"], tmp_path, figures=False, slice_request={"timestep": "t05", "axes": "Z1:Z2,Z2:Z3"})
    hp = _read(tmp_path / "domain_halfplanes_base.csv")
    A = np.array([[float(r["a_x"]), float(r["a_y"])] for r in hp])
    b = np.array([float(r["b"]) for r in hp])
    frm = np.array([[float(r["x_mw"]), float(r["y_mw"])] for r in _read(tmp_path / "domain_vertices_frm.csv")])
    assert len(frm) >= 3
    assert np.all(frm @ A.T <= b + 1e-6)


def test_same_seed_same_manifest(tmp_path):
    cfg = dict(mode="fbmc_cc", samples=3, seed=11)
    a = emit_reports(run_scenario(ScenarioConfig(**cfg)), tmp_path / "a", figures=True)
    b = emit_reports(run_scenario(ScenarioConfig(**cfg, threads=2)), tmp_path / "b", figures=True)
    assert a == b
    c = emit_reports(run_scenario(ScenarioConfig(mode="fbmc_cc", samples=3, seed=12)), tmp_path / "c",
                     figures=False)
    assert c["files"]["cm_stats.csv"] != a["files"]["cm_stats.csv"]


def test_empty_horizon(fixture_dir, tmp_path):
    d = tmp_path / "ds"
    shutil.copytree(fixture_dir, d)
    for name in ("demand.csv", "availability.csv"):
        head = (d / name).read_text().splitlines()[0]
        (d / name).write_text(head + "\n")
    rep = run_scenario(ScenarioConfig(dataset=str(d), mode="fbmc"))
    emit_reports(rep, tmp_path / "out", figures=False)
    assert (tmp_path / "out" / "dispatch.csv").read_text().strip() == "stage,timestep,gen_id,mw"
    summary = load_summary(tmp_path / "out")
    assert all(v == 0 for c in summary["costs"].values() for v in c.values())


def test_capacity_scale(runs):
    rep = run_scenario(ScenarioConfig(mode="fbmc", capacity_scale=0.7))
    base = runs["fbmc"].results["fb"]
    assert np.allclose(rep.results["fb"].capacity, 0.7 * base.capacity)
    assert rep.metadata["capacity_scale"] == 0.7
    assert rep.metadata["config_hash"] != runs["fbmc"].metadata["config_hash"]


def test_stage_failure_names_stage():
    with pytest.raises(StageError) as err:
        run_scenario(ScenarioConfig(mode="nodal", capacity_scale=0.01))
    assert err.value.stage == "market"
    assert len(err.value.config_hash) == 64
    with pytest.raises(StageError) as err:
        run_scenario(ScenarioConfig(mode="fbmc", capacity_scale=0.01))
    assert err.value.stage == "basecase"


# comparison -----------------------------------------------------------------

def test_compare_single_is_identity(runs, tmp_path):
    rep = runs["fbmc"]
    rows = compare_scenarios([rep], tmp_path, figures=False)
    for r in rows:
        assert r["value"] == rep.costs[r["stage"]][r["component"]]
    table = _read(tmp_path / "comparison.csv")
    assert {(t["stage"], t["component"]) for t in table} == {(r["stage"], r["component"]) for r in rows}


def test_compare_nodal_vs_zonal(runs, tmp_path):
    rows = compare_scenarios([runs["nodal"], runs["fbmc"], runs["ntc"]], tmp_path, figures=True)
    tot = {r["scenario"]: r["value"] for r in rows if r["stage"] == "D-0" and r["component"] == "total"}
    assert tot["nodal"] <= min(tot["fbmc"], tot["ntc"])
    assert (tmp_path / "comparison.png").exists()
    assert (tmp_path / "comparison_long.csv").exists()


def test_compare_rejects_mixed_datasets(runs):
    other = runs["fbmc"].summary()
    other["metadata"] = dict(other["metadata"], dataset_hash="0" * 64)
    with pytest.raises(ValueError, match="different datasets"):
        compare_scenarios([runs["nodal"], other])


# configuration --------------------------------------------------------------

def test_config_file(tmp_path, fixture_dir):
    shutil.copytree(fixture_dir, tmp_path / "data")
    ini = tmp_path / "s.ini"
    ini.write_text("[scenario]\ndataset = data\nmode = ntc\n\n[ntc]\ndefault = 80\nZ1->Z2 = 120\n\n"
                   "[montecarlo]\nsamples = 5\nseed = 4\n\n[fbmc]\nminram = 0.3\n")
    cfg = load_config(ini, ["costs.redispatch_cost=45", "seed=9"])
    assert cfg.mode == "ntc"
    assert cfg.dataset == str((tmp_path / "data").resolve())
    assert cfg.ntc == {"default": 80.0, "pairs": {("Z1", "Z2"): 120.0}}
    assert (cfg.samples, cfg.seed, cfg.redispatch_cost, cfg.minram) == (5, 9, 45.0, 0.3)
    assert load_config(ini, mode="fbmc").mode == "fbmc"


def test_ntc_pairs_applied(tmp_path):
    ini = tmp_path / "s.ini"
    ini.write_text("[scenario]\nmode = ntc\n[ntc]\ndefault = 0\nZ1->Z2 = 500\nZ2->Z1 = 500\nZ1->Z3 = 500\n"
                   "Z3->Z1 = 500\nZ2->Z3 = 500\nZ3->Z2 = 500\n")
    wide = run_scenario(load_config(ini))
    uni = run_scenario(ScenarioConfig(mode="ntc", ntc=500.0))
    assert wide.costs["D-1"]["generation"] == pytest.approx(uni.costs["D-1"]["generation"], rel=1e-9)


@pytest.mark.parametrize("kw", [dict(mode="zonal"), dict(mode="ntc"), dict(capacity_scale=0.0),
                                dict(long_term_allocation=10.0), dict(minram=1.5), dict(samples=-1),
                                dict(alpha_source="random"), dict(redispatch_cost=-1.0)])
def test_config_rejects(kw):
    with pytest.raises(ConfigurationError):
        ScenarioConfig(**kw)


def test_config_unknown_keys(tmp_path):
    ini = tmp_path / "s.ini"
    ini.write_text("[scenario]\nmood = fbmc\n")
    with pytest.raises(ConfigurationError, match="mood"):
        load_config(ini)
    with pytest.raises(ConfigurationError):
        load_config(None, ["fbmc.nope=1"])
    with pytest.raises(ConfigurationError):
        load_config(None, ["minram"])
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.ini")


def test_hash_ignores_threads():
    assert ScenarioConfig(threads=1).hash() == ScenarioConfig(threads=8).hash()
    assert ScenarioConfig(seed=1).hash() != ScenarioConfig(seed=2).hash()
