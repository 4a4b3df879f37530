from dataclasses import replace

import numpy as np
import pytest

from fbmcsim.chance import UncertaintyModel
from fbmcsim.dispatch import EdProblem, solve_ed, solve_redispatch
from fbmcsim.montecarlo import (DeviationSample, evaluate_cm, realtime_state, sample_deviations, zero_sample)

from conftest import make_case, make_fleet, make_series


def _unc(sd, T=1):
    cov = np.array([np.diag(np.square(sd))] * T, float)
    return UncertaintyModel(tuple(f"t{i + 1:02d}" for i in range(T)), cov)


def test_zero_covariance_gives_zero_samples():
    for s in sample_deviations(_unc([0.0, 0.0], T=3), 5, seed=1):
        assert np.all(s.omega == 0)


def test_sample_std():
    unc = _unc([10.0, 5.0])
    om = np.array([s.omega[0] for s in sample_deviations(unc, 100_000, seed=2)])
    assert np.allclose(om.std(axis=0), [10.0, 5.0], rtol=0.02)
    assert np.abs(om.mean(axis=0)).max() < 0.1


def test_same_seed_identical():
    unc = _unc([10.0, 5.0], T=4)
    a = sample_deviations(unc, 6, seed=9)
    b = sample_deviations(unc, 6, seed=9)
    c = sample_deviations(unc, 6, seed=10)
    assert all(np.array_equal(x.omega, y.omega) for x, y in zip(a, b))
    assert not np.array_equal(a[0].omega, c[0].omega)
    # a sample does not depend on how many were drawn before it
    assert np.array_equal(sample_deviations(unc, 3, seed=9)[2].omega, a[2].omega)


def test_clamping_recorded():
    unc = _unc([50.0], T=2)
    samples = sample_deviations(unc, 200, seed=3, availability=np.array([[5.0], [95.0]]), capacity=[100.0])
    real = np.array([s.omega for s in samples])[..., 0] + np.array([5.0, 95.0])
    assert real.min() >= 0 and real.max() <= 100.0
    assert sum(s.clamped_mw.sum() for s in samples) > 0


def test_sample_count_checked():
    with pytest.raises(ValueError):
        sample_deviations(_unc([1.0]), 0)


# real-time state ------------------------------------------------------------

def _toy_market():
    case = make_case(3, [(0, 1), (1, 2), (0, 2)], capacity=[500.0] * 3)
    fleet = make_fleet([(0, "dispatchable", 200, 10), (1, "dispatchable", 200, 20), (2, "intermittent", 100, 0)])
    series = make_series([[20.0, 60.0, 50.0]], [[40.0]])
    m = solve_ed(EdProblem(case, fleet, series, "nodal"))
    # move to an interior schedule so both units can respond in either direction
    return replace(m, generation=np.array([[50.0, 40.0, 40.0]]), injections=np.array([[30.0, -20.0, -10.0]]))


def test_zero_deviation_reproduces_schedule():
    m = _toy_market()
    st = realtime_state(m, [0.6, 0.4], zero_sample(1, 1), 0)
    assert np.array_equal(st.generation, m.dispatchable[0])
    assert np.allclose(st.injections, m.injections[0])
    assert not st.flagged


def test_response_arithmetic():
    m = _toy_market()
    s = DeviationSample(0, 0, np.array([[10.0]]), np.zeros(1))
    st = realtime_state(m, np.array([0.6, 0.4]), s, 0)
    assert st.generation - m.dispatchable[0] == pytest.approx([-6.0, -4.0])
    assert st.injections.sum() == pytest.approx(0.0, abs=1e-12)


def test_random_deviations_balance():
    m = _toy_market()
    rng = np.random.default_rng(4)
    for _ in range(50):
        s = DeviationSample(0, 0, rng.normal(0, 5, (1, 1)), np.zeros(1))
        st = realtime_state(m, [0.3, 0.7], s, 0)
        assert not st.flagged
        assert abs(st.injections.sum()) < 1e-9


def test_alpha_must_sum_to_one():
    with pytest.raises(ValueError):
        realtime_state(_toy_market(), [0.5, 0.4], zero_sample(1, 1), 0)


def test_saturated_response_flagged():
    m = _toy_market()
    s = DeviationSample(0, 0, np.array([[50.0]]), np.zeros(1))
    st = realtime_state(m, [0.0, 1.0], s, 0)
    assert st.flagged
    assert st.generation[1] == 0.0
    assert st.imbalance == pytest.approx(10.0)


# CM evaluation --------------------------------------------------------------

@pytest.fixture(scope="module")
def fixture_mc(fixture_data, fixture_cc):
    case, fleet, series = fixture_data
    unc = fixture_cc.uncertainty
    samples = sample_deviations(unc, 8, seed=1, availability=series.availability,
                                capacity=fleet.capacity[fleet.res_idx])
    return samples, evaluate_cm(case, fixture_cc, fixture_cc.alpha, samples)


def test_zero_samples_equal_deterministic(fixture_data, fixture_cc):
    case = fixture_data[0]
    T, R = fixture_cc.availability.shape
    stats = evaluate_cm(case, fixture_cc, fixture_cc.alpha, [zero_sample(T, R, k) for k in range(3)])
    env = stats.envelope()
    assert np.allclose(env["max"] - env["min"], 0.0)
    assert np.allclose(env["mean"], stats.deterministic_total)
    rd = solve_redispatch(fixture_cc, case)
    assert np.allclose(stats.deterministic_total, rd.redispatch_cost + rd.curtailment_cost + rd.shed_cost)


def test_envelope_and_aggregate(fixture_mc):
    _, stats = fixture_mc
    env = stats.envelope()
    assert np.all(env["min"] <= env["mean"] + 1e-9) and np.all(env["mean"] <= env["max"] + 1e-9)
    assert stats.mean_cost == pytest.approx(env["mean"].sum())
    comp = stats.mean_components()
    assert stats.mean_cost == pytest.approx(comp["curtailment"] + comp["redispatch"] + comp["shed"])
    assert stats.total.shape == (8 - len(stats.failed), 24)


def test_envelope_contains_zero_sample(fixture_data, fixture_cc, fixture_mc):
    samples, _ = fixture_mc
    T, R = fixture_cc.availability.shape
    stats = evaluate_cm(fixture_data[0], fixture_cc, fixture_cc.alpha, samples + [zero_sample(T, R, 99)])
    env = stats.envelope()
    assert np.all(env["min"] <= stats.deterministic_total + 1e-9)
    assert np.all(stats.deterministic_total <= env["max"] + 1e-9)


def test_threads_reproduce_serial(fixture_data, fixture_cc, fixture_mc):
    samples, serial = fixture_mc
    par = evaluate_cm(fixture_data[0], fixture_cc, fixture_cc.alpha, samples, threads=3)
    assert np.array_equal(par.sample_ids, serial.sample_ids)
    assert np.array_equal(par.total, serial.total)


def test_export(fixture_mc, tmp_path):
    _, stats = fixture_mc
    a, b = stats.export_csv(tmp_path / "s.csv", tmp_path / "e.csv")
    head = a.read_text().splitlines()[0]
    assert head == "sample_id,timestep,redispatch_cost,curtailment_cost,shed_cost"
    assert len(b.read_text().splitlines()) == 25


def test_infeasible_sample_excluded():
    # one radial line: any realised deviation that needs transfer beyond 30 MW fails without shedding
    case = make_case(2, [(0, 1)], capacity=[30.0])
    fleet = make_fleet([(0, "dispatchable", 200, 10), (1, "intermittent", 100, 0)])
    series = make_series([[0.0, 50.0]], [[30.0]])
    m = solve_ed(EdProblem(case, fleet, series, "nodal"))
    bad = DeviationSample(1, 0, np.array([[-25.0]]), np.zeros(1))
    ok = DeviationSample(2, 0, np.array([[5.0]]), np.zeros(1))
    stats = evaluate_cm(case, m, [1.0], [bad, ok], shed_penalty=None)
    assert stats.failed == [1]
    assert list(stats.sample_ids) == [2]
