import warnings
from pathlib import Path

import numpy as np
import pytest

from fbmcsim import fixture_path
from fbmcsim.grid import GeneratorFleet, GridCase, SeriesData, load_grid_data


def make_case(n_nodes, edges, zones=None, reactance=None, capacity=None, slack=0):
    """Small GridCase from an edge list of (from, to) node indices."""
    zones = zones or ["Z1"] * n_nodes
    m = len(edges)
    return GridCase(
        node_ids=tuple(f"N{i + 1}" for i in range(n_nodes)),
        node_zone=tuple(zones),
        line_ids=tuple(f"L{j + 1}" for j in range(m)),
        line_from=np.array([a for a, _ in edges], dtype=int),
        line_to=np.array([b for _, b in edges], dtype=int),
        reactance=np.ones(m) if reactance is None else np.asarray(reactance, float),
        capacity=np.full(m, 1e4) if capacity is None else np.asarray(capacity, float),
        slack=slack,
        zones=tuple(dict.fromkeys(zones)),
    )


def ring3(slack=0):
    # lines 1-2, 1-3, 3-2
    return make_case(3, [(0, 1), (0, 2), (2, 1)], slack=slack)


def make_fleet(specs):
    """specs: (node index, kind, capacity, cost)."""
    return GeneratorFleet(
        gen_ids=tuple(f"G{i + 1}" for i in range(len(specs))),
        node=np.array([s[0] for s in specs], dtype=int),
        intermittent=np.array([s[1] == "intermittent" for s in specs]),
        capacity=np.array([s[2] for s in specs], float),
        cost=np.array([s[3] for s in specs], float),
    )


def make_series(demand, availability):
    demand = np.atleast_2d(np.asarray(demand, float))
    T = demand.shape[0]
    availability = np.asarray(availability, float).reshape(T, -1)
    return SeriesData(tuple(f"t{i + 1:02d}" for i in range(T)), demand, availability)


def laplacian_flows(case, injections):
    """DC flows through the pseudo-inverse of the full Laplacian (no slack, no reduction)."""
    A = case.incidence
    b = 1.0 / case.reactance
    B = A.T @ (b[:, None] * A)
    theta = np.linalg.pinv(B) @ injections
    return b * (A @ theta)


def removed_case(case, k):
    keep = np.arange(case.n_lines) != k
    return GridCase(case.node_ids, case.node_zone, tuple(np.array(case.line_ids)[keep]),
                    case.line_from[keep], case.line_to[keep], case.reactance[keep],
                    case.capacity[keep], case.slack, case.zones)


def random_connected_case(rng, n_nodes, extra_edges):
    """Random spanning tree plus extra chords; reactances in [0.05, 0.5]."""
    edges = []
    for i in range(1, n_nodes):
        edges.append((int(rng.integers(0, i)), i))
    pairs = {tuple(sorted(e)) for e in edges}
    tries = 0
    while len(edges) < n_nodes - 1 + extra_edges and tries < 200:
        a, b = sorted(int(x) for x in rng.choice(n_nodes, 2, replace=False))
        tries += 1
        if (a, b) not in pairs:
            pairs.add((a, b))
            edges.append((a, b))
    x = rng.uniform(0.05, 0.5, len(edges))
    return make_case(n_nodes, edges, reactance=x, slack=int(rng.integers(0, n_nodes)))


def balanced(rng, n, size=None):
    v = rng.normal(0, 50, (size, n) if size else n)
    return v - v.mean(axis=-1, keepdims=True)


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return Path(str(fixture_path()))


@pytest.fixture(scope="session")
def fixture_data(fixture_dir):
    return load_grid_data(fixture_dir)


@pytest.fixture(autouse=True)
def _quiet_gsk_fallback():
    from fbmcsim.fbmc_params import GskFallbackWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GskFallbackWarning)
        yield


@pytest.fixture(scope="session")
def fixture_basecase(fixture_data):
    from fbmcsim.dispatch import EdProblem, solve_ed

    case, fleet, series = fixture_data
    return solve_ed(EdProblem(case, fleet, series, "nodal", stage="basecase"))


@pytest.fixture(scope="session")
def fixture_fb(fixture_data, fixture_basecase):
    """Flow-based parameters with the default screening and a 20% minRAM."""
    from fbmcsim.fbmc_params import build_fb_parameters
    from fbmcsim.grid import build_lodf, build_ptdf, select_cnecs

    case, fleet, _ = fixture_data
    ptdf = build_ptdf(case)
    cnecs = select_cnecs(case, ptdf, build_lodf(case, ptdf))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_fb_parameters(case, fleet, fixture_basecase, cnecs, 0.2)


@pytest.fixture(scope="session")
def fixture_fb_plus(fixture_data, fixture_basecase):
    """Cross-border CNECs only with a 70% minRAM, as used by the chance-constrained mode."""
    from fbmcsim.fbmc_params import build_fb_parameters
    from fbmcsim.grid import build_lodf, build_ptdf, select_cnecs

    case, fleet, _ = fixture_data
    ptdf = build_ptdf(case)
    cnecs = select_cnecs(case, ptdf, build_lodf(case, ptdf), cross_border_only=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_fb_parameters(case, fleet, fixture_basecase, cnecs, 0.7)


@pytest.fixture(scope="session")
def fixture_cc(fixture_data, fixture_fb_plus):
    from fbmcsim.chance import build_covariance, solve_cc_ed
    from fbmcsim.dispatch import EdProblem

    case, fleet, series = fixture_data
    unc = build_covariance(series, 0.10)
    return solve_cc_ed(EdProblem(case, fleet, series, "flow_based", fb=fixture_fb_plus), unc)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
