"""Network data model, CSV ingestion and DC sensitivities (PTDF / LODF / CNEC screening)."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

DATA_FILES = ("nodes.csv", "lines.csv", "generators.csv", "demand.csv", "availability.csv")
DISPATCHABLE = "dispatchable"
INTERMITTENT = "intermittent"
BRIDGE_TOL = 1e-8


class DataError(ValueError):
    """Invalid or inconsistent input data, located by file and row where possible."""

    def __init__(self, message, file=None, row=None):
        loc = ""
        if file is not None:
            loc = f"{file}" + (f", row {row}" if row is not None else "") + ": "
        super().__init__(loc + message)
        self.file = file
        self.row = row


class StructuralError(ValueError):
    """The network graph cannot support a DC power flow (e.g. it is disconnected)."""


@dataclass(frozen=True, eq=False)
class GridCase:
    node_ids: tuple
    node_zone: tuple
    line_ids: tuple
    line_from: np.ndarray
    line_to: np.ndarray
    reactance: np.ndarray
    capacity: np.ndarray
    slack: int
    zones: tuple

    def __post_init__(self):
        n = len(self.node_ids)
        if len(set(self.node_ids)) != n:
            raise DataError("duplicate node ids")
        if not 0 <= self.slack < n:
            raise DataError("slack is not a valid node")
        if set(self.node_zone) - set(self.zones):
            raise DataError(f"nodes reference unknown zones {sorted(set(self.node_zone) - set(self.zones))}")
        if np.any(self.reactance <= 0):
            raise DataError("reactances must be strictly positive")
        if np.any(self.capacity <= 0):
            raise DataError("line capacities must be strictly positive")
        if not self.is_connected():
            raise StructuralError("network graph is not connected")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_lines(self) -> int:
        return len(self.line_ids)

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    @property
    def node_zone_idx(self) -> np.ndarray:
        pos = {z: i for i, z in enumerate(self.zones)}
        return np.array([pos[z] for z in self.node_zone], dtype=int)

    @property
    def zone_map(self) -> np.ndarray:
        """Zone-by-node 0/1 aggregation matrix."""
        M = np.zeros((self.n_zones, self.n_nodes))
        M[self.node_zone_idx, np.arange(self.n_nodes)] = 1.0
        return M

    @property
    def incidence(self) -> np.ndarray:
        A = np.zeros((self.n_lines, self.n_nodes))
        A[np.arange(self.n_lines), self.line_from] = 1.0
        A[np.arange(self.n_lines), self.line_to] = -1.0
        return A

    @property
    def cross_border(self) -> np.ndarray:
        zi = self.node_zone_idx
        return zi[self.line_from] != zi[self.line_to]

    def node_index(self, node_id) -> int:
        return self.node_ids.index(node_id)

    def line_index(self, line_id) -> int:
        return self.line_ids.index(line_id)

    def is_connected(self, without_line: int | None = None) -> bool:
        keep = np.ones(self.n_lines, dtype=bool)
        if without_line is not None:
            keep[without_line] = False
        adj = np.zeros((self.n_nodes, self.n_nodes))
        adj[self.line_from[keep], self.line_to[keep]] = 1
        n_comp, _ = connected_components(adj, directed=False)
        return n_comp == 1

    def scaled(self, factor: float) -> "GridCase":
        if factor <= 0:
            raise ValueError("capacity scale factor must be positive")
        return GridCase(self.node_ids, self.node_zone, self.line_ids, self.line_from, self.line_to,
                        self.reactance, self.capacity * factor, self.slack, self.zones)

    def without_line(self, k: int) -> "GridCase":
        keep = np.arange(self.n_lines) != k
        return GridCase(self.node_ids, self.node_zone,
                        tuple(l for i, l in enumerate(self.line_ids) if i != k),
                        self.line_from[keep], self.line_to[keep], self.reactance[keep],
                        self.capacity[keep], self.slack, self.zones)

    def with_slack(self, node: int) -> "GridCase":
        return GridCase(self.node_ids, self.node_zone, self.line_ids, self.line_from, self.line_to,
                        self.reactance, self.capacity, node, self.zones)


@dataclass(frozen=True, eq=False)
class GeneratorFleet:
    gen_ids: tuple
    node: np.ndarray
    intermittent: np.ndarray
    capacity: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        if np.any(self.capacity < 0):
            raise DataError("generator capacities must be non-negative")
        if np.any(self.cost[self.intermittent] != 0):
            raise DataError("intermittent generators must have zero marginal cost")

    @property
    def n(self) -> int:
        return len(self.gen_ids)

    @property
    def dispatchable_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.intermittent)

    @property
    def res_idx(self) -> np.ndarray:
        return np.flatnonzero(self.intermittent)

    def node_map(self, n_nodes: int, which: np.ndarray) -> np.ndarray:
        """Node-by-unit 0/1 map for the selected generator indices."""
        M = np.zeros((n_nodes, len(which)))
        M[self.node[which], np.arange(len(which))] = 1.0
        return M


@dataclass(frozen=True, eq=False)
class SeriesData:
    timesteps: tuple
    demand: np.ndarray         # (T, nodes)
    availability: np.ndarray   # (T, intermittent units), ordered as fleet.res_idx

    @property
    def n_steps(self) -> int:
        return len(self.timesteps)


def _read_csv(path: Path, required: tuple[str, ...]):
    if not path.exists():
        raise DataError("missing input file", file=path.name)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"missing columns {missing}", file=path.name, row=1)
        # row numbers are 1-based file lines; the header is line 1
        return [(i + 2, row) for i, row in enumerate(reader)]


def _float(value, file, row, column):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise DataError(f"column {column!r}: not a number: {value!r}", file=file, row=row) from None


def load_grid_data(directory) -> tuple[GridCase, GeneratorFleet, SeriesData]:
    """Read and validate the five-CSV dataset in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    for name in DATA_FILES:
        if not (directory / name).exists():
            raise DataError("missing input file", file=name)

    node_rows = _read_csv(directory / "nodes.csv", ("node_id", "zone_id", "slack"))
    node_ids, node_zone, zones, slack = [], [], [], []
    for row_no, row in node_rows:
        nid = row["node_id"].strip()
        if nid in node_ids:
            raise DataError(f"duplicate node id {nid!r}", "nodes.csv", row_no)
        zone = row["zone_id"].strip()
        node_ids.append(nid)
        node_zone.append(zone)
        if zone not in zones:
            zones.append(zone)
        if row["slack"].strip() not in ("0", "1"):
            raise DataError("slack flag must be 0 or 1", "nodes.csv", row_no)
        if row["slack"].strip() == "1":
            slack.append(len(node_ids) - 1)
    if not node_ids:
        raise DataError("no nodes", "nodes.csv")
    if len(slack) != 1:
        raise DataError(f"exactly one slack node required, found {len(slack)}", "nodes.csv")
    node_pos = {n: i for i, n in enumerate(node_ids)}

    line_rows = _read_csv(directory / "lines.csv", ("line_id", "from", "to", "reactance_pu", "capacity_mw"))
    line_ids, lf, lt, x, cap = [], [], [], [], []
    for row_no, row in line_rows:
        lid = row["line_id"].strip()
        if lid in line_ids:
            raise DataError(f"duplicate line id {lid!r}", "lines.csv", row_no)
        for end in ("from", "to"):
            if row[end].strip() not in node_pos:
                raise DataError(f"line {lid!r} references unknown node {row[end]!r}", "lines.csv", row_no)
        if row["from"].strip() == row["to"].strip():
            raise DataError(f"line {lid!r} is a self-loop", "lines.csv", row_no)
        xv = _float(row["reactance_pu"], "lines.csv", row_no, "reactance_pu")
        if xv <= 0:
            raise DataError(f"line {lid!r} has non-positive reactance {xv}", "lines.csv", row_no)
        cv = _float(row["capacity_mw"], "lines.csv", row_no, "capacity_mw")
        if cv <= 0:
            raise DataError(f"line {lid!r} has non-positive capacity {cv}", "lines.csv", row_no)
        line_ids.append(lid)
        lf.append(node_pos[row["from"].strip()])
        lt.append(node_pos[row["to"].strip()])
        x.append(xv)
        cap.append(cv)

    case = GridCase(tuple(node_ids), tuple(node_zone), tuple(line_ids), np.array(lf, dtype=int),
                    np.array(lt, dtype=int), np.array(x), np.array(cap), slack[0], tuple(zones))

    gen_rows = _read_csv(directory / "generators.csv", ("gen_id", "node_id", "kind", "capacity_mw", "cost_per_mwh"))
    gen_ids, gnode, inter, gcap, gcost = [], [], [], [], []
    for row_no, row in gen_rows:
        gid = row["gen_id"].strip()
        if gid in gen_ids:
            raise DataError(f"duplicate generator id {gid!r}", "generators.csv", row_no)
        if row["node_id"].strip() not in node_pos:
            raise DataError(f"generator {gid!r} references unknown node {row['node_id']!r}",
                            "generators.csv", row_no)
        kind = row["kind"].strip()
        if kind not in (DISPATCHABLE, INTERMITTENT):
            raise DataError(f"generator {gid!r}: unknown kind {kind!r}", "generators.csv", row_no)
        c = _float(row["capacity_mw"], "generators.csv", row_no, "capacity_mw")
        if c < 0:
            raise DataError(f"generator {gid!r} has negative capacity", "generators.csv", row_no)
        mc = _float(row["cost_per_mwh"], "generators.csv", row_no, "cost_per_mwh")
        if kind == INTERMITTENT and mc != 0:
            raise DataError(f"intermittent generator {gid!r} must have zero cost", "generators.csv", row_no)
        gen_ids.append(gid)
        gnode.append(node_pos[row["node_id"].strip()])
        inter.append(kind == INTERMITTENT)
        gcap.append(c)
        gcost.append(mc)
    fleet = GeneratorFleet(tuple(gen_ids), np.array(gnode, dtype=int), np.array(inter, dtype=bool),
                           np.array(gcap, dtype=float), np.array(gcost, dtype=float))

    demand_rows = _read_csv(directory / "demand.csv", ("timestep", "node_id", "mw"))
    timesteps: list[str] = []
    demand: dict[str, dict[int, float]] = {}
    for row_no, row in demand_rows:
        t = row["timestep"].strip()
        nid = row["node_id"].strip()
        if nid not in node_pos:
            raise DataError(f"unknown node {nid!r}", "demand.csv", row_no)
        mw = _float(row["mw"], "demand.csv", row_no, "mw")
        if mw < 0:
            raise DataError("negative demand", "demand.csv", row_no)
        if t not in demand:
            timesteps.append(t)
            demand[t] = {}
        if node_pos[nid] in demand[t]:
            raise DataError(f"duplicate demand entry for node {nid!r}", "demand.csv", row_no)
        demand[t][node_pos[nid]] = mw

    res_pos = {gen_ids[g]: k for k, g in enumerate(fleet.res_idx)}
    avail_rows = _read_csv(directory / "availability.csv", ("timestep", "gen_id", "mw"))
    avail: dict[str, dict[int, float]] = {t: {} for t in timesteps}
    for row_no, row in avail_rows:
        t = row["timestep"].strip()
        gid = row["gen_id"].strip()
        if gid not in res_pos:
            raise DataError(f"{gid!r} is not an intermittent generator", "availability.csv", row_no)
        if t not in avail:
            raise DataError(f"timestep {t!r} has no demand rows", "availability.csv", row_no)
        mw = _float(row["mw"], "availability.csv", row_no, "mw")
        cap_g = gcap[gen_ids.index(gid)]
        if mw < 0 or mw > cap_g + 1e-9:
            raise DataError(f"availability {mw} of {gid!r} outside [0, {cap_g}]", "availability.csv", row_no)
        avail[t][res_pos[gid]] = mw

    T = len(timesteps)
    D = np.zeros((T, case.n_nodes))
    R = np.zeros((T, len(res_pos)))
    for i, t in enumerate(timesteps):
        missing = set(range(case.n_nodes)) - set(demand[t])
        if missing:
            raise DataError(f"timestep {t!r} lacks demand for nodes {sorted(node_ids[m] for m in missing)}",
                            "demand.csv")
        missing = set(range(len(res_pos))) - set(avail[t])
        if missing:
            names = sorted(gen_ids[fleet.res_idx[m]] for m in missing)
            raise DataError(f"timestep {t!r} lacks availability for {names}", "availability.csv")
        for n, v in demand[t].items():
            D[i, n] = v
        for k, v in avail[t].items():
            R[i, k] = v
    series = SeriesData(tuple(timesteps), D, R)
    log.info("loaded %d nodes, %d lines, %d generators, %d timesteps from %s",
             case.n_nodes, case.n_lines, fleet.n, T, directory)
    return case, fleet, series


@dataclass(frozen=True, eq=False)
class PtdfMatrix:
    matrix: np.ndarray   # (lines, nodes)
    slack: int

    def flows(self, injections: np.ndarray) -> np.ndarray:
        return self.matrix @ injections


def build_ptdf(case: GridCase) -> PtdfMatrix:
    """Single-slack DC PTDF; the slack column is zero."""
    A = case.incidence
    b = 1.0 / case.reactance
    B = A.T @ (b[:, None] * A)
    keep = np.arange(case.n_nodes) != case.slack
    B_red = B[np.ix_(keep, keep)]
    if np.linalg.matrix_rank(B_red) < B_red.shape[0]:
        raise StructuralError("reduced susceptance matrix is singular (disconnected network)")
    X = np.zeros((case.n_nodes, case.n_nodes))
    X[np.ix_(keep, keep)] = np.linalg.inv(B_red)
    return PtdfMatrix((b[:, None] * A) @ X, case.slack)


@dataclass(frozen=True, eq=False)
class LodfMatrix:
    matrix: np.ndarray   # (monitored line, outaged line); NaN in bridge columns
    valid: np.ndarray    # per outaged line; False for bridges

    def post_outage_flows(self, flows: np.ndarray, k: int) -> np.ndarray:
        if not self.valid[k]:
            raise StructuralError(f"outage of line {k} islands the network")
        return flows + self.matrix[:, k] * flows[k]


def build_lodf(case: GridCase, ptdf: PtdfMatrix) -> LodfMatrix:
    P = ptdf.matrix
    # flow on every line per unit transfer from -> to of each line
    transfer = P[:, case.line_from] - P[:, case.line_to]
    denom = 1.0 - np.diag(transfer)
    valid = np.abs(denom) >= BRIDGE_TOL
    L = np.full_like(transfer, np.nan)
    L[:, valid] = transfer[:, valid] / denom[valid]
    idx = np.flatnonzero(valid)
    L[idx, idx] = -1.0
    return LodfMatrix(L, valid)


@dataclass(frozen=True, eq=False)
class CnecSet:
    line: np.ndarray          # monitored line index per entry
    contingency: np.ndarray   # outaged line index per entry, -1 for the basecase
    ptdf: np.ndarray          # (entries, nodes) effective nodal PTDF rows
    capacity: np.ndarray
    line_ids: tuple
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.line)

    @property
    def cnec_ids(self) -> list[str]:
        return [self.line_ids[j] for j in self.line]

    @property
    def contingency_ids(self) -> list[str]:
        return ["basecase" if k < 0 else self.line_ids[k] for k in self.contingency]

    @property
    def labels(self) -> list[str]:
        return [c if k == "basecase" else f"{c}|{k}" for c, k in zip(self.cnec_ids, self.contingency_ids)]

    def subset(self, mask) -> "CnecSet":
        mask = np.asarray(mask)
        return CnecSet(self.line[mask], self.contingency[mask], self.ptdf[mask], self.capacity[mask],
                       self.line_ids, dict(self.metadata))


def zone_to_zone_ptdf(case: GridCase, ptdf: PtdfMatrix) -> np.ndarray:
    """Largest zone-to-zone PTDF per line using uniform nodal participation within zones."""
    M = case.zone_map
    zonal = ptdf.matrix @ (M / M.sum(axis=1, keepdims=True)).T
    return zonal.max(axis=1) - zonal.min(axis=1)


def select_cnecs(case: GridCase, ptdf: PtdfMatrix, lodf: LodfMatrix, z2z_threshold: float = 0.05,
                 outage_sensitivity: float = 0.2, cross_border_only: bool = False) -> CnecSet:
    """Cross-border lines, plus sensitive internal lines, plus their sensitive single-line outages."""
    for name, v in (("z2z_threshold", z2z_threshold), ("outage_sensitivity", outage_sensitivity)):
        if not 0 < v <= 1:
            raise ValueError(f"{name} must lie in (0, 1], got {v}")
    cb = case.cross_border
    z2z = zone_to_zone_ptdf(case, ptdf)
    selected = cb.copy()
    if not cross_border_only:
        selected |= z2z > z2z_threshold + 1e-12
    lines, conts = [], []
    for j in np.flatnonzero(selected):
        lines.append(j)
        conts.append(-1)
        for k in np.flatnonzero(lodf.valid):
            if k != j and abs(lodf.matrix[j, k]) > outage_sensitivity + 1e-9:
                lines.append(j)
                conts.append(k)
    lines = np.array(lines, dtype=int)
    conts = np.array(conts, dtype=int)
    P = ptdf.matrix
    rows = P[lines].copy()
    has_c = conts >= 0
    if has_c.any():
        rows[has_c] += lodf.matrix[lines[has_c], conts[has_c]][:, None] * P[conts[has_c]]
    meta = {
        "z2z_gsk": "uniform",
        "z2z_threshold": z2z_threshold,
        "outage_sensitivity": outage_sensitivity,
        "cross_border_only": bool(cross_border_only),
    }
    return CnecSet(lines, conts, rows, case.capacity[lines], case.line_ids, meta)
