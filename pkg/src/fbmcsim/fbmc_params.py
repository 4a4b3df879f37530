"""Flow-based parameters: GSK, zonal PTDF, reference flows, RAM and 2-D domain slices."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .grid import CnecSet, GeneratorFleet, GridCase

ONLINE_TOL = 1e-3
DEFAULT_BBOX = 10_000.0


class GskFallbackWarning(UserWarning):
    """A zone had no online dispatchable capacity; installed capacity was used instead."""


@dataclass(frozen=True, eq=False)
class Gsk:
    matrix: np.ndarray   # (nodes, zones)
    timestep: object = None
    fallback_zones: tuple = ()


def gsk_pro_rata(fleet: GeneratorFleet, basecase, t: int, case: GridCase | None = None,
                 online_tol: float = ONLINE_TOL, warn: bool = True) -> Gsk:
    """Pro-rata GSK from online dispatchable capacity at time step index ``t``.

    A unit is online when its basecase output exceeds ``online_tol``.  Zones
    without any online unit fall back to installed dispatchable capacity, and
    zones without dispatchable capacity at all to a uniform split over their nodes.
    """
    case = case or basecase.case
    disp = fleet.dispatchable_idx
    out = basecase.generation[t, disp]
    online = out > online_tol
    node_online = np.bincount(fleet.node[disp], weights=fleet.capacity[disp] * online, minlength=case.n_nodes)
    node_installed = np.bincount(fleet.node[disp], weights=fleet.capacity[disp], minlength=case.n_nodes)
    zi = case.node_zone_idx
    K = np.zeros((case.n_nodes, case.n_zones))
    fallback = []
    for z, zone in enumerate(case.zones):
        members = zi == z
        w = np.where(members, node_online, 0.0)
        if w.sum() <= 0:
            fallback.append(zone)
            w = np.where(members, node_installed, 0.0)
            if w.sum() <= 0:
                w = members.astype(float)
        K[:, z] = w / w.sum()
    label = basecase.timesteps[t]
    if fallback and warn:
        msg = f"no online dispatchable capacity in zones {fallback} at timestep {label!r}; using installed capacity"
        warnings.warn(msg, GskFallbackWarning, stacklevel=2)
    return Gsk(K, label, tuple(fallback))


def zonal_ptdf(cnecs: CnecSet, gsk: Gsk) -> np.ndarray:
    return cnecs.ptdf @ gsk.matrix


def reference_flow(f_bc, ptdf_z, np_bc) -> np.ndarray:
    return np.asarray(f_bc, float) - np.asarray(ptdf_z, float) @ np.asarray(np_bc, float)


def compute_ram(cnecs, frm, fav, f_ref, minram_fraction: float) -> np.ndarray:
    """RAM with minRAM floor.  ``cnecs`` is a CnecSet/FbParameters or a capacity vector."""
    cap = np.asarray(getattr(cnecs, "capacity", cnecs), float)
    frm = np.asarray(frm, float)
    if np.any(frm < 0):
        raise ValueError("FRM must be non-negative")
    if not 0 <= minram_fraction <= 1:
        raise ValueError("minRAM fraction must lie in [0, 1]")
    return np.maximum(minram_fraction * cap, cap - (frm + np.asarray(fav, float)) - np.asarray(f_ref, float))


@dataclass(frozen=True, eq=False)
class FbParameters:
    """Per-timestep flow-based parameters.

    Every CNEC contributes two rows, one per flow direction: the negative
    direction carries the negated zonal PTDF and reference flow, so that
    ``ptdf_z[t] @ np <= ram[t]`` bounds ``|flow|`` on both sides.
    """

    cnecs: CnecSet
    zones: tuple
    timesteps: tuple
    row_cnec: np.ndarray     # (K,) index into cnecs
    direction: np.ndarray    # (K,) +1 / -1
    ptdf_z: np.ndarray       # (T, K, Z)
    ram: np.ndarray          # (T, K)
    f_ref: np.ndarray        # (T, K)
    frm: np.ndarray          # (T, K)
    fav: np.ndarray          # (T, K)
    f_bc: np.ndarray         # (T, K)
    np_bc: np.ndarray        # (T, Z)
    gsk: np.ndarray          # (T, nodes, zones)
    minram: float
    metadata: dict = field(default_factory=dict)

    @property
    def capacity(self) -> np.ndarray:
        return self.cnecs.capacity[self.row_cnec]

    @property
    def n_rows(self) -> int:
        return self.row_cnec.size

    @property
    def row_labels(self) -> list[str]:
        labels = self.cnecs.labels
        return [f"{labels[c]}{'+' if s > 0 else '-'}" for c, s in zip(self.row_cnec, self.direction)]

    def with_frm(self, frm) -> "FbParameters":
        """Recompute RAM for a different FRM (broadcast over time steps and rows)."""
        frm = np.broadcast_to(np.asarray(frm, float), self.ram.shape).copy()
        ram = compute_ram(self.capacity[None, :], frm, self.fav, self.f_ref, self.minram)
        return replace(self, frm=frm, ram=ram)

    def export_csv(self, path) -> Path:
        path = Path(path)
        labels_c = self.cnecs.cnec_ids
        labels_k = self.cnecs.contingency_ids
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestep", "cnec_id", "contingency_id", "direction", *self.zones,
                        "ram_mw", "f_ref_mw", "frm_mw", "fav_mw"])
            for t, ts in enumerate(self.timesteps):
                for k in range(self.n_rows):
                    c = self.row_cnec[k]
                    w.writerow([ts, labels_c[c], labels_k[c], int(self.direction[k]),
                                *(_fmt(v) for v in self.ptdf_z[t, k]),
                                _fmt(self.ram[t, k]), _fmt(self.f_ref[t, k]),
                                _fmt(self.frm[t, k]), _fmt(self.fav[t, k])])
        return path


def _fmt(v: float) -> str:
    v = float(v)
    if abs(v) < 5e-10:
        v = 0.0
    return f"{v:.9g}"


def build_fb_parameters(case: GridCase, fleet: GeneratorFleet, basecase, cnecs: CnecSet,
                        minram: float = 0.2, frm=None, fav=None,
                        online_tol: float = ONLINE_TOL) -> FbParameters:
    """Flow-based parameters for every basecase time step (GSK recomputed hourly)."""
    T = len(basecase.timesteps)
    K0 = len(cnecs)
    row_cnec = np.repeat(np.arange(K0), 2)
    direction = np.tile([1.0, -1.0], K0)
    K = row_cnec.size
    frm = np.zeros((T, K)) if frm is None else np.broadcast_to(np.asarray(frm, float), (T, K)).copy()
    fav = np.zeros((T, K)) if fav is None else np.broadcast_to(np.asarray(fav, float), (T, K)).copy()
    ptdf_z = np.zeros((T, K, case.n_zones))
    f_bc = np.zeros((T, K))
    f_ref = np.zeros((T, K))
    gsks = np.zeros((T, case.n_nodes, case.n_zones))
    np_bc = basecase.injections @ case.zone_map.T
    fallbacks = {}
    for t in range(T):
        gsk = gsk_pro_rata(fleet, basecase, t, case, online_tol, warn=False)
        if gsk.fallback_zones:
            fallbacks[str(basecase.timesteps[t])] = list(gsk.fallback_zones)
        gsks[t] = gsk.matrix
        pz = zonal_ptdf(cnecs, gsk)[row_cnec] * direction[:, None]
        fb = (cnecs.ptdf @ basecase.injections[t])[row_cnec] * direction
        ptdf_z[t] = pz
        f_bc[t] = fb
        f_ref[t] = reference_flow(fb, pz, np_bc[t])
    if fallbacks:
        zones = sorted({z for zs in fallbacks.values() for z in zs})
        warnings.warn(f"GSK fell back to installed capacity in {len(fallbacks)} of {T} timesteps "
                      f"(zones {zones})", GskFallbackWarning, stacklevel=2)
    cap = cnecs.capacity[row_cnec]
    ram = compute_ram(cap[None, :], frm, fav, f_ref, minram)
    meta = dict(cnecs.metadata)
    meta.update({"gsk": "pro_rata", "online_tol_mw": online_tol, "gsk_fallbacks": fallbacks})
    return FbParameters(cnecs, tuple(case.zones), tuple(basecase.timesteps), row_cnec, direction,
                        ptdf_z, ram, f_ref, frm, fav, f_bc, np_bc, gsks, minram, meta)


@dataclass(frozen=True, eq=False)
class DomainSlice:
    axes: tuple                 # ((z, z'), (z'', z'''))
    normals: np.ndarray         # (K, 2)
    offsets: np.ndarray         # (K,)
    labels: tuple
    vertices: np.ndarray        # (V, 2), counter-clockwise, empty when infeasible
    truncated: bool
    bbox: float
    market_point: tuple | None = None
    base_np: np.ndarray | None = None

    def contains(self, points, tol: float = 1e-6) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, float))
        ok = np.all(pts @ self.normals.T <= self.offsets + tol, axis=1)
        return ok & np.all(np.abs(pts) <= self.bbox + tol, axis=1)

    @property
    def area(self) -> float:
        v = self.vertices
        if len(v) < 3:
            return 0.0
        x, y = v[:, 0], v[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def active(self, tol: float = 1e-6) -> np.ndarray:
        """Halfplanes touching the polygon boundary."""
        if len(self.vertices) == 0:
            return np.zeros(len(self.offsets), dtype=bool)
        slack = self.offsets[:, None] - self.normals @ self.vertices.T
        return np.any(np.abs(slack) <= tol * np.maximum(1.0, np.abs(self.offsets[:, None])), axis=1)

    def export_csv(self, halfplane_path, vertex_path) -> tuple[Path, Path]:
        halfplane_path, vertex_path = Path(halfplane_path), Path(vertex_path)
        act = self.active()
        with halfplane_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "a_x", "a_y", "b", "active"])
            for lab, (ax, ay), b, a in zip(self.labels, self.normals, self.offsets, act):
                w.writerow([lab, _fmt(ax), _fmt(ay), _fmt(b), int(a)])
        with vertex_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["x_mw", "y_mw"])
            for x, y in self.vertices:
                w.writerow([_fmt(x), _fmt(y)])
        return halfplane_path, vertex_path


def clip_polygon(poly: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    """Clip a convex polygon (V, 2) to the halfplane ``a @ p <= b``."""
    if len(poly) == 0:
        return poly
    s = poly @ a - b
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        sp_, sq = s[i], s[(i + 1) % n]
        if sp_ <= 0:
            out.append(p)
        if (sp_ < 0 < sq) or (sq < 0 < sp_):
            out.append(p + (q - p) * (sp_ / (sp_ - sq)))
    if not out:
        return np.zeros((0, 2))
    out = np.array(out)
    keep = np.ones(len(out), dtype=bool)
    for i in range(len(out)):
        if np.linalg.norm(out[i] - out[(i + 1) % len(out)]) < 1e-9:
            keep[i] = False
    out = out[keep] if keep.any() else out[:1]
    return out


def halfplane_polygon(normals: np.ndarray, offsets: np.ndarray, bbox: float) -> np.ndarray:
    poly = np.array([[-bbox, -bbox], [bbox, -bbox], [bbox, bbox], [-bbox, bbox]], float)
    for a, b in zip(normals, offsets):
        if np.linalg.norm(a) < 1e-12:
            if b < -1e-9:
                return np.zeros((0, 2))
            continue
        poly = clip_polygon(poly, a, b)
        if len(poly) == 0:
            break
    if len(poly) < 3:
        return np.zeros((0, 2))
    return poly


def fb_domain_slice(fbp: FbParameters, t: int, axis_pairs, fixed_np=None, *, ram=None,
                    bbox: float = DEFAULT_BBOX, market_np=None) -> DomainSlice:
    """Restrict ``ptdf_z[t] @ np <= ram[t]`` to a plane of two zone-to-zone exchanges.

    Net positions are ``fixed_np + x (e_z - e_z') + y (e_z'' - e_z''')``.
    ``ram`` overrides the RAM row vector (e.g. to compare FRM variants).
    """
    (za, zb), (zc, zd) = axis_pairs
    if (za, zb) == (zc, zd) or za == zb or zc == zd:
        raise ValueError("axis zone pairs must be distinct exchanges between distinct zones")
    zones = list(fbp.zones)
    Z = len(zones)
    ex = np.zeros((Z, 2))
    ex[zones.index(za), 0] += 1
    ex[zones.index(zb), 0] -= 1
    ex[zones.index(zc), 1] += 1
    ex[zones.index(zd), 1] -= 1
    base = np.zeros(Z) if fixed_np is None else np.asarray(fixed_np, float)
    H = fbp.ptdf_z[t]
    r = fbp.ram[t] if ram is None else np.asarray(ram, float)
    normals = H @ ex
    offsets = r - H @ base
    verts = halfplane_polygon(normals, offsets, bbox)
    truncated = bool(len(verts) and np.any(np.abs(np.abs(verts) - bbox) < 1e-6))
    point = None
    if market_np is not None:
        # least-squares projection of the market net positions onto the slice axes
        point = tuple(np.linalg.lstsq(ex, np.asarray(market_np, float) - base, rcond=None)[0])
    return DomainSlice(((za, zb), (zc, zd)), normals, offsets, tuple(fbp.row_labels), verts,
                       truncated, bbox, point, base)
