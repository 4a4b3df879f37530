"""Report figures: domain slices, stage cost composition, CM cost envelopes.

Everything renders through the Agg backend with fixed metadata so repeated
runs write identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "fbmcsim"
plt.rcParams["svg.fonttype"] = "none"
plt.rcParams["font.size"] = 9

COLORS = ("#0077BB", "#CC3311", "#228833", "#DDAA33", "#66CCEE", "#AA3377", "#BBBBBB")
COMPONENT_COLORS = {"generation": "#0077BB", "curtailment": "#228833", "redispatch": "#CC3311"}


def _save(fig, path) -> Path:
    path = Path(path)
    meta = {"Date": None} if path.suffix == ".svg" else {"Software": None}
    if path.suffix == ".pdf":
        meta = {"CreationDate": None, "Producer": None}
    fig.savefig(path, metadata=meta, bbox_inches="tight", dpi=120)
    plt.close(fig)
    return path


def plot_domain_slice(slices: dict, path, title=None) -> Path:
    """Overlay one or more ``DomainSlice`` polygons (label -> slice)."""
    fig, ax = plt.subplots(figsize=(5.0, 4.6))
    lim = 0.0
    for k, (label, sl) in enumerate(slices.items()):
        color = COLORS[k % len(COLORS)]
        v = np.asarray(sl.vertices)
        if len(v):
            closed = np.vstack([v, v[:1]])
            ax.fill(closed[:, 0], closed[:, 1], color=color, alpha=0.25, lw=0)
            ax.plot(closed[:, 0], closed[:, 1], color=color, lw=1.2, label=label)
            lim = max(lim, np.abs(v).max())
        if sl.market_point is not None and k == 0:
            ax.plot(*sl.market_point, "k*", ms=8, label="market result")
    lim = 1.1 * lim if lim > 0 else 1.0
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.axhline(0, color="0.7", lw=0.5)
    ax.axvline(0, color="0.7", lw=0.5)
    sl = next(iter(slices.values()))
    (a, b), (c, d) = sl.axes
    ax.set_xlabel(f"exchange {a} -> {b} [MW]")
    ax.set_ylabel(f"exchange {c} -> {d} [MW]")
    if any(s.truncated for s in slices.values()):
        ax.text(0.02, 0.02, "bounding box active", transform=ax.transAxes, fontsize=7, color="0.4")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7, frameon=False)
    ax.set_aspect("equal")
    return _save(fig, path)


def plot_stage_costs(reports, path) -> Path:
    """Stacked bars of generation / curtailment / redispatch cost per scenario and stage."""
    bars, labels = [], []
    for r in reports:
        costs = r.costs if hasattr(r, "costs") else r["costs"]
        name = r.name if hasattr(r, "name") else r["name"]
        for stage, comp in costs.items():
            bars.append(comp)
            labels.append(f"{name}\n{stage}")
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(bars) + 1.5), 3.6))
    x = np.arange(len(bars))
    bottom = np.zeros(len(bars))
    for comp, color in COMPONENT_COLORS.items():
        h = np.array([b[comp] for b in bars], float)
        ax.bar(x, h, 0.7, bottom=bottom, color=color, label=comp)
        bottom += h
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("cost [cost units]")
    ax.legend(fontsize=7, frameon=False, ncol=3, loc="upper left", bbox_to_anchor=(0, 1.12))
    ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, path)


def plot_cm_envelope(stats: dict, path) -> Path:
    """Min/max band of hourly CM cost per scenario, with the omega = 0 line on top."""
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    for k, (label, st) in enumerate(stats.items()):
        color = COLORS[k % len(COLORS)]
        env = st.envelope()
        x = np.arange(len(st.timesteps))
        if np.isfinite(env["min"]).all():
            ax.fill_between(x, env["min"], env["max"], color=color, alpha=0.25, lw=0, label=f"{label} range")
        ax.plot(x, env["deterministic"], color=color, lw=1.2, label=f"{label} without deviation")
        step = max(1, len(x) // 12)
        ax.set_xticks(x[::step])
        ax.set_xticklabels(list(st.timesteps)[::step], fontsize=7)
    ax.set_ylabel("CM cost [cost units]")
    ax.set_xlabel("timestep")
    ax.legend(fontsize=7, frameon=False)
    ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, path)
