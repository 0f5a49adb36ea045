"""Static SVG figures: point clouds, occupied areas, unsafe region, trajectory.

Output is byte-stable: no date metadata and a fixed SVG id salt.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon as MplPolygon  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .scene import footprint_polygon  # noqa: E402

plt.rcParams["svg.hashsalt"] = "lidar-fdii"
AGENT_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:purple", "tab:brown")


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _poly(ax, poly, **kw) -> None:
    if poly is None or poly.is_empty:
        return
    ax.add_patch(MplPolygon(poly.vertices, closed=True, **kw))


def plot_perception(path, perceptions: dict, region=None, scene=None, title: str = "",
                    view=None) -> None:
    """Per-agent points and occupied areas, the unsafe region and true footprints."""
    fig, ax = plt.subplots(figsize=(8, 6))
    for i, (name, p) in enumerate(perceptions.items()):
        c = AGENT_COLORS[i % len(AGENT_COLORS)]
        pts = [d.points for d in p.detected] + [p.residual_points]
        allp = np.vstack([q for q in pts if len(q)]) if any(len(q) for q in pts) else np.empty((0, 3))
        if len(allp):
            ax.scatter(allp[:, 0], allp[:, 1], s=2, color=c, label=f"{name} points")
        for det in p.detected:
            (x0, y0, _), (x1, y1, _) = det.box
            ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, ec=c, lw=1.0))
            _poly(ax, det.occupied, fill=False, ec=c, ls="--", lw=0.8)
        _poly(ax, p.residual_area, fill=False, ec=c, ls=":", lw=1.0)
        ax.plot(*p.sensor[:2], marker="^", color=c, ms=9, ls="none")
    if region is not None:
        for k, poly in enumerate(region.polygons):
            _poly(ax, poly, fc="tab:red", alpha=0.35, ec="tab:red", label="unsafe region" if k == 0 else None)
    if scene is not None:
        for ob in scene.obstacles:
            _poly(ax, footprint_polygon(ob), fill=False, ec="black", lw=1.2)
    if view is None:
        view = _auto_view(perceptions, region)
    ax.set_xlim(view[0], view[1])
    ax.set_ylim(view[2], view[3])
    ax.set_aspect("equal", adjustable="box")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=7)
    _save(fig, path)


def _auto_view(perceptions: dict, region, pad: float = 5.0):
    xy = [p.sensor[None, :2] for p in perceptions.values()]
    for p in perceptions.values():
        xy += [d.points[:, :2] for d in p.detected] + [p.residual_points[:, :2]]
    if region is not None:
        xy += [poly.vertices for poly in region.polygons]
    pts = np.vstack([q for q in xy if len(q)])
    lo, hi = pts.min(axis=0) - pad, pts.max(axis=0) + pad
    return lo[0], hi[0], lo[1], hi[1]


def plot_drive(path, result, region, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(8, 5))
    for k, poly in enumerate(region.polygons):
        _poly(ax, poly, fc="tab:red", alpha=0.35, ec="tab:red", label="unsafe region" if k == 0 else None)
    xy = result.states[:, :2]
    ax.plot(xy[:, 0], xy[:, 1], color="tab:blue", lw=1.5, label="trajectory")
    ax.plot(*xy[0], marker="o", color="tab:green", ls="none", label="start")
    ax.plot(*result.goal, marker="*", color="black", ms=12, ls="none", label="goal")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", fontsize=7)
    _save(fig, path)


def plot_hbar(path, result) -> None:
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(np.arange(len(result.min_hbar)) * 1.0, result.min_hbar, color="tab:red")
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("min h-bar [m]")
    _save(fig, path)


def plot_robustness(path, rows: list[dict]) -> None:
    """Misclassification rate per attack family and noise scale."""
    fams = sorted({r["family"] for r in rows})
    scales = sorted({r["noise_scale"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(scales), 1)
    for j, s in enumerate(scales):
        vals = []
        for f in fams:
            r = next((r for r in rows if r["family"] == f and r["noise_scale"] == s), None)
            vals.append(r["misclassified"] / max(r["n"], 1) if r else np.nan)
        ax.bar(np.arange(len(fams)) + j * width, vals, width, label=f"noise x{s:g}")
    ax.set_xticks(np.arange(len(fams)) + width * (len(scales) - 1) / 2)
    ax.set_xticklabels(fams)
    ax.set_ylabel("misclassification rate")
    ax.legend(fontsize=7)
    _save(fig, path)
