"""Per-agent occupied-area pipeline.

prune infrastructure -> split ground / above-ground -> cluster into boxes ->
hull of vertical and oblique projections per box, plus a residual area for
points no box claims.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import (
    ConvexPolygon,
    capsule_polygon,
    contains_with_margin,
    convex_hull,
    shadow_points,
)
from .scene import Infrastructure, Observation


@dataclass(frozen=True)
class PerceptionConfig:
    """``zeta_h=None`` means: use the noise + resolution bounds the scan carries."""

    ground_threshold: float = 0.1
    zeta_h: float | None = None
    cluster_distance: float = 0.5
    min_cluster_size: int = 5
    # Boxes are grown by this much when claiming points (O intersect B_k).
    box_padding: float = 0.1

    def __post_init__(self):
        if self.ground_threshold <= 0:
            raise ValueError("ground threshold must be positive")
        if self.zeta_h is not None and self.zeta_h < 0:
            raise ValueError("zeta_h must be non-negative")
        if self.cluster_distance <= 0 or self.min_cluster_size < 1:
            raise ValueError("invalid clustering parameters")


@dataclass(frozen=True, eq=False)
class DetectedObstacle:
    k: int
    box: np.ndarray  # [[xmin, ymin, zmin], [xmax, ymax, zmax]]
    points: np.ndarray
    oblique: np.ndarray
    occupied: ConvexPolygon

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "box": self.box.tolist(),
            "n_points": len(self.points),
            "occupied": self.occupied.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class AgentPerception:
    agent: str
    sensor: np.ndarray
    zeta_h: float
    detected: tuple[DetectedObstacle, ...]
    residual_points: np.ndarray
    residual_area: ConvexPolygon
    scan_area: ConvexPolygon
    max_range: float
    ground_points: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))

    def occupied_areas(self, include_residual: bool = True) -> list[ConvexPolygon]:
        areas = [d.occupied for d in self.detected if not d.occupied.is_empty]
        if include_residual and not self.residual_area.is_empty:
            areas.append(self.residual_area)
        return areas

    def to_dict(self, with_points: bool = True) -> dict:
        out = {
            "agent": self.agent,
            "sensor": self.sensor.tolist(),
            "zeta_h": self.zeta_h,
            "detected": [d.to_dict() for d in self.detected],
            "residual_area": self.residual_area.to_dict(),
            "scan_area": self.scan_area.to_dict(),
            "n_residual": len(self.residual_points),
        }
        if with_points:
            out["residual_points"] = self.residual_points.tolist()
            for d, det in zip(out["detected"], self.detected):
                d["points"] = det.points.tolist()
        return out


def infrastructure_distance(points: np.ndarray, infra: Infrastructure) -> np.ndarray:
    """3D distance from points to an extruded convex footprint (0 inside)."""
    fp = infra.footprint
    xy = points[:, :2]
    v = fp.vertices
    # Distance to the polygon in the plane: 0 inside, else nearest edge.
    inside = np.all(fp.normals @ xy.T + fp.offsets[:, None] <= 0, axis=0)
    d2 = np.full(len(xy), np.inf)
    for i in range(len(v)):
        a, b = v[i], v[(i + 1) % len(v)]
        ab = b - a
        t = np.clip((xy - a) @ ab / (ab @ ab), 0.0, 1.0)
        d2 = np.minimum(d2, np.hypot(*(xy - (a + t[:, None] * ab)).T))
    d2 = np.where(inside, 0.0, d2)
    dz = np.maximum(points[:, 2] - infra.height, 0.0) + np.maximum(-points[:, 2], 0.0)
    return np.hypot(d2, dz)


def prune_infrastructure(obs: Observation, infrastructure: Iterable[Infrastructure]) -> Observation:
    """Drop points within 2 * zeta_n of any default-map structure."""
    infrastructure = list(infrastructure)
    if not infrastructure or len(obs) == 0:
        return obs
    tol = 2.0 * obs.noise_bound
    keep = np.ones(len(obs), dtype=bool)
    for infra in infrastructure:
        keep &= infrastructure_distance(obs.points, infra) > tol
    return obs.subset(keep)


def ground_mask(points: np.ndarray, ground_threshold: float) -> np.ndarray:
    return np.asarray(points)[:, 2] <= ground_threshold


def remove_ground(obs: Observation, ground_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Split points into ground (z <= threshold) and above-ground."""
    if ground_threshold <= 0:
        raise ValueError("ground threshold must be positive")
    g = ground_mask(obs.points, ground_threshold)
    return obs.points[g], obs.points[~g]


def occupied_area(sensor, points, zeta_h: float, max_range: float | None = None) -> ConvexPolygon:
    """Hull of the vertical and oblique projections of ``points``.

    Shadows are truncated at ``max_range`` from the sensor. Clusters whose
    projections are collinear (or too few) become a capsule of radius
    ``zeta_h`` around their extent. The polygon carries ``zeta_h`` as margin.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return ConvexPolygon.empty()
    proj = np.vstack([pts[:, :2], shadow_points(sensor, pts, max_range)])
    hull = convex_hull(proj)
    if not hull.is_empty:
        return hull.with_margin(zeta_h)
    centre = proj.mean(axis=0)
    dev = proj - centre
    _, _, vt = np.linalg.svd(dev, full_matrices=False) if len(proj) > 1 else (None, None, np.eye(2))
    axis = vt[0]
    s = dev @ axis
    cap = capsule_polygon(centre + s.min() * axis, centre + s.max() * axis, max(zeta_h, 1e-3))
    return cap.with_margin(zeta_h)


def euclidean_clusters(points: np.ndarray, distance: float) -> list[np.ndarray]:
    """Single-linkage clusters as index arrays, ordered by first member."""
    n = len(points)
    if n == 0:
        return []
    pairs = cKDTree(points).query_pairs(distance, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    order = {}
    for i, lab in enumerate(labels):
        order.setdefault(lab, []).append(i)
    return [np.array(v) for v in order.values()]


def _in_box(points: np.ndarray, box: np.ndarray) -> np.ndarray:
    return np.all((points >= box[0]) & (points <= box[1]), axis=1)


def detect_obstacles(above: np.ndarray, cfg: PerceptionConfig, ao_labels=None, *,
                     sensor, zeta_h: float, max_range: float | None = None
                     ) -> tuple[list[DetectedObstacle], np.ndarray]:
    """Cluster above-ground points into boxed obstacles.

    Stand-in for a learned detector: a cluster becomes an obstacle if it has
    at least ``min_cluster_size`` points and most of them are not
    detector-invisible. Points inside a (padded) box join that obstacle;
    the rest is returned as the residual.
    """
    above = np.asarray(above, dtype=float).reshape(-1, 3)
    if len(above) == 0:
        return [], np.empty((0, 3))
    ao = np.zeros(len(above), dtype=bool) if ao_labels is None else np.asarray(ao_labels, dtype=bool)
    boxes = []
    for idx in euclidean_clusters(above, cfg.cluster_distance):
        if len(idx) < cfg.min_cluster_size or ao[idx].sum() * 2 >= len(idx):
            continue
        pts = above[idx]
        boxes.append(np.array([pts.min(axis=0) - cfg.box_padding, pts.max(axis=0) + cfg.box_padding]))
    owner = np.full(len(above), -1)
    for k, box in enumerate(boxes):
        free = owner < 0
        owner[free & _in_box(above, box)] = k
    detected = []
    for k, box in enumerate(boxes):
        pts = above[owner == k]
        oblique = shadow_points(sensor, pts, max_range)
        occ = occupied_area(sensor, pts, zeta_h, max_range)
        detected.append(DetectedObstacle(k, box, pts, oblique, occ))
    return detected, above[owner < 0]


def scan_area(obs: Observation, bin_width: float = np.radians(0.2)) -> ConvexPolygon:
    """Convex region swept by the scan: hull of the sensor and its returns.

    Only the farthest return per narrow bearing bin is kept before hulling.
    """
    s = obs.sensor[:2]
    xy = obs.points[:, :2]
    d = xy - s
    dist = np.hypot(d[:, 0], d[:, 1])
    inrange = dist <= obs.max_range
    xy, d, dist = xy[inrange], d[inrange], dist[inrange]
    if len(xy) == 0:
        return ConvexPolygon.empty(degenerate=True)
    bins = np.floor((np.arctan2(d[:, 1], d[:, 0]) + np.pi) / bin_width).astype(np.int64)
    order = np.lexsort((-dist, bins))
    first = np.ones(len(order), dtype=bool)
    first[1:] = bins[order][1:] != bins[order][:-1]
    far = xy[order[first]]
    return convex_hull(np.vstack([far, s[None, :]]))


def perceive_one(agent: str, obs: Observation, cfg: PerceptionConfig = PerceptionConfig(),
                 infrastructure: Sequence[Infrastructure] = ()) -> AgentPerception:
    zeta_h = cfg.zeta_h if cfg.zeta_h is not None else obs.zeta_h
    pruned = prune_infrastructure(obs, infrastructure)
    g = ground_mask(pruned.points, cfg.ground_threshold)
    above = pruned.points[~g]
    detected, residual = detect_obstacles(
        above, cfg, pruned.undetectable[~g], sensor=pruned.sensor, zeta_h=zeta_h,
        max_range=pruned.max_range)
    res_area = occupied_area(pruned.sensor, residual, zeta_h, pruned.max_range)
    return AgentPerception(
        agent=agent,
        sensor=pruned.sensor.copy(),
        zeta_h=zeta_h,
        detected=tuple(detected),
        residual_points=residual,
        residual_area=res_area,
        scan_area=scan_area(pruned),
        max_range=pruned.max_range,
        ground_points=pruned.points[g],
    )


def perceive(own: str, observations: Mapping[str, Observation], cfg: PerceptionConfig = PerceptionConfig(),
             infrastructure: Sequence[Infrastructure] = ()) -> dict[str, AgentPerception]:
    """Run the pipeline on the own observation and on every neighbour's.

    All observations must already be expressed in the own agent's frame.
    The returned dict always lists ``own`` first.
    """
    if own not in observations:
        raise KeyError(f"no observation for own agent {own!r}")
    names = [own] + [k for k in observations if k != own]
    return {name: perceive_one(name, observations[name], cfg, infrastructure) for name in names}


def overlaps(a: ConvexPolygon, b: ConvexPolygon) -> bool:
    from .geometry import intersect_convex

    return not intersect_convex(a, b).is_empty


def points_in_any(areas: Sequence[ConvexPolygon], xy: np.ndarray, margin: float) -> np.ndarray:
    inside = np.zeros(len(xy), dtype=bool)
    for a in areas:
        inside |= contains_with_margin(a, xy, margin)
    return inside
