"""Attack detection, classification and isolation from two or more views.

A's detected obstacles are checked against every neighbour's occupied
areas, then A's undetected (residual) points are checked the same way.
The unsafe region is what all views agree may be occupied.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .geometry import ConvexPolygon, HalfPlane, contains_with_margin, intersect_convex
from .perception import AgentPerception, points_in_any

TRUE_OBSTACLE = "TrueObstacle"
NEO = "NEO"
UNVERIFIED = "Unverified"

NO_RESIDUAL = "NoResidual"
PRA1 = "PRA1"
PRA2 = "PRA2"
PRA3_OR_AO = "PRA3_or_AO"

MATCH = "Match"
MISMATCH = "Mismatch"

EMPTY = "Empty"
SUBSET_OF_B = "SubsetOfB"
ESCAPES_B = "EscapesB"


class FdiiError(RuntimeError):
    pass


class NoOverlap(FdiiError):
    """The tested points lie outside both agents' joint coverage."""


class NoNeighborCoverage(FdiiError):
    pass


@dataclass(frozen=True)
class ResidualMatch:
    result: str
    category: int | None = None
    n_tested: int = 0


@dataclass(frozen=True)
class Verdict:
    per_obstacle: dict
    residual_verdict: str = NO_RESIDUAL
    residual_unverified: int = 0

    @property
    def attacked(self) -> bool:
        return NEO in self.per_obstacle.values() or self.residual_verdict != NO_RESIDUAL

    @property
    def pra_category(self) -> int | None:
        return {PRA1: 1, PRA2: 2}.get(self.residual_verdict)

    @property
    def label(self) -> str:
        """Short summary: 'no_attack', 'NEO', 'PRA2', 'NEO+PRA3_or_AO', ..."""
        parts = []
        if NEO in self.per_obstacle.values():
            parts.append(NEO)
        if self.residual_verdict != NO_RESIDUAL:
            parts.append(self.residual_verdict)
        return "+".join(parts) if parts else "no_attack"

    def to_dict(self) -> dict:
        return {
            "attacked": self.attacked,
            "label": self.label,
            "per_obstacle": {str(k): v for k, v in sorted(self.per_obstacle.items())},
            "residual_verdict": self.residual_verdict,
            "pra_category": self.pra_category,
            "residual_unverified": self.residual_unverified,
        }


@dataclass(frozen=True, eq=False)
class UnsafeRegion:
    """Convex pieces of the candidate unsafe region.

    Each piece is already grown by the cross-agent margin, so its
    half-planes are used as exported (zero extra margin).
    """

    polygons: tuple[ConvexPolygon, ...] = ()
    margin: float = 0.0
    sources: tuple = field(default=())

    @property
    def constraints(self) -> list[list[HalfPlane]]:
        return [list(p.halfplanes) for p in self.polygons]

    def __len__(self) -> int:
        return len(self.polygons)

    @property
    def is_empty(self) -> bool:
        return not self.polygons

    def hbar(self, s) -> np.ndarray:
        """Per-polygon max_l h_l(s); ``s`` may be (2,) or (M, 2)."""
        p = np.asarray(s, dtype=float)
        pts = p.reshape(-1, 2)
        out = np.array([np.max(poly.normals @ pts.T + poly.offsets[:, None], axis=0)
                        for poly in self.polygons]).reshape(len(self.polygons), len(pts))
        return out[:, 0] if p.ndim == 1 else out

    def min_hbar(self, s) -> float | np.ndarray:
        """min over polygons of h-bar; +inf for an empty region."""
        p = np.asarray(s, dtype=float)
        if self.is_empty:
            return math.inf if p.ndim == 1 else np.full(len(p.reshape(-1, 2)), np.inf)
        h = self.hbar(p)
        return float(h.min()) if p.ndim == 1 else h.min(axis=0)

    def contains(self, xy, margin: float = 0.0) -> np.ndarray:
        return points_in_any(self.polygons, np.asarray(xy, dtype=float).reshape(-1, 2), margin)

    def to_dict(self) -> dict:
        return {
            "margin": self.margin,
            "polygons": [p.to_dict() for p in self.polygons],
            "sources": [list(s) for s in self.sources],
        }


def _margin(a: AgentPerception, b: AgentPerception) -> float:
    return max(a.zeta_h, b.zeta_h)


def joint_coverage_mask(xy: np.ndarray, a: AgentPerception, b: AgentPerception) -> np.ndarray:
    return contains_with_margin(a.scan_area, xy, 0.0) & contains_with_margin(b.scan_area, xy, 0.0)


def scan_match_detected(k: int, pa: AgentPerception, pb: AgentPerception) -> str:
    """Match if every projected point of A's obstacle ``k`` inside the joint
    coverage falls in one of B's occupied areas (detected or residual)."""
    xy = pa.detected[k].points[:, :2]
    xy = xy[joint_coverage_mask(xy, pa, pb)]
    if len(xy) == 0:
        raise NoOverlap(f"obstacle {k} of {pa.agent} is outside the coverage shared with {pb.agent}")
    inside = points_in_any(pb.occupied_areas(), xy, _margin(pa, pb))
    return MATCH if inside.all() else MISMATCH


def scan_match_residual(pa: AgentPerception, pb: AgentPerception) -> ResidualMatch:
    """Test A's residual projections against B's occupied areas.

    Only residual points inside the joint coverage are tested. An escape is
    category 1 when none of the tested points fall in B's areas, else 2.
    """
    xy = pa.residual_points[:, :2]
    xy = xy[joint_coverage_mask(xy, pa, pb)] if len(xy) else xy
    if len(xy) == 0:
        return ResidualMatch(EMPTY)
    inside = points_in_any(pb.occupied_areas(), xy, _margin(pa, pb))
    if inside.all():
        return ResidualMatch(SUBSET_OF_B, n_tested=len(xy))
    return ResidualMatch(ESCAPES_B, 2 if inside.any() else 1, len(xy))


def neighbours(own: AgentPerception, others: Sequence[AgentPerception]) -> list[AgentPerception]:
    """Agents whose scan area overlaps the own scan area."""
    if own.scan_area.is_empty:
        return []
    return [p for p in others if not p.scan_area.is_empty
            and not intersect_convex(own.scan_area, p.scan_area).is_empty]


def run_decision_tree(own: AgentPerception, others: Sequence[AgentPerception]) -> Verdict:
    """Classify each detected obstacle, then the residual points.

    With several neighbours an obstacle is NEO if any neighbour that covers
    it reports a mismatch; the residual counts as hidden-but-seen only when
    every covering neighbour finds it inside its areas.
    """
    nbrs = neighbours(own, others)
    if not nbrs:
        raise NoNeighborCoverage(f"no neighbour shares coverage with {own.agent}")
    per = {}
    for det in own.detected:
        results = []
        for nb in nbrs:
            try:
                results.append(scan_match_detected(det.k, own, nb))
            except NoOverlap:
                continue
        if not results:
            per[det.k] = UNVERIFIED
        else:
            per[det.k] = NEO if MISMATCH in results else TRUE_OBSTACLE

    res = [scan_match_residual(own, nb) for nb in nbrs]
    tested = [r for r in res if r.result != EMPTY]
    if not tested:
        verdict = NO_RESIDUAL
    elif all(r.result == SUBSET_OF_B for r in tested):
        verdict = PRA3_OR_AO
    else:
        cats = [r.category for r in tested if r.result == ESCAPES_B]
        verdict = PRA2 if 2 in cats else PRA1
    n_res = len(own.residual_points)
    covered = np.zeros(n_res, dtype=bool)
    if n_res:
        for nb in nbrs:
            covered |= joint_coverage_mask(own.residual_points[:, :2], own, nb)
    return Verdict(per, verdict, int(n_res - covered.sum()))


def _product_intersection(piece: ConvexPolygon, groups: list[list[ConvexPolygon]]) -> list[ConvexPolygon]:
    pieces = [piece]
    for group in groups:
        nxt = []
        for p in pieces:
            for q in group:
                r = intersect_convex(p, q)
                if not r.is_empty:
                    nxt.append(r)
        pieces = nxt
        if not pieces:
            break
    return pieces


def unsafe_region(own: AgentPerception, others: Sequence[AgentPerception], verdict: Verdict) -> UnsafeRegion:
    """Pairwise-exact intersection of own occupied areas with neighbours'.

    Every area is grown by the larger of the agents' margins before
    clipping. NEO areas are dropped. An own area whose source points lie
    outside every neighbour's coverage cannot be checked and is kept as is.
    """
    nbrs = neighbours(own, others)
    margin = max([own.zeta_h] + [nb.zeta_h for nb in nbrs])
    items = []
    for det in own.detected:
        if verdict.per_obstacle.get(det.k) == NEO or det.occupied.is_empty:
            continue
        items.append((("detected", det.k), det.occupied, det.points[:, :2]))
    if not own.residual_area.is_empty:
        items.append((("residual", -1), own.residual_area, own.residual_points[:, :2]))

    polys, sources = [], []
    for tag, area, xy in items:
        grown = area.inflated(margin)
        covering = [nb for nb in nbrs if joint_coverage_mask(xy, own, nb).any()]
        if not covering:
            pieces = [grown]
        else:
            groups = [[a.inflated(margin) for a in nb.occupied_areas()] for nb in covering]
            pieces = _product_intersection(grown, groups)
        for p in pieces:
            polys.append(p)
            sources.append(tag)
    return UnsafeRegion(tuple(polys), margin, tuple(sources))


def export_constraints(region: UnsafeRegion) -> tuple[list[list[HalfPlane]], callable]:
    """Half-plane lists per polygon and the h-bar evaluator (min over polygons)."""
    return region.constraints, region.min_hbar


def isolate(own: AgentPerception, verdict: Verdict) -> AgentPerception:
    """Drop what the verdict marked as spoofed: NEO obstacles and, on any
    PRA verdict, the residual scatter."""
    kept = tuple(d for d in own.detected if verdict.per_obstacle.get(d.k) != NEO)
    out = replace(own, detected=kept)
    if verdict.residual_verdict != NO_RESIDUAL:
        out = replace(out, residual_points=np.empty((0, 3)), residual_area=ConvexPolygon.empty())
    return out


def fdii(own: str, perceptions: Mapping[str, AgentPerception]) -> tuple[Verdict, UnsafeRegion]:
    pa = perceptions[own]
    others = [p for name, p in perceptions.items() if name != own]
    verdict = run_decision_tree(pa, others)
    return verdict, unsafe_region(pa, others, verdict)


def write_region_csv(region: UnsafeRegion, path) -> None:
    """One row per polygon vertex."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["polygon", "vertex", "x", "y"])
        for i, poly in enumerate(region.polygons):
            for j, (x, y) in enumerate(poly.vertices.tolist()):
                w.writerow([i, j, repr(x), repr(y)])


def write_constraints_csv(region: UnsafeRegion, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["polygon", "index", "a_x", "a_y", "b"])
        for i, planes in enumerate(region.constraints):
            for j, hp in enumerate(planes):
                w.writerow([i, j, repr(float(hp.normal[0])), repr(float(hp.normal[1])), repr(float(hp.offset))])
