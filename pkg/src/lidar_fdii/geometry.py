"""Planar and spatial primitives used to build occupied areas.

Polygons are convex, stored counter-clockwise, and carry their edge
half-planes in the form ``a . p + b <= 0`` with unit outward normals ``a``.
Point clouds are plain ``(N, 2)`` / ``(N, 3)`` float arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EPS = 1e-9
DEFAULT_EPS_Z = 1e-6
# Clipping box used when a polygon is built from a bare half-plane list.
_BOUND = 1e6


class GeometryError(ValueError):
    pass


class DegenerateRay(GeometryError):
    """The sensor-to-point ray never reaches the ground plane."""


class EmptyPolygon(GeometryError):
    pass


@dataclass(frozen=True)
class HalfPlane:
    """Constraint ``normal . p + offset <= 0``; ``normal`` is unit length."""

    normal: tuple[float, float]
    offset: float

    def __post_init__(self):
        n = math.hypot(*self.normal)
        if abs(n - 1.0) > EPS:
            raise GeometryError(f"half-plane normal must be unit length, got |a|={n!r}")

    @classmethod
    def from_coefficients(cls, a: Sequence[float], b: float) -> "HalfPlane":
        """Normalise an arbitrary ``a . p + b <= 0`` constraint."""
        n = math.hypot(a[0], a[1])
        if n == 0.0:
            raise GeometryError("zero normal")
        return cls((a[0] / n, a[1] / n), b / n)

    def value(self, p) -> np.ndarray | float:
        p = np.asarray(p, dtype=float)
        return p[..., 0] * self.normal[0] + p[..., 1] * self.normal[1] + self.offset

    def shifted(self, margin: float) -> "HalfPlane":
        return HalfPlane(self.normal, self.offset - margin)


@dataclass(frozen=True, eq=False)
class ConvexPolygon:
    """Convex polygon with CCW ``vertices`` and derived edge ``halfplanes``.

    ``margin`` is the robustness band that containment tests add on top of
    the half-planes. An empty polygon has zero vertices; ``degenerate`` marks
    an empty result that came from collinear or too few input points.
    """

    vertices: np.ndarray
    halfplanes: tuple[HalfPlane, ...] = field(default=())
    margin: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 2)
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        if len(v) and not self.halfplanes:
            object.__setattr__(self, "halfplanes", _edge_half_planes(v))

    @classmethod
    def empty(cls, degenerate: bool = False) -> "ConvexPolygon":
        return cls(np.empty((0, 2)), (), 0.0, degenerate)

    @classmethod
    def from_half_planes(cls, planes: Iterable[HalfPlane], margin: float = 0.0) -> "ConvexPolygon":
        """Intersect half-planes, keeping them in the given order.

        Raises ``GeometryError`` if a plane is redundant (touches no edge),
        since the stored constraint list must match the polygon's edges.
        """
        planes = tuple(planes)
        box = np.array([[-_BOUND, -_BOUND], [_BOUND, -_BOUND], [_BOUND, _BOUND], [-_BOUND, _BOUND]])
        verts = box
        for hp in planes:
            verts = _clip(verts, hp)
            if len(verts) < 3:
                return cls.empty()
        if np.abs(verts).max() >= _BOUND * 0.5:
            raise GeometryError("half-planes do not bound a finite polygon")
        hull = convex_hull(verts)
        for i, hp in enumerate(planes):
            on_edge = np.abs(hp.value(hull.vertices)) <= 1e-7
            if on_edge.sum() < 2:
                raise GeometryError(f"half-plane {i} is redundant")
        return cls(hull.vertices, planes, margin)

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) == 0

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def normals(self) -> np.ndarray:
        return np.array([hp.normal for hp in self.halfplanes], dtype=float).reshape(-1, 2)

    @property
    def offsets(self) -> np.ndarray:
        return np.array([hp.offset for hp in self.halfplanes], dtype=float)

    def area(self) -> float:
        if self.is_empty:
            return 0.0
        return polygon_area(self.vertices)

    def with_margin(self, margin: float) -> "ConvexPolygon":
        return ConvexPolygon(self.vertices, self.halfplanes, margin, self.degenerate)

    def inflated(self, margin: float | None = None) -> "ConvexPolygon":
        """Offset every edge outward by ``margin`` (default: own margin).

        The result carries margin 0; it is the set the half-planes with the
        shifted offsets describe (the mitred offset polygon).
        """
        m = self.margin if margin is None else margin
        if self.is_empty:
            return self
        if m == 0.0:
            return self.with_margin(0.0)
        shifted = tuple(hp.shifted(m) for hp in self.halfplanes)
        if _is_ccw_edge_order(self):
            # Mitre vertex between edges i-1 and i: v + m (n1 + n2) / (1 + n1.n2).
            nrm = self.normals
            prev = np.roll(nrm, 1, axis=0)
            denom = 1.0 + np.sum(nrm * prev, axis=1)
            verts = self.vertices + m * (nrm + prev) / denom[:, None]
            return ConvexPolygon(verts, shifted, 0.0)
        return ConvexPolygon.from_half_planes(shifted)

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "halfplanes": [[hp.normal[0], hp.normal[1], hp.offset] for hp in self.halfplanes],
            "margin": self.margin,
        }


def _edge_half_planes(v: np.ndarray) -> tuple[HalfPlane, ...]:
    planes = []
    n = len(v)
    for i in range(n):
        p, q = v[i], v[(i + 1) % n]
        ex, ey = q[0] - p[0], q[1] - p[1]
        length = math.hypot(ex, ey)
        # CCW order puts the interior on the left, so (ey, -ex) points out.
        a = (ey / length, -ex / length)
        planes.append(HalfPlane(a, -(a[0] * p[0] + a[1] * p[1])))
    return tuple(planes)


def _is_ccw_edge_order(poly: ConvexPolygon) -> bool:
    v = poly.vertices
    if len(poly.halfplanes) != len(v):
        return False
    return all(abs(hp.value(v[i])) <= 1e-7 and abs(hp.value(v[(i + 1) % len(v)])) <= 1e-7
               for i, hp in enumerate(poly.halfplanes))


def polygon_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def vertical_project(p) -> np.ndarray:
    """Drop the altitude coordinate of a point or an ``(N, 3)`` cloud."""
    p = np.asarray(p, dtype=float)
    return p[..., :2].copy()


def oblique_project(sensor, p, eps_z: float = DEFAULT_EPS_Z) -> np.ndarray:
    """Where the ray from ``sensor`` through ``p`` meets the ground plane.

    Accepts a single point or an ``(N, 3)`` array.
    """
    s = np.asarray(sensor, dtype=float)
    p = np.asarray(p, dtype=float)
    if s[2] <= 0:
        raise GeometryError("sensor must be above the ground plane")
    dz = s[2] - p[..., 2]
    if np.any(dz <= eps_z):
        raise DegenerateRay("ray from sensor is (near) parallel to the ground")
    t = s[2] / dz
    return s[:2] + t[..., None] * (p[..., :2] - s[:2]) if p.ndim > 1 else s[:2] + t * (p[:2] - s[:2])


def shadow_points(sensor, points, max_range: float | None = None,
                  eps_z: float = DEFAULT_EPS_Z) -> np.ndarray:
    """Oblique projections, truncated at ``max_range`` horizontal distance.

    Points at or above sensor height cast an unbounded shadow; with a
    ``max_range`` they are mapped to the range limit along their bearing,
    otherwise ``DegenerateRay`` is raised.
    """
    s = np.asarray(sensor, dtype=float)
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    w = pts[:, :2] - s[:2]
    dist = np.hypot(w[:, 0], w[:, 1])
    dz = s[2] - pts[:, 2]
    flat = dz <= eps_z
    if max_range is None and np.any(flat):
        raise DegenerateRay("ray from sensor is (near) parallel to the ground")
    with np.errstate(divide="ignore", invalid="ignore"):
        reach = np.where(flat, np.inf, dist * s[2] / np.where(flat, 1.0, dz))
    if max_range is not None:
        reach = np.minimum(reach, max(max_range, 0.0))
        reach = np.maximum(reach, np.minimum(dist, max_range))
    scale = np.divide(reach, dist, out=np.zeros_like(dist), where=dist > 0)
    return s[:2] + scale[:, None] * w


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> ConvexPolygon:
    """Monotone-chain hull; returns an empty, degenerate-flagged polygon
    when fewer than three affinely independent points are given."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return ConvexPolygon.empty(degenerate=True)
    if not np.all(np.isfinite(pts)):
        raise GeometryError("non-finite coordinates")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
    ps = [tuple(p) for p in pts[keep].tolist()]
    if len(ps) < 3:
        return ConvexPolygon.empty(degenerate=True)

    lower: list = []
    for p in ps:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(ps):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        return ConvexPolygon.empty(degenerate=True)
    v = np.array(hull)
    span = float(np.ptp(v, axis=0).max())
    if polygon_area(v) <= 1e-12 * max(span, 1.0) ** 2:
        return ConvexPolygon.empty(degenerate=True)
    return ConvexPolygon(v)


def to_half_planes(poly: ConvexPolygon) -> list[HalfPlane]:
    if poly.is_empty:
        raise EmptyPolygon("empty polygon has no half-plane representation")
    return list(poly.halfplanes)


def contains_with_margin(poly: ConvexPolygon, p, margin: float) -> np.ndarray | bool:
    """True where ``a . p + b - margin <= 0`` holds for every edge.

    Works on one point or an ``(N, 2)`` array; empty polygons contain nothing.
    """
    if margin < 0:
        raise ValueError("margin must be non-negative")
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = p.reshape(-1, 2)
    if poly.is_empty:
        out = np.zeros(len(pts), dtype=bool)
    else:
        vals = poly.normals @ pts.T + poly.offsets[:, None] - margin
        out = np.all(vals <= 0.0, axis=0)
    return bool(out[0]) if single else out


def _clip(verts: np.ndarray, hp: HalfPlane) -> np.ndarray:
    """Sutherland-Hodgman step: keep the part of ``verts`` inside ``hp``."""
    if len(verts) == 0:
        return verts
    vals = hp.value(verts)
    if np.all(vals <= 0):
        return verts
    if np.all(vals >= 0):
        return verts[:0]
    nxt = np.roll(verts, -1, axis=0)
    vq = np.roll(vals, -1)
    cross = ((vals < 0) & (vq > 0)) | ((vq < 0) & (vals > 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(cross, vals / (vals - vq), 0.0)
    # per edge: the start vertex if kept, then the crossing point if any
    cand = np.stack([verts, verts + t[:, None] * (nxt - verts)], axis=1)
    keep = np.stack([vals <= 0, cross], axis=1)
    return cand[keep].reshape(-1, 2)


def intersect_convex(a: ConvexPolygon, b: ConvexPolygon) -> ConvexPolygon:
    """Exact intersection of two convex polygons (margins are ignored)."""
    if a.is_empty or b.is_empty:
        return ConvexPolygon.empty()
    verts = a.vertices
    for hp in b.halfplanes:
        verts = _clip(verts, hp)
        if len(verts) < 3:
            return ConvexPolygon.empty()
    out = convex_hull(verts)
    return ConvexPolygon.empty() if out.is_empty else out


def capsule_polygon(p, q, radius: float) -> ConvexPolygon:
    """Octagon circumscribing the capsule of ``radius`` around segment pq."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = q - p
    length = math.hypot(*d)
    u = d / length if length > 0 else np.array([1.0, 0.0])
    base = math.atan2(u[1], u[0])
    r = radius / math.cos(math.pi / 8)
    verts = []
    for k, deg in enumerate((-67.5, -22.5, 22.5, 67.5, 112.5, 157.5, 202.5, 247.5)):
        c = q if k < 4 else p
        ang = base + math.radians(deg)
        verts.append(c + r * np.array([math.cos(ang), math.sin(ang)]))
    return convex_hull(np.array(verts))


def segment_hits_disk(start, ends, center, radius: float) -> np.ndarray:
    """Whether segments ``start -> ends[i]`` come within ``radius`` of ``center``."""
    s = np.asarray(start, dtype=float)[:2]
    e = np.asarray(ends, dtype=float).reshape(-1, 2)
    c = np.asarray(center, dtype=float)
    d = e - s
    dd = np.einsum("ij,ij->i", d, d)
    t = np.divide((c - s) @ d.T, dd, out=np.zeros(len(e)), where=dd > 0)
    t = np.clip(t, 0.0, 1.0)
    closest = s + t[:, None] * d
    return np.hypot(*(closest - c).T) <= radius


def segment_hits_polygon(start, ends, poly: ConvexPolygon) -> np.ndarray:
    """Cyrus-Beck test of segments ``start -> ends[i]`` against a polygon."""
    s = np.asarray(start, dtype=float)[:2]
    e = np.asarray(ends, dtype=float).reshape(-1, 2)
    if poly.is_empty:
        return np.zeros(len(e), dtype=bool)
    d = e - s
    t0 = np.zeros(len(e))
    t1 = np.ones(len(e))
    ok = np.ones(len(e), dtype=bool)
    for hp in poly.halfplanes:
        num = -hp.value(s)
        den = d @ np.asarray(hp.normal)
        par = np.abs(den) < 1e-15
        ok &= ~(par & (num < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / den
        t0 = np.where(~par & (den < 0), np.maximum(t0, t), t0)
        t1 = np.where(~par & (den > 0), np.minimum(t1, t), t1)
    return ok & (t0 <= t1)
