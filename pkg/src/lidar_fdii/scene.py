"""Parametric world model and deterministic ray-cast LiDAR synthesis."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .geometry import ConvexPolygon, convex_hull

GROUND_ID = -1
INFRA_ID = -2
INJECTED_ID = -3


class SceneError(ValueError):
    pass


class SensorInsideObstacle(SceneError):
    pass


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float]
    radius: float
    height: float

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise SceneError("cylinder radius and height must be positive")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box standing on the ground."""

    center: tuple[float, float]
    half_extents: tuple[float, float]
    height: float

    def __post_init__(self):
        if min(self.half_extents) <= 0 or self.height <= 0:
            raise SceneError("box extents and height must be positive")

    def footprint(self) -> ConvexPolygon:
        (cx, cy), (hx, hy) = self.center, self.half_extents
        return ConvexPolygon(np.array([[cx - hx, cy - hy], [cx + hx, cy - hy],
                                       [cx + hx, cy + hy], [cx - hx, cy + hy]]))


Shape = Union[Cylinder, Box]


@dataclass(frozen=True)
class Obstacle:
    shape: Shape
    id: int
    ao_flag: bool = False

    @property
    def center(self) -> tuple[float, float]:
        return self.shape.center

    @property
    def height(self) -> float:
        return self.shape.height

    def footprint_distance(self, xy) -> np.ndarray:
        """Signed 2D distance from points to the footprint boundary."""
        p = np.asarray(xy, dtype=float).reshape(-1, 2)
        if isinstance(self.shape, Cylinder):
            return np.hypot(*(p - self.shape.center).T) - self.shape.radius
        q = np.abs(p - self.shape.center) - self.shape.half_extents
        outside = np.hypot(*np.maximum(q, 0.0).T)
        inside = np.minimum(np.maximum(q[:, 0], q[:, 1]), 0.0)
        return outside + inside

    def bounding_radius(self) -> float:
        if isinstance(self.shape, Cylinder):
            return self.shape.radius
        return math.hypot(*self.shape.half_extents)


@dataclass(frozen=True)
class Infrastructure:
    """Default-map structure (e.g. a wall): an extruded convex footprint."""

    footprint: ConvexPolygon
    height: float = 3.0


@dataclass(frozen=True)
class Scene:
    obstacles: tuple[Obstacle, ...] = ()
    infrastructure: tuple[Infrastructure, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "infrastructure", tuple(self.infrastructure))
        ids = [o.id for o in self.obstacles]
        if len(set(ids)) != len(ids):
            raise SceneError("obstacle ids must be unique")
        for i, a in enumerate(self.obstacles):
            for b in self.obstacles[i + 1:]:
                if footprints_overlap(a, b):
                    raise SceneError(f"obstacle footprints {a.id} and {b.id} overlap")

    def obstacle(self, obstacle_id: int) -> Obstacle:
        for o in self.obstacles:
            if o.id == obstacle_id:
                return o
        raise KeyError(obstacle_id)


def footprints_overlap(a: Obstacle, b: Obstacle) -> bool:
    if isinstance(a.shape, Cylinder) and isinstance(b.shape, Cylinder):
        d = math.dist(a.center, b.center)
        return d <= a.shape.radius + b.shape.radius
    if isinstance(a.shape, Box) and isinstance(b.shape, Box):
        (ax, ay), (ahx, ahy) = a.center, a.shape.half_extents
        (bx, by), (bhx, bhy) = b.center, b.shape.half_extents
        return abs(ax - bx) <= ahx + bhx and abs(ay - by) <= ahy + bhy
    cyl, box = (a, b) if isinstance(a.shape, Cylinder) else (b, a)
    return float(box.footprint_distance(cyl.center)[0]) <= cyl.shape.radius


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, -s], [s, c]])


def _default_vertical_angles() -> tuple[float, ...]:
    return tuple(float(a) for a in np.radians(np.linspace(-15.0, 15.0, 16)))


@dataclass(frozen=True)
class LidarConfig:
    """Spinning LiDAR layout and its noise / sampling bounds.

    ``noise_bound`` is the clamp on range noise (zeta_n); ``resolution_bound``
    bounds the gap between neighbouring returns on a surface (zeta_r).
    """

    vertical_angles: tuple[float, ...] = field(default_factory=_default_vertical_angles)
    horizontal_resolution: float = math.radians(0.4)
    max_range: float = 50.0
    sensor_height: float = 1.8
    noise_sigma: float = 0.01
    noise_bound: float = 0.02
    resolution_bound: float = 0.35

    def __post_init__(self):
        object.__setattr__(self, "vertical_angles", tuple(float(a) for a in self.vertical_angles))
        if self.horizontal_resolution <= 0:
            raise SceneError("horizontal_resolution must be positive")
        if self.max_range <= 0 or self.sensor_height <= 0:
            raise SceneError("max_range and sensor_height must be positive")
        if self.noise_sigma < 0 or self.noise_bound < 0:
            raise SceneError("noise parameters must be non-negative")
        if self.resolution_bound < self.max_range * self.horizontal_resolution:
            warnings.warn(
                f"resolution bound {self.resolution_bound:.3f} m is below "
                f"max_range * horizontal_resolution = {self.max_range * self.horizontal_resolution:.3f} m",
                stacklevel=2,
            )

    @property
    def channels(self) -> int:
        return len(self.vertical_angles)

    @property
    def n_azimuth(self) -> int:
        return int(round(2 * math.pi / self.horizontal_resolution))

    @property
    def zeta_h(self) -> float:
        return self.noise_bound + self.resolution_bound

    def beam_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Azimuth and elevation per beam, ordered by (channel, azimuth)."""
        az = np.arange(self.n_azimuth) * self.horizontal_resolution
        el = np.asarray(self.vertical_angles)
        azimuths = np.tile(az, len(el))
        elevations = np.repeat(el, len(az))
        return azimuths, elevations

    def scaled_noise(self, factor: float) -> "LidarConfig":
        return replace(self, noise_sigma=self.noise_sigma * factor, noise_bound=self.noise_bound * factor)


@dataclass(frozen=True, eq=False)
class Scan:
    """Polar returns of one sweep, ordered by (channel, azimuth).

    ``hit_ids`` and ``undetectable`` are simulator labels: the id of the
    surface each beam hit, and whether that surface is hidden from the
    object detector (adversarial objects). Perception only reads the latter.
    """

    ranges: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray
    beams: np.ndarray
    hit_ids: np.ndarray
    undetectable: np.ndarray
    pose: Pose
    config: LidarConfig

    def __len__(self) -> int:
        return len(self.ranges)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scan):
            return NotImplemented
        return (self.pose == other.pose and self.config == other.config
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("ranges", "azimuths", "elevations", "beams", "hit_ids", "undetectable")))

    def tobytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a).tobytes() for a in
                        (self.ranges, self.azimuths, self.elevations, self.beams, self.hit_ids, self.undetectable))


@dataclass(frozen=True, eq=False)
class Observation:
    """Cartesian points of a scan expressed in some frame.

    ``sensor`` is the sensor origin in that frame and travels with the
    points together with the sensor's noise and resolution bounds, so a
    receiving agent can rebuild occupied areas. ``truth_ids`` is simulator
    ground truth kept for test oracles only.
    """

    points: np.ndarray
    sensor: np.ndarray
    sensor_pose: Pose
    frame_pose: Pose
    beams: np.ndarray
    undetectable: np.ndarray
    truth_ids: np.ndarray
    max_range: float
    noise_bound: float
    resolution_bound: float

    def __len__(self) -> int:
        return len(self.points)

    @property
    def zeta_h(self) -> float:
        return self.noise_bound + self.resolution_bound

    def subset(self, mask) -> "Observation":
        mask = np.asarray(mask)
        return replace(self, points=self.points[mask], beams=self.beams[mask],
                       undetectable=self.undetectable[mask], truth_ids=self.truth_ids[mask])

    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points - self.sensor, axis=1)


# --------------------------------------------------------------------------
# ray casting


def _ray_directions(pose: Pose, azimuths, elevations) -> np.ndarray:
    ang = pose.heading + np.asarray(azimuths)
    ce = np.cos(elevations)
    return np.stack([ce * np.cos(ang), ce * np.sin(ang), np.sin(elevations)], axis=1)


def _hit_cylinder(o, d, cyl: Cylinder) -> np.ndarray:
    t_out = np.full(len(d), np.inf)
    f = o[:2] - np.asarray(cyl.center)
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (d[:, :2] @ f)
    c = f @ f - cyl.radius ** 2
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-15)
    with np.errstate(invalid="ignore", divide="ignore"):
        t1 = (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * np.where(a > 1e-15, a, 1.0))
    z = o[2] + t1 * d[:, 2]
    side = ok & (t1 > 0) & (z >= 0) & (z <= cyl.height)
    t_out[side] = t1[side]
    if o[2] > cyl.height:
        down = d[:, 2] < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (cyl.height - o[2]) / d[:, 2]
        xy = o[:2] + tc[:, None] * d[:, :2]
        cap = down & (np.hypot(*(xy - cyl.center).T) <= cyl.radius) & (tc > 0)
        t_out = np.where(cap, np.minimum(t_out, tc), t_out)
    return t_out


def _hit_prism(o, d, footprint: ConvexPolygon, height: float) -> np.ndarray:
    m = len(d)
    t0 = np.zeros(m)
    t1 = np.full(m, np.inf)
    ok = np.ones(m, dtype=bool)
    for hp in footprint.halfplanes:
        num = -hp.value(o[:2])
        den = d[:, :2] @ np.asarray(hp.normal)
        par = np.abs(den) < 1e-15
        ok &= ~(par & (num < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / den
        t0 = np.where(~par & (den < 0), np.maximum(t0, t), t0)
        t1 = np.where(~par & (den > 0), np.minimum(t1, t), t1)
    dz = d[:, 2]
    flat = np.abs(dz) < 1e-15
    ok &= ~(flat & ((o[2] < 0) | (o[2] > height)))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_top = (height - o[2]) / dz
        t_bot = -o[2] / dz
    up, down = dz > 0, dz < 0
    t1 = np.where(up, np.minimum(t1, t_top), t1)
    t0 = np.where(down, np.maximum(t0, t_top), t0)
    t1 = np.where(down, np.minimum(t1, t_bot), t1)
    hit = ok & (t0 <= t1) & (t0 > 0)
    return np.where(hit, t0, np.inf)


def _shape_hits(o, d, shape) -> np.ndarray:
    if isinstance(shape, Cylinder):
        return _hit_cylinder(o, d, shape)
    return _hit_prism(o, d, shape.footprint(), shape.height)


def raycast(scene: Scene, origin, directions, ground: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and surface id for each unit direction."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(directions, dtype=float)
    best = np.full(len(d), np.inf)
    ids = np.full(len(d), GROUND_ID, dtype=np.int64)
    if ground:
        down = d[:, 2] < 0
        with np.errstate(divide="ignore"):
            best = np.where(down, -o[2] / np.where(down, d[:, 2], -1.0), np.inf)
    for infra in scene.infrastructure:
        t = _hit_prism(o, d, infra.footprint, infra.height)
        closer = t < best
        best = np.where(closer, t, best)
        ids[closer] = INFRA_ID
    for ob in scene.obstacles:
        t = _shape_hits(o, d, ob.shape)
        closer = t < best
        best = np.where(closer, t, best)
        ids[closer] = ob.id
    return best, ids


def _check_sensor_outside(scene: Scene, xy) -> None:
    for ob in scene.obstacles:
        if float(ob.footprint_distance(xy)[0]) <= 0.0:
            raise SensorInsideObstacle(f"sensor at {tuple(xy)} is inside obstacle {ob.id}")
    for infra in scene.infrastructure:
        fp = infra.footprint
        if np.all(fp.normals @ np.asarray(xy) + fp.offsets <= 0):
            raise SensorInsideObstacle(f"sensor at {tuple(xy)} is inside infrastructure")


def clamped_noise(rng: np.random.Generator, n: int, sigma: float, bound: float) -> np.ndarray:
    """Gaussian range noise clamped to ``[-bound, bound]``."""
    draws = rng.standard_normal(n)
    return np.clip(draws * sigma, -bound, bound)


def cast_scan(scene: Scene, pose: Pose, cfg: LidarConfig, seed: int) -> Scan:
    """Ray-cast every (channel, azimuth) beam into the scene.

    Beams without a hit inside ``max_range`` are dropped. Range noise is
    drawn for every beam from ``seed`` so the result is a pure function of
    its arguments.
    """
    _check_sensor_outside(scene, (pose.x, pose.y))
    az, el = cfg.beam_grid()
    d = _ray_directions(pose, az, el)
    origin = np.array([pose.x, pose.y, cfg.sensor_height])
    t, ids = raycast(scene, origin, d)
    rng = np.random.default_rng(seed)
    noise = clamped_noise(rng, len(d), cfg.noise_sigma, cfg.noise_bound)
    keep = np.isfinite(t) & (t <= cfg.max_range)
    ranges = t + noise
    keep &= ranges > 0
    ao_ids = np.array([o.id for o in scene.obstacles if o.ao_flag], dtype=np.int64)
    beams = np.arange(len(d))[keep]
    return Scan(
        ranges=ranges[keep],
        azimuths=az[keep],
        elevations=el[keep],
        beams=beams,
        hit_ids=ids[keep],
        undetectable=np.isin(ids[keep], ao_ids),
        pose=pose,
        config=cfg,
    )


def to_frame(points, frame_pose: Pose) -> np.ndarray:
    """Express world-frame points in the frame located at ``frame_pose``."""
    p = np.asarray(points, dtype=float).reshape(-1, 3).copy()
    rot = frame_pose.rotation()
    p[:, :2] = (p[:, :2] - frame_pose.xy) @ rot
    return p


def to_observation(scan: Scan, target_pose: Pose | None = None) -> Observation:
    """Polar-to-Cartesian conversion, then a rigid move into ``target_pose``'s frame.

    The default target is the shared map frame (identity pose), which is
    the frame every agent uses when it reasons about its neighbours.
    """
    target = target_pose if target_pose is not None else Pose(0.0, 0.0, 0.0)
    h = scan.config.sensor_height
    ce = np.cos(scan.elevations)
    local = np.stack([
        scan.ranges * ce * np.cos(scan.azimuths),
        scan.ranges * ce * np.sin(scan.azimuths),
        scan.ranges * np.sin(scan.elevations) + h,
    ], axis=1)
    world = local.copy()
    world[:, :2] = local[:, :2] @ scan.pose.rotation().T + scan.pose.xy
    pts = to_frame(world, target)
    sensor = to_frame([[scan.pose.x, scan.pose.y, h]], target)[0]
    sensor_pose = Pose(float(sensor[0]), float(sensor[1]), scan.pose.heading - target.heading)
    return Observation(
        points=pts,
        sensor=sensor,
        sensor_pose=sensor_pose,
        frame_pose=target,
        beams=scan.beams.copy(),
        undetectable=scan.undetectable.copy(),
        truth_ids=scan.hit_ids.copy(),
        max_range=scan.config.max_range,
        noise_bound=scan.config.noise_bound,
        resolution_bound=scan.config.resolution_bound,
    )


def write_observation_csv(obs: Observation, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"])
        for x, y, z in obs.points.tolist():
            w.writerow([repr(x), repr(y), repr(z)])


# --------------------------------------------------------------------------
# surface sampling


def _grid(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def sample_obstacle_surface(ob: Obstacle, density: float) -> np.ndarray:
    """Quasi-uniform samples of an obstacle's lateral surface and top.

    ``density`` is in points per square metre; the output is deterministic.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    s = 1.0 / math.sqrt(density)
    shape = ob.shape
    h = shape.height
    nz = max(1, round(h / s))
    zs = _grid(nz) * h
    if isinstance(shape, Cylinder):
        cx, cy = shape.center
        r = shape.radius
        nt = max(3, round(2 * math.pi * r / s))
        th = 2 * math.pi * np.arange(nt) / nt
        ring = np.stack([cx + r * np.cos(th), cy + r * np.sin(th)], axis=1)
        side = np.column_stack([np.repeat(ring, nz, axis=0), np.tile(zs, nt)])
        tops = []
        nr = max(1, round(r / s))
        for rad in _grid(nr) * r:
            k = max(1, round(2 * math.pi * rad / s))
            a = 2 * math.pi * (np.arange(k) + 0.5) / k
            tops.append(np.stack([cx + rad * np.cos(a), cy + rad * np.sin(a), np.full(k, h)], axis=1))
        return np.vstack([side] + tops)

    (cx, cy), (hx, hy) = shape.center, shape.half_extents
    faces = []
    nx = max(1, round(2 * hx / s))
    ny = max(1, round(2 * hy / s))
    xs = cx - hx + _grid(nx) * 2 * hx
    ys = cy - hy + _grid(ny) * 2 * hy
    for y in (cy - hy, cy + hy):
        faces.append(np.column_stack([np.repeat(xs, nz), np.full(nx * nz, y), np.tile(zs, nx)]))
    for x in (cx - hx, cx + hx):
        faces.append(np.column_stack([np.full(ny * nz, x), np.repeat(ys, nz), np.tile(zs, ny)]))
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    faces.append(np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, h)]))
    return np.vstack(faces)


def surface_area(ob: Obstacle) -> float:
    """Lateral plus top area, matching what ``sample_obstacle_surface`` covers."""
    shape = ob.shape
    if isinstance(shape, Cylinder):
        return 2 * math.pi * shape.radius * shape.height + math.pi * shape.radius ** 2
    hx, hy = shape.half_extents
    return 4 * (hx + hy) * shape.height + 4 * hx * hy


def footprint_polygon(ob: Obstacle, segments: int = 64) -> ConvexPolygon:
    """Polygonal footprint (a circumscribed polygon for cylinders)."""
    if isinstance(ob.shape, Box):
        return ob.shape.footprint()
    r = ob.shape.radius / math.cos(math.pi / segments)
    a = 2 * math.pi * np.arange(segments) / segments
    return convex_hull(np.stack([ob.center[0] + r * np.cos(a), ob.center[1] + r * np.sin(a)], axis=1))


def pedestrian(center: Sequence[float], id: int = 0, radius: float = 0.3, height: float = 1.7,
               ao_flag: bool = False) -> Obstacle:
    return Obstacle(Cylinder((float(center[0]), float(center[1])), radius, height), id, ao_flag)
