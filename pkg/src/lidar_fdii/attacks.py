"""Spoofing attacks injected into a single victim's observation.

NEO fabricates an obstacle, PRA overwrites the returns behind a spoofed
cylinder with scattered noise, and AO marks a physical obstacle as
invisible to the object detector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import segment_hits_disk, segment_hits_polygon
from .scene import (
    INJECTED_ID,
    Cylinder,
    LidarConfig,
    Obstacle,
    Observation,
    Pose,
    Scene,
    _ray_directions,
    clamped_noise,
    raycast,
)

ATTACK_KINDS = ("none", "neo", "pra", "ao")


class AttackError(ValueError):
    pass


class OutOfView(AttackError):
    pass


class NothingToHide(AttackError):
    pass


class UnknownObstacle(AttackError, KeyError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """One attack on one victim.

    ``fake`` is used by NEO, ``noise`` by PRA (with an optional expected
    ``category``), ``target_id`` by AO.
    """

    kind: str = "none"
    victim: str = "A"
    seed: int = 0
    fake: Obstacle | None = None
    noise: Cylinder | None = None
    category: int | None = None
    target_id: int | None = None
    superpose: bool = False

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.kind == "neo" and self.fake is None:
            raise AttackError("NEO attack needs a fake obstacle")
        if self.kind == "pra" and self.noise is None:
            raise AttackError("PRA attack needs a noise cylinder")
        if self.kind == "ao" and self.target_id is None:
            raise AttackError("AO attack needs a target obstacle id")
        if self.category is not None and self.category not in (1, 2, 3):
            raise AttackError("PRA category must be 1, 2 or 3")


@dataclass(frozen=True, eq=False)
class TamperedObservation:
    observation: Observation
    injected_indices: np.ndarray
    spec: AttackSpec


def _append(obs: Observation, pts, beams, truth_id: int, undetectable: bool) -> Observation:
    n = len(pts)
    return replace(
        obs,
        points=np.vstack([obs.points, pts]),
        beams=np.concatenate([obs.beams, beams]),
        undetectable=np.concatenate([obs.undetectable, np.full(n, undetectable)]),
        truth_ids=np.concatenate([obs.truth_ids, np.full(n, truth_id, dtype=obs.truth_ids.dtype)]),
    )


def apply_neo(obs: Observation, fake: Obstacle, cfg: LidarConfig, seed: int,
              superpose: bool = False) -> TamperedObservation:
    """Inject the returns a real obstacle shaped like ``fake`` would give.

    The fake is ray-cast alone from the victim's pose over the sensor's beam
    grid, with the sensor's own clamped range noise drawn from ``seed``.
    Genuine returns on spoofed beams that lie behind the fake surface are
    dropped, since the spoofed echo arrives first; with ``superpose`` they
    are kept.
    """
    pose = obs.sensor_pose
    az, el = cfg.beam_grid()
    d = _ray_directions(pose, az, el)
    t, _ = raycast(Scene((fake,)), obs.sensor, d, ground=False)
    hit = np.isfinite(t) & (t <= cfg.max_range)
    if not hit.any():
        raise OutOfView(f"fake obstacle {fake.id} is not visible from the victim")

    ranges = obs.ranges()
    real_range = np.full(len(d), np.inf)
    valid = obs.beams >= 0
    real_range[obs.beams[valid]] = ranges[valid]
    hit &= t < real_range
    if not hit.any():
        raise OutOfView(f"fake obstacle {fake.id} is fully behind real returns")

    beams = np.flatnonzero(hit)
    rng = np.random.default_rng(seed)
    r = t[beams] + clamped_noise(rng, len(beams), cfg.noise_sigma, cfg.noise_bound)
    pts = obs.sensor + r[:, None] * d[beams]

    base = obs
    if not superpose:
        base = obs.subset(~np.isin(obs.beams, beams))
    out = _append(base, pts, beams, fake.id, fake.ao_flag)
    injected = np.arange(len(base), len(out))
    return TamperedObservation(out, injected, AttackSpec("neo", seed=seed, fake=fake, superpose=superpose))


def rays_through_disk(obs: Observation, center, radius: float) -> np.ndarray:
    """Mask of points whose sensor ray crosses a disk on the ground plane."""
    return segment_hits_disk(obs.sensor[:2], obs.points[:, :2], center, radius)


def apply_pra(obs: Observation, noise_cyl: Cylinder, seed: int) -> TamperedObservation:
    """Overwrite every return whose ray crosses ``noise_cyl`` with scatter.

    Replacement points are as many as the overwritten returns, uniform over
    the cylinder's volume. The detector never boxes them.
    """
    through = rays_through_disk(obs, noise_cyl.center, noise_cyl.radius)
    hidden = through & (obs.truth_ids >= 0)
    if not hidden.any():
        raise NothingToHide("no obstacle return lies behind the PRA cylinder")
    n = int(through.sum())
    rng = np.random.default_rng(seed)
    rad = noise_cyl.radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    ang = rng.uniform(0.0, 2 * math.pi, size=n)
    xy = np.asarray(noise_cyl.center) + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    z = rng.uniform(0.0, noise_cyl.height, size=n)
    base = obs.subset(~through)
    out = _append(base, np.column_stack([xy, z]), np.full(n, -1), INJECTED_ID, True)
    injected = np.arange(len(base), len(out))
    return TamperedObservation(out, injected, AttackSpec("pra", seed=seed, noise=noise_cyl))


def apply_ao(scene: Scene, target_id: int, flag: bool = True) -> Scene:
    """Return a copy of ``scene`` with the target's detector-invisibility set."""
    if target_id not in {o.id for o in scene.obstacles}:
        raise UnknownObstacle(target_id)
    obs = tuple(replace(o, ao_flag=flag) if o.id == target_id else o for o in scene.obstacles)
    return Scene(obs, scene.infrastructure)


def no_attack(obs: Observation) -> TamperedObservation:
    return TamperedObservation(obs, np.empty(0, dtype=np.int64), AttackSpec())


def apply_attack(spec: AttackSpec, obs: Observation, cfg: LidarConfig) -> TamperedObservation:
    """Dispatch observation-level attacks. AO acts on the scene instead."""
    if spec.kind == "neo":
        out = apply_neo(obs, spec.fake, cfg, spec.seed, spec.superpose)
    elif spec.kind == "pra":
        out = apply_pra(obs, spec.noise, spec.seed)
    else:
        return TamperedObservation(obs, np.empty(0, dtype=np.int64), spec)
    return TamperedObservation(out.observation, out.injected_indices, spec)


def _shadowed(helper: Pose, targets: np.ndarray, scene: Scene) -> np.ndarray:
    """Whether the straight line from the helper to each target is blocked."""
    blocked = np.zeros(len(targets), dtype=bool)
    for ob in scene.obstacles:
        if isinstance(ob.shape, Cylinder):
            blocked |= segment_hits_disk(helper.xy, targets, ob.center, ob.shape.radius)
        else:
            blocked |= segment_hits_polygon(helper.xy, targets, ob.shape.footprint())
    for infra in scene.infrastructure:
        blocked |= segment_hits_polygon(helper.xy, targets, infra.footprint)
    return blocked


def disk_samples(center, radius: float, spacing: float) -> np.ndarray:
    """Polar samples of a closed disk including its boundary circle."""
    cx, cy = center
    pts = [np.array([[cx, cy]])]
    n_rings = max(1, int(math.ceil(radius / spacing)))
    for k in range(1, n_rings + 1):
        rad = radius * k / n_rings
        m = max(6, int(math.ceil(2 * math.pi * rad / spacing)))
        a = 2 * math.pi * np.arange(m) / m
        pts.append(np.stack([cx + rad * np.cos(a), cy + rad * np.sin(a)], axis=1))
    return np.vstack(pts)


def classify_pra_ground_truth(spec: AttackSpec, scene: Scene, helper: Pose, cfg: LidarConfig,
                              spacing: float = 0.01) -> int:
    """Category of a PRA from the helper's line of sight to the noise cylinder.

    1: the whole footprint is visible, 2: part of it, 3: none of it. Each
    footprint sample is tested for an unobstructed segment to the helper
    and for lying within the helper's range.
    """
    if spec.kind != "pra":
        raise AttackError("ground-truth category only defined for PRA")
    cyl = spec.noise
    samples = disk_samples(cyl.center, cyl.radius, spacing)
    hidden = _shadowed(helper, samples, scene)
    hidden |= np.hypot(*(samples - helper.xy).T) > cfg.max_range
    if not hidden.any():
        return 1
    if hidden.all():
        return 3
    return 2


