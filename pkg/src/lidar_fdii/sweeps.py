"""Seeded randomized scene families and the property sweeps run on them.

Families: ``free`` (no attack), ``neo``, ``pra1``/``pra2``/``pra3``
(targeted helper visibility of the noise cylinder) and ``ao``. Every
generator keeps obstacles angularly separated from each agent, so no
obstacle sits in another's occupied area, and enforces clearance bands
around the labelled PRA category so labels are not borderline.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attacks import AttackSpec, apply_attack, classify_pra_ground_truth, disk_samples, _shadowed
from .fdii import run_decision_tree, unsafe_region
from .geometry import contains_with_margin, intersect_convex
from .perception import PerceptionConfig, occupied_area, perceive, perceive_one
from .scene import (
    Box,
    Cylinder,
    LidarConfig,
    Obstacle,
    Pose,
    Scene,
    cast_scan,
    footprint_polygon,
    sample_obstacle_surface,
    to_observation,
)

FAMILIES = ("free", "neo", "pra1", "pra2", "pra3", "ao")
EXPECTED = {"free": "no_attack", "neo": "NEO", "ao": "PRA3_or_AO"}
PRA_LABEL = {1: "PRA1", 2: "PRA2", 3: "PRA3_or_AO"}

SURFACE_DENSITY = 400.0  # samples per square metre (5 cm spacing)
SECTOR_MARGIN = 0.7  # metres added to the bounding radius in the separation test
CLEAR_LOS = 1.0  # metres of line-of-sight clearance for "clearly visible"
PARTIAL_CLEAR_LOS = 0.6  # looser band when the helper looks past the hidden obstacle
FAMILY_SHARE = 0.15


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Case:
    family: str
    seed: int
    scene: Scene
    agents: dict
    attack: AttackSpec
    expected: str
    fake: Obstacle | None = None
    fragmented: int = 0


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def random_obstacle(rng, center, oid: int, size=(0.2, 0.8), height=(1.0, 1.75)) -> Obstacle:
    h = float(rng.uniform(*height))
    c = (float(center[0]), float(center[1]))
    if rng.random() < 0.5:
        return Obstacle(Cylinder(c, float(rng.uniform(*size)), h), oid)
    return Obstacle(Box(c, (float(rng.uniform(*size)), float(rng.uniform(*size))), h), oid)


def _sector(pos, center, radius: float, margin: float) -> tuple[float, float]:
    d = math.dist(pos, center)
    half = math.asin(min(1.0, (radius + margin) / d)) if d > 0 else math.pi
    return math.atan2(center[1] - pos[1], center[0] - pos[0]), half


def sectors_clear(pos, discs, margin: float = SECTOR_MARGIN) -> bool:
    """No two (center, radius) discs overlap in bearing as seen from ``pos``."""
    secs = [_sector(pos, c, r, margin) for c, r in discs]
    for i in range(len(secs)):
        for j in range(i + 1, len(secs)):
            gap = abs((secs[i][0] - secs[j][0] + math.pi) % (2 * math.pi) - math.pi)
            if gap <= secs[i][1] + secs[j][1]:
                return False
    return True


def _disc(ob: Obstacle) -> tuple[tuple[float, float], float]:
    return ob.center, ob.bounding_radius()


def los_clearance(start, ends: np.ndarray, discs) -> np.ndarray:
    """Smallest distance from each segment start->end to any disc boundary."""
    s = np.asarray(start, dtype=float)
    out = np.full(len(ends), np.inf)
    for c, r in discs:
        d = ends - s
        t = np.clip(((np.asarray(c) - s) @ d.T) / np.maximum((d * d).sum(axis=1), 1e-12), 0.0, 1.0)
        near = s + t[:, None] * d
        out = np.minimum(out, np.hypot(*(near - c).T) - r)
    return out


def _polar(pos, dist, ang):
    return (pos[0] + dist * math.cos(ang), pos[1] + dist * math.sin(ang))


def _place_obstacles(rng, agents: list, n: int, first_id: int, keep: list, rng_range=(5.0, 12.0),
                     tries: int = 200, extra_discs: list = ()) -> list[Obstacle] | None:
    """Add ``n`` obstacles within ``rng_range`` of every agent, sector-separated."""
    placed = list(keep)
    mid = np.mean([a.xy for a in agents], axis=0)
    for k in range(n):
        for _ in range(tries):
            c = mid + rng.uniform(-12.0, 12.0, size=2)
            ob = random_obstacle(rng, c, first_id + k)
            if not all(rng_range[0] <= math.dist(a.xy, c) <= rng_range[1] for a in agents):
                continue
            discs = [_disc(o) for o in placed + [ob]] + list(extra_discs)
            if all(sectors_clear(tuple(a.xy), discs) for a in agents):
                placed.append(ob)
                break
        else:
            return None
    return placed[len(keep):]


def _two_agents(rng) -> dict:
    a = Pose(0.0, 0.0, float(rng.uniform(-math.pi, math.pi)))
    d = float(rng.uniform(8.0, 16.0))
    ang = float(rng.uniform(-math.pi, math.pi))
    b = Pose(d * math.cos(ang), d * math.sin(ang), float(rng.uniform(-math.pi, math.pi)))
    return {"A": a, "B": b}


def _build_free(rng, family: str, seed: int) -> Case | None:
    agents = _two_agents(rng)
    obs = _place_obstacles(rng, list(agents.values()), int(rng.integers(1, 4)), 0, [])
    if obs is None:
        return None
    spec = AttackSpec()
    if family == "ao":
        target = int(rng.integers(len(obs)))
        obs[target] = replace(obs[target], ao_flag=True)
        spec = AttackSpec("ao", target_id=obs[target].id)
    return Case(family, seed, Scene(tuple(obs)), agents, spec, EXPECTED[family])


def _build_neo(rng, family: str, seed: int) -> Case | None:
    agents = _two_agents(rng)
    A, B = agents["A"], agents["B"]
    fake = None
    for _ in range(200):
        c = _polar(A.xy, rng.uniform(6.0, 11.0), rng.uniform(-math.pi, math.pi))
        cand = random_obstacle(rng, c, 100)
        if 5.0 <= math.dist(B.xy, c) <= 25.0:
            fake = cand
            break
    if fake is None:
        return None
    real = _place_obstacles(rng, [A, B], int(rng.integers(0, 3)), 0, [], extra_discs=[_disc(fake)])
    if real is None:
        return None
    if any(math.dist(o.center, fake.center) < o.bounding_radius() + fake.bounding_radius() + 2.0 for o in real):
        return None
    return Case("neo", seed, Scene(tuple(real)), agents, AttackSpec("neo", fake=fake), "NEO", fake)


def _visibility(helper: Pose, noise: Cylinder, scene: Scene, clearance: float, spacing: float = 0.05):
    samples = disk_samples(noise.center, noise.radius, spacing)
    blocked = _shadowed(helper, samples, scene)
    clear = los_clearance(helper.xy, samples, [_disc(o) for o in scene.obstacles]) > clearance
    return samples, blocked, clear


def _shadow_reaches(helper: Pose, ob: Obstacle, noise: Cylinder, cfg: LidarConfig) -> bool:
    """The hidden obstacle's shadow from the helper reaches past the noise disk."""
    d = math.dist(helper.xy, ob.center) - ob.bounding_radius()
    top = min(ob.height, cfg.sensor_height - 0.3)
    reach = d * cfg.sensor_height / (cfg.sensor_height - top)
    return reach >= math.dist(helper.xy, noise.center) + noise.radius + 1.0


def _build_pra(rng, family: str, seed: int, cfg: LidarConfig = LidarConfig()) -> Case | None:
    category = int(family[-1])
    A = Pose(0.0, 0.0, float(rng.uniform(-math.pi, math.pi)))
    phi = float(rng.uniform(-math.pi, math.pi))
    r = float(rng.uniform(0.3, 0.8) if category == 3 else rng.uniform(0.5, 1.5))
    dd = float(rng.uniform(6.0, 9.0))
    noise = Cylinder(_polar(A.xy, dd, phi), r, float(rng.uniform(1.2, 1.75)))
    hid = random_obstacle(rng, (0.0, 0.0), 0, size=(0.2, 0.5), height=(1.2, 1.75))
    do = dd + r + hid.bounding_radius() + float(rng.uniform(1.0, 4.0))
    if math.asin(hid.bounding_radius() / do) > math.asin(r / dd) - 0.02:
        return None
    hid = replace(hid, shape=replace(hid.shape, center=_polar(A.xy, do, phi)))

    if category == 1:
        ang = phi + float(rng.choice([-1, 1]) * rng.uniform(0.6, 2.2))
        B = Pose(*_polar(hid.center, float(rng.uniform(5.0, 11.0)), ang), float(rng.uniform(-math.pi, math.pi)))
    elif category == 2:
        ang = phi + float(rng.choice([-1, 1]) * rng.uniform(0.02, 0.25))
        B = Pose(*_polar(hid.center, float(rng.uniform(5.0, 10.0)), ang), float(rng.uniform(-math.pi, math.pi)))
    else:
        ang = phi + float(rng.uniform(-0.02, 0.02))
        B = Pose(*_polar(hid.center, float(rng.uniform(4.0, 9.0)), ang), float(rng.uniform(-math.pi, math.pi)))
    if not 4.0 <= math.dist(B.xy, hid.center) <= 12.0 or math.dist(B.xy, noise.center) < noise.radius + 3.0:
        return None
    extra = _place_obstacles(rng, [A, B], int(rng.integers(0, 2)), 1, [hid],
                             extra_discs=[(noise.center, noise.radius)])
    if extra is None:
        return None
    scene = Scene((hid, *extra))
    spec = AttackSpec("pra", noise=noise, category=category)
    truth = classify_pra_ground_truth(spec, scene, B, cfg, spacing=0.05)
    if truth != category:
        return None
    _, blocked, clear = _visibility(B, noise, scene, CLEAR_LOS if category == 1 else PARTIAL_CLEAR_LOS)
    reach = _shadow_reaches(B, hid, noise, cfg)
    if category == 1 and not clear.all():
        return None
    if category == 2 and not (clear.mean() >= FAMILY_SHARE and blocked.mean() >= FAMILY_SHARE and reach):
        return None
    if category == 3 and not reach:
        return None
    return Case(family, seed, scene, {"A": A, "B": B}, spec, PRA_LABEL[truth])


_BUILDERS = {"free": _build_free, "ao": _build_free, "neo": _build_neo,
             "pra1": _build_pra, "pra2": _build_pra, "pra3": _build_pra}


def detector_complete(case: Case, cfg: LidarConfig = LidarConfig()) -> bool:
    """Whether the clustering detector boxes every real obstacle whole.

    Runs on clean scans of the scene with adversarial flags cleared, so
    any residual point there is a fragment of a real obstacle. For NEO the
    victim's scan carries the same injection the run will apply, so the
    fake must box whole as well.
    """
    clean = Scene(tuple(replace(o, ao_flag=False) for o in case.scene.obstacles))
    seeds = _scan_seeds(case)
    for name, s in zip(case.agents, seeds):
        obs = to_observation(cast_scan(clean, case.agents[name], cfg, int(s)))
        if case.attack.kind == "neo" and name == case.attack.victim:
            obs = apply_attack(replace(case.attack, seed=int(seeds[-1])), obs, cfg).observation
        if len(perceive_one(name, obs).residual_points):
            return False
    return True


def generate(family: str, seed: int, max_attempts: int = 400) -> Case:
    """Deterministic scene of ``family`` for ``seed``.

    Draws are retried until the geometric constraints of the family hold
    and the detector boxes every real obstacle whole; the number of
    rejections for the second reason is kept on the case.
    """
    if family not in _BUILDERS:
        raise ValueError(f"unknown family {family!r}")
    fragmented = 0
    for attempt in range(max_attempts):
        rng = _rng(seed, attempt, FAMILIES.index(family))
        case = _BUILDERS[family](rng, family, seed)
        if case is None:
            continue
        if not detector_complete(case):
            fragmented += 1
            continue
        return replace(case, fragmented=fragmented)
    raise GenerationError(f"{family} seed {seed}: no valid scene")


def _scan_seeds(case: Case) -> np.ndarray:
    return np.random.SeedSequence([case.seed, 7]).generate_state(len(case.agents) + 1)


@dataclass(frozen=True, eq=False)
class CaseResult:
    case: Case
    perceptions: dict
    verdict: object
    region: object

    @property
    def label(self) -> str:
        return self.verdict.label

    @property
    def correct(self) -> bool:
        return self.label == self.case.expected


def run_case(case: Case, cfg: LidarConfig = LidarConfig(), pcfg: PerceptionConfig | None = None) -> CaseResult:
    scene = case.scene
    if case.attack.kind == "ao":
        from .attacks import apply_ao

        scene = apply_ao(scene, case.attack.target_id)
    seeds = _scan_seeds(case)
    obs = {name: to_observation(cast_scan(scene, pose, cfg, int(s)))
           for (name, pose), s in zip(case.agents.items(), seeds)}
    if case.attack.kind in ("neo", "pra"):
        spec = replace(case.attack, seed=int(seeds[-1]))
        obs["A"] = apply_attack(spec, obs["A"], cfg).observation
    pcfg = pcfg or PerceptionConfig()
    ps = perceive("A", obs, pcfg)
    others = [p for n, p in ps.items() if n != "A"]
    verdict = run_decision_tree(ps["A"], others)
    return CaseResult(case, ps, verdict, unsafe_region(ps["A"], others, verdict))


# ---------------------------------------------------------------------------
# occupied-area containment


def gen_single_agent(seed: int) -> tuple[Pose, Scene]:
    for attempt in range(100):
        rng = _rng(seed, attempt, 99)
        A = Pose(0.0, 0.0, float(rng.uniform(-math.pi, math.pi)))
        obs = _place_obstacles(rng, [A], int(rng.integers(1, 5)), 0, [], rng_range=(5.0, 13.0))
        if obs is not None:
            return A, Scene(tuple(obs))
    raise GenerationError(f"occupancy seed {seed}: no valid scene")


def occupancy_case(seed: int, cfg: LidarConfig = LidarConfig()) -> dict:
    """Check every surface sample of every visible obstacle lies in the
    occupied area built from that obstacle's returns (margin zeta_h)."""
    pose, scene = gen_single_agent(seed)
    obs = to_observation(cast_scan(scene, pose, cfg, seed))
    n_obst = n_samples = n_out = 0
    for ob in scene.obstacles:
        pts = obs.points[obs.truth_ids == ob.id]
        if len(pts) == 0:
            continue
        area = occupied_area(obs.sensor, pts, obs.zeta_h, obs.max_range)
        xy = sample_obstacle_surface(ob, SURFACE_DENSITY)[:, :2]
        inside = contains_with_margin(area, xy, obs.zeta_h)
        n_obst += 1
        n_samples += len(xy)
        n_out += int((~inside).sum())
    return {"seed": seed, "obstacles": n_obst, "samples": n_samples, "outside": n_out, "ok": n_out == 0}


def occupancy_sweep(n: int = 500, seed0: int = 0) -> dict:
    t0 = time.perf_counter()
    rows = [occupancy_case(seed0 + i) for i in range(n)]
    ok = sum(r["ok"] for r in rows)
    return {"rows": rows, "passed": ok == n,
            "summary": {"kind": "occupancy", "scenes": n, "passing": ok,
                        "samples": sum(r["samples"] for r in rows),
                        "outside": sum(r["outside"] for r in rows),
                        "seconds": round(time.perf_counter() - t0, 2)}}


# ---------------------------------------------------------------------------
# unsafe-region coverage


def coverage_check(res: CaseResult) -> dict:
    pa, pb = res.perceptions["A"], res.perceptions["B"]
    checked = covered = 0
    for ob in res.case.scene.obstacles:
        fp = sample_obstacle_surface(ob, SURFACE_DENSITY)[:, :2]
        joint = contains_with_margin(pa.scan_area, fp, 0.0) & contains_with_margin(pb.scan_area, fp, 0.0)
        if not joint.all():
            continue
        checked += 1
        covered += bool(res.region.contains(fp).all())
    fake_excluded = None
    if res.case.fake is not None:
        fp = footprint_polygon(res.case.fake)
        fake_excluded = all(intersect_convex(fp, p).is_empty for p in res.region.polygons)
    ok = covered == checked and fake_excluded is not False
    return {"family": res.case.family, "seed": res.case.seed, "checked": checked, "covered": covered,
            "fake_excluded": fake_excluded, "ok": ok}


def coverage_sweep(n: int = 500, seed0: int = 0, families=FAMILIES) -> dict:
    t0 = time.perf_counter()
    rows = []
    for i in range(n):
        fam = families[i % len(families)]
        rows.append(coverage_check(run_case(generate(fam, seed0 + i))))
    neo = [r for r in rows if r["fake_excluded"] is not None]
    ok = sum(r["ok"] for r in rows)
    return {"rows": rows, "passed": ok == n,
            "summary": {"kind": "coverage", "scenes": n, "passing": ok,
                        "obstacles_checked": sum(r["checked"] for r in rows),
                        "obstacles_covered": sum(r["covered"] for r in rows),
                        "neo_scenes": len(neo), "neo_excluded": sum(bool(r["fake_excluded"]) for r in neo),
                        "seconds": round(time.perf_counter() - t0, 2)}}


# ---------------------------------------------------------------------------
# classification


def classification_sweep(n: int = 500, seed0: int = 0, noise_scale: float = 1.0,
                         families=FAMILIES) -> dict:
    """Run ``n`` scenes per family; perception keeps the nominal margin so
    that noise scales above 1 probe robustness beyond the design bound."""
    t0 = time.perf_counter()
    base = LidarConfig()
    cfg = base.scaled_noise(noise_scale) if noise_scale != 1.0 else base
    pcfg = PerceptionConfig(zeta_h=base.zeta_h)
    rows, details = [], []
    for fam in families:
        confusion: dict = {}
        wrong = rejected = 0
        for i in range(n):
            case = generate(fam, seed0 + i)
            rejected += case.fragmented
            label = run_case(case, cfg, pcfg).label
            confusion[label] = confusion.get(label, 0) + 1
            if label != case.expected:
                wrong += 1
                details.append({"family": fam, "seed": seed0 + i, "expected": case.expected, "got": label})
        rows.append({"family": fam, "noise_scale": noise_scale, "n": n, "misclassified": wrong,
                     "fragmented_rejected": rejected, "confusion": ";".join(f"{k}={v}" for k, v in sorted(confusion.items()))})
    total = sum(r["misclassified"] for r in rows)
    return {"rows": rows, "details": details, "passed": total == 0,
            "summary": {"kind": "classification", "noise_scale": noise_scale, "per_family": n,
                        "misclassified": total, "seconds": round(time.perf_counter() - t0, 2)}}


def robustness_table(n: int = 500, seed0: int = 0, scales=(1.0, 2.0, 4.0)) -> dict:
    runs = [classification_sweep(n, seed0, s) for s in scales]
    rows = [r for run in runs for r in run["rows"]]
    return {"rows": rows, "details": [d for run in runs for d in run["details"]],
            "passed": runs[0]["passed"],
            "summary": {"kind": "robustness", "per_family": n,
                        "misclassified": {f"x{s:g}": run["summary"]["misclassified"] for s, run in zip(scales, runs)}}}


def run_named(kind: str, n: int = 500, seed: int = 0, out_dir: Path | None = None) -> dict:
    from .scenario import rows_to_csv, write_json

    fn = {"occupancy": occupancy_sweep, "coverage": coverage_sweep,
          "classification": classification_sweep, "robustness": robustness_table}[kind]
    result = fn(n, seed)
    if out_dir is not None:
        out_dir = Path(out_dir)
        rows = result["rows"]
        (out_dir / f"{kind}.csv").write_text(rows_to_csv(rows, rows[0].keys()))
        summary = {k: v for k, v in result["summary"].items() if k != "seconds"}
        write_json(out_dir / f"{kind}.json", {"summary": summary, "details": result.get("details", [])})
        if kind == "robustness":
            from .plotting import plot_robustness

            plot_robustness(out_dir / "robustness.svg", rows)
    return result
