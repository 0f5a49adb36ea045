"""Scenario files and the end-to-end runner.

A scenario is a JSON document: scene, agents with poses and LiDAR
settings, one attack, perception and MPC settings, an optional
reach-and-avoid task and a mandatory seed. Units are spelled out in the
field names (``_m``, ``_rad``, ``_s``, ``_mps``).
"""
from __future__ import annotations

import copy
import csv
import glob as _glob
import io
import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import __version__
from .attacks import AttackSpec, apply_ao, apply_attack
from .control import ClosedLoopResult, MpcConfig, run_closed_loop, write_trajectory_csv
from .fdii import UnsafeRegion, run_decision_tree, unsafe_region, write_constraints_csv, write_region_csv
from .geometry import ConvexPolygon
from .perception import PerceptionConfig, perceive
from .regions import drive_region
from .scene import (
    Box,
    Cylinder,
    Infrastructure,
    LidarConfig,
    Obstacle,
    Pose,
    Scene,
    cast_scan,
    to_observation,
    write_observation_csv,
)


class SchemaError(ValueError):
    pass


class PipelineError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


class SuiteError(RuntimeError):
    pass


_XY = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_OBSTACLE = {
    "type": "object",
    "required": ["id", "shape", "center_m"],
    "additionalProperties": False,
    "properties": {
        "id": {"type": "integer"},
        "shape": {"enum": ["cylinder", "box"]},
        "center_m": _XY,
        "radius_m": {"type": "number", "exclusiveMinimum": 0},
        "half_extents_m": {**_XY, "items": {"type": "number", "exclusiveMinimum": 0}},
        "height_m": {"type": "number", "exclusiveMinimum": 0},
        "adversarial": {"type": "boolean"},
    },
}
_LIDAR = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "vertical_angles_rad": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "horizontal_resolution_rad": {"type": "number", "exclusiveMinimum": 0},
        "max_range_m": {"type": "number", "exclusiveMinimum": 0},
        "sensor_height_m": {"type": "number", "exclusiveMinimum": 0},
        "noise_sigma_m": {"type": "number", "minimum": 0},
        "noise_bound_m": {"type": "number", "minimum": 0},
        "resolution_bound_m": {"type": "number", "minimum": 0},
    },
}
SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["name", "seed"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "ego": {"type": "string"},
        "scene": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "obstacles": {"type": "array", "items": _OBSTACLE},
                "infrastructure": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["footprint_m"],
                        "additionalProperties": False,
                        "properties": {
                            "footprint_m": {"type": "array", "items": _XY, "minItems": 3},
                            "height_m": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                },
            },
        },
        "agents": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "x_m", "y_m"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "x_m": {"type": "number"},
                    "y_m": {"type": "number"},
                    "heading_rad": {"type": "number"},
                    "lidar": _LIDAR,
                },
            },
        },
        "attack": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["none", "neo", "pra", "ao"]},
                "victim": {"type": "string"},
                "fake": _OBSTACLE,
                "noise": {
                    "type": "object",
                    "required": ["center_m", "radius_m", "height_m"],
                    "additionalProperties": False,
                    "properties": {
                        "center_m": _XY,
                        "radius_m": {"type": "number", "exclusiveMinimum": 0},
                        "height_m": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
                "category": {"enum": [1, 2, 3]},
                "target_id": {"type": "integer"},
                "superpose": {"type": "boolean"},
            },
        },
        "perception": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ground_threshold_m": {"type": "number", "exclusiveMinimum": 0},
                "zeta_h_m": {"type": ["number", "null"], "minimum": 0},
                "cluster_distance_m": {"type": "number", "exclusiveMinimum": 0},
                "min_cluster_size": {"type": "integer", "minimum": 1},
                "box_padding_m": {"type": "number", "minimum": 0},
            },
        },
        "mpc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": {"type": "integer", "minimum": 1},
                "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "dt_s": {"type": "number", "exclusiveMinimum": 0},
                "u_max_mps": {"type": "number", "exclusiveMinimum": 0},
                "consistent_discretization": {"type": "boolean"},
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "task": {
            "type": "object",
            "required": ["start_m", "goal_m"],
            "additionalProperties": False,
            "properties": {
                "start_m": _XY,
                "goal_m": _XY,
                "max_steps": {"type": "integer", "minimum": 0},
                "goal_tolerance_m": {"type": "number", "exclusiveMinimum": 0},
                "plant": {"enum": ["linear", "bicycle"]},
                "region": {"enum": ["fdii", "drive"]},
            },
        },
        "expected": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "label": {"type": "string"},
                "attacked": {"type": "boolean"},
                "pra_category": {"type": ["integer", "null"]},
                "region_nonempty": {"type": "boolean"},
                "region_contains_m": {"type": "array", "items": _XY},
                "reached": {"type": "boolean"},
                "min_hbar_nonnegative": {"type": "boolean"},
            },
        },
    },
}


@dataclass(frozen=True)
class Task:
    start: tuple[float, float]
    goal: tuple[float, float]
    max_steps: int = 2000
    goal_tolerance: float = 0.5
    plant: str = "linear"
    region: str = "fdii"


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    seed: int
    scene: Scene
    agents: dict  # id -> (Pose, LidarConfig)
    ego: str
    attack: AttackSpec
    perception: PerceptionConfig
    mpc: MpcConfig
    task: Task | None
    expected: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "Scenario":
        raw = dict(self.raw, seed=int(seed))
        return load_scenario(raw)


def _obstacle(d: dict) -> Obstacle:
    center = tuple(d.get("center_m", (0.0, 0.0)))
    if d["shape"] == "cylinder":
        if "radius_m" not in d:
            raise SchemaError(f"cylinder obstacle {d['id']} needs radius_m")
        shape = Cylinder(center, d["radius_m"], d.get("height_m", 1.7))
    else:
        if "half_extents_m" not in d:
            raise SchemaError(f"box obstacle {d['id']} needs half_extents_m")
        shape = Box(center, tuple(d["half_extents_m"]), d.get("height_m", 1.5))
    return Obstacle(shape, d["id"], d.get("adversarial", False))


def _lidar(d: dict | None) -> LidarConfig:
    d = d or {}
    kw = {}
    names = {
        "vertical_angles_rad": "vertical_angles",
        "horizontal_resolution_rad": "horizontal_resolution",
        "max_range_m": "max_range",
        "sensor_height_m": "sensor_height",
        "noise_sigma_m": "noise_sigma",
        "noise_bound_m": "noise_bound",
        "resolution_bound_m": "resolution_bound",
    }
    for k, v in d.items():
        kw[names[k]] = tuple(v) if isinstance(v, list) else v
    return LidarConfig(**kw)


def load_scenario(source) -> Scenario:
    """Parse and validate a scenario from a path, JSON string or dict."""
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        p = Path(source)
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{p}: invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise SchemaError(f"{loc}: {exc.message}") from exc

    try:
        sc = raw.get("scene", {})
        infra = tuple(
            Infrastructure(_footprint(i["footprint_m"]), i.get("height_m", 3.0))
            for i in sc.get("infrastructure", [])
        )
        scene = Scene(tuple(_obstacle(o) for o in sc.get("obstacles", [])), infra)
        agents = {}
        for a in raw.get("agents", []):
            if a["id"] in agents:
                raise SchemaError(f"duplicate agent id {a['id']!r}")
            agents[a["id"]] = (Pose(a["x_m"], a["y_m"], a.get("heading_rad", 0.0)), _lidar(a.get("lidar")))
        ego = raw.get("ego", next(iter(agents), "A"))
        if agents and ego not in agents:
            raise SchemaError(f"ego {ego!r} is not an agent")
        at = raw.get("attack", {"kind": "none"})
        attack = AttackSpec(
            kind=at["kind"],
            victim=at.get("victim", ego),
            seed=0,
            fake=_obstacle(at["fake"]) if "fake" in at else None,
            noise=Cylinder(tuple(at["noise"]["center_m"]), at["noise"]["radius_m"], at["noise"]["height_m"])
            if "noise" in at else None,
            category=at.get("category"),
            target_id=at.get("target_id"),
            superpose=at.get("superpose", False),
        )
        if attack.kind != "none" and attack.victim not in agents:
            raise SchemaError(f"attack victim {attack.victim!r} is not an agent")
        pc = raw.get("perception", {})
        perception = PerceptionConfig(
            ground_threshold=pc.get("ground_threshold_m", 0.1),
            zeta_h=pc.get("zeta_h_m"),
            cluster_distance=pc.get("cluster_distance_m", 0.5),
            min_cluster_size=pc.get("min_cluster_size", 5),
            box_padding=pc.get("box_padding_m", 0.1),
        )
        mc = raw.get("mpc", {})
        mpc = MpcConfig(
            horizon=mc.get("horizon", 20),
            gamma=mc.get("gamma", 0.1),
            dt=mc.get("dt_s", 0.03),
            u_max=mc.get("u_max_mps", 0.5),
            consistent_discretization=mc.get("consistent_discretization", False),
            max_iter=mc.get("max_iter", 500),
        )
        task = None
        if "task" in raw:
            t = raw["task"]
            task = Task(tuple(t["start_m"]), tuple(t["goal_m"]), t.get("max_steps", 2000),
                        t.get("goal_tolerance_m", 0.5), t.get("plant", "linear"), t.get("region", "fdii"))
    except SchemaError:
        raise
    except (ValueError, KeyError) as exc:
        raise SchemaError(str(exc)) from exc
    if not agents and (task is None or task.region != "drive"):
        raise SchemaError("a scenario without agents must be a drive with region 'drive'")
    return Scenario(raw["name"], raw["seed"], scene, agents, ego, attack, perception, mpc, task,
                    raw.get("expected", {}), raw)


def _footprint(verts) -> ConvexPolygon:
    from .geometry import convex_hull

    poly = convex_hull(np.asarray(verts, dtype=float))
    if poly.is_empty:
        raise SchemaError("infrastructure footprint is degenerate")
    return poly


def seeds_for(seed: int, n: int) -> list[int]:
    """Independent per-stream seeds derived from the scenario seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


@dataclass(frozen=True, eq=False)
class SimulationResult:
    observations: dict
    injected: dict
    scene: Scene


def simulate(sc: Scenario) -> SimulationResult:
    """Cast every agent's scan and tamper with the victim's observation."""
    scene = sc.scene
    if sc.attack.kind == "ao":
        scene = apply_ao(scene, sc.attack.target_id)
    names = list(sc.agents)
    seeds = seeds_for(sc.seed, len(names) + 1)
    obs, injected = {}, {}
    for name, s in zip(names, seeds):
        pose, cfg = sc.agents[name]
        obs[name] = to_observation(cast_scan(scene, pose, cfg, s))
        injected[name] = 0
    if sc.attack.kind in ("neo", "pra"):
        v = sc.attack.victim
        spec = AttackSpec(**{**_spec_fields(sc.attack), "seed": seeds[-1]})
        t = apply_attack(spec, obs[v], sc.agents[v][1])
        obs[v] = t.observation
        injected[v] = len(t.injected_indices)
    return SimulationResult(obs, injected, scene)


def _spec_fields(spec: AttackSpec) -> dict:
    return {k: getattr(spec, k) for k in ("kind", "victim", "seed", "fake", "noise", "category",
                                          "target_id", "superpose")}


@dataclass(frozen=True, eq=False)
class FdiiResult:
    perceptions: dict
    verdict: Any
    region: UnsafeRegion


def run_fdii(sc: Scenario, sim: SimulationResult) -> FdiiResult:
    ps = perceive(sc.ego, sim.observations, sc.perception, sc.scene.infrastructure)
    others = [p for n, p in ps.items() if n != sc.ego]
    verdict = run_decision_tree(ps[sc.ego], others)
    return FdiiResult(ps, verdict, unsafe_region(ps[sc.ego], others, verdict))


def run_drive(sc: Scenario, region: UnsafeRegion) -> ClosedLoopResult:
    t = sc.task
    return run_closed_loop(t.start, t.goal, region, sc.mpc, t.max_steps, t.goal_tolerance, t.plant)


def _check_expected(expected: dict, report: dict, region: UnsafeRegion | None) -> dict:
    fails = []
    v = report.get("verdict") or {}
    tr = report.get("trajectory") or {}
    for key in ("label", "attacked", "pra_category"):
        if key in expected and v.get(key) != expected[key]:
            fails.append(f"{key}: expected {expected[key]!r}, got {v.get(key)!r}")
    if "region_nonempty" in expected:
        got = region is not None and not region.is_empty
        if got != expected["region_nonempty"]:
            fails.append(f"region_nonempty: expected {expected['region_nonempty']}, got {got}")
    if "region_contains_m" in expected:
        pts = np.asarray(expected["region_contains_m"], dtype=float).reshape(-1, 2)
        inside = region.contains(pts) if region is not None and not region.is_empty else np.zeros(len(pts), bool)
        if not inside.all():
            fails.append("region_contains_m: some points outside the unsafe region")
    if "reached" in expected and tr.get("reached") != expected["reached"]:
        fails.append(f"reached: expected {expected['reached']}, got {tr.get('reached')}")
    if "min_hbar_nonnegative" in expected:
        mh = tr.get("min_hbar_m")
        got = mh is None or mh >= 0
        if got != expected["min_hbar_nonnegative"]:
            fails.append(f"min_hbar_nonnegative: expected {expected['min_hbar_nonnegative']}, got {got}")
    return {"checked": sorted(expected), "passed": not fails, "failures": fails}


STAGES = ("simulate", "fdii", "drive", "all")


def run_scenario(source, out_dir=None, seed: int | None = None, stage: str = "all",
                 plots: bool = True) -> dict:
    """Run a scenario up to ``stage`` and return the report dict.

    With ``out_dir`` the report (report.json), timing.json, CSV artifacts
    and SVG plots are written there. The report holds no timing so that
    it is byte-identical across runs with the same seed.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    sc = source if isinstance(source, Scenario) else load_scenario(source)
    if seed is not None:
        sc = sc.with_seed(seed)
    timing: dict = {}
    report: dict = {
        "tool": {"name": "lidar_fdii", "version": __version__},
        "scenario": sc.name,
        "seed": sc.seed,
        "stage": stage,
        "config": sc.raw | {"seed": sc.seed},
    }
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    sim = fd = None
    region = None
    if sc.agents:
        t0 = time.perf_counter()
        try:
            sim = simulate(sc)
        except Exception as exc:
            raise PipelineError("simulate", exc) from exc
        timing["simulate_s"] = time.perf_counter() - t0
        report["observations"] = {
            n: {"n_points": len(o), "n_injected": sim.injected[n]} for n, o in sim.observations.items()
        }
        if out is not None:
            for n, o in sim.observations.items():
                write_observation_csv(o, out / f"observation_{n}.csv")

    if stage in ("fdii", "drive", "all") and sim is not None:
        t0 = time.perf_counter()
        try:
            fd = run_fdii(sc, sim)
        except Exception as exc:
            raise PipelineError("fdii", exc) from exc
        timing["fdii_s"] = time.perf_counter() - t0
        region = fd.region
        report["perception"] = {
            n: {"n_detected": len(p.detected), "n_residual": int(len(p.residual_points)),
                "zeta_h_m": p.zeta_h,
                "occupied": [d.occupied.vertices.tolist() for d in p.detected],
                "residual_area": p.residual_area.vertices.tolist()}
            for n, p in fd.perceptions.items()
        }
        report["verdict"] = fd.verdict.to_dict()
        report["region"] = {"n_polygons": len(region), **region.to_dict()}

    traj = None
    if stage in ("drive", "all") and sc.task is not None:
        if sc.task.region == "drive":
            region = drive_region()
            report["region"] = {"n_polygons": len(region), **region.to_dict()}
        elif region is None:
            raise PipelineError("drive", ValueError("no unsafe region available for the task"))
        t0 = time.perf_counter()
        try:
            traj = run_drive(sc, region)
        except Exception as exc:
            raise PipelineError("drive", exc) from exc
        timing["drive_s"] = time.perf_counter() - t0
        report["trajectory"] = traj.summary()
    elif stage == "drive" and sc.task is None:
        raise PipelineError("drive", ValueError("scenario has no task"))

    if sc.expected and stage != "simulate":
        exp = sc.expected
        if stage == "fdii":
            exp = {k: v for k, v in exp.items() if k not in ("reached", "min_hbar_nonnegative")}
        if exp:
            report["expected"] = _check_expected(exp, report, region)

    if out is not None:
        write_json(out / "report.json", report)
        write_json(out / "timing.json", {k: round(v, 6) for k, v in timing.items()})
        if region is not None:
            write_region_csv(region, out / "region.csv")
            write_constraints_csv(region, out / "constraints.csv")
        if traj is not None:
            write_trajectory_csv(traj, out / "trajectory.csv")
        if plots:
            from . import plotting

            if fd is not None:
                plotting.plot_perception(out / "perception.svg", fd.perceptions, fd.region, sim.scene,
                                         title=f"{sc.name}: {fd.verdict.label}")
            if traj is not None:
                plotting.plot_drive(out / "trajectory.svg", traj, region, title=sc.name)
                plotting.plot_hbar(out / "hbar.svg", traj)
    report["_timing"] = timing
    return report


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_json(path, obj) -> None:
    clean = {k: v for k, v in obj.items() if not k.startswith("_")} if isinstance(obj, dict) else obj
    Path(path).write_text(dumps(clean))


def bundled_dir() -> Path:
    return Path(str(resources.files("lidar_fdii") / "scenarios"))


def bundled(name: str) -> Path:
    p = bundled_dir() / (name if name.endswith(".json") else name + ".json")
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def resolve_paths(pattern: str) -> list[Path]:
    p = Path(pattern)
    if p.is_dir():
        paths = sorted(p.glob("*.json"))
    else:
        paths = sorted(Path(x) for x in _glob.glob(pattern))
    if not paths:
        raise SuiteError(f"no scenario files match {pattern!r}")
    return paths


SUITE_COLUMNS = ("scenario", "status", "verdict", "attacked", "pra_category", "region_polygons",
                 "reached", "min_hbar_m", "expected", "seconds", "error")


def run_suite(pattern: str, out_dir=None, seed: int | None = None, plots: bool = True) -> tuple[list[dict], bool]:
    """One row per scenario; a row fails on any error or unmet expectation."""
    rows = []
    for path in resolve_paths(pattern):
        row = dict.fromkeys(SUITE_COLUMNS, "")
        row["scenario"] = path.stem
        sub = Path(out_dir) / path.stem if out_dir is not None else None
        t0 = time.perf_counter()
        try:
            rep = run_scenario(path, sub, seed=seed, plots=plots)
            v = rep.get("verdict", {})
            tr = rep.get("trajectory", {})
            row.update(
                verdict=v.get("label", ""),
                attacked=v.get("attacked", ""),
                pra_category=v.get("pra_category") if v.get("pra_category") is not None else "",
                region_polygons=rep.get("region", {}).get("n_polygons", ""),
                reached=tr.get("reached", ""),
                min_hbar_m=tr.get("min_hbar_m") if tr.get("min_hbar_m") is not None else "",
            )
            exp = rep.get("expected")
            row["expected"] = "" if exp is None else ("pass" if exp["passed"] else "FAIL")
            row["status"] = "ok" if exp is None or exp["passed"] else "fail"
            if exp is not None and not exp["passed"]:
                row["error"] = "; ".join(exp["failures"])
        except Exception as exc:  # reported per row
            row["status"] = "error"
            row["error"] = str(exc)
        row["seconds"] = round(time.perf_counter() - t0, 3)
        rows.append(row)
    ok = all(r["status"] == "ok" for r in rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "suite.csv").write_text(rows_to_csv(rows, SUITE_COLUMNS))
        (Path(out_dir) / "suite.txt").write_text(pretty_table(rows, SUITE_COLUMNS))
    return rows, ok


def rows_to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def pretty_table(rows: list[dict], columns) -> str:
    cols = [c for c in columns if any(str(r.get(c, "")) for r in rows) or c == "scenario"]
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(cols)]
    line = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
    sep = "  ".join("-" * w for w in widths)
    body = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join([line, sep, *body]) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
