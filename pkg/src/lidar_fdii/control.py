"""Reach-and-avoid control around exported unsafe-region half-planes.

The plant used for planning is a double integrator on (x, y, vx, vy) with
velocity-increment inputs. Each polygon is kept at bay by a discrete-time
barrier condition on one face per horizon step, the face that is most
violated by the previous iterate, so every solve is a convex QP.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .fdii import UnsafeRegion
from .qp import QPError, QPInfeasible, solve_qp


class ControlError(RuntimeError):
    pass


class StartInsideRegion(ControlError):
    pass


class Infeasible(ControlError):
    def __init__(self, message: str, polygon: int | None = None):
        super().__init__(message)
        self.polygon = polygon


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.vx, self.vy)):
            raise ValueError("state must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.vx, self.vy])

    @classmethod
    def from_array(cls, s) -> "VehicleState":
        return cls(*(float(v) for v in s))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class BicycleState:
    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.heading, self.speed)):
            raise ValueError("state must be finite")


@dataclass(frozen=True)
class ControlInput:
    dvx: float
    dvy: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dvx, self.dvy])


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    gamma: float = 0.1
    dt: float = 0.03
    u_max: float = 0.5
    q: float = 1.0
    r: float = 1.0
    f: float = 1.0
    # Reference position gain of the input for the linearised model; with
    # ``consistent_discretization`` it becomes dt^2 / 2.
    input_position_gain: float = 0.0045
    consistent_discretization: bool = False
    max_iter: int = 500
    tol: float = 1e-8
    face_iterations: int = 10
    # The barrier acts on h - buffer so solver tolerance cannot push h below 0.
    buffer: float = 1e-6

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.dt <= 0 or self.u_max <= 0:
            raise ValueError("dt and u_max must be positive")
        if min(self.q, self.r, self.f) <= 0:
            raise ValueError("cost weights must be positive")


def model_matrices(cfg: MpcConfig = MpcConfig()) -> tuple[np.ndarray, np.ndarray]:
    dt = cfg.dt
    g = dt * dt / 2 if cfg.consistent_discretization else cfg.input_position_gain
    A = np.array([[1.0, 0.0, dt, 0.0],
                  [0.0, 1.0, 0.0, dt],
                  [0.0, 0.0, 1.0, 0.0],
                  [0.0, 0.0, 0.0, 1.0]])
    B = np.array([[g, 0.0],
                  [0.0, g],
                  [1.0, 0.0],
                  [0.0, 1.0]])
    return A, B


def linear_step(s: VehicleState, u: ControlInput, cfg: MpcConfig = MpcConfig()) -> VehicleState:
    A, B = model_matrices(cfg)
    return VehicleState.from_array(A @ s.as_array() + B @ u.as_array())


def bicycle_step(s: BicycleState, steer: float, accel: float, dt: float = 0.03, l: float = 4.0,
                 steer_max: float = math.radians(35.0)) -> BicycleState:
    """Forward-Euler kinematic bicycle, rear-axle reference."""
    if abs(steer) > steer_max + 1e-12:
        raise ValueError(f"steering angle {steer} exceeds limit {steer_max}")
    return BicycleState(
        s.x + s.speed * math.cos(s.heading) * dt,
        s.y + s.speed * math.sin(s.heading) * dt,
        s.heading + s.speed / l * math.tan(steer) * dt,
        s.speed + accel * dt,
    )


def prediction_matrices(cfg: MpcConfig) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``[s_1; ...; s_N] = Phi s_0 + Gamma U``."""
    A, B = model_matrices(cfg)
    N = cfg.horizon
    Phi = np.zeros((4 * N, 4))
    Gam = np.zeros((4 * N, 2 * N))
    Ak = np.eye(4)
    powers = [np.eye(4)]
    for k in range(N):
        Ak = A @ Ak
        powers.append(Ak)
        Phi[4 * k:4 * k + 4] = Ak
    for k in range(N):
        for j in range(k + 1):
            Gam[4 * k:4 * k + 4, 2 * j:2 * j + 2] = powers[k - j] @ B
    return Phi, Gam


@dataclass(frozen=True, eq=False)
class MpcSolution:
    inputs: np.ndarray  # (N, 2)
    states: np.ndarray  # (N + 1, 4), starting at s0
    faces: np.ndarray  # (n_polygons, N) face index used per step
    face_iterations: int

    @property
    def first(self) -> ControlInput:
        return ControlInput(*map(float, self.inputs[0]))


def _rollout(s0: np.ndarray, U: np.ndarray, Phi, Gam) -> np.ndarray:
    traj = (Phi @ s0 + Gam @ U.ravel()).reshape(-1, 4)
    return np.vstack([s0, traj])


def _active_faces(region: UnsafeRegion, pos: np.ndarray) -> np.ndarray:
    return np.array([np.argmax(p.normals @ pos.T + p.offsets[:, None], axis=0) for p in region.polygons],
                    dtype=int).reshape(len(region.polygons), len(pos))


def solve_mpc(s0: VehicleState, goal, region: UnsafeRegion | None = None, cfg: MpcConfig = MpcConfig(),
              warm: np.ndarray | None = None, _cache: dict | None = None) -> MpcSolution:
    """One receding-horizon solve.

    Minimises tracking error to ``(goal, 0 velocity)`` plus input effort under
    input bounds and, per polygon and step, ``h(p_{k+1}) >= (1 - gamma) h(p_k)``
    on the face maximising ``h`` along the previous iterate. The faces are
    re-selected until they stop changing.
    """
    region = region if region is not None else UnsafeRegion()
    N = cfg.horizon
    x0 = s0.as_array()
    goal = np.asarray(goal, dtype=float)
    if not region.is_empty:
        h0 = region.hbar(x0[:2])
        if h0.min() < -1e-9:
            raise StartInsideRegion(f"start lies inside polygon {int(np.argmin(h0))}")
        hg = region.hbar(goal)
        if hg.min() < 0:
            raise Infeasible("goal lies inside the unsafe region", int(np.argmin(hg)))

    cache = _cache if _cache is not None else {}
    if "Phi" not in cache:
        Phi, Gam = prediction_matrices(cfg)
        w = np.tile([cfg.q, cfg.q, cfg.q, cfg.q], N)
        w[-4:] = cfg.f
        H = Gam.T @ (w[:, None] * Gam) + cfg.r * np.eye(2 * N)
        cache.update(Phi=Phi, Gam=Gam, w=w, H=H)
    Phi, Gam, w, H = cache["Phi"], cache["Gam"], cache["w"], cache["H"]
    ref = np.tile([goal[0], goal[1], 0.0, 0.0], N)
    lin = Gam.T @ (w * (Phi @ x0 - ref))

    box_C = np.vstack([np.eye(2 * N), -np.eye(2 * N)])
    box_d = np.full(4 * N, -cfg.u_max)

    U = np.zeros((N, 2)) if warm is None else np.asarray(warm, dtype=float).reshape(N, 2)
    if region.is_empty:
        res = _solve(H, lin, box_C, box_d, cfg, region, x0)
        U = res.reshape(N, 2)
        return MpcSolution(U, _rollout(x0, U, Phi, Gam), np.zeros((0, N), dtype=int), 0)

    pos_rows = np.array([[4 * k, 4 * k + 1] for k in range(N)])
    faces = _active_faces(region, _rollout(x0, U, Phi, Gam)[:N, :2])
    for it in range(1, cfg.face_iterations + 1):
        rows, rhs = [], []
        for i, poly in enumerate(region.polygons):
            n_all, b_all = poly.normals, poly.offsets
            for k in range(N):
                n, b = n_all[faces[i, k]], b_all[faces[i, k]] - cfg.buffer
                nxt = Gam[pos_rows[k]]
                row = n @ nxt
                const = n @ (Phi[pos_rows[k]] @ x0) + b
                if k == 0:
                    cur = (1 - cfg.gamma) * (n @ x0[:2] + b)
                    rows.append(row)
                    rhs.append(cur - const)
                else:
                    prev = Gam[pos_rows[k - 1]]
                    rows.append(row - (1 - cfg.gamma) * (n @ prev))
                    cur_const = n @ (Phi[pos_rows[k - 1]] @ x0) + b
                    rhs.append((1 - cfg.gamma) * cur_const - const)
        C = np.vstack([box_C, np.array(rows)])
        d = np.concatenate([box_d, np.array(rhs)])
        U = _solve(H, lin, C, d, cfg, region, x0).reshape(N, 2)
        new_faces = _active_faces(region, _rollout(x0, U, Phi, Gam)[:N, :2])
        if np.array_equal(new_faces, faces):
            break
        faces = new_faces
    return MpcSolution(U, _rollout(x0, U, Phi, Gam), faces, it)


def _solve(H, lin, C, d, cfg: MpcConfig, region: UnsafeRegion, x0) -> np.ndarray:
    try:
        return solve_qp(H, lin, C, d, max_iter=cfg.max_iter, tol=cfg.tol).x
    except QPInfeasible as exc:
        poly = int(np.argmin(region.hbar(x0[:2]))) if not region.is_empty else None
        raise Infeasible(f"barrier constraints infeasible near polygon {poly}", poly) from exc
    except QPError as exc:
        raise Infeasible(f"QP solver failed: {exc}") from exc


@dataclass(frozen=True, eq=False)
class ClosedLoopResult:
    states: np.ndarray  # (T + 1, 4)
    inputs: np.ndarray  # (T, 2)
    min_hbar: np.ndarray  # (T + 1,)
    reached: bool
    goal: np.ndarray
    plant: str = "linear"
    bicycle: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.inputs)

    @property
    def final_distance(self) -> float:
        return float(np.hypot(*(self.states[-1, :2] - self.goal)))

    def summary(self) -> dict:
        finite = self.min_hbar[np.isfinite(self.min_hbar)]
        return {
            "reached": self.reached,
            "steps": self.steps,
            "final_distance_m": round(self.final_distance, 9),
            "min_hbar_m": float(finite.min()) if len(finite) else None,
            "plant": self.plant,
        }


def _track(b: BicycleState, v_cmd: np.ndarray, dt: float, l: float, steer_max: float,
           k_heading: float = 2.0) -> tuple[float, float]:
    """Steering and acceleration that turn the bicycle towards ``v_cmd``."""
    speed = float(np.hypot(*v_cmd))
    if speed < 1e-6:
        return 0.0, -b.speed / dt
    err = math.atan2(v_cmd[1], v_cmd[0]) - b.heading
    err = (err + math.pi) % (2 * math.pi) - math.pi
    yaw_rate = k_heading * err / max(dt * 10, 1e-9)
    if b.speed > 1e-6:
        steer = math.atan(yaw_rate * l / b.speed)
    else:
        steer = 0.0
    steer = max(-steer_max, min(steer_max, steer))
    return steer, (speed - b.speed) / dt


def run_closed_loop(start, goal, region: UnsafeRegion | None = None, cfg: MpcConfig = MpcConfig(),
                    max_steps: int = 2000, goal_tol: float = 0.5, plant: str = "linear",
                    wheelbase: float = 4.0, steer_max: float = math.radians(35.0)) -> ClosedLoopResult:
    """Apply the first input of each solve until within ``goal_tol`` of the goal.

    ``plant='bicycle'`` drives a kinematic bicycle that tracks the planned
    velocity; its measured position and velocity feed the next solve.
    """
    if plant not in ("linear", "bicycle"):
        raise ValueError(f"unknown plant {plant!r}")
    region = region if region is not None else UnsafeRegion()
    s = start if isinstance(start, VehicleState) else VehicleState(*start)
    goal = np.asarray(goal, dtype=float)
    states = [s.as_array()]
    inputs = []
    bike = BicycleState(s.x, s.y, math.atan2(s.vy, s.vx) if (s.vx or s.vy) else 0.0, math.hypot(s.vx, s.vy))
    bikes = [bike]
    cache: dict = {}
    warm = None
    reached = float(np.hypot(*(s.position - goal))) <= goal_tol
    while not reached and len(inputs) < max_steps:
        sol = solve_mpc(s, goal, region, cfg, warm=warm, _cache=cache)
        u = sol.first
        if plant == "linear":
            s = linear_step(s, u, cfg)
        else:
            v_cmd = s.as_array()[2:] + u.as_array()
            steer, accel = _track(bike, v_cmd, cfg.dt, wheelbase, steer_max)
            bike = bicycle_step(bike, steer, accel, cfg.dt, wheelbase, steer_max)
            bikes.append(bike)
            s = VehicleState(bike.x, bike.y, bike.speed * math.cos(bike.heading), bike.speed * math.sin(bike.heading))
        inputs.append(u.as_array())
        states.append(s.as_array())
        warm = np.vstack([sol.inputs[1:], sol.inputs[-1:]])
        reached = float(np.hypot(*(s.position - goal))) <= goal_tol
    states = np.array(states)
    mh = region.min_hbar(states[:, :2]) if not region.is_empty else np.full(len(states), np.inf)
    return ClosedLoopResult(states, np.array(inputs).reshape(-1, 2), np.asarray(mh), reached, goal, plant, bikes)


def write_trajectory_csv(result: ClosedLoopResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x", "y", "vx", "vy", "dvx", "dvy", "min_hbar"])
        for k, s in enumerate(result.states):
            du = result.inputs[k] if k < len(result.inputs) else (0.0, 0.0)
            h = result.min_hbar[k]
            w.writerow([k, *map(repr, map(float, s)), repr(float(du[0])), repr(float(du[1])),
                        repr(float(h)) if math.isfinite(h) else "inf"])

