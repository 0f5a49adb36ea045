import math

import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidar_fdii.control import (
    BicycleState,
    ControlInput,
    Infeasible,
    MpcConfig,
    StartInsideRegion,
    VehicleState,
    bicycle_step,
    linear_step,
    model_matrices,
    prediction_matrices,
    run_closed_loop,
    solve_mpc,
    write_trajectory_csv,
)
from lidar_fdii.fdii import UnsafeRegion
from lidar_fdii.geometry import ConvexPolygon
from lidar_fdii.qp import kkt_residual, solve_qp
from lidar_fdii.regions import DRIVE_GOAL, DRIVE_START, drive_region

A_REF = np.array([[1, 0, 0.03, 0], [0, 1, 0, 0.03], [0, 0, 1, 0], [0, 0, 0, 1.0]])
B_REF = np.array([[0.0045, 0], [0, 0.0045], [1, 0], [0, 1.0]])


class TestLinearModel:
    def test_matrices_exact(self):
        A, B = model_matrices()
        assert np.array_equal(A, A_REF) and np.array_equal(B, B_REF)

    @pytest.mark.parametrize("s,u,out", [((0, 0, 1, 0), (0, 0), (0.03, 0, 1, 0)),
                                         ((0, 0, 0, 0), (1, 0), (0.0045, 0, 1, 0)),
                                         ((0, 0, 0, 0), (0, 0), (0, 0, 0, 0))])
    def test_examples(self, s, u, out):
        assert linear_step(VehicleState(*s), ControlInput(*u)).as_array().tolist() == list(out)

    @given(st.lists(st.floats(-100, 100), min_size=4, max_size=4), st.floats(-1, 1), st.floats(-1, 1))
    def test_matches_reference_product(self, s, ux, uy):
        got = linear_step(VehicleState(*s), ControlInput(ux, uy)).as_array()
        ref = A_REF @ np.array(s) + B_REF @ np.array([ux, uy])
        assert np.array_equal(got, ref)

    def test_consistent_discretization_flag(self):
        _, B = model_matrices(MpcConfig(consistent_discretization=True))
        assert B[0, 0] == pytest.approx(0.03 ** 2 / 2)

    def test_prediction_matrices_match_rollout(self, rng):
        cfg = MpcConfig(horizon=6)
        Phi, Gam = prediction_matrices(cfg)
        s0 = rng.normal(size=4)
        U = rng.normal(size=(6, 2))
        s = VehicleState(*s0)
        stacked = []
        for u in U:
            s = linear_step(s, ControlInput(*u), cfg)
            stacked.append(s.as_array())
        assert np.allclose(Phi @ s0 + Gam @ U.ravel(), np.concatenate(stacked), atol=1e-12)

    def test_nonfinite_state(self):
        with pytest.raises(ValueError):
            VehicleState(math.nan, 0)


class TestBicycle:
    def test_straight(self):
        s = bicycle_step(BicycleState(0, 0, 0.3, 10.0), 0.0, 0.0)
        assert math.hypot(s.x, s.y) == pytest.approx(0.3)
        assert math.atan2(s.y, s.x) == pytest.approx(0.3)

    def test_standstill(self):
        s = bicycle_step(BicycleState(1, 2, 0.3, 0.0), 0.2, 0.0)
        assert (s.x, s.y, s.heading) == (1, 2, 0.3)

    def test_full_circle(self):
        steer, v, dt, l = 0.3, 5.0, 0.03, 4.0
        radius = l / math.tan(steer)
        n = round(2 * math.pi * radius / (v * dt))
        s = BicycleState(0, 0, 0, v)
        for _ in range(n):
            s = bicycle_step(s, steer, 0.0, dt, l)
        circumference = 2 * math.pi * radius
        # Euler drift per step is O((v dt)^2 / R); closes to within 1 % of the circumference
        assert math.hypot(s.x, s.y) <= 0.01 * circumference
        assert s.heading == pytest.approx(2 * math.pi, abs=(v * dt / radius))

    def test_steer_limit(self):
        with pytest.raises(ValueError):
            bicycle_step(BicycleState(0, 0, 0, 1), math.radians(40), 0)


def _mpc_qp(cfg, s0, goal):
    Phi, Gam = prediction_matrices(cfg)
    N = cfg.horizon
    w = np.full(4 * N, cfg.q)
    w[-4:] = cfg.f
    H = Gam.T @ (w[:, None] * Gam) + cfg.r * np.eye(2 * N)
    ref = np.tile([goal[0], goal[1], 0, 0], N)
    lin = Gam.T @ (w * (Phi @ s0 - ref))
    return H, lin


class TestMpcNoRegion:
    def test_at_goal_zero_input(self):
        sol = solve_mpc(VehicleState(3, 4), (3, 4))
        assert np.allclose(sol.inputs, 0.0, atol=1e-12)

    def test_kkt_against_oracle(self):
        cfg = MpcConfig()
        s0 = VehicleState(0.0, 0.0, 0.2, -0.1)
        sol = solve_mpc(s0, (0.3, 0.2), None, cfg)
        H, lin = _mpc_qp(cfg, s0.as_array(), (0.3, 0.2))
        N = cfg.horizon
        C = np.vstack([np.eye(2 * N), -np.eye(2 * N)])
        d = np.full(4 * N, -cfg.u_max)
        res = solve_qp(H, lin, C, d)
        assert kkt_residual(H, lin, C, d, res) <= 1e-8
        assert np.allclose(sol.inputs.ravel(), res.x, atol=1e-10)
        # independent solver on the same cost
        u = cp.Variable(2 * N)
        cp.Problem(cp.Minimize(0.5 * cp.quad_form(u, cp.psd_wrap(H)) + lin @ u),
                   [cp.abs(u) <= cfg.u_max]).solve(solver=cp.CLARABEL)
        assert np.allclose(sol.inputs.ravel(), u.value, atol=1e-5)

    def test_unconstrained_closed_form(self):
        # small offset: input bounds inactive, so U = -H^-1 lin
        cfg = MpcConfig()
        s0 = VehicleState(0.0, 0.0)
        sol = solve_mpc(s0, (0.01, -0.02), None, cfg)
        H, lin = _mpc_qp(cfg, s0.as_array(), (0.01, -0.02))
        assert np.abs(sol.inputs).max() < cfg.u_max
        assert np.allclose(sol.inputs.ravel(), np.linalg.solve(H, -lin), atol=1e-12)

    def test_error_decreases_after_transient(self):
        res = run_closed_loop((0.0, 0.0), (6.0, 2.0), None, max_steps=600, goal_tol=0.05)
        assert res.reached
        err = np.hypot(*(res.states[:, :2] - (6.0, 2.0)).T)
        tail = err[len(err) // 5:]
        assert np.all(np.diff(tail) <= 1e-9)

    def test_goal_equals_start(self):
        res = run_closed_loop((1.0, 1.0), (1.0, 1.0))
        assert res.reached and res.steps == 0


SQUARE = UnsafeRegion((ConvexPolygon(np.array([[0, 0], [2, 0], [2, 2], [0, 2.0]])),))


class TestMpcRegion:
    def test_start_inside(self):
        with pytest.raises(StartInsideRegion):
            solve_mpc(VehicleState(1, 1), (5, 5), SQUARE)

    def test_goal_inside(self):
        with pytest.raises(Infeasible) as exc:
            run_closed_loop((-3.0, 1.0), (1.0, 1.0), SQUARE)
        assert exc.value.polygon == 0

    def test_avoids_square(self):
        for goal in ((5.0, 3.0), (4.0, -1.0)):
            res = run_closed_loop((-3.0, 1.0), goal, SQUARE, max_steps=1000)
            assert res.reached
            assert res.min_hbar.min() >= 0

    def test_head_on_deadlock_stays_safe(self):
        # a goal straight behind the square stalls on the face, never inside
        res = run_closed_loop((-3.0, 1.0), (5.0, 1.2), SQUARE, max_steps=300)
        assert not res.reached
        assert res.min_hbar.min() >= 0

    def test_cbf_decrement(self):
        cfg = MpcConfig()
        res = run_closed_loop((-3.0, 1.0), (5.0, 3.0), SQUARE, cfg, max_steps=1000)
        h = res.min_hbar
        assert np.all(h[1:] >= (1 - cfg.gamma) * h[:-1] - 1e-6)


class TestDrive:
    @pytest.fixture(scope="class")
    @staticmethod
    def result():
        return run_closed_loop(DRIVE_START, DRIVE_GOAL, drive_region())

    def test_reaches_safely(self, result):
        assert result.reached and result.steps <= 2000
        assert result.final_distance <= 0.5
        assert result.min_hbar.min() >= 0

    def test_cbf_decrement(self, result):
        h = result.min_hbar
        assert np.all(h[1:] >= 0.9 * h[:-1] - 1e-6)

    def test_bicycle_plant_tracks_free_drive(self):
        res = run_closed_loop(DRIVE_START, DRIVE_GOAL, None, plant="bicycle", max_steps=1000)
        assert res.reached
        lin = run_closed_loop(DRIVE_START, DRIVE_GOAL, None, max_steps=1000)
        assert abs(res.steps - lin.steps) <= 10
        assert all(abs(b.heading) < math.pi / 2 for b in res.bicycle)

    def test_bicycle_plant_with_region_fails_loudly(self):
        # planned swerves exceed the bicycle's curvature limit; the solver
        # must report this instead of returning an unsafe step
        with pytest.raises(Infeasible):
            run_closed_loop(DRIVE_START, DRIVE_GOAL, drive_region(), plant="bicycle", max_steps=200)

    def test_csv(self, result, tmp_path):
        p = tmp_path / "t.csv"
        write_trajectory_csv(result, p)
        lines = p.read_text().splitlines()
        assert len(lines) == len(result.states) + 1
        assert "np." not in p.read_text()


@pytest.mark.parametrize("kw", [dict(horizon=0), dict(gamma=0), dict(gamma=1.5), dict(dt=0), dict(q=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        MpcConfig(**kw)


def test_unknown_plant():
    with pytest.raises(ValueError):
        run_closed_loop((0, 0), (1, 1), plant="boat")
