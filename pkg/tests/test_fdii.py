import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st
from shapely.geometry import Polygon as SPoly

from lidar_fdii.fdii import (
    EMPTY,
    ESCAPES_B,
    MATCH,
    MISMATCH,
    NEO,
    NO_RESIDUAL,
    PRA1,
    PRA2,
    PRA3_OR_AO,
    SUBSET_OF_B,
    TRUE_OBSTACLE,
    UNVERIFIED,
    NoNeighborCoverage,
    NoOverlap,
    UnsafeRegion,
    Verdict,
    export_constraints,
    fdii,
    isolate,
    run_decision_tree,
    scan_match_detected,
    scan_match_residual,
    unsafe_region,
    write_constraints_csv,
    write_region_csv,
)
from lidar_fdii.geometry import ConvexPolygon, convex_hull
from lidar_fdii.perception import AgentPerception, DetectedObstacle

from conftest import bundled_run

Z = 0.1


def square(cx, cy, h):
    return ConvexPolygon(np.array([[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]]))


def det(k, cx, cy, h=0.3):
    pts = np.array([[cx + dx, cy + dy, 1.0] for dx in (-h, h) for dy in (-h, h)])
    box = np.array([pts.min(0) - 0.1, pts.max(0) + 0.1])
    return DetectedObstacle(k, box, pts, pts[:, :2], square(cx, cy, h).with_margin(Z))


def agent(name, detected=(), residual=None, scan=None, sensor=(0, 0)):
    residual = np.empty((0, 3)) if residual is None else np.asarray(residual, float)
    res_area = convex_hull(residual[:, :2]).with_margin(Z) if len(residual) >= 3 else ConvexPolygon.empty()
    return AgentPerception(name, np.array([*sensor, 1.8]), Z, tuple(detected), residual, res_area,
                           scan if scan is not None else square(0, 0, 20), 50.0)


RES = [[5.0, 5.0, 1.0], [5.4, 5.0, 1.0], [5.2, 5.4, 1.0]]


class TestScanMatch:
    def test_match_and_mismatch(self):
        a = agent("A", [det(0, 5, 0)])
        assert scan_match_detected(0, a, agent("B", [det(0, 5, 0)])) == MATCH
        assert scan_match_detected(0, a, agent("B", [det(0, 5.08, 0)])) == MATCH  # within the margin
        assert scan_match_detected(0, a, agent("B")) == MISMATCH
        assert scan_match_detected(0, a, agent("B", residual=[[4.7, -0.3, 1], [5.3, -0.3, 1], [5.0, 0.3, 1]])) == MISMATCH

    def test_residual_of_b_counts(self):
        a = agent("A", [det(0, 5, 0, h=0.1)])
        b = agent("B", residual=[[4.5, -0.5, 1], [5.5, -0.5, 1], [5.5, 0.5, 1], [4.5, 0.5, 1]])
        assert scan_match_detected(0, a, b) == MATCH

    def test_no_overlap(self):
        a = agent("A", [det(0, 5, 0)])
        b = agent("B", scan=square(30, 30, 5))
        with pytest.raises(NoOverlap):
            scan_match_detected(0, a, b)

    def test_residual_outcomes(self):
        a = agent("A", residual=RES)
        assert scan_match_residual(agent("A"), agent("B")).result == EMPTY
        assert scan_match_residual(a, agent("B", [det(0, 5.2, 5.2, 0.4)])).result == SUBSET_OF_B
        r = scan_match_residual(a, agent("B"))
        assert (r.result, r.category, r.n_tested) == (ESCAPES_B, 1, 3)
        r = scan_match_residual(a, agent("B", [det(0, 5.0, 5.0, 0.05)]))
        assert (r.result, r.category) == (ESCAPES_B, 2)

    def test_residual_outside_joint_coverage_is_empty(self):
        a = agent("A", residual=RES)
        b = agent("B", scan=square(-10, -10, 3))
        assert scan_match_residual(a, b).result == EMPTY


class TestDecisionTree:
    def test_true_obstacle_and_neo(self):
        a = agent("A", [det(0, 5, 0), det(1, -5, 3)])
        v = run_decision_tree(a, [agent("B", [det(0, 5, 0)])])
        assert v.per_obstacle == {0: TRUE_OBSTACLE, 1: NEO}
        assert v.attacked and v.label == NEO

    def test_any_mismatch_among_neighbours_is_neo(self):
        a = agent("A", [det(0, 5, 0)])
        v = run_decision_tree(a, [agent("B", [det(0, 5, 0)]), agent("C")])
        assert v.per_obstacle[0] == NEO

    def test_unverified_when_no_neighbour_covers(self):
        a = agent("A", [det(0, 15, 15)])
        b = agent("B", scan=square(-5, -5, 8))
        v = run_decision_tree(a, [b])
        assert v.per_obstacle == {0: UNVERIFIED} and not v.attacked

    def test_residual_verdicts(self):
        a = agent("A", residual=RES)
        assert run_decision_tree(a, [agent("B", [det(0, 5.2, 5.2, 0.4)])]).residual_verdict == PRA3_OR_AO
        assert run_decision_tree(a, [agent("B")]).residual_verdict == PRA1
        assert run_decision_tree(a, [agent("B", [det(0, 5, 5, 0.05)])]).residual_verdict == PRA2
        # PRA2 dominates when one neighbour sees part and another none
        v = run_decision_tree(a, [agent("B"), agent("C", [det(0, 5, 5, 0.05)])])
        assert v.residual_verdict == PRA2 and v.pra_category == 2

    def test_no_attack(self):
        v = run_decision_tree(agent("A", [det(0, 5, 0)]), [agent("B", [det(0, 5, 0)])])
        assert v.label == "no_attack" and not v.attacked and v.residual_verdict == NO_RESIDUAL

    def test_residual_unverified_count(self):
        a = agent("A", residual=RES + [[30.0, 30.0, 1.0]], scan=square(0, 0, 40))
        v = run_decision_tree(a, [agent("B")])
        assert v.residual_unverified == 1

    def test_no_neighbour(self):
        with pytest.raises(NoNeighborCoverage):
            run_decision_tree(agent("A"), [agent("B", scan=square(100, 100, 5))])
        with pytest.raises(NoNeighborCoverage):
            run_decision_tree(agent("A"), [])

    def test_combined_label(self):
        assert Verdict({0: NEO}, PRA2).label == "NEO+PRA2"
        assert Verdict({}, PRA3_OR_AO).pra_category is None


def mitre(poly, m):
    return SPoly(poly.vertices).buffer(m, join_style=2, mitre_limit=100)


class TestUnsafeRegion:
    @given(st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
    def test_pairwise_intersection_area(self, dx, dy):
        a = agent("A", [det(0, 5, 0)])
        b = agent("B", [det(0, 5 + dx, dy)])
        v = run_decision_tree(a, [b])
        reg = unsafe_region(a, [b], v)
        ref = mitre(a.detected[0].occupied, Z).intersection(mitre(b.detected[0].occupied, Z))
        assert sum(p.area() for p in reg.polygons) == pytest.approx(ref.area, abs=1e-9)
        assert all(p.margin == 0.0 for p in reg.polygons)

    def test_neo_dropped(self):
        a = agent("A", [det(0, 5, 0), det(1, -5, 3)])
        b = agent("B", [det(0, 5, 0)])
        v, reg = fdii("A", {"A": a, "B": b})
        assert reg.sources == (("detected", 0),)
        assert not reg.contains([(-5, 3)]).any()

    def test_uncovered_area_kept_whole(self):
        a = agent("A", [det(0, 15, 15)])
        b = agent("B", scan=square(-5, -5, 8))
        v, reg = fdii("A", {"A": a, "B": b})
        assert len(reg) == 1
        assert reg.polygons[0].area() == pytest.approx(mitre(a.detected[0].occupied, Z).area)

    def test_residual_piece(self):
        a = agent("A", residual=RES)
        b = agent("B", [det(0, 5.2, 5.2, 0.4)])
        v, reg = fdii("A", {"A": a, "B": b})
        assert reg.sources == (("residual", -1),)
        assert reg.contains([(5.2, 5.13)]).all()

    def test_empty_region(self):
        reg = UnsafeRegion()
        assert reg.is_empty and reg.min_hbar((0, 0)) == np.inf
        assert np.all(reg.min_hbar(np.zeros((3, 2))) == np.inf)


class TestExport:
    def test_unit_square(self):
        reg = UnsafeRegion((square(0.5, 0.5, 0.5),))
        planes, hbar = export_constraints(reg)
        assert len(planes) == 1 and len(planes[0]) == 4
        assert hbar((0.5, 0.5)) == pytest.approx(-0.5)
        assert hbar((2.0, 0.5)) == pytest.approx(1.0)
        assert hbar((1.0, 0.5)) == pytest.approx(0.0)
        assert hbar(np.array([[0.5, 0.5], [2.0, 0.5]])) == pytest.approx([-0.5, 1.0])

    def test_min_over_polygons(self):
        reg = UnsafeRegion((square(0, 0, 1), square(10, 0, 1)))
        assert reg.min_hbar((9.5, 0)) == pytest.approx(-0.5)
        assert reg.hbar((9.5, 0)) == pytest.approx([8.5, -0.5])

    def test_csv(self, tmp_path):
        reg = UnsafeRegion((square(0.5, 0.5, 0.5),))
        write_region_csv(reg, tmp_path / "r.csv")
        write_constraints_csv(reg, tmp_path / "c.csv")
        rows = list(csv.DictReader(open(tmp_path / "c.csv")))
        assert len(rows) == 4
        for r in rows:
            n = np.array([float(r["a_x"]), float(r["a_y"])])
            assert n @ np.array([0.5, 0.5]) + float(r["b"]) == pytest.approx(-0.5)
        assert len(list(csv.DictReader(open(tmp_path / "r.csv")))) == 4


class TestIsolate:
    def test_idempotent_and_drops_spoofed(self):
        a = agent("A", [det(0, 5, 0), det(1, -5, 3)], residual=RES)
        v = run_decision_tree(a, [agent("B", [det(0, 5, 0)])])
        once = isolate(a, v)
        twice = isolate(once, v)
        assert [d.k for d in once.detected] == [d.k for d in twice.detected] == [0]
        assert len(once.residual_points) == 0 and once.residual_area.is_empty

    def test_clean_verdict_changes_nothing(self):
        a = agent("A", [det(0, 5, 0)])
        v = run_decision_tree(a, [agent("B", [det(0, 5, 0)])])
        assert isolate(a, v).detected == a.detected


class TestBundled:
    @pytest.mark.parametrize("name,label", [("attack_free", "no_attack"), ("neo", "NEO"), ("pra1", "PRA1"),
                                            ("pra2", "PRA2"), ("pra3", "PRA3_or_AO"), ("ao", "PRA3_or_AO")])
    def test_labels(self, name, label):
        assert bundled_run(name)[2].verdict.label == label

    def test_attack_free_region_holds_pedestrian(self):
        sc, _, res = bundled_run("attack_free")
        assert not res.region.is_empty
        assert res.region.contains([sc.scene.obstacles[0].center]).all()

    def test_neo_region_empty(self):
        assert bundled_run("neo")[2].region.is_empty

    def test_pra_regions_hold_hidden_pedestrian(self):
        for name in ("pra2", "pra3"):
            sc, _, res = bundled_run(name)
            assert res.region.contains([sc.scene.obstacles[0].center]).all()
