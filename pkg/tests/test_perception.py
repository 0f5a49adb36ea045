import numpy as np
import pytest
from hypothesis import given, strategies as st
from shapely.geometry import MultiPoint, Point

from lidar_fdii.geometry import ConvexPolygon, contains_with_margin
from lidar_fdii.perception import (
    PerceptionConfig,
    detect_obstacles,
    euclidean_clusters,
    infrastructure_distance,
    occupied_area,
    perceive,
    perceive_one,
    prune_infrastructure,
    remove_ground,
    scan_area,
)
from lidar_fdii.scene import (
    Box,
    Infrastructure,
    LidarConfig,
    Obstacle,
    Pose,
    Scene,
    cast_scan,
    pedestrian,
    to_observation,
)

SENSOR = np.array([0.0, 0.0, 1.8])


def brute_clusters(points, d):
    # union-find over all pairs
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(points[i] - points[j]) <= d:
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return sorted(map(frozenset, groups.values()), key=min)


@given(st.integers(0, 10_000), st.integers(1, 40), st.floats(0.2, 1.5))
def test_clusters_match_brute_force(seed, n, d):
    pts = np.random.default_rng(seed).uniform(0, 4, size=(n, 3))
    got = sorted((frozenset(c.tolist()) for c in euclidean_clusters(pts, d)), key=min)
    assert got == brute_clusters(pts, d)


def test_clusters_empty():
    assert euclidean_clusters(np.empty((0, 3)), 0.5) == []


def test_ground_split():
    pts = np.array([[0, 0, 0.0], [0, 0, 0.1], [0, 0, 0.11], [1, 1, 1.0]])
    obs = to_observation(cast_scan(Scene(), Pose(0, 0, 0), LidarConfig(), 0))
    obs = obs.subset(np.zeros(len(obs), bool))
    from dataclasses import replace
    obs = replace(obs, points=pts, beams=np.arange(4), undetectable=np.zeros(4, bool), truth_ids=np.full(4, -1))
    g, a = remove_ground(obs, 0.1)
    assert len(g) == 2 and len(a) == 2
    with pytest.raises(ValueError):
        remove_ground(obs, 0.0)


class TestOccupiedArea:
    @given(st.integers(0, 10_000))
    def test_matches_shapely_hull_of_projections(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.uniform(-15, 15, 2)
        pts = np.column_stack([c + rng.uniform(-0.5, 0.5, (20, 2)), rng.uniform(0.2, 1.6, 20)])
        occ = occupied_area(SENSOR, pts, 0.37)
        # independent shadow construction: similar triangles
        w = pts[:, :2] - SENSOR[:2]
        shadow = SENSOR[:2] + w * (SENSOR[2] / (SENSOR[2] - pts[:, 2]))[:, None]
        ref = MultiPoint(np.vstack([pts[:, :2], shadow])).convex_hull
        assert occ.area() == pytest.approx(ref.area, rel=1e-9)
        assert occ.margin == 0.37

    def test_shadow_truncated_at_range(self):
        pts = np.array([[10.0, 0, 1.79], [10.0, 0.3, 1.0], [10.2, -0.3, 0.5]])
        occ = occupied_area(SENSOR, pts, 0.1, max_range=50.0)
        assert np.hypot(*occ.vertices.T).max() <= 50.0 + 1e-9
        assert np.hypot(*occ.vertices.T).max() >= 49.0

    def test_collinear_gives_capsule(self):
        pts = np.array([[5.0, 0, z] for z in (0.3, 0.6, 0.9)])
        occ = occupied_area(SENSOR, pts, 0.37)
        assert not occ.is_empty
        assert occ.margin == 0.37
        assert np.all(contains_with_margin(occ, pts[:, :2], 0.0))

    def test_single_point(self):
        occ = occupied_area(SENSOR, np.array([[5.0, 1.0, 0.5]]), 0.37)
        assert not occ.is_empty

    def test_empty(self):
        assert occupied_area(SENSOR, np.empty((0, 3)), 0.37).is_empty


class TestDetect:
    def _blob(self, c, n=20, seed=0):
        rng = np.random.default_rng(seed)
        return np.column_stack([c[0] + rng.uniform(-0.2, 0.2, n), c[1] + rng.uniform(-0.2, 0.2, n),
                                rng.uniform(0.3, 1.5, n)])

    def test_two_objects_and_residual(self):
        a, b = self._blob((5, 0)), self._blob((10, 3), seed=1)
        stray = np.array([[20.0, 0, 1.0], [20.2, 0, 1.0]])
        det, res = detect_obstacles(np.vstack([a, b, stray]), PerceptionConfig(), sensor=SENSOR, zeta_h=0.37)
        assert len(det) == 2
        assert len(res) == 2
        assert sum(len(d.points) for d in det) == 40

    def test_min_cluster_size(self):
        pts = np.array([[5.0, 0, 0.5], [5.1, 0, 0.6], [5.0, 0.1, 0.7], [5.1, 0.1, 0.8]])
        det, res = detect_obstacles(pts, PerceptionConfig(), sensor=SENSOR, zeta_h=0.37)
        assert det == [] and len(res) == 4
        det, _ = detect_obstacles(pts, PerceptionConfig(min_cluster_size=4), sensor=SENSOR, zeta_h=0.37)
        assert len(det) == 1

    def test_majority_undetectable_is_skipped(self):
        pts = self._blob((5, 0), n=10)
        flags = np.zeros(10, bool)
        flags[:5] = True
        det, res = detect_obstacles(pts, PerceptionConfig(), flags, sensor=SENSOR, zeta_h=0.37)
        assert det == [] and len(res) == 10
        flags[:] = False
        flags[:4] = True
        det, _ = detect_obstacles(pts, PerceptionConfig(), flags, sensor=SENSOR, zeta_h=0.37)
        assert len(det) == 1

    def test_box_claims_nearby_flagged_points(self):
        real = self._blob((5, 0), n=20)
        inside = np.array([[5.0, 0.0, 0.8]])
        det, res = detect_obstacles(np.vstack([real, inside]), PerceptionConfig(),
                                    np.r_[np.zeros(20, bool), True], sensor=SENSOR, zeta_h=0.37)
        assert len(det[0].points) == 21 and len(res) == 0


def test_infrastructure_distance_and_prune():
    wall = Infrastructure(ConvexPolygon(np.array([[0, 5], [10, 5], [10, 6], [0, 6.0]])), 3.0)
    pts = np.array([[5, 5.5, 1.0], [5, 4.0, 1.0], [5, 5.5, 4.0], [12, 7, 1.0]])
    d = infrastructure_distance(pts, wall)
    ref = [0.0, 1.0, 1.0, Point(12, 7).distance(MultiPoint([(10, 6)]))]
    assert d == pytest.approx(ref)
    scene = Scene((pedestrian((5.0, 0.0)),), (wall,))
    obs = to_observation(cast_scan(scene, Pose(0, 0, 0), LidarConfig(), 3))
    pruned = prune_infrastructure(obs, scene.infrastructure)
    assert len(pruned) < len(obs)
    assert np.all(infrastructure_distance(pruned.points, wall) > 2 * obs.noise_bound)
    assert np.sum(pruned.truth_ids == 0) == np.sum(obs.truth_ids == 0)


class TestScanArea:
    def test_contains_every_return_and_sensor(self):
        scene = Scene((pedestrian((6.0, 1.0)), Obstacle(Box((12.0, -4.0), (1.0, 1.5), 1.5), 1)))
        obs = to_observation(cast_scan(scene, Pose(0, 0, 0.3), LidarConfig(), 1))
        sa = scan_area(obs)
        assert np.all(contains_with_margin(sa, obs.points[:, :2], 1e-9))
        assert contains_with_margin(sa, obs.sensor[:2], 1e-9)
        ref = MultiPoint(np.vstack([obs.points[:, :2], obs.sensor[None, :2]])).convex_hull
        assert sa.area() == pytest.approx(ref.area, rel=1e-9)

    def test_empty_scan(self):
        obs = to_observation(cast_scan(Scene(), Pose(0, 0, 0), LidarConfig(), 1))
        obs = obs.subset(np.zeros(len(obs), bool))
        sa = scan_area(obs)
        assert sa.is_empty and sa.degenerate


class TestPerceive:
    SCENE = Scene((pedestrian((8.0, 0.0)), Obstacle(Box((12.0, 5.0), (1.0, 0.8), 1.5), 1)))

    def test_every_obstacle_boxed_and_covered(self):
        obs = to_observation(cast_scan(self.SCENE, Pose(0, 0, 0), LidarConfig(), 2))
        p = perceive_one("A", obs)
        assert len(p.detected) == 2 and len(p.residual_points) == 0
        assert p.zeta_h == pytest.approx(0.37)
        above = obs.points[(obs.points[:, 2] > 0.1)]
        covered = np.zeros(len(above), bool)
        for a in p.occupied_areas():
            covered |= contains_with_margin(a, above[:, :2], 1e-9)
        assert covered.all()

    def test_zeta_override(self):
        obs = to_observation(cast_scan(self.SCENE, Pose(0, 0, 0), LidarConfig(), 2))
        assert perceive_one("A", obs, PerceptionConfig(zeta_h=0.5)).zeta_h == 0.5

    def test_own_first_and_missing_own(self):
        obs = to_observation(cast_scan(self.SCENE, Pose(0, 0, 0), LidarConfig(), 2))
        ps = perceive("B", {"A": obs, "B": obs})
        assert list(ps) == ["B", "A"]
        with pytest.raises(KeyError):
            perceive("C", {"A": obs})

    def test_to_dict(self):
        obs = to_observation(cast_scan(self.SCENE, Pose(0, 0, 0), LidarConfig(), 2))
        d = perceive_one("A", obs).to_dict(with_points=False)
        assert d["agent"] == "A" and len(d["detected"]) == 2 and "residual_points" not in d


@pytest.mark.parametrize("kw", [dict(ground_threshold=0), dict(zeta_h=-1), dict(cluster_distance=0),
                                dict(min_cluster_size=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        PerceptionConfig(**kw)
