"""Polygon machinery: distance oracle, dual certificates, clustering."""

import math

import numpy as np
import pytest

from cabletow.geometry import (
    CollisionDuals,
    ConvexPolygon,
    box_polygon,
    certificate_value,
    closest_points,
    cluster_labels,
    cluster_points,
    convex_hull,
    duals_from_closest_points,
    ego_region,
    load_polygon,
    polygon_distance,
    team_polygon,
    verify_dual_certificate,
)


def rand_convex(rng, center, scale=1.0, m=None):
    """Random convex polygon: hull of a handful of points around a center."""
    k = m or rng.integers(3, 8)
    pts = center + rng.uniform(-scale, scale, (k + 4, 2))
    hull = convex_hull(pts)
    while len(hull) < 3:
        pts = center + rng.uniform(-scale, scale, (k + 4, 2))
        hull = convex_hull(pts)
    return ConvexPolygon(tuple(map(tuple, hull)))


def test_polygon_validation():
    with pytest.raises(ValueError):
        ConvexPolygon(((0, 0), (1, 0)))
    with pytest.raises(ValueError):
        ConvexPolygon(((0, 0), (0, 1), (1, 0)))  # clockwise
    with pytest.raises(ValueError):
        ConvexPolygon(((0, 0), (1, 0), (1, 0), (0, 1)))  # repeated vertex
    with pytest.raises(ValueError):
        ConvexPolygon(((0, 0), (1, 1), (2, 2)))  # no area


def test_halfspace_and_vertex_forms_agree():
    rng = np.random.default_rng(0)
    for _ in range(20):
        poly = rand_convex(rng, rng.uniform(-3, 3, 2))
        A, b = poly.halfspaces
        V = poly.vertex_array
        vals = A @ V.T - b[:, None]
        assert np.all(vals <= 1e-9)
        # each vertex sits on exactly two edges
        assert np.all(np.sum(np.abs(vals) < 1e-9, axis=0) == 2)
        centroid = V.mean(axis=0)
        assert poly.contains(centroid)
        assert not poly.contains(centroid + 100.0)


def test_load_polygon_identity_pose():
    poly = load_polygon((0, 0, 0), (0.25, 0.25))
    V = poly.vertex_array
    assert np.allclose(np.sort(V[:, 0]), [-0.25, -0.25, 0.25, 0.25])
    assert np.allclose(np.abs(V).max(), 0.25)
    assert poly.contains((0.2, -0.2)) and not poly.contains((0.3, 0))


def test_load_polygon_rotated_quarter_pi():
    poly = load_polygon((0, 0, math.pi / 4), (0.25, 0.25))
    d = np.linalg.norm(poly.vertex_array, axis=1)
    assert np.allclose(d, 0.25 * math.sqrt(2))
    on_axis = np.isclose(poly.vertex_array, 0.0, atol=1e-12)
    assert np.all(np.sum(on_axis, axis=1) == 1)


def test_team_polygon_single_robot():
    (poly,) = team_polygon([(1.0, 2.0)], r_robot=0.3)
    assert poly.area() == pytest.approx(0.36)
    assert poly.contains((1.0, 2.0))


def test_team_polygon_pair_rectangle():
    (poly,) = team_polygon([(0.0, 0.0), (3.0, 0.0)], r_robot=0.3)
    V = poly.vertex_array
    assert poly.area() == pytest.approx(3.0 * 0.6)
    assert V[:, 0].min() == pytest.approx(0.0) and V[:, 0].max() == pytest.approx(3.0)
    assert V[:, 1].min() == pytest.approx(-0.3) and V[:, 1].max() == pytest.approx(0.3)


def test_team_polygon_triangle():
    (poly,) = team_polygon([(0, 0), (2, 0), (0, 2)])
    assert set(poly.vertices) == {(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)}
    assert poly.area() == pytest.approx(2.0)


def test_team_polygon_collinear_triple_degrades():
    (poly,) = team_polygon([(0, 0), (1, 0), (2, 0)], r_robot=0.3)
    assert poly.area() == pytest.approx(2.0 * 0.6)


def test_team_polygon_square_fan():
    tris = team_polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
    assert len(tris) == 2
    assert sum(t.area() for t in tris) == pytest.approx(1.0)


def test_team_polygon_contains_all_robots():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        pts = rng.uniform(-2, 2, (n, 2))
        polys = team_polygon(pts)
        for p in pts:
            assert any(poly.contains(p, tol=1e-9) for poly in polys)


def test_ego_region_covers_everything():
    reg = ego_region([(1, 0), (0, 1), (-1, 0)], (0, 0, 0.3), (0.25, 0.25))
    assert len(reg.all_polygons) == 2
    for corner in load_polygon((0, 0, 0.3), (0.25, 0.25)).vertices:
        assert reg.load_polygon.contains(corner)


def test_polygon_distance_basic():
    a = box_polygon((0, 0), (0.5, 0.5))
    b = box_polygon((3, 0), (0.5, 0.5))
    assert polygon_distance(a, b) == pytest.approx(2.0)
    c = box_polygon((0.5, 0.5), (0.5, 0.5))
    assert polygon_distance(a, c) == 0.0


def test_polygon_distance_vertex_vertex_case():
    a = box_polygon((0, 0), (1, 1))
    b = box_polygon((3, 3), (1, 1))
    assert polygon_distance(a, b) == pytest.approx(math.sqrt(2))
    p, q, d = closest_points(a, b)
    assert np.allclose(p, [1, 1]) and np.allclose(q, [2, 2])


def _sampled_distance(P, Q, k=400):
    """Dense boundary sampling distance (slow oracle)."""
    def boundary(poly):
        V = poly.vertex_array
        pts = []
        for i in range(len(V)):
            a, b = V[i], V[(i + 1) % len(V)]
            ts = np.linspace(0, 1, k, endpoint=False)
            pts.append(a + ts[:, None] * (b - a))
        return np.vstack(pts)

    BP, BQ = boundary(P), boundary(Q)
    d2 = np.sum((BP[:, None, :] - BQ[None, :, :]) ** 2, axis=-1)
    return math.sqrt(d2.min())


def test_polygon_distance_matches_sampling():
    rng = np.random.default_rng(2)
    for _ in range(15):
        a = rand_convex(rng, rng.uniform(-4, 0, 2))
        b = rand_convex(rng, rng.uniform(1, 5, 2))
        d = polygon_distance(a, b)
        if d == 0.0:
            continue
        assert d == pytest.approx(_sampled_distance(a, b), abs=1e-3)


def test_closest_points_realize_distance():
    rng = np.random.default_rng(3)
    for _ in range(25):
        a = rand_convex(rng, rng.uniform(-4, -1, 2))
        b = rand_convex(rng, rng.uniform(2, 5, 2))
        p, q, d = closest_points(a, b)
        if d == 0.0:
            continue
        assert np.linalg.norm(p - q) == pytest.approx(d, rel=1e-12)
        assert a.contains(p, tol=1e-9) and b.contains(q, tol=1e-9)


def test_certificate_from_closest_points_unit_squares():
    ego = box_polygon((0, 0), (0.5, 0.5))
    obs = box_polygon((2, 0), (0.5, 0.5))
    duals = duals_from_closest_points(ego, obs)
    assert certificate_value(ego, obs, duals) == pytest.approx(1.0)
    assert verify_dual_certificate(ego, obs, duals, d=1.0 - 1e-6)
    assert not verify_dual_certificate(ego, obs, duals, d=1.0 + 1e-3)


def test_certificate_rejects_zero_and_unnormalized_duals():
    ego = box_polygon((0, 0), (0.5, 0.5))
    obs = box_polygon((2, 0), (0.5, 0.5))
    zero = CollisionDuals(lam=(0,) * 4, nu=(0,) * 4)
    assert not verify_dual_certificate(ego, obs, zero, d=0.5)
    good = duals_from_closest_points(ego, obs)
    big = CollisionDuals(lam=tuple(3.0 * v for v in good.lam),
                         nu=tuple(3.0 * v for v in good.nu))
    assert not verify_dual_certificate(ego, obs, big, d=0.5)


def test_certificate_dimension_mismatch():
    ego = box_polygon((0, 0), (0.5, 0.5))
    obs = box_polygon((2, 0), (0.5, 0.5))
    with pytest.raises(ValueError):
        verify_dual_certificate(ego, obs, CollisionDuals(lam=(0,) * 3, nu=(0,) * 4), 0.1)


def test_duals_require_separation():
    a = box_polygon((0, 0), (1, 1))
    with pytest.raises(ValueError):
        duals_from_closest_points(a, box_polygon((0.5, 0), (1, 1)))


def test_dual_attainability_random_pairs():
    # Certificates built from exact closest points achieve the true distance.
    rng = np.random.default_rng(4)
    done = 0
    while done < 30:
        a = rand_convex(rng, rng.uniform(-4, -1, 2))
        b = rand_convex(rng, rng.uniform(1.5, 5, 2))
        d = polygon_distance(a, b)
        if d < 1e-3:
            continue
        duals = duals_from_closest_points(a, b)
        assert certificate_value(a, b, duals) == pytest.approx(d, abs=1e-8)
        assert verify_dual_certificate(a, b, duals, d=d - 1e-6)
        done += 1


def test_dual_soundness_random_duals():
    # any feasible certificate lower-bounds the true distance
    rng = np.random.default_rng(5)
    done = 0
    while done < 20:
        a = rand_convex(rng, rng.uniform(-4, -1, 2))
        b = rand_convex(rng, rng.uniform(1.5, 5, 2))
        d_true = polygon_distance(a, b)
        if d_true < 1e-3:
            continue
        duals = duals_from_closest_points(a, b)
        # shrink the certificate: still feasible, certifies a smaller bound
        shrink = rng.uniform(0.2, 1.0)
        weak = CollisionDuals(lam=tuple(shrink * v for v in duals.lam),
                              nu=tuple(shrink * v for v in duals.nu))
        val = certificate_value(a, b, weak)
        assert verify_dual_certificate(a, b, weak, d=val - 1e-9)
        assert d_true >= val - 1e-6
        done += 1


def test_cluster_two_clouds():
    rng = np.random.default_rng(6)
    cloud1 = rng.normal((0, 0), 0.1, (20, 2))
    cloud2 = rng.normal((5, 0), 0.1, (20, 2))
    boxes = cluster_points(np.vstack([cloud1, cloud2]), radius=0.5)
    assert len(boxes) == 2
    xs = [b.vertex_array[:, 0].min() for b in boxes]
    assert xs[0] < xs[1]


def test_cluster_chain_links_up():
    chain = np.array([[0.4 * i, 0.0] for i in range(10)])
    boxes = cluster_points(chain, radius=0.5, margin=0.1)
    assert len(boxes) == 1
    V = boxes[0].vertex_array
    assert V[:, 0].min() == pytest.approx(-0.1)
    assert V[:, 0].max() == pytest.approx(3.6 + 0.1)


def test_cluster_min_pts_filters_noise():
    pts = np.array([[0, 0], [0.1, 0], [0, 0.1], [9, 9]])
    boxes = cluster_points(pts, radius=0.5, min_pts=2)
    assert len(boxes) == 1


def test_cluster_empty_input():
    assert cluster_points(np.empty((0, 2)), radius=0.5) == []


def test_cluster_matches_bruteforce_union_find():
    rng = np.random.default_rng(7)
    for _ in range(10):
        pts = rng.uniform(0, 6, (int(rng.integers(5, 60)), 2))
        radius = float(rng.uniform(0.3, 1.2))
        labels = cluster_labels(pts, radius)
        # O(N^2) oracle
        parent = list(range(len(pts)))

        def find(i):
            while parent[i] != i:
                i = parent[i]
            return i

        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if np.linalg.norm(pts[i] - pts[j]) <= radius:
                    ri, rj = find(i), find(j)
                    if ri != rj:
                        parent[max(ri, rj)] = min(ri, rj)
        oracle = np.array([find(i) for i in range(len(pts))])
        # same partition: label pairs agree on togetherness
        same_mine = labels[:, None] == labels[None, :]
        same_oracle = oracle[:, None] == oracle[None, :]
        assert np.array_equal(same_mine, same_oracle)


def test_cluster_permutation_invariant():
    rng = np.random.default_rng(8)
    pts = rng.uniform(0, 5, (40, 2))
    boxes1 = cluster_points(pts, radius=0.6)
    perm = rng.permutation(len(pts))
    boxes2 = cluster_points(pts[perm], radius=0.6)
    assert len(boxes1) == len(boxes2)
    for b1, b2 in zip(boxes1, boxes2):
        assert np.allclose(b1.vertex_array, b2.vertex_array)
