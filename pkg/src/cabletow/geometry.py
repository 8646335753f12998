"""Convex-polygon machinery for collision constraints and obstacle extraction.

Provides the ego-region construction (team triangles plus the load
rectangle), an exact polygon-distance routine used as a test oracle, the
dual certificate check for distance lower bounds, and single-linkage
clustering of point clouds into axis-aligned obstacle boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import cKDTree

ROBOT_RADIUS = 0.3


@dataclass(frozen=True)
class ConvexPolygon:
    """A convex polygon stored both as CCW vertices and as halfspaces Ay <= b."""

    vertices: tuple[tuple[float, float], ...]
    halfspaces: tuple[np.ndarray, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        if V.ndim != 2 or V.shape[0] < 3 or V.shape[1] != 2:
            raise ValueError("need at least 3 planar vertices")
        nxt = np.roll(V, -1, axis=0)
        prv = np.roll(V, 1, axis=0)
        # CCW convexity: every turn is left or straight
        u, w = V - prv, nxt - V
        turn = u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]
        if np.any(turn < -1e-9):
            raise ValueError("vertices are not in CCW convex order")
        if _polygon_area(V) <= 1e-12:
            raise ValueError("polygon has no area")
        edge = nxt - V
        normals = np.stack([edge[:, 1], -edge[:, 0]], axis=1)
        lengths = np.linalg.norm(normals, axis=1)
        if np.any(lengths < 1e-12):
            raise ValueError("repeated vertices")
        normals /= lengths[:, None]
        b = np.sum(normals * V, axis=1)
        object.__setattr__(self, "halfspaces", (normals, b))
        object.__setattr__(self, "vertices", tuple(map(tuple, V)))

    @property
    def A(self) -> np.ndarray:
        return self.halfspaces[0]

    @property
    def b(self) -> np.ndarray:
        return self.halfspaces[1]

    @property
    def vertex_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    @property
    def num_edges(self) -> int:
        return len(self.vertices)

    def contains(self, point, tol: float = 1e-9) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(self.A @ p <= self.b + tol))

    def area(self) -> float:
        return _polygon_area(self.vertex_array)


def _polygon_area(V: np.ndarray) -> float:
    x, y = V[:, 0], V[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _ccw(V: np.ndarray) -> np.ndarray:
    """Reorder a vertex loop to CCW if its signed area is negative."""
    x, y = V[:, 0], V[:, 1]
    signed = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return V[::-1] if signed < 0 else V


def box_polygon(center, half_extents, angle: float = 0.0) -> ConvexPolygon:
    """Rectangle with the given center, half extents and rotation."""
    hx, hy = half_extents
    if hx <= 0 or hy <= 0:
        raise ValueError("half extents must be positive")
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    corners = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    V = np.asarray(center, dtype=float) + corners @ R.T
    return ConvexPolygon(tuple(map(tuple, _ccw(V))))


def load_polygon(pose, half_extents) -> ConvexPolygon:
    """Footprint rectangle of the load at an SE(2) pose (x, y, theta)."""
    x, y, th = pose
    return box_polygon((x, y), half_extents, th)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns CCW hull vertices (may be < 3)."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross2(out[-1] - out[-2], p - out[-2]) <= 1e-12:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def team_polygon(robot_positions, r_robot: float = ROBOT_RADIUS) -> list[ConvexPolygon]:
    """Convex cover of the robot team as one or more polygons.

    One robot gives a square of side ``2 r_robot``; two a spanning rectangle
    of width ``2 r_robot``; three their triangle; more the fan triangulation
    of the convex hull from its lowest-leftmost vertex.  Collinear triples
    degrade to the two-robot rectangle over the extreme pair.
    """
    P = np.atleast_2d(np.asarray(robot_positions, dtype=float))
    if P.shape[0] < 1 or P.shape[1] != 2:
        raise ValueError("need at least one planar robot position")
    n = P.shape[0]
    if n == 1:
        return [box_polygon(P[0], (r_robot, r_robot))]
    if n == 2:
        return [_segment_box(P[0], P[1], r_robot)]
    if n == 3:
        area2 = abs(_cross2(P[1] - P[0], P[2] - P[0]))
        if area2 < 1e-9:
            lo, hi = _extreme_pair(P)
            return [_segment_box(lo, hi, r_robot)]
        return [ConvexPolygon(tuple(map(tuple, _ccw(P))))]
    hull = convex_hull(P)
    if len(hull) < 3:
        lo, hi = _extreme_pair(P)
        return [_segment_box(lo, hi, r_robot)]
    pivot = np.lexsort((hull[:, 0], hull[:, 1]))[0]
    hull = np.roll(hull, -pivot, axis=0)
    return [ConvexPolygon((tuple(hull[0]), tuple(hull[k]), tuple(hull[k + 1])))
            for k in range(1, len(hull) - 1)]


def _extreme_pair(P: np.ndarray):
    d = P - P.mean(axis=0)
    axis = max(range(len(P)), key=lambda i: np.linalg.norm(d[i]))
    proj = d @ d[axis]
    return P[np.argmin(proj)], P[np.argmax(proj)]


def _segment_box(p0, p1, r: float) -> ConvexPolygon:
    length = np.linalg.norm(p1 - p0)
    if length < 1e-9:
        return box_polygon(p0, (r, r))
    mid = 0.5 * (p0 + p1)
    angle = float(np.arctan2(p1[1] - p0[1], p1[0] - p0[0]))
    return box_polygon(mid, (0.5 * length, r), angle)


@dataclass(frozen=True)
class EgoRegion:
    """Collision footprint of the system: team triangles plus load rectangle."""

    team_polygons: tuple[ConvexPolygon, ...]
    load_polygon: ConvexPolygon

    @property
    def all_polygons(self) -> tuple[ConvexPolygon, ...]:
        return self.team_polygons + (self.load_polygon,)


def ego_region(robot_positions, load_pose, half_extents,
               r_robot: float = ROBOT_RADIUS) -> EgoRegion:
    return EgoRegion(team_polygons=tuple(team_polygon(robot_positions, r_robot)),
                     load_polygon=load_polygon(load_pose, half_extents))


# ---------------------------------------------------------------------------
# Exact distance
# ---------------------------------------------------------------------------

def _point_segment(p, a, b):
    """Closest point on segment ab to p, plus the distance."""
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom < 1e-18 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    q = a + t * ab
    return q, float(np.linalg.norm(p - q))


def _separated(P: ConvexPolygon, Q: ConvexPolygon) -> bool:
    """Separating-axis test on the edge normals of both polygons."""
    for first, second in ((P, Q), (Q, P)):
        A, b = first.halfspaces
        VQ = second.vertex_array
        support = (A @ VQ.T).min(axis=1)
        if np.any(support > b + 1e-12):
            return True
    return False


def closest_points(P: ConvexPolygon, Q: ConvexPolygon):
    """Exact closest pair between two convex polygons.

    Returns ``(p, q, dist)`` with ``p`` on ``P`` and ``q`` on ``Q``;
    dist is 0 and p == q is not guaranteed when the polygons intersect.
    """
    if not _separated(P, Q):
        return None, None, 0.0
    best = (None, None, np.inf)
    VP, VQ = P.vertex_array, Q.vertex_array
    for p in VP:
        for j in range(len(VQ)):
            q, d = _point_segment(p, VQ[j], VQ[(j + 1) % len(VQ)])
            if d < best[2]:
                best = (p.copy(), q, d)
    for q in VQ:
        for j in range(len(VP)):
            p, d = _point_segment(q, VP[j], VP[(j + 1) % len(VP)])
            if d < best[2]:
                best = (p, q.copy(), d)
    return best


def polygon_distance(P: ConvexPolygon, Q: ConvexPolygon) -> float:
    """Minimum Euclidean distance between two convex polygons (0 if overlapping)."""
    return closest_points(P, Q)[2]


# ---------------------------------------------------------------------------
# Dual certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CollisionDuals:
    """Multipliers certifying a lower bound on ego-obstacle distance."""

    lam: tuple[float, ...]
    nu: tuple[float, ...]
    epsilon: float = 0.0

    def __post_init__(self):
        if any(v < -1e-12 for v in self.lam) or any(v < -1e-12 for v in self.nu):
            raise ValueError("dual multipliers must be nonnegative")
        if self.epsilon < -1e-12:
            raise ValueError("penetration slack must be nonnegative")

    @property
    def lam_array(self) -> np.ndarray:
        return np.asarray(self.lam, dtype=float)

    @property
    def nu_array(self) -> np.ndarray:
        return np.asarray(self.nu, dtype=float)


def certificate_value(ego: ConvexPolygon, obs: ConvexPolygon,
                      duals: CollisionDuals) -> float:
    """The certified distance lower bound -g_ego.nu - b_obs.lam."""
    return float(-(ego.b @ duals.nu_array) - (obs.b @ duals.lam_array))


def verify_dual_certificate(ego: ConvexPolygon, obs: ConvexPolygon,
                            duals: CollisionDuals, d: float,
                            tol: float = 1e-8) -> bool:
    """Check the distance certificate: value > d - eps, forces balance,
    obstacle-normal combination has norm below one.

    A passing certificate with epsilon = 0 proves (by weak duality)
    that the exact polygon distance is at least d.
    """
    lam, nu = duals.lam_array, duals.nu_array
    if lam.size != obs.num_edges or nu.size != ego.num_edges:
        raise ValueError("dual sizes must match polygon edge counts")
    w = obs.A.T @ lam
    if np.linalg.norm(w) > 1.0 + tol:
        return False
    if np.linalg.norm(ego.A.T @ nu + w) > tol:
        return False
    return certificate_value(ego, obs, duals) > d - duals.epsilon - tol


def duals_from_closest_points(ego: ConvexPolygon, obs: ConvexPolygon) -> CollisionDuals:
    """Construct duals attaining the exact distance from the closest pair.

    Requires strictly separated polygons.  The returned certificate value
    equals polygon_distance(ego, obs) up to numerical error.
    """
    p, q, dist = closest_points(ego, obs)
    if dist <= 0.0:
        raise ValueError("polygons intersect: no separating certificate exists")
    w = (q - p) / dist
    nu = _active_face_combination(ego, p, w)
    lam = _active_face_combination(obs, q, -w)
    return CollisionDuals(lam=tuple(lam), nu=tuple(nu), epsilon=0.0)


def _active_face_combination(poly: ConvexPolygon, point: np.ndarray,
                             target: np.ndarray) -> np.ndarray:
    """Nonnegative face-normal combination equal to ``target`` using only
    the faces active at ``point``."""
    A, b = poly.halfspaces
    active = np.where(np.abs(A @ point - b) <= 1e-7)[0]
    if active.size == 0:
        raise ValueError("closest point is not on the polygon boundary")
    coeff, resid = nnls(A[active].T, target)
    if resid > 1e-7:
        raise ValueError(f"no nonnegative active-face combination (residual {resid:g})")
    full = np.zeros(poly.num_edges)
    full[active] = coeff
    return full


# ---------------------------------------------------------------------------
# Point clustering
# ---------------------------------------------------------------------------

class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def cluster_labels(points: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage component label per point (labels are root indices)."""
    pts = np.asarray(points, dtype=float)
    uf = _UnionFind(len(pts))
    if len(pts) > 1:
        for i, j in sorted(cKDTree(pts).query_pairs(radius)):
            uf.union(i, j)
    return np.array([uf.find(i) for i in range(len(pts))])


def cluster_points(points, radius: float, min_pts: int = 1,
                   margin: float = 0.1) -> list[ConvexPolygon]:
    """Cluster points by single linkage and box each sizable cluster.

    Points within ``radius`` of each other join the same cluster; clusters
    with at least ``min_pts`` members produce their axis-aligned bounding
    box inflated by ``margin``.  Output is ordered by (min x, min y).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return []
    labels = cluster_labels(pts, radius)
    boxes = []
    for root in np.unique(labels):
        members = pts[labels == root]
        if len(members) < min_pts:
            continue
        lo = members.min(axis=0) - margin
        hi = members.max(axis=0) + margin
        hx = max(0.5 * (hi[0] - lo[0]), 1e-9)
        hy = max(0.5 * (hi[1] - lo[1]), 1e-9)
        boxes.append(box_polygon(0.5 * (lo + hi), (hx, hy)))
    boxes.sort(key=lambda poly: (poly.vertex_array[:, 0].min(),
                                 poly.vertex_array[:, 1].min()))
    return boxes
