"""Lattice A* for the load over an occupancy grid.

The search space is the discretized SE(2) configuration of the load: grid
cells for translation and ``n_theta`` uniform yaw bins.  Moves are the 8
translation neighbors plus +-1 yaw bin; move cost is Euclidean cell-center
distance plus ``w_yaw`` times the yaw change.  A node is feasible when the
load rectangle, inflated by a safety margin, covers no occupied cell.

Only the load footprint is checked here; robot clearance is the downstream
planners' job.
"""

from __future__ import annotations

import functools
import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import ConvexPolygon, box_polygon, _separated

N_THETA = 16
W_YAW = 0.5
M_INFLATE = 0.1
DEFAULT_RESOLUTION = 0.1


class PathNotFound(RuntimeError):
    """No lattice path connects start to goal."""


class SnapError(ValueError):
    """Start or goal pose cannot be snapped to a free lattice node."""


@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean occupancy over a regular grid; row 0 is the minimum-y row."""

    resolution: float
    width: int
    height: int
    origin: tuple[float, float]
    occupancy: np.ndarray  # (height, width) bool

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != (self.height, self.width):
            raise ValueError("occupancy shape must be (height, width)")
        object.__setattr__(self, "occupancy", occ)

    # ---- coordinate transforms -------------------------------------------
    def world_to_cell(self, point) -> tuple[int, int]:
        x, y = point
        ix = int(math.floor((x - self.origin[0]) / self.resolution))
        iy = int(math.floor((y - self.origin[1]) / self.resolution))
        return ix, iy

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return np.array([self.origin[0] + (ix + 0.5) * self.resolution,
                         self.origin[1] + (iy + 0.5) * self.resolution])

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def occupied_centers(self) -> np.ndarray:
        """World coordinates of all occupied cell centers, (M, 2)."""
        iy, ix = np.nonzero(self.occupancy)
        return np.stack([self.origin[0] + (ix + 0.5) * self.resolution,
                         self.origin[1] + (iy + 0.5) * self.resolution], axis=1)

    # ---- construction ------------------------------------------------------
    @classmethod
    def empty(cls, bounds, resolution: float = DEFAULT_RESOLUTION) -> "OccupancyGrid":
        """Free grid covering [xmin, xmax] x [ymin, ymax]."""
        (xmin, xmax), (ymin, ymax) = bounds
        w = max(1, int(round((xmax - xmin) / resolution)))
        h = max(1, int(round((ymax - ymin) / resolution)))
        return cls(resolution=resolution, width=w, height=h,
                   origin=(xmin, ymin), occupancy=np.zeros((h, w), dtype=bool))

    def with_obstacles(self, polygons) -> "OccupancyGrid":
        """Copy with cells intersecting any of the polygons marked occupied."""
        occ = self.occupancy.copy()
        half = 0.5 * self.resolution
        cx = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        cy = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        for poly in polygons:
            V = poly.vertex_array
            if _axis_aligned(poly):
                mx = (cx >= V[:, 0].min() - half - 1e-12) \
                    & (cx <= V[:, 0].max() + half + 1e-12)
                my = (cy >= V[:, 1].min() - half - 1e-12) \
                    & (cy <= V[:, 1].max() + half + 1e-12)
                occ[np.ix_(my, mx)] = True
                continue
            ix0, iy0 = self.world_to_cell(V.min(axis=0) - half)
            ix1, iy1 = self.world_to_cell(V.max(axis=0) + half)
            for iy in range(max(iy0, 0), min(iy1 + 1, self.height)):
                for ix in range(max(ix0, 0), min(ix1 + 1, self.width)):
                    cell = box_polygon(self.cell_center(ix, iy), (half, half))
                    if not _separated(cell, poly):
                        occ[iy, ix] = True
        return OccupancyGrid(self.resolution, self.width, self.height,
                             self.origin, occ)

    # ---- text format --------------------------------------------------------
    def to_text(self) -> str:
        lines = [f"width {self.width}", f"height {self.height}",
                 f"resolution {self.resolution:.12g}",
                 f"origin_x {self.origin[0]:.12g}",
                 f"origin_y {self.origin[1]:.12g}"]
        for iy in range(self.height):
            lines.append("".join("1" if v else "0" for v in self.occupancy[iy]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OccupancyGrid":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = {}
        for ln in lines[:5]:
            key, val = ln.split()
            header[key] = val
        expected = {"width", "height", "resolution", "origin_x", "origin_y"}
        if set(header) != expected:
            raise ValueError(f"grid header must define {sorted(expected)}")
        w, h = int(header["width"]), int(header["height"])
        rows = lines[5:]
        if len(rows) != h:
            raise ValueError(f"expected {h} occupancy rows, found {len(rows)}")
        occ = np.zeros((h, w), dtype=bool)
        for iy, row in enumerate(rows):
            if len(row) != w or set(row) - {"0", "1"}:
                raise ValueError(f"occupancy row {iy} is not {w} chars of 0/1")
            occ[iy] = np.frombuffer(row.encode(), dtype=np.uint8) == ord("1")
        return cls(resolution=float(header["resolution"]), width=w, height=h,
                   origin=(float(header["origin_x"]), float(header["origin_y"])),
                   occupancy=occ)

    def save(self, path: str):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path: str) -> "OccupancyGrid":
        with open(path) as fh:
            return cls.from_text(fh.read())


@dataclass(frozen=True)
class GlobalPath:
    """Lattice path for the load: poses with cumulative arc length."""

    poses: np.ndarray       # (M, 3), yaw unwrapped (continuous)
    arc_lengths: np.ndarray  # (M,)
    cost: float

    def __post_init__(self):
        object.__setattr__(self, "poses", np.asarray(self.poses, dtype=float))
        object.__setattr__(self, "arc_lengths",
                           np.asarray(self.arc_lengths, dtype=float))
        if self.poses.shape[0] != self.arc_lengths.shape[0]:
            raise ValueError("poses and arc lengths disagree")

    @property
    def length(self) -> float:
        return float(self.arc_lengths[-1]) if len(self.arc_lengths) else 0.0

    def pose_at_arc(self, s: float) -> np.ndarray:
        """Pose at arc length s: first knot at or beyond s (clamped), advanced
        through any in-place rotation knots sharing that arc."""
        arcs = self.arc_lengths
        idx = min(int(np.searchsorted(arcs, s - 1e-12)), len(arcs) - 1)
        while idx + 1 < len(arcs) and arcs[idx + 1] - arcs[idx] < 1e-12:
            idx += 1
        return self.poses[idx].copy()


def _axis_aligned(poly: ConvexPolygon) -> bool:
    a = np.sort(np.abs(poly.A), axis=1)
    return bool(np.all(a[:, 0] < 1e-12) and np.all(np.abs(a[:, 1] - 1.0) < 1e-12))


@functools.lru_cache(maxsize=256)
def _rect_cell_kernel(hx_inflated: float, hy_inflated: float, yaw: float,
                      resolution: float) -> np.ndarray:
    """Boolean stamp of the inflated load rectangle over cell offsets.

    Entry (dy + r, dx + r) is True when a grid cell offset (dx, dy) from the
    rectangle's center cell intersects the rectangle; exact SAT test per cell.
    """
    hx, hy = hx_inflated, hy_inflated
    rect = box_polygon((0.0, 0.0), (hx, hy), yaw)
    reach = math.hypot(hx, hy) + 0.71 * resolution
    r = int(math.ceil(reach / resolution))
    K = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
    half = 0.5 * resolution
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            cell = box_polygon((dx * resolution, dy * resolution), (half, half))
            K[dy + r, dx + r] = not _separated(cell, rect)
    return K


def footprint_blocked_table(grid: OccupancyGrid, half_extents,
                            n_theta: int = N_THETA,
                            inflate: float = M_INFLATE) -> np.ndarray:
    """(n_theta, height, width) table: True where the load footprint at that
    yaw bin would touch an occupied cell."""
    out = np.empty((n_theta, grid.height, grid.width), dtype=bool)
    for ith in range(n_theta):
        yaw = 2.0 * math.pi * ith / n_theta
        K = _rect_cell_kernel(float(half_extents[0] + inflate),
                              float(half_extents[1] + inflate),
                              yaw, float(grid.resolution))
        out[ith] = ndimage.binary_dilation(grid.occupancy, structure=K)
    return out


def _snap(grid: OccupancyGrid, pose, n_theta: int):
    ix, iy = grid.world_to_cell(pose[:2])
    ith = int(round(pose[2] / (2.0 * math.pi / n_theta))) % n_theta
    return ix, iy, ith


def astar_plan(grid: OccupancyGrid, start, goal, half_extents=(0.25, 0.25),
               n_theta: int = N_THETA, w_yaw: float = W_YAW,
               inflate: float = M_INFLATE, use_heuristic: bool = True,
               blocked: np.ndarray | None = None) -> GlobalPath:
    """Minimum-cost lattice path for the load from start to goal pose.

    ``use_heuristic=False`` degrades to Dijkstra (the test oracle).  A
    precomputed ``blocked`` table may be passed to amortize footprint
    checks across calls.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if blocked is None:
        blocked = footprint_blocked_table(grid, half_extents, n_theta, inflate)
    W, H = grid.width, grid.height
    sx, sy, sth = _snap(grid, start, n_theta)
    gx, gy, gth = _snap(grid, goal, n_theta)
    for name, (ix, iy, ith) in (("start", (sx, sy, sth)), ("goal", (gx, gy, gth))):
        if not grid.in_bounds(ix, iy):
            raise SnapError(f"{name} pose is off the grid")
        if blocked[ith, iy, ix]:
            raise SnapError(f"{name} footprint collides with the map")

    res = grid.resolution
    yaw_step = 2.0 * math.pi / n_theta
    moves = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx or dy:
                moves.append((dx, dy, 0, res * math.hypot(dx, dy)))
    moves.append((0, 0, 1, w_yaw * yaw_step))
    moves.append((0, 0, -1, w_yaw * yaw_step))

    def encode(ix, iy, ith):
        return (ith * H + iy) * W + ix

    def heuristic(ix, iy, ith):
        if not use_heuristic:
            return 0.0
        d = math.hypot((ix - gx) * res, (iy - gy) * res)
        gap = abs(ith - gth) % n_theta
        gap = min(gap, n_theta - gap)
        return d + w_yaw * gap * yaw_step

    start_id = encode(sx, sy, sth)
    goal_id = encode(gx, gy, gth)
    dist = {start_id: 0.0}
    parent = {}
    closed = set()
    counter = 0
    heap = [(heuristic(sx, sy, sth), counter, start_id, sx, sy, sth)]
    found = False
    while heap:
        _, _, nid, ix, iy, ith = heapq.heappop(heap)
        if nid in closed:
            continue
        closed.add(nid)
        if nid == goal_id:
            found = True
            break
        d0 = dist[nid]
        for dx, dy, dth, c in moves:
            jx, jy = ix + dx, iy + dy
            jth = (ith + dth) % n_theta
            if not (0 <= jx < W and 0 <= jy < H):
                continue
            if blocked[jth, jy, jx]:
                continue
            mid = encode(jx, jy, jth)
            nd = d0 + c
            if nd < dist.get(mid, math.inf) - 1e-15:
                dist[mid] = nd
                parent[mid] = (nid, ix, iy, ith, dth)
                counter += 1
                heapq.heappush(heap, (nd + heuristic(jx, jy, jth), counter,
                                      mid, jx, jy, jth))
    if not found:
        raise PathNotFound("lattice search exhausted without reaching the goal")

    # walk back, then build poses with unwrapped yaw
    chain = []
    nid, cur = goal_id, (gx, gy, gth)
    while nid != start_id:
        pnid, px, py, pth, dth = parent[nid]
        chain.append((cur, dth))
        nid, cur = pnid, (px, py, pth)
    chain.append(((sx, sy, sth), 0))
    chain.reverse()

    yaw = start[2] + _wrap(sth * yaw_step - start[2])
    poses = []
    arcs = [0.0]
    prev_xy = None
    for (ix, iy, ith), dth in chain:
        center = grid.cell_center(ix, iy)
        if poses:
            yaw += dth * yaw_step
            arcs.append(arcs[-1] + float(np.linalg.norm(center - prev_xy)))
        poses.append([center[0], center[1], yaw])
        prev_xy = center
    return GlobalPath(poses=np.array(poses), arc_lengths=np.array(arcs),
                      cost=dist[goal_id])


def _wrap(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def project_arc(path: GlobalPath, load_position, min_arc: float = 0.0) -> float:
    """Arc length of the path pose nearest to the load position.

    Restricting the search to arcs >= min_arc makes repeated calls
    monotone as the load advances.
    """
    pos = np.asarray(load_position, dtype=float)
    mask = path.arc_lengths >= min_arc - 1e-12
    if not np.any(mask):
        return float(path.arc_lengths[-1])
    cand = np.nonzero(mask)[0]
    d = np.linalg.norm(path.poses[cand, :2] - pos, axis=1)
    return float(path.arc_lengths[cand[int(np.argmin(d))]])


def local_goal(path: GlobalPath, load_position, lookahead: float = 2.0,
               min_arc: float = 0.0) -> np.ndarray:
    """Pose on the path ``lookahead`` meters of arc ahead of the load's
    projection, clamped to the path end."""
    if len(path.poses) == 0:
        raise ValueError("empty path")
    s = project_arc(path, load_position, min_arc)
    return path.pose_at_arc(s + lookahead)
