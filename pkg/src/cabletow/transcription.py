"""Mode-fixed trajectory optimization transcribed as a smooth NLP.

Decision vector (all knots k = 1..N):

    [ X (N*nx) | U (N*2n) | T (N*n) | duals ]

with one dual block per (knot, ego polygon, obstacle) triple laid out as
``[lambda (m_o) | nu (m_e) | eps (1)]`` in (k, e, o)-lexicographic order.

Fixed slack/taut mode enters purely through variable bounds: a slack cable
has its tension pinned to zero and its length free in [l_min, l0]; a taut
cable has its length pinned to l0 and its tension in [sigma, T_max].  Mode
conformance is therefore exact by construction.

Ego polygons (team cover and load rectangle) are rebuilt from the state at
every knot with fixed combinatorics: vertex order and triangle orientation
signs are frozen at transcription time so the constraint functions stay
smooth, and orientation-preserving rows keep the frozen signs valid along
the whole solve.  Ego halfspace rows are left unnormalized; only obstacle
rows enter the norm condition of the distance certificate, and obstacles
are fixed polygons with unit normals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .geometry import ConvexPolygon, box_polygon, load_polygon
from .model import (
    PhysicalParams,
    dynamics_jacobians,
    robot_position_jacobians,
    robot_positions,
    robot_velocities,
    robot_velocity_jacobians,
    state_dim,
)
from .nlp import NlpProblem

_PERP = np.array([[0.0, 1.0], [-1.0, 0.0]])  # _PERP @ v = (vy, -vx)
_ROT90 = np.array([[0.0, -1.0], [1.0, 0.0]])  # _ROT90 @ v = (-vy, vx)


@dataclass(frozen=True)
class PlannerConfig:
    """Weights, limits and solver settings for the centralized planner."""

    horizon: int = 20
    dt: float = 0.4
    q_init: float = 10.0
    q_goal: float = 100.0
    q_x: float = 0.1
    r_u: float = 0.01
    q_t: float = 0.01
    l_slack_weight: float = 1.0
    penetration_penalty: float = 1e4
    min_separation: float = 0.2
    sigma: float = 1e-4
    tension_max: float = 100.0
    v_load_max: float = 1.0
    w_load_max: float = 1.0
    v_robot_max: float = 1.5
    u_max: float = 30.0
    theta_max: float = math.pi / 2
    thetadot_max: float = 3.0
    ldot_max: float = 1.5
    smoothing_eps: float = 0.05
    robot_radius: float = 0.3
    mode_cap: int = 8
    seed: int = 0
    max_obstacles: int = 6
    workers: int = 0
    tol_feas: float = 1e-5
    tol_kkt: float = 1e-2
    nlp_max_iter: int = 3000
    nlp_inner_max_iter: int = 200

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("q_init", "q_goal", "q_x", "r_u", "q_t", "l_slack_weight",
                     "min_separation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.penetration_penalty <= 0:
            raise ValueError("penetration penalty must be positive")
        if not 0 < self.sigma < 0.1:
            raise ValueError("sigma must be a small positive margin")

    def evolve(self, **kw) -> "PlannerConfig":
        return replace(self, **kw)


def ego_descriptors(n: int) -> list[tuple]:
    """Fixed-combinatorics ego polygon recipes for an n-robot team.

    Each entry is ("load",), ("point", i), ("segment", i, j) or
    ("triangle", i, j, k); the load rectangle always comes last.
    """
    if n == 1:
        team = [("point", 0)]
    elif n == 2:
        team = [("segment", 0, 1)]
    else:
        team = [("triangle", 0, j, j + 1) for j in range(1, n - 1)]
    return team + [("load",)]


def _ego_row_count(desc: tuple) -> int:
    return 3 if desc[0] == "triangle" else 4


def transcription_dimensions(n: int, N: int, m_obs: list[int]):
    """Closed-form (dim, n_eq, n_ineq) for the layout documented above."""
    nx = state_dim(n)
    egos = ego_descriptors(n)
    rows = [_ego_row_count(d) for d in egos]
    n_tri = sum(1 for d in egos if d[0] == "triangle")
    E, O = len(egos), len(m_obs)
    duals = N * (E * sum(m_obs) + O * sum(rows) + E * O)
    dim = N * (nx + 3 * n) + duals
    n_eq = (N - 1) * nx + 2 * N * E * O
    n_ineq = 2 * N * E * O + 2 * N * n + N * n_tri
    return dim, n_eq, n_ineq


class Transcription:
    """Callable bundle evaluating objective/constraints and their derivatives."""

    def __init__(self, x_init: np.ndarray, x_goal: np.ndarray,
                 obstacles: list[ConvexPolygon], mode, cfg: PlannerConfig,
                 params: PhysicalParams):
        if len(obstacles) > cfg.max_obstacles:
            raise ValueError(f"at most {cfg.max_obstacles} obstacles supported; "
                             f"got {len(obstacles)} (pre-cluster or cap them)")
        if mode.n != params.n:
            raise ValueError("mode length must equal robot count")
        self.cfg = cfg
        self.params = params
        self.mode = mode
        self.x_init = np.asarray(x_init, dtype=float).copy()
        if self.x_init.shape != (state_dim(params.n),):
            raise ValueError("x_init must be a full state vector")
        self.x_goal = np.asarray(x_goal, dtype=float).copy()
        if self.x_goal.shape != (3,):
            raise ValueError("goal is a load SE(2) pose")
        self.n = params.n
        self.nx = state_dim(self.n)
        self.N = cfg.horizon
        self.obs_A = [o.A.copy() for o in obstacles]
        self.obs_b = [o.b.copy() for o in obstacles]
        self.m_obs = [o.num_edges for o in obstacles]
        self.egos = ego_descriptors(self.n)
        self.tri_signs = self._triangle_signs(self.x_init)
        self.m_ego = [_ego_row_count(d) for d in self.egos]
        self.E, self.O = len(self.egos), len(obstacles)
        self.triangles = [(e,) + d[1:] for e, d in enumerate(self.egos)
                          if d[0] == "triangle"]

        N, n, nx = self.N, self.n, self.nx
        self.off_X = 0
        self.off_U = N * nx
        self.off_T = self.off_U + N * 2 * n
        self.off_D = self.off_T + N * n
        block = [self.m_obs[o] + self.m_ego[e] + 1
                 for e in range(self.E) for o in range(self.O)]
        self.block_per_k = int(sum(block))
        self.dim = self.off_D + N * self.block_per_k
        self.n_eq = (N - 1) * nx + 2 * N * self.E * self.O
        self.n_ineq = (2 * N * self.E * self.O + 2 * N * n
                       + N * len(self.triangles))
        self._cache: dict[bytes, dict] = {}

        # per-(k, e, o) dual slice table and the gathered slack indices
        self._slices = {}
        for k in range(N):
            for e in range(self.E):
                for o in range(self.O):
                    eo = e * self.O + o
                    base = (self.off_D + k * self.block_per_k
                            + int(sum(block[:eo])))
                    m_o, m_e = self.m_obs[o], self.m_ego[e]
                    self._slices[(k, e, o)] = (
                        slice(base, base + m_o),
                        slice(base + m_o, base + m_o + m_e),
                        base + m_o + m_e)
        self.eps_idx = np.array(
            [self._slices[(k, e, o)][2] for k in range(N)
             for e in range(self.E) for o in range(self.O)], dtype=int)

        # strided index arrays so constraint evaluations batch over knots
        nd = (N - 1) * nx
        neo = N * self.E * self.O
        ks = np.arange(N)
        self._ix = {}
        for e in range(self.E):
            for o in range(self.O):
                sl_l, sl_n, ie = self._slices[(0, e, o)]
                stride = ks * self.block_per_k
                eo = e * self.O + o
                self._ix[(e, o)] = {
                    "lam": stride[:, None] + np.arange(sl_l.start, sl_l.stop),
                    "nu": stride[:, None] + np.arange(sl_n.start, sl_n.stop),
                    "eps": stride + ie,
                    "force": (nd + ((ks * self.E + e) * self.O + o) * 2)[:, None]
                    + np.arange(2),
                    "cert": (ks * self.E + e) * self.O + o,
                    "norm": neo + (ks * self.E + e) * self.O + o,
                }
        self._tri_rows = {
            t: 2 * neo + 2 * N * n + ks * len(self.triangles) + t
            for t in range(len(self.triangles))}

        # Equilibrate defect rows: the smoothed friction terms make some
        # state components two orders of magnitude stiffer than the rest,
        # which would wreck the inner solver's conditioning.  A static
        # per-component scale computed at the (worst-case) rest state keeps
        # every scaled row O(1); real defects stay within 100x of the
        # scaled feasibility tolerance.
        probe = self.x_init.copy()
        probe[3 + 2 * n:] = 0.0
        _, fx0, _, _ = dynamics_jacobians(probe, np.zeros((n, 2)),
                                          np.zeros(n), params,
                                          eps=cfg.smoothing_eps)
        row_mag = np.max(np.abs(fx0[0]), axis=1)
        self.defect_scale = np.minimum(
            np.maximum(1.0, 0.5 * cfg.dt * row_mag), 100.0)
        self._inv_defect_scale = 1.0 / self.defect_scale
        self._init_jac_plan()

        # velocity entries carry Q_x; the goal weight sits on the load pose
        self.vel_mask = np.zeros(nx)
        self.vel_mask[3 + 2 * n:] = 1.0
        self.goal_vec = np.zeros(nx)
        self.goal_vec[0:3] = self.x_goal
        self.goal_mask = np.zeros(nx)
        self.goal_mask[0:3] = 1.0
        self.l_cols = 4 + 2 * np.arange(n)

        # the objective is a sum of fixed quadratics, so its Hessian is a
        # constant diagonal; the solver's Newton model uses it directly
        hd = np.zeros(self.dim)
        hX = hd[self.off_X:self.off_U].reshape(N, nx)
        hX[0] += 2.0 * cfg.q_init
        hX[-1] += 2.0 * cfg.q_goal * self.goal_mask
        hX[1:] += 2.0 * cfg.q_x * self.vel_mask
        hX[:, self.l_cols] += 2.0 * cfg.l_slack_weight
        hd[self.off_U:self.off_T] = 2.0 * cfg.r_u
        hd[self.off_T:self.off_D] = 2.0 * cfg.q_t
        hd[self.eps_idx] += 2.0 * cfg.penetration_penalty
        self._hess_diag = hd

    # ------------------------------------------------------------------
    # layout helpers
    # ------------------------------------------------------------------
    def split(self, z: np.ndarray):
        N, n, nx = self.N, self.n, self.nx
        X = z[self.off_X:self.off_U].reshape(N, nx)
        U = z[self.off_U:self.off_T].reshape(N, n, 2)
        T = z[self.off_T:self.off_D].reshape(N, n)
        D = z[self.off_D:]
        return X, U, T, D

    def dual_slices(self, k: int, e: int, o: int):
        """(lam_slice, nu_slice, eps_index) into the decision vector."""
        return self._slices[(k, e, o)]

    def _triangle_signs(self, x0: np.ndarray) -> list[float]:
        P0 = robot_positions(x0, self.params)
        signs = []
        for desc in self.egos:
            if desc[0] != "triangle":
                signs.append(1.0)
                continue
            _, i, j, k = desc
            d1, d2 = P0[j] - P0[i], P0[k] - P0[i]
            cr = d1[0] * d2[1] - d1[1] * d2[0]
            signs.append(1.0 if cr >= 0 else -1.0)
        return signs

    # ------------------------------------------------------------------
    # ego polygon builders: G (m,2), g (m,), dG (m,2,nx), dg (m,nx)
    # ------------------------------------------------------------------
    def _build_ego_batch(self, e: int, X: np.ndarray, P: np.ndarray,
                         JP: np.ndarray):
        """All-knot ego halfplane data: (N,m,2), (N,m), (N,m,2,nx), (N,m,nx)."""
        desc = self.egos[e]
        kind = desc[0]
        N, nx = self.N, self.nx
        r = self.cfg.robot_radius
        if kind == "load":
            th = X[:, 2]
            c, s = np.cos(th), np.sin(th)
            hx, hy = self.params.half_extents
            h = np.array([hx, hy, hx, hy])
            # rows of R(th) applied to the four axis normals
            G = np.empty((N, 4, 2))
            G[:, 0, 0], G[:, 0, 1] = c, s
            G[:, 1, 0], G[:, 1, 1] = -s, c
            G[:, 2] = -G[:, 0]
            G[:, 3] = -G[:, 1]
            dGdth = G @ _ROT90.T
            center = X[:, 0:2]
            g = np.einsum("nmi,ni->nm", G, center) + h
            dG = np.zeros((N, 4, 2, nx))
            dG[:, :, :, 2] = dGdth
            dg = np.zeros((N, 4, nx))
            dg[:, :, 0:2] = G
            dg[:, :, 2] = np.einsum("nmi,ni->nm", dGdth, center)
            return G, g, dG, dg
        if kind == "point":
            i = desc[1]
            p, Jp = P[:, i], JP[:, i]
            G0 = np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]])
            G = np.broadcast_to(G0, (N, 4, 2)).copy()
            g = np.empty((N, 4))
            g[:, 0] = p[:, 0] + r
            g[:, 1] = p[:, 1] + r
            g[:, 2] = -p[:, 0] + r
            g[:, 3] = -p[:, 1] + r
            dG = np.zeros((N, 4, 2, nx))
            dg = np.einsum("mi,nix->nmx", G0, Jp)
            return G, g, dG, dg
        if kind == "segment":
            i, j = desc[1], desc[2]
            p0, p1 = P[:, i], P[:, j]
            J0, J1 = JP[:, i], JP[:, j]
            t = p1 - p0
            Jt = J1 - J0
            m = t @ _PERP.T
            norm_t = np.hypot(t[:, 0], t[:, 1])
            that = t / np.maximum(norm_t, 1e-9)[:, None]
            G = np.stack([t, -t, m, -m], axis=1)
            PJt = _PERP @ Jt
            g = np.empty((N, 4))
            g[:, 0] = np.einsum("ni,ni->n", t, p1)
            g[:, 1] = -np.einsum("ni,ni->n", t, p0)
            mp0 = np.einsum("ni,ni->n", m, p0)
            g[:, 2] = mp0 + r * norm_t
            g[:, 3] = -mp0 + r * norm_t
            dG = np.stack([Jt, -Jt, PJt, -PJt], axis=1)
            dn = np.einsum("ni,nix->nx", that, Jt)
            dg = np.empty((N, 4, nx))
            dg[:, 0] = np.einsum("ni,nix->nx", t, J1) \
                + np.einsum("ni,nix->nx", p1, Jt)
            dg[:, 1] = -np.einsum("ni,nix->nx", t, J0) \
                - np.einsum("ni,nix->nx", p0, Jt)
            base = np.einsum("ni,nix->nx", m, J0) \
                + np.einsum("ni,nix->nx", p0, PJt)
            dg[:, 2] = base + r * dn
            dg[:, 3] = -base + r * dn
            return G, g, dG, dg
        _, i, j, k = desc
        s = self.tri_signs[e]
        idx = (i, j, k)
        G = np.empty((N, 3, 2))
        g = np.empty((N, 3))
        dG = np.zeros((N, 3, 2, nx))
        dg = np.zeros((N, 3, nx))
        for row, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
            pa, pb = P[:, idx[a]], P[:, idx[b]]
            Ja, Jb = JP[:, idx[a]], JP[:, idx[b]]
            G[:, row] = s * ((pb - pa) @ _PERP.T)
            g[:, row] = np.einsum("ni,ni->n", G[:, row], pa)
            dG[:, row] = s * (_PERP @ (Jb - Ja))
            dg[:, row] = s * (np.einsum("ni,nix->nx", pb @ _PERP.T, Ja)
                              + np.einsum("ni,nix->nx", pa @ _PERP, Jb))
        return G, g, dG, dg

    def _build_ego(self, e: int, xk: np.ndarray, P: np.ndarray, JP: np.ndarray):
        desc = self.egos[e]
        kind = desc[0]
        nx = self.nx
        r = self.cfg.robot_radius
        if kind == "load":
            th = xk[2]
            c, s = math.cos(th), math.sin(th)
            hx, hy = self.params.half_extents
            n0 = np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]])
            h = np.array([hx, hy, hx, hy])
            R = np.array([[c, -s], [s, c]])
            G = n0 @ R.T
            dGdth = G @ _ROT90.T  # rotate each row 90 degrees ccw
            center = xk[0:2]
            g = G @ center + h
            dG = np.zeros((4, 2, nx))
            dG[:, :, 2] = dGdth
            dg = np.zeros((4, nx))
            dg[:, 0:2] = G
            dg[:, 2] = dGdth @ center
            return G, g, dG, dg
        if kind == "point":
            i = desc[1]
            p, Jp = P[i], JP[i]
            G = np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]])
            g = np.array([p[0] + r, p[1] + r, -p[0] + r, -p[1] + r])
            dG = np.zeros((4, 2, nx))
            dg = G @ Jp
            return G, g, dG, dg
        if kind == "segment":
            i, j = desc[1], desc[2]
            p0, p1 = P[i], P[j]
            J0, J1 = JP[i], JP[j]
            t = p1 - p0
            Jt = J1 - J0
            m = _PERP @ t
            norm_t = float(np.hypot(t[0], t[1]))
            that = t / max(norm_t, 1e-9)
            G = np.stack([t, -t, m, -m])
            g = np.array([t @ p1, -(t @ p0),
                          m @ p0 + r * norm_t, -(m @ p0) + r * norm_t])
            dG = np.zeros((4, 2, nx))
            dG[0] = Jt
            dG[1] = -Jt
            dG[2] = _PERP @ Jt
            dG[3] = -dG[2]
            dg = np.zeros((4, nx))
            dg[0] = t @ J1 + p1 @ Jt
            dg[1] = -(t @ J0) - p0 @ Jt
            dn = that @ Jt
            dg[2] = m @ J0 + p0 @ (_PERP @ Jt) + r * dn
            dg[3] = -(m @ J0) - p0 @ (_PERP @ Jt) + r * dn
            return G, g, dG, dg
        # triangle with frozen orientation sign; ccw rows are s * perp(edge)
        _, i, j, k = desc
        s = self.tri_signs[e]
        pts = (P[i], P[j], P[k])
        Js = (JP[i], JP[j], JP[k])
        G = np.empty((3, 2))
        g = np.empty(3)
        dG = np.zeros((3, 2, nx))
        dg = np.zeros((3, nx))
        for row, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
            pa, pb = pts[a], pts[b]
            Ja, Jb = Js[a], Js[b]
            G[row] = s * (_PERP @ (pb - pa))
            g[row] = G[row] @ pa  # = s * pa . PERP pb since PERP is antisym
            dG[row] = s * (_PERP @ (Jb - Ja))
            dg[row] = s * ((_PERP @ pb) @ Ja + (pa @ _PERP) @ Jb)
        return G, g, dG, dg

    def ego_polygon(self, e: int, x: np.ndarray) -> ConvexPolygon:
        """Materialize ego polygon e at state x for exact-distance checks."""
        desc = self.egos[e]
        kind = desc[0]
        r = self.cfg.robot_radius
        if kind == "load":
            return load_polygon(x[0:3], self.params.half_extents)
        P = robot_positions(x, self.params)
        if kind == "point":
            return box_polygon(P[desc[1]], (r, r))
        if kind == "segment":
            p0, p1 = P[desc[1]], P[desc[2]]
            length = float(np.linalg.norm(p1 - p0))
            if length < 1e-9:
                return box_polygon(p0, (r, r))
            mid = 0.5 * (p0 + p1)
            ang = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
            return box_polygon(mid, (0.5 * length, r), ang)
        _, i, j, k = desc
        if self.tri_signs[e] > 0:
            verts = (tuple(P[i]), tuple(P[j]), tuple(P[k]))
        else:
            verts = (tuple(P[i]), tuple(P[k]), tuple(P[j]))
        return ConvexPolygon(verts)

    # ------------------------------------------------------------------
    # cached heavy evaluation
    # ------------------------------------------------------------------
    def _eval(self, z: np.ndarray) -> dict:
        key = z.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        X, U, T, _ = self.split(z)
        f, fx, fu, ft = dynamics_jacobians(X, U, T, self.params,
                                           eps=self.cfg.smoothing_eps)
        P = robot_positions(X, self.params)
        JP = robot_position_jacobians(X, self.params)
        V = robot_velocities(X, self.params)
        JV = robot_velocity_jacobians(X, self.params)
        batches = [self._build_ego_batch(e, X, P, JP) for e in range(self.E)]
        egos = [[tuple(arr[k] for arr in batches[e]) for e in range(self.E)]
                for k in range(self.N)]
        out = {"X": X.copy(), "U": U.copy(), "f": f, "fx": fx, "fu": fu,
               "ft": ft, "P": P, "JP": JP, "V": V, "JV": JV, "egos": egos,
               "ego_batch": batches}
        if len(self._cache) >= 4:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = out
        return out

    # ------------------------------------------------------------------
    # objective
    # ------------------------------------------------------------------
    def objective(self, z: np.ndarray) -> float:
        cfg = self.cfg
        X, U, T, _ = self.split(z)
        l0 = self.params.cable_length
        d1 = X[0] - self.x_init
        J = cfg.q_init * float(d1 @ d1)
        dN = (X[-1] - self.goal_vec) * self.goal_mask
        J += cfg.q_goal * float(dN @ dN)
        J += cfg.q_x * float(np.sum((X[1:] * self.vel_mask) ** 2))
        J += cfg.r_u * float(np.sum(U * U))
        J += cfg.q_t * float(np.sum(T * T))
        J += cfg.l_slack_weight * float(np.sum((l0 - X[:, self.l_cols]) ** 2))
        eps = z[self.eps_idx]
        J += cfg.penetration_penalty * float(eps @ eps)
        return J

    def gradient(self, z: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        X, U, T, _ = self.split(z)
        l0 = self.params.cable_length
        g = np.zeros(self.dim)
        gX = g[self.off_X:self.off_U].reshape(self.N, self.nx)
        gX[0] += 2 * cfg.q_init * (X[0] - self.x_init)
        gX[-1] += 2 * cfg.q_goal * (X[-1] - self.goal_vec) * self.goal_mask
        gX[1:] += 2 * cfg.q_x * X[1:] * self.vel_mask
        gX[:, self.l_cols] += -2 * cfg.l_slack_weight * (l0 - X[:, self.l_cols])
        g[self.off_U:self.off_T] = 2 * cfg.r_u * U.ravel()
        g[self.off_T:self.off_D] = 2 * cfg.q_t * T.ravel()
        g[self.eps_idx] += 2 * cfg.penetration_penalty * z[self.eps_idx]
        return g

    # ------------------------------------------------------------------
    # equality constraints: defects then certificate force balance
    # ------------------------------------------------------------------
    def defects(self, z: np.ndarray) -> np.ndarray:
        """Unscaled trapezoidal defects, shape (N-1, nx)."""
        ev = self._eval(z)
        X, f = ev["X"], ev["f"]
        dt = self.cfg.dt
        return X[1:] - X[:-1] - 0.5 * dt * (f[:-1] + f[1:])

    def eq_fn(self, z: np.ndarray) -> np.ndarray:
        ev = self._eval(z)
        X, f = ev["X"], ev["f"]
        dt = self.cfg.dt
        out = np.empty(self.n_eq)
        nd = (self.N - 1) * self.nx
        defects = (X[1:] - X[:-1] - 0.5 * dt * (f[:-1] + f[1:]))
        defects = defects * self._inv_defect_scale
        out[:nd] = defects.ravel()
        for e in range(self.E):
            Gb = ev["ego_batch"][e][0]
            for o in range(self.O):
                ix = self._ix[(e, o)]
                out[ix["force"]] = (np.einsum("nmc,nm->nc", Gb, z[ix["nu"]])
                                    + z[ix["lam"]] @ self.obs_A[o])
        return out

    def eq_vjp(self, z: np.ndarray, v: np.ndarray) -> np.ndarray:
        ev = self._eval(z)
        fx, fu, ft = ev["fx"], ev["fu"], ev["ft"]
        dt = self.cfg.dt
        N, nx, n = self.N, self.nx, self.n
        nd = (N - 1) * nx
        Vd = v[:nd].reshape(N - 1, nx) * self._inv_defect_scale
        g = np.zeros(self.dim)
        gX = g[self.off_X:self.off_U].reshape(N, nx)
        gU = g[self.off_U:self.off_T].reshape(N, n, 2)
        gT = g[self.off_T:self.off_D].reshape(N, n)
        gX[1:] += Vd
        gX[:-1] -= Vd
        S = np.zeros((N, nx))
        S[:-1] += Vd
        S[1:] += Vd
        gX -= 0.5 * dt * np.einsum("koi,ko->ki", fx, S)
        gU -= 0.5 * dt * np.einsum("koic,ko->kic", fu, S)
        gT -= 0.5 * dt * np.einsum("koi,ko->ki", ft, S)
        for e in range(self.E):
            Gb, _, dGb, _ = ev["ego_batch"][e]
            for o in range(self.O):
                ix = self._ix[(e, o)]
                V2 = v[ix["force"]]
                g[ix["lam"]] += V2 @ self.obs_A[o].T
                g[ix["nu"]] += np.einsum("nmc,nc->nm", Gb, V2)
                gX += np.einsum("nm,nmci,nc->ni", z[ix["nu"]], dGb, V2)
        return g

    # ------------------------------------------------------------------
    # inequality constraints (<= 0): certificate, dual norm, robot speed,
    # input norm, triangle orientation
    # ------------------------------------------------------------------
    def ineq_fn(self, z: np.ndarray) -> np.ndarray:
        ev = self._eval(z)
        cfg = self.cfg
        out = np.empty(self.n_ineq)
        lim = (1.0 - cfg.sigma) ** 2
        for e in range(self.E):
            gb = ev["ego_batch"][e][1]
            for o in range(self.O):
                ix = self._ix[(e, o)]
                lam = z[ix["lam"]]
                out[ix["cert"]] = (cfg.min_separation - z[ix["eps"]]
                                   + np.einsum("nm,nm->n", gb, z[ix["nu"]])
                                   + lam @ self.obs_b[o])
                w = lam @ self.obs_A[o]
                out[ix["norm"]] = np.einsum("nc,nc->n", w, w) - lim
        V = ev["V"]
        nv = self.N * self.n
        pos = 2 * self.N * self.E * self.O
        out[pos:pos + nv] = (np.sum(V * V, axis=-1)
                             - cfg.v_robot_max ** 2).ravel()
        pos += nv
        U = ev["U"]
        out[pos:pos + nv] = (np.sum(U * U, axis=-1) - cfg.u_max ** 2).ravel()
        P = ev["P"]
        for t, (e, i, j, m) in enumerate(self.triangles):
            d1 = P[:, j] - P[:, i]
            d2 = P[:, m] - P[:, i]
            cr = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
            out[self._tri_rows[t]] = -self.tri_signs[e] * cr
        return out

    def ineq_vjp(self, z: np.ndarray, v: np.ndarray) -> np.ndarray:
        ev = self._eval(z)
        N, n = self.N, self.n
        g = np.zeros(self.dim)
        gX = g[self.off_X:self.off_U].reshape(N, self.nx)
        gU = g[self.off_U:self.off_T].reshape(N, n, 2)
        for e in range(self.E):
            _, gb, _, dgb = ev["ego_batch"][e]
            for o in range(self.O):
                ix = self._ix[(e, o)]
                w = v[ix["cert"]]
                g[ix["eps"]] -= w
                g[ix["nu"]] += w[:, None] * gb
                g[ix["lam"]] += w[:, None] * self.obs_b[o]
                gX += w[:, None] * np.einsum("nm,nmi->ni", z[ix["nu"]], dgb)
                wn = v[ix["norm"]]
                lam = z[ix["lam"]]
                g[ix["lam"]] += (2.0 * wn)[:, None] * ((lam @ self.obs_A[o])
                                                       @ self.obs_A[o].T)
        nv = N * n
        pos = 2 * N * self.E * self.O
        Wv = v[pos:pos + nv].reshape(N, n)
        pos += nv
        gX += 2.0 * np.einsum("kn,knc,knci->ki", Wv, ev["V"], ev["JV"])
        Wu = v[pos:pos + nv].reshape(N, n)
        gU += 2.0 * Wu[..., None] * ev["U"]
        P, JP = ev["P"], ev["JP"]
        for t, (e, i, j, m) in enumerate(self.triangles):
            w = v[self._tri_rows[t]]
            d1 = P[:, j] - P[:, i]
            d2 = P[:, m] - P[:, i]
            c1 = d2 @ _PERP.T      # d(cross)/d(d1)
            c2 = -(d1 @ _PERP.T)
            coeff = (-self.tri_signs[e] * w)[:, None]
            gX += coeff * (np.einsum("nc,ncx->nx", c1, JP[:, j] - JP[:, i])
                           + np.einsum("nc,ncx->nx", c2, JP[:, m] - JP[:, i]))
        return g

    # dense Jacobians assembled directly from the cached evaluation; these
    # feed the solver's Gauss-Newton model, so they must stay cheap
    def eq_jac(self, z: np.ndarray) -> np.ndarray:
        ev = self._eval(z)
        fx, fu, ft = ev["fx"], ev["fu"], ev["ft"]
        dt = self.cfg.dt
        N, nx, n = self.N, self.nx, self.n
        J = np.zeros((self.n_eq, self.dim))
        isc = self._inv_defect_scale[:, None]
        eye = np.eye(nx)
        for k in range(N - 1):
            r = slice(k * nx, (k + 1) * nx)
            cx0 = slice(self.off_X + k * nx, self.off_X + (k + 1) * nx)
            cx1 = slice(self.off_X + (k + 1) * nx, self.off_X + (k + 2) * nx)
            cu0 = slice(self.off_U + k * 2 * n, self.off_U + (k + 1) * 2 * n)
            cu1 = slice(self.off_U + (k + 1) * 2 * n,
                        self.off_U + (k + 2) * 2 * n)
            ct0 = slice(self.off_T + k * n, self.off_T + (k + 1) * n)
            ct1 = slice(self.off_T + (k + 1) * n, self.off_T + (k + 2) * n)
            J[r, cx0] = -(eye + 0.5 * dt * fx[k]) * isc
            J[r, cx1] = (eye - 0.5 * dt * fx[k + 1]) * isc
            J[r, cu0] = -0.5 * dt * fu[k].reshape(nx, 2 * n) * isc
            J[r, cu1] = -0.5 * dt * fu[k + 1].reshape(nx, 2 * n) * isc
            J[r, ct0] = -0.5 * dt * ft[k] * isc
            J[r, ct1] = -0.5 * dt * ft[k + 1] * isc
        pos = (N - 1) * nx
        for k in range(N):
            cx = slice(self.off_X + k * nx, self.off_X + (k + 1) * nx)
            for e in range(self.E):
                G, _, dG, _ = ev["egos"][k][e]
                for o in range(self.O):
                    sl_l, sl_n, _ = self._slices[(k, e, o)]
                    J[pos:pos + 2, sl_n] = G.T
                    J[pos:pos + 2, sl_l] = self.obs_A[o].T
                    J[pos:pos + 2, cx] = np.einsum("m,mci->ci", z[sl_n], dG)
                    pos += 2
        return J

    def ineq_jac(self, z: np.ndarray) -> np.ndarray:
        ev = self._eval(z)
        N, n, nx = self.N, self.n, self.nx
        J = np.zeros((self.n_ineq, self.dim))
        pos = 0
        for k in range(N):
            cx = slice(self.off_X + k * nx, self.off_X + (k + 1) * nx)
            for e in range(self.E):
                _, gvec, _, dg = ev["egos"][k][e]
                for o in range(self.O):
                    sl_l, sl_n, ie = self._slices[(k, e, o)]
                    J[pos, ie] = -1.0
                    J[pos, sl_n] = gvec
                    J[pos, sl_l] = self.obs_b[o]
                    J[pos, cx] = z[sl_n] @ dg
                    pos += 1
        for k in range(N):
            for e in range(self.E):
                for o in range(self.O):
                    sl_l, _, _ = self._slices[(k, e, o)]
                    Ao = self.obs_A[o]
                    J[pos, sl_l] = 2.0 * (Ao @ (Ao.T @ z[sl_l]))
                    pos += 1
        V, JV = ev["V"], ev["JV"]
        for k in range(N):
            cx = slice(self.off_X + k * nx, self.off_X + (k + 1) * nx)
            J[pos:pos + n, cx] = 2.0 * np.einsum("nc,nci->ni", V[k], JV[k])
            pos += n
        U = ev["U"]
        for k in range(N):
            for i in range(n):
                cu = self.off_U + (k * n + i) * 2
                J[pos, cu:cu + 2] = 2.0 * U[k, i]
                pos += 1
        P, JP = ev["P"], ev["JP"]
        for k in range(N):
            cx = slice(self.off_X + k * nx, self.off_X + (k + 1) * nx)
            for e, i, j, m in self.triangles:
                d1 = P[k, j] - P[k, i]
                d2 = P[k, m] - P[k, i]
                c1 = _PERP @ d2
                c2 = -(_PERP @ d1)
                J[pos, cx] = -self.tri_signs[e] * (
                    c1 @ (JP[k, j] - JP[k, i]) + c2 @ (JP[k, m] - JP[k, i]))
                pos += 1
        return J

    def hess_diag(self, z: np.ndarray) -> np.ndarray:
        """Diagonal of the objective Hessian (constant for quadratic costs)."""
        return self._hess_diag

    # sparse Jacobians over a fixed structural pattern; the solver factors
    # J^T J every iteration so assembly must not touch dense buffers
    def _init_jac_plan(self):
        N, nx, n = self.N, self.nx, self.n
        ar = np.arange

        def block(rows, cols):
            r = np.broadcast_to(rows[..., None], rows.shape + (cols.size,))
            c = np.broadcast_to(cols, rows.shape + (cols.size,))
            return r.ravel(), c.ravel()

        rows_e, cols_e = [], []
        drow = (ar(N - 1) * nx)[:, None] + ar(nx)
        for coff, width in ((self.off_X, nx), (self.off_X + nx, nx),
                            (self.off_U, 2 * n), (self.off_U + 2 * n, 2 * n),
                            (self.off_T, n), (self.off_T + n, n)):
            step = {nx: nx, 2 * n: 2 * n, n: n}[width]
            ccol = (coff + ar(N - 1)[:, None] * step)[:, :, None] + ar(width)
            r = np.broadcast_to(drow[:, :, None], (N - 1, nx, width))
            c = np.broadcast_to(ccol, (N - 1, nx, width))
            rows_e.append(r.ravel())
            cols_e.append(c.ravel())
        xcols = self.off_X + (ar(N) * nx)[:, None] + ar(nx)
        for e in range(self.E):
            m_e = self.m_ego[e]
            for o in range(self.O):
                ix = self._ix[(e, o)]
                m_o = self.m_obs[o]
                fr = ix["force"]                    # (N,2) equality row ids
                r, c = block(fr, ar(m_e))
                rows_e.append(r)
                cols_e.append(np.repeat(ix["nu"], 2, axis=0).reshape(
                    N, 2, m_e).ravel())
                r, c = block(fr, ar(m_o))
                rows_e.append(r)
                cols_e.append(np.repeat(ix["lam"], 2, axis=0).reshape(
                    N, 2, m_o).ravel())
                r = np.broadcast_to(fr[:, :, None], (N, 2, nx))
                c = np.broadcast_to(xcols[:, None, :], (N, 2, nx))
                rows_e.append(r.ravel())
                cols_e.append(c.ravel())
        self._eq_plan = self._coo_plan(rows_e, cols_e,
                                       (self.n_eq, self.dim))

        rows_i, cols_i = [], []
        for e in range(self.E):
            m_e = self.m_ego[e]
            for o in range(self.O):
                ix = self._ix[(e, o)]
                m_o = self.m_obs[o]
                cert = ix["cert"]
                rows_i.append(cert)
                cols_i.append(ix["eps"])
                r = np.broadcast_to(cert[:, None], (N, m_e))
                rows_i.append(r.ravel())
                cols_i.append(ix["nu"].ravel())
                r = np.broadcast_to(cert[:, None], (N, m_o))
                rows_i.append(r.ravel())
                cols_i.append(ix["lam"].ravel())
                r = np.broadcast_to(cert[:, None], (N, nx))
                rows_i.append(r.ravel())
                cols_i.append(xcols.ravel())
                r = np.broadcast_to(ix["norm"][:, None], (N, m_o))
                rows_i.append(r.ravel())
                cols_i.append(ix["lam"].ravel())
        neo = N * self.E * self.O
        speed_rows = 2 * neo + ar(N * n)
        r = np.broadcast_to(speed_rows.reshape(N, n)[:, :, None], (N, n, nx))
        c = np.broadcast_to(xcols[:, None, :], (N, n, nx))
        rows_i.append(r.ravel())
        cols_i.append(c.ravel())
        unorm_rows = 2 * neo + N * n + ar(N * n)
        r = np.repeat(unorm_rows, 2)
        c = self.off_U + ar(2 * N * n)
        rows_i.append(r)
        cols_i.append(c)
        for t in range(len(self.triangles)):
            r = np.broadcast_to(self._tri_rows[t][:, None], (N, nx))
            rows_i.append(r.ravel())
            cols_i.append(xcols.ravel())
        self._ineq_plan = self._coo_plan(rows_i, cols_i,
                                         (self.n_ineq, self.dim))

    @staticmethod
    def _coo_plan(rows, cols, shape):
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        probe = sparse.coo_matrix(
            (np.arange(1.0, rows.size + 1.0), (rows, cols)),
            shape=shape).tocsr()
        if probe.nnz != rows.size:
            raise AssertionError("jacobian pattern has duplicate entries")
        perm = probe.data.astype(np.int64) - 1
        return probe.indices, probe.indptr, perm, shape

    def _csr(self, plan, segs):
        indices, indptr, perm, shape = plan
        vals = np.concatenate([np.ravel(s) for s in segs])
        return sparse.csr_matrix((vals[perm], indices, indptr), shape=shape)

    def eq_jac_sparse(self, z: np.ndarray):
        ev = self._eval(z)
        fx, fu, ft = ev["fx"], ev["fu"], ev["ft"]
        dt = self.cfg.dt
        N, nx, n = self.N, self.nx, self.n
        isc = self._inv_defect_scale[:, None]
        eye = np.eye(nx)
        segs = [
            -(eye + 0.5 * dt * fx[:-1]) * isc,
            (eye - 0.5 * dt * fx[1:]) * isc,
            -0.5 * dt * fu[:-1].reshape(N - 1, nx, 2 * n) * isc,
            -0.5 * dt * fu[1:].reshape(N - 1, nx, 2 * n) * isc,
            -0.5 * dt * ft[:-1] * isc,
            -0.5 * dt * ft[1:] * isc,
        ]
        for e in range(self.E):
            Gb, _, dGb, _ = ev["ego_batch"][e]
            for o in range(self.O):
                ix = self._ix[(e, o)]
                segs.append(Gb.transpose(0, 2, 1))
                segs.append(np.broadcast_to(self.obs_A[o].T,
                                            (N,) + self.obs_A[o].T.shape))
                segs.append(np.einsum("nm,nmci->nci", z[ix["nu"]], dGb))
        return self._csr(self._eq_plan, segs)

    def ineq_jac_sparse(self, z: np.ndarray):
        ev = self._eval(z)
        N, n, nx = self.N, self.n, self.nx
        segs = []
        for e in range(self.E):
            _, gb, _, dgb = ev["ego_batch"][e]
            for o in range(self.O):
                ix = self._ix[(e, o)]
                lam = z[ix["lam"]]
                segs.append(np.full(N, -1.0))
                segs.append(gb)
                segs.append(np.broadcast_to(self.obs_b[o], (N,)
                                            + self.obs_b[o].shape))
                segs.append(np.einsum("nm,nmi->ni", z[ix["nu"]], dgb))
                segs.append(2.0 * (lam @ self.obs_A[o]) @ self.obs_A[o].T)
        segs.append(2.0 * np.einsum("knc,knci->kni", ev["V"], ev["JV"]))
        segs.append(2.0 * ev["U"])
        P, JP = ev["P"], ev["JP"]
        for e, i, j, m in self.triangles:
            c1 = (P[:, m] - P[:, i]) @ _PERP.T
            c2 = -((P[:, j] - P[:, i]) @ _PERP.T)
            segs.append(-self.tri_signs[e] * (
                np.einsum("nc,ncx->nx", c1, JP[:, j] - JP[:, i])
                + np.einsum("nc,ncx->nx", c2, JP[:, m] - JP[:, i])))
        return self._csr(self._ineq_plan, segs)

    # ------------------------------------------------------------------
    # bounds and initial guess
    # ------------------------------------------------------------------
    def bounds(self):
        cfg = self.cfg
        N, n, nx = self.N, self.n, self.nx
        l0 = self.params.cable_length
        lmin = self.params.cable_min_length
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        xlo = np.full(nx, -np.inf)
        xhi = np.full(nx, np.inf)
        for i in range(n):
            xlo[3 + 2 * i], xhi[3 + 2 * i] = -cfg.theta_max, cfg.theta_max
            if self.mode.delta[i] == 1:
                xlo[4 + 2 * i] = xhi[4 + 2 * i] = l0
            else:
                xlo[4 + 2 * i], xhi[4 + 2 * i] = lmin, l0
        iv = 3 + 2 * n
        xlo[iv:iv + 2], xhi[iv:iv + 2] = -cfg.v_load_max, cfg.v_load_max
        xlo[iv + 2], xhi[iv + 2] = -cfg.w_load_max, cfg.w_load_max
        for i in range(n):
            xlo[iv + 3 + 2 * i] = -cfg.thetadot_max
            xhi[iv + 3 + 2 * i] = cfg.thetadot_max
            xlo[iv + 4 + 2 * i] = -cfg.ldot_max
            xhi[iv + 4 + 2 * i] = cfg.ldot_max
        lo[self.off_X:self.off_U] = np.tile(xlo, N)
        hi[self.off_X:self.off_U] = np.tile(xhi, N)
        lo[self.off_U:self.off_T] = -cfg.u_max
        hi[self.off_U:self.off_T] = cfg.u_max
        tlo = np.zeros(n)
        thi = np.zeros(n)
        for i in range(n):
            if self.mode.delta[i] == 1:
                tlo[i], thi[i] = cfg.sigma, cfg.tension_max
        lo[self.off_T:self.off_D] = np.tile(tlo, N)
        hi[self.off_T:self.off_D] = np.tile(thi, N)
        lo[self.off_D:] = 0.0  # duals and slacks are nonnegative
        return lo, hi

    def initial_guess(self) -> np.ndarray:
        """Cold start: straight-line load pose sweep, held cable coordinates."""
        cfg = self.cfg
        N, n, nx = self.N, self.n, self.nx
        l0 = self.params.cable_length
        z = np.zeros(self.dim)
        X = z[self.off_X:self.off_U].reshape(N, nx)
        X[:] = self.x_init
        alpha = np.linspace(0.0, 1.0, N)
        pose0 = self.x_init[0:3]
        dpose = self.x_goal - pose0
        horizon_t = (N - 1) * cfg.dt
        vmax = np.array([cfg.v_load_max, cfg.v_load_max, cfg.w_load_max])
        dpose = np.clip(dpose, -0.9 * vmax * horizon_t, 0.9 * vmax * horizon_t)
        X[:, 0:3] = pose0 + alpha[:, None] * dpose
        iv = 3 + 2 * n
        X[:, iv:iv + 3] = dpose / horizon_t
        X[0, iv:iv + 3] = self.x_init[iv:iv + 3]
        for i in range(n):
            if self.mode.delta[i] == 1:
                X[:, 4 + 2 * i] = l0
        T = z[self.off_T:self.off_D].reshape(N, n)
        n_taut = max(1, sum(self.mode.delta))
        drag = self.params.mu_tan * self.params.load_mass * self.params.gravity
        for i in range(n):
            if self.mode.delta[i] == 1:
                T[:, i] = drag / n_taut
        z[self.off_D:] = 1e-3
        return z

    def column_scales(self, z: np.ndarray) -> np.ndarray:
        """Variable scaling that equilibrates constraint Jacobian columns.

        Force-like variables move the defects orders of magnitude less than
        state variables do per unit step; scaling them up correspondingly
        keeps the solver's quasi-Newton model well conditioned.
        """
        J = np.vstack([self.eq_jac(z), self.ineq_jac(z)])
        colmax = np.max(np.abs(J), axis=0)
        return np.clip(1.0 / np.maximum(colmax, 1e-12), 0.1, 100.0)

    def problem(self, z0: np.ndarray | None = None) -> NlpProblem:
        lo, hi = self.bounds()
        if z0 is None:
            z0 = self.initial_guess()
        return NlpProblem(
            n=self.dim, objective=self.objective, gradient=self.gradient,
            x0=z0, lower=lo, upper=hi,
            n_eq=self.n_eq, eq_fn=self.eq_fn, eq_jac=self.eq_jac_sparse,
            eq_vjp=self.eq_vjp,
            n_ineq=self.n_ineq, ineq_fn=self.ineq_fn,
            ineq_jac=self.ineq_jac_sparse,
            ineq_vjp=self.ineq_vjp, hess_diag=self.hess_diag,
            col_scale=self.column_scales(z0),
            name=f"mode={self.mode.bits()}")
