"""Physical model of a rigid planar load towed by point-mass robots on cables.

The load is a rectangle sliding on the ground with Coulomb friction; each
robot is a point mass connected to an attachment point on the load boundary
by a massless, inextensible cable of nominal length ``l0``.  A cable is taut
when the robot-attachment separation equals ``l0`` and transmits tension,
and slack (zero tension) otherwise.

State layout (stacked vector of dimension ``6 + 4n``)::

    [x_l, y_l, theta_l, theta_1, l_1, ..., theta_n, l_n,
     xd_l, yd_l, thetad_l, thetad_1, ld_1, ..., thetad_n, ld_n]

``theta_i`` is the cable bearing of robot ``i`` measured from its
attachment-face outward normal, so every robot sits at ``theta_i = 0`` when
directly in front of its face.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

# Below this robot-load separation the cable-coordinate Jacobian is treated
# as singular and the dynamics refuse to evaluate.
L_FLOOR = 0.05


class DegenerateConfigurationError(RuntimeError):
    """Raised when a cable length falls below the kinematic-Jacobian floor."""


def _face_center_attachments(n: int, hx: float, hy: float) -> np.ndarray:
    """Default attachment points: face centers for n <= 4, spread rays beyond."""
    faces = [(0.0, -hy), (hx, 0.0), (0.0, hy), (-hx, 0.0)]
    if n <= 4:
        return np.array(faces[:n], dtype=float)
    pts = []
    for j in range(n):
        phi = -0.5 * math.pi + 2.0 * math.pi * j / n
        dx, dy = math.cos(phi), math.sin(phi)
        # scale the ray from the center until it hits the rectangle boundary
        s = min(hx / abs(dx) if abs(dx) > 1e-12 else math.inf,
                hy / abs(dy) if abs(dy) > 1e-12 else math.inf)
        pts.append((s * dx, s * dy))
    return np.array(pts, dtype=float)


@dataclass(frozen=True)
class PhysicalParams:
    """Masses, geometry and friction constants of the load-robot system."""

    load_mass: float
    load_inertia: float
    half_extents: tuple[float, float]
    mu_tan: float
    mu_tor: float
    gravity: float
    robot_masses: tuple[float, ...]
    cable_length: float
    cable_min_length: float
    attachments: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if self.load_mass <= 0 or self.load_inertia <= 0:
            raise ValueError("load mass and inertia must be positive")
        if min(self.half_extents) <= 0:
            raise ValueError("half extents must be positive")
        if any(m <= 0 for m in self.robot_masses):
            raise ValueError("robot masses must be positive")
        if not 0 < self.cable_min_length < self.cable_length:
            raise ValueError("need 0 < l_min < l0")
        if len(self.attachments) != len(self.robot_masses):
            raise ValueError("one attachment per robot required")
        hx, hy = self.half_extents
        for ax, ay in self.attachments:
            on_x = abs(abs(ax) - hx) < 1e-9 and abs(ay) <= hy + 1e-9
            on_y = abs(abs(ay) - hy) < 1e-9 and abs(ax) <= hx + 1e-9
            if not (on_x or on_y):
                raise ValueError(f"attachment ({ax}, {ay}) not on load boundary")

    @classmethod
    def default(cls, n: int = 3, *, load_mass: float = 5.0,
                half_extents: tuple[float, float] = (0.25, 0.25),
                mu_tan: float = 0.3, mu_tor: float = 0.1,
                gravity: float = 9.81, robot_mass: float = 10.0,
                cable_length: float = 1.0, cable_min_length: float = 0.3,
                attachments: np.ndarray | None = None) -> "PhysicalParams":
        """Build parameters with declared defaults; inertia assumes uniform density."""
        hx, hy = half_extents
        inertia = load_mass * ((2 * hx) ** 2 + (2 * hy) ** 2) / 12.0
        if attachments is None:
            attachments = _face_center_attachments(n, hx, hy)
        att = tuple((float(a[0]), float(a[1])) for a in np.asarray(attachments))
        return cls(load_mass=load_mass, load_inertia=inertia,
                   half_extents=(float(hx), float(hy)), mu_tan=mu_tan,
                   mu_tor=mu_tor, gravity=gravity,
                   robot_masses=(float(robot_mass),) * n,
                   cable_length=float(cable_length),
                   cable_min_length=float(cable_min_length), attachments=att)

    @property
    def n(self) -> int:
        return len(self.robot_masses)

    @property
    def attachment_array(self) -> np.ndarray:
        return np.asarray(self.attachments, dtype=float)

    @property
    def attachment_angles(self) -> np.ndarray:
        """Outward face-normal angle of each attachment in the load body frame."""
        a = self.attachment_array
        return np.arctan2(a[:, 1], a[:, 0])

    @property
    def robot_mass_array(self) -> np.ndarray:
        return np.asarray(self.robot_masses, dtype=float)


def state_dim(n: int) -> int:
    return 6 + 4 * n


@dataclass(frozen=True)
class SystemState:
    """Full system state: load pose/twist and per-cable angle/length with rates."""

    load_pose: tuple[float, float, float]
    load_twist: tuple[float, float, float]
    cable_angles: tuple[float, ...]
    cable_lengths: tuple[float, ...]
    cable_angle_rates: tuple[float, ...]
    cable_length_rates: tuple[float, ...]

    def __post_init__(self):
        n = len(self.cable_angles)
        for name in ("cable_lengths", "cable_angle_rates", "cable_length_rates"):
            if len(getattr(self, name)) != n:
                raise ValueError("cable field lengths disagree")

    @property
    def n(self) -> int:
        return len(self.cable_angles)

    def to_vector(self) -> np.ndarray:
        n = self.n
        x = np.empty(state_dim(n))
        x[0:3] = self.load_pose
        x[3:3 + 2 * n:2] = self.cable_angles
        x[4:4 + 2 * n:2] = self.cable_lengths
        off = 3 + 2 * n
        x[off:off + 3] = self.load_twist
        x[off + 3::2] = self.cable_angle_rates
        x[off + 4::2] = self.cable_length_rates
        return x

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "SystemState":
        x = np.asarray(x, dtype=float)
        n = (x.size - 6) // 4
        if x.size != state_dim(n):
            raise ValueError(f"state vector length {x.size} is not 6 + 4n")
        off = 3 + 2 * n
        return cls(load_pose=tuple(x[0:3]), load_twist=tuple(x[off:off + 3]),
                   cable_angles=tuple(x[3:off:2]), cable_lengths=tuple(x[4:off:2]),
                   cable_angle_rates=tuple(x[off + 3::2]),
                   cable_length_rates=tuple(x[off + 4::2]))

    @classmethod
    def rest(cls, n: int, load_pose=(0.0, 0.0, 0.0), cable_angles=None,
             cable_lengths=None, l0: float = 1.0) -> "SystemState":
        """Stationary state with all rates zero."""
        ang = tuple(cable_angles) if cable_angles is not None else (0.0,) * n
        ln = tuple(cable_lengths) if cable_lengths is not None else (l0,) * n
        z = (0.0,) * n
        return cls(load_pose=tuple(load_pose), load_twist=(0.0, 0.0, 0.0),
                   cable_angles=ang, cable_lengths=ln,
                   cable_angle_rates=z, cable_length_rates=z)


@dataclass(frozen=True)
class RobotState:
    """Planar robot pose and twist (6 scalars)."""

    x: float
    y: float
    heading: float
    vx: float
    vy: float
    yaw_rate: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])


@dataclass(frozen=True)
class ControlInput:
    """Virtual robot forces plus cable tensions for one instant."""

    forces: tuple[tuple[float, float], ...]
    tensions: tuple[float, ...]

    def __post_init__(self):
        if len(self.forces) != len(self.tensions):
            raise ValueError("forces and tensions must have equal length")
        if any(t < 0 for t in self.tensions):
            raise ValueError("tensions must be nonnegative")

    @classmethod
    def zero(cls, n: int) -> "ControlInput":
        return cls(forces=((0.0, 0.0),) * n, tensions=(0.0,) * n)

    @classmethod
    def make(cls, forces, tensions) -> "ControlInput":
        f = np.asarray(forces, dtype=float).reshape(-1, 2)
        t = np.asarray(tensions, dtype=float).ravel()
        return cls(forces=tuple(map(tuple, f)), tensions=tuple(t))

    @property
    def force_array(self) -> np.ndarray:
        return np.asarray(self.forces, dtype=float)

    @property
    def tension_array(self) -> np.ndarray:
        return np.asarray(self.tensions, dtype=float)


@dataclass(frozen=True, order=True)
class ModeVector:
    """Binary slack(0)/taut(1) assignment for the n cables."""

    delta: tuple[int, ...]

    def __post_init__(self):
        if any(d not in (0, 1) for d in self.delta):
            raise ValueError("mode entries must be 0 or 1")

    @classmethod
    def from_int(cls, value: int, n: int) -> "ModeVector":
        return cls(tuple((value >> (n - 1 - i)) & 1 for i in range(n)))

    @classmethod
    def all_taut(cls, n: int) -> "ModeVector":
        return cls((1,) * n)

    @property
    def n(self) -> int:
        return len(self.delta)

    @property
    def n_slack(self) -> int:
        return self.delta.count(0)

    def as_int(self) -> int:
        v = 0
        for d in self.delta:
            v = (v << 1) | d
        return v

    def bits(self) -> str:
        return "".join(str(d) for d in self.delta)


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def _split(x: np.ndarray, n: int):
    """View a batch of state vectors (K, 6+4n) as named components."""
    nq = 3 + 2 * n
    pose = x[..., 0:3]
    theta = x[..., 3:nq:2]
    length = x[..., 4:nq:2]
    twist = x[..., nq:nq + 3]
    theta_d = x[..., nq + 3::2]
    length_d = x[..., nq + 4::2]
    return pose, theta, length, twist, theta_d, length_d


def cable_geometry(x: np.ndarray, params: PhysicalParams):
    """Per-cable world geometry for a batch of states.

    Returns (s, e, e_perp) where ``s`` is the world-frame attachment offset
    from the load center, ``e`` the unit cable direction and ``e_perp`` its
    left-hand normal; each shaped (..., n, 2).
    """
    n = params.n
    pose, theta, _, _, _, _ = _split(np.asarray(x, dtype=float), n)
    th_l = pose[..., 2]
    c, s_ = np.cos(th_l)[..., None], np.sin(th_l)[..., None]
    ra = params.attachment_array
    sx = c * ra[:, 0] - s_ * ra[:, 1]
    sy = s_ * ra[:, 0] + c * ra[:, 1]
    beta = th_l[..., None] + params.attachment_angles + theta
    e = np.stack([np.cos(beta), np.sin(beta)], axis=-1)
    e_perp = np.stack([-np.sin(beta), np.cos(beta)], axis=-1)
    return np.stack([sx, sy], axis=-1), e, e_perp


def robot_positions(x: np.ndarray, params: PhysicalParams) -> np.ndarray:
    """Forward kinematics: world positions of all robots, shape (..., n, 2)."""
    x = np.asarray(x, dtype=float)
    _, _, length, _, _, _ = _split(x, params.n)
    s, e, _ = cable_geometry(x, params)
    return x[..., None, 0:2] + s + length[..., None] * e


def robot_velocities(x: np.ndarray, params: PhysicalParams) -> np.ndarray:
    """World velocities of all robots, shape (..., n, 2)."""
    x = np.asarray(x, dtype=float)
    _, _, length, twist, theta_d, length_d = _split(x, params.n)
    s, e, e_perp = cable_geometry(x, params)
    w_l = twist[..., 2]
    omega = w_l[..., None] + theta_d
    perp_s = np.stack([-s[..., 1], s[..., 0]], axis=-1)
    return (twist[..., None, 0:2] + w_l[..., None, None] * perp_s
            + length_d[..., None] * e
            + (length * omega)[..., None] * e_perp)


def robot_position(state: SystemState, params: PhysicalParams, i: int) -> np.ndarray:
    """World position of robot ``i`` (1-based, following the cable numbering)."""
    if not 1 <= i <= params.n:
        raise IndexError(f"robot index {i} out of range 1..{params.n}")
    return robot_positions(state.to_vector(), params)[i - 1]


def robot_velocity_jacobians(x: np.ndarray, params: PhysicalParams) -> np.ndarray:
    """d(robot velocity)/d(state) for each robot, shape (..., n, 2, 6+4n)."""
    x = np.asarray(x, dtype=float)
    n = params.n
    nq = 3 + 2 * n
    _, _, length, twist, theta_d, length_d = _split(x, n)
    s, e, e_perp = cable_geometry(x, params)
    w_l = twist[..., 2]
    omega = w_l[..., None] + theta_d
    perp_s = np.stack([-s[..., 1], s[..., 0]], axis=-1)
    J = np.zeros(x.shape[:-1] + (n, 2, state_dim(n)))
    J[..., 0, nq + 0] = 1.0
    J[..., 1, nq + 1] = 1.0
    # e and e_perp rotate with both theta_l and theta_i; perp(s) with theta_l
    rot_e = (length_d[..., None] * e_perp - (length * omega)[..., None] * e)
    J[..., :, 2] = -w_l[..., None, None] * s + rot_e
    J[..., :, nq + 2] = perp_s + length[..., None] * e_perp
    for i in range(n):
        J[..., i, :, 3 + 2 * i] = rot_e[..., i, :]
        J[..., i, :, 4 + 2 * i] = omega[..., i, None] * e_perp[..., i, :]
        J[..., i, :, nq + 3 + 2 * i] = length[..., i, None] * e_perp[..., i, :]
        J[..., i, :, nq + 4 + 2 * i] = e[..., i, :]
    return J


def robot_position_jacobians(x: np.ndarray, params: PhysicalParams) -> np.ndarray:
    """d(robot position)/d(state) for each robot, shape (..., n, 2, 6+4n).

    Only the pose/cable coordinate columns are nonzero.
    """
    x = np.asarray(x, dtype=float)
    n = params.n
    _, _, length, _, _, _ = _split(x, n)
    s, e, e_perp = cable_geometry(x, params)
    J = np.zeros(x.shape[:-1] + (n, 2, state_dim(n)))
    J[..., 0, 0] = 1.0
    J[..., 1, 1] = 1.0
    perp_s = np.stack([-s[..., 1], s[..., 0]], axis=-1)
    J[..., :, 2] = perp_s + length[..., None] * e_perp
    for i in range(n):
        J[..., i, :, 3 + 2 * i] = length[..., i, None] * e_perp[..., i, :]
        J[..., i, :, 4 + 2 * i] = e[..., i, :]
    return J


# ---------------------------------------------------------------------------
# Continuous dynamics
# ---------------------------------------------------------------------------

def dynamics(x: np.ndarray, u: np.ndarray, t: np.ndarray,
             params: PhysicalParams, eps: float = 1e-3) -> np.ndarray:
    """State derivative for a batch of states.

    ``x`` has shape (..., 6+4n); ``u`` (..., n, 2) virtual robot forces;
    ``t`` (..., n) cable tensions.  ``eps`` smooths the Coulomb friction
    terms (sqrt-regularized speed, tanh-regularized spin sign); it must be
    positive for the derivative to exist at rest.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    t = np.asarray(t, dtype=float)
    n = params.n
    nq = 3 + 2 * n
    _, _, length, twist, theta_d, length_d = _split(x, n)
    if np.any(length < L_FLOOR):
        raise DegenerateConfigurationError(
            f"cable length below {L_FLOOR} m: kinematic Jacobian singular")
    s, e, e_perp = cable_geometry(x, params)

    m_l, I_l, g = params.load_mass, params.load_inertia, params.gravity
    v_l = twist[..., 0:2]
    w_l = twist[..., 2]

    speed = np.sqrt(np.sum(v_l * v_l, axis=-1) + eps * eps)
    fric = params.mu_tan * m_l * g * v_l / speed[..., None]
    a_l = (np.sum(t[..., None] * e, axis=-2) - fric) / m_l

    cross = s[..., 0] * e[..., 1] - s[..., 1] * e[..., 0]
    tor_fric = params.mu_tor * m_l * g * np.tanh(w_l / eps)
    alpha_l = (np.sum(t * cross, axis=-1) - tor_fric) / I_l

    a_r = (u - t[..., None] * e) / params.robot_mass_array[:, None]

    omega = w_l[..., None] + theta_d
    perp_s = np.stack([-s[..., 1], s[..., 0]], axis=-1)
    w = (a_r - a_l[..., None, :] - alpha_l[..., None, None] * perp_s
         + (w_l * w_l)[..., None, None] * s)
    ldd = np.sum(w * e, axis=-1) + length * omega * omega
    omega_dot = (np.sum(w * e_perp, axis=-1) - 2.0 * length_d * omega) / length
    thdd = omega_dot - alpha_l[..., None]

    f = np.empty_like(x)
    f[..., :nq] = x[..., nq:]
    f[..., nq:nq + 2] = a_l
    f[..., nq + 2] = alpha_l
    f[..., nq + 3::2] = thdd
    f[..., nq + 4::2] = ldd
    return f


def dynamics_jacobians(x: np.ndarray, u: np.ndarray, t: np.ndarray,
                       params: PhysicalParams, eps: float = 1e-3):
    """Dynamics value plus analytic Jacobians w.r.t. state, forces, tensions.

    Returns ``(f, fx, fu, ft)`` with shapes (K, nx), (K, nx, nx),
    (K, nx, n, 2), (K, nx, n) for a batch of K states.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    K = x.shape[0]
    n = params.n
    nx = state_dim(n)
    nq = 3 + 2 * n
    u = np.asarray(u, dtype=float).reshape(K, n, 2)
    t = np.asarray(t, dtype=float).reshape(K, n)

    _, _, length, twist, theta_d, length_d = _split(x, n)
    if np.any(length < L_FLOOR):
        raise DegenerateConfigurationError(
            f"cable length below {L_FLOOR} m: kinematic Jacobian singular")
    s, e, e_perp = cable_geometry(x, params)
    m_l, I_l, g = params.load_mass, params.load_inertia, params.gravity
    m_r = params.robot_mass_array
    v_l = twist[..., 0:2]
    w_l = twist[..., 2]
    perp_s = np.stack([-s[..., 1], s[..., 0]], axis=-1)

    iv = nq          # first velocity index: xd_l
    iw = nq + 2      # thetad_l index

    # --- load translation ------------------------------------------------
    speed = np.sqrt(np.sum(v_l * v_l, axis=-1) + eps * eps)
    fric = params.mu_tan * m_l * g * v_l / speed[..., None]
    sum_te = np.einsum("ki,kij->kj", t, e)
    a_l = (sum_te - fric) / m_l
    # d a_l / d v_l: -mu g (I/rho - v v^T / rho^3)
    eye2 = np.eye(2)
    dal_dv = -params.mu_tan * g * (eye2 / speed[:, None, None]
                                   - v_l[:, :, None] * v_l[:, None, :]
                                   / speed[:, None, None] ** 3)
    dal_dthl = np.einsum("ki,kij->kj", t, e_perp) / m_l      # (K,2)
    dal_dthi = t[..., None] * e_perp / m_l                   # (K,n,2)
    dal_dti = e / m_l                                        # (K,n,2)

    # --- load rotation ----------------------------------------------------
    cross = s[..., 0] * e[..., 1] - s[..., 1] * e[..., 0]
    tanh_w = np.tanh(w_l / eps)
    alpha_l = (np.sum(t * cross, axis=-1)
               - params.mu_tor * m_l * g * tanh_w) / I_l
    s_dot_e = np.sum(s * e, axis=-1)
    # rotating s and e together leaves the cross product unchanged, so the
    # only theta_l dependence of the torque is zero; theta_i rotates e alone
    dalpha_dthi = t * s_dot_e / I_l                          # (K,n)
    dalpha_dwl = -params.mu_tor * m_l * g * (1.0 - tanh_w ** 2) / eps / I_l
    dalpha_dti = cross / I_l                                 # (K,n)

    # --- robot point-mass acceleration ------------------------------------
    a_r = (u - t[..., None] * e) / m_r[:, None]
    dar_dthl = -(t[..., None] * e_perp) / m_r[:, None]       # (K,n,2) (also d/dtheta_i)
    dar_dti = -e / m_r[:, None]                              # (K,n,2)

    # --- cable-coordinate accelerations ------------------------------------
    omega = w_l[..., None] + theta_d
    w_vec = (a_r - a_l[:, None, :] - alpha_l[:, None, None] * perp_s
             + (w_l ** 2)[:, None, None] * s)
    ldd = np.sum(w_vec * e, axis=-1) + length * omega ** 2
    omega_dot = (np.sum(w_vec * e_perp, axis=-1) - 2.0 * length_d * omega) / length
    thdd = omega_dot - alpha_l[:, None]

    f = np.empty((K, nx))
    f[:, :nq] = x[:, nq:]
    f[:, nq:nq + 2] = a_l
    f[:, iw] = alpha_l
    f[:, nq + 3::2] = thdd
    f[:, nq + 4::2] = ldd

    fx = np.zeros((K, nx, nx))
    fu = np.zeros((K, nx, n, 2))
    ft = np.zeros((K, nx, n))
    fx[:, :nq, nq:] = np.eye(nq)  # qdot rows

    idx = np.arange(n)
    col_th = 3 + 2 * idx
    col_l = 4 + 2 * idx
    col_thd = nq + 3 + 2 * idx
    col_ld = nq + 4 + 2 * idx
    row_th = nq + 3 + 2 * idx
    row_l = nq + 4 + 2 * idx

    # a_l rows
    fx[:, nq:nq + 2, iv:iv + 2] = dal_dv
    fx[:, nq:nq + 2, 2] = dal_dthl
    fx[:, nq + 0, col_th] = dal_dthi[..., 0]
    fx[:, nq + 1, col_th] = dal_dthi[..., 1]
    ft[:, nq + 0, :] = dal_dti[..., 0]
    ft[:, nq + 1, :] = dal_dti[..., 1]

    # alpha_l row
    fx[:, iw, col_th] = dalpha_dthi
    fx[:, iw, iw] = dalpha_dwl
    ft[:, iw, :] = dalpha_dti

    # w_vec partials, then project onto e / e_perp per robot.
    # dw/d(v_l-block via a_l), dw/d(theta_l), dw/d(theta_j cross-coupling):
    # robot i's w depends on every theta_j through a_l and alpha_l.
    dperp_s_dthl = -s                                   # d perp(s)/d theta_l
    ds_dthl = perp_s

    # d/d theta_l: a_l shifts (dal_dthl), alpha_l is invariant, perp_s, s,
    # e and e_perp all rotate (for every robot).
    dw_dthl = (dar_dthl - dal_dthl[:, None, :]
               - alpha_l[:, None, None] * dperp_s_dthl
               + (w_l ** 2)[:, None, None] * ds_dthl)
    dldd_dthl = (np.sum(dw_dthl * e, axis=-1) + np.sum(w_vec * e_perp, axis=-1))
    domega_dthl = ((np.sum(dw_dthl * e_perp, axis=-1) - np.sum(w_vec * e, axis=-1))
                   / length)
    fx[:, row_l, 2] = dldd_dthl
    fx[:, row_th, 2] = domega_dthl

    # d/d theta_j: through a_l (all robots) plus alpha_l (all) plus own e rotation.
    # Cross-coupling term for robot i w.r.t. theta_j (j != i):
    #   dw_i = -dal_dthi[j] - dalpha_dthi[j] * perp_s_i
    dal_j = dal_dthi                                     # (K,j,2)
    dalpha_j = dalpha_dthi                               # (K,j)
    # build (K, i, j) tensors
    dw_cross = (-dal_j[:, None, :, :]
                - dalpha_j[:, None, :, None] * perp_s[:, :, None, :])
    dldd_cross = np.einsum("kijc,kic->kij", dw_cross, e)
    domega_cross = np.einsum("kijc,kic->kij", dw_cross, e_perp) / length[:, :, None]
    dthdd_cross = domega_cross - dalpha_j[:, None, :]
    # own-angle extra: e and e_perp rotate with theta_i, and a_r_i changes
    dw_own = dar_dthl                                    # same formula: -T e_perp / m_r
    dldd_own = np.sum(dw_own * e, axis=-1) + np.sum(w_vec * e_perp, axis=-1)
    domega_own = (np.sum(dw_own * e_perp, axis=-1) - np.sum(w_vec * e, axis=-1)) / length
    ii = np.arange(n)
    dldd_cross[:, ii, ii] += dldd_own
    dthdd_cross[:, ii, ii] += domega_own
    for j in range(n):
        fx[:, row_l, 3 + 2 * j] += dldd_cross[:, :, j]
        fx[:, row_th, 3 + 2 * j] += dthdd_cross[:, :, j]

    # d/d l_i (own only): ldd += omega^2 ; omega_dot has -1/l^2 factor
    fx[:, row_l, col_l] = omega ** 2
    fx[:, row_th, col_l] = -omega_dot / length

    # d/d v_l (through a_l in w, all robots)
    dw_dv = -dal_dv                                      # (K,2,2) applies to every robot
    for c in range(2):
        dldd = np.einsum("kc,kic->ki", dw_dv[:, :, c], e)
        domg = np.einsum("kc,kic->ki", dw_dv[:, :, c], e_perp) / length
        fx[:, row_l, iv + c] = dldd
        fx[:, row_th, iv + c] = domg

    # d/d w_l: w gets -dalpha_dwl*perp_s + 2 w_l s ; omega term adds
    dw_dwl = (-dalpha_dwl[:, None, None] * perp_s
              + 2.0 * w_l[:, None, None] * s)
    dldd_dwl = np.sum(dw_dwl * e, axis=-1) + 2.0 * length * omega
    domega_dwl = (np.sum(dw_dwl * e_perp, axis=-1) - 2.0 * length_d) / length
    fx[:, row_l, iw] = dldd_dwl
    fx[:, row_th, iw] = domega_dwl - dalpha_dwl[:, None]

    # d/d theta_d_i (own): ldd: 2 l omega ; omega_dot: -2 l_d / l
    fx[:, row_l, col_thd] = 2.0 * length * omega
    fx[:, row_th, col_thd] = -2.0 * length_d / length

    # d/d l_d_i (own): omega_dot: -2 omega / l
    fx[:, row_th, col_ld] = -2.0 * omega / length

    # --- input Jacobians ---------------------------------------------------
    # u_i affects only robot i through a_r_i = u_i/m_r
    for c in range(2):
        fu[:, row_l, idx, c] = e[:, :, c] / m_r
        fu[:, row_th, idx, c] = e_perp[:, :, c] / (m_r * length)

    # tensions: a_l, alpha_l (all robots), a_r_i (own)
    # robot i, tension j: dw_i/dT_j = -dal_dti[j] - dalpha_dti[j]*perp_s_i (+ own dar term)
    dw_t = (-dal_dti[:, None, :, :]
            - dalpha_dti[:, None, :, None] * perp_s[:, :, None, :])
    dldd_t = np.einsum("kijc,kic->kij", dw_t, e)
    domg_t = np.einsum("kijc,kic->kij", dw_t, e_perp) / length[:, :, None]
    dthdd_t = domg_t - dalpha_dti[:, None, :]
    own_dldd = np.sum(dar_dti * e, axis=-1)
    own_domg = np.sum(dar_dti * e_perp, axis=-1) / length
    dldd_t[:, ii, ii] += own_dldd
    dthdd_t[:, ii, ii] += own_domg
    for j in range(n):
        ft[:, row_l, j] += dldd_t[:, :, j]
        ft[:, row_th, j] += dthdd_t[:, :, j]

    return f, fx, fu, ft


def system_dynamics(state: SystemState, inp: ControlInput,
                    params: PhysicalParams, smoothing: float = 1e-3) -> np.ndarray:
    """State derivative of the full system as a stacked vector."""
    if len(inp.tensions) != params.n:
        raise ValueError("tension vector length must equal robot count")
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    return dynamics(state.to_vector(), inp.force_array, inp.tension_array,
                    params, eps=smoothing)


def complementarity_residual(inp: ControlInput, state: SystemState, l0: float):
    """Per-cable T*(l0 - l) residuals plus sign-violation magnitudes.

    Returns ``(residual, neg_tension, over_length)`` arrays; a physically
    valid slack/taut assignment has all three at zero.
    """
    t = inp.tension_array
    ln = np.asarray(state.cable_lengths, dtype=float)
    return t * (l0 - ln), np.maximum(0.0, -t), np.maximum(0.0, ln - l0)


def total_momentum(x: np.ndarray, params: PhysicalParams) -> np.ndarray:
    """Total linear momentum of load plus robots."""
    x = np.asarray(x, dtype=float)
    nq = 3 + 2 * params.n
    p = params.load_mass * x[..., nq:nq + 2]
    vr = robot_velocities(x, params)
    return p + np.einsum("i,...ij->...j", params.robot_mass_array, vr)


# ---------------------------------------------------------------------------
# Fixed-step integrators
# ---------------------------------------------------------------------------

def _input_at(inputs, time: float, n: int):
    if callable(inputs):
        inp = inputs(time)
    else:
        inp = inputs
    if isinstance(inp, ControlInput):
        return inp.force_array, inp.tension_array
    u, t = inp
    return np.asarray(u, dtype=float).reshape(n, 2), np.asarray(t, dtype=float).ravel()


def integrate(state: SystemState, inputs, params: PhysicalParams, dt: float,
              steps: int, method: str = "rk4", smoothing: float = 1e-3) -> np.ndarray:
    """Fixed-step integration of the system dynamics.

    ``inputs`` is a ControlInput, an ``(u, t)`` pair, or a callable of time
    returning either.  Returns the trajectory as an array of shape
    ``(steps + 1, 6 + 4n)`` including the initial state.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n = params.n
    x = state.to_vector()
    out = np.empty((steps + 1, x.size))
    out[0] = x
    for k in range(steps):
        tk = k * dt
        if method == "rk4":
            x = _rk4_step(x, tk, dt, inputs, params, smoothing)
        elif method == "trapezoid":
            x = _trapezoid_step(x, tk, dt, inputs, params, smoothing)
        else:
            raise ValueError(f"unknown method {method!r}")
        out[k + 1] = x
    return out


def _rk4_step(x, tk, dt, inputs, params, eps):
    n = params.n
    u1, t1 = _input_at(inputs, tk, n)
    um, tm = _input_at(inputs, tk + 0.5 * dt, n)
    u2, t2 = _input_at(inputs, tk + dt, n)
    k1 = dynamics(x, u1, t1, params, eps)
    k2 = dynamics(x + 0.5 * dt * k1, um, tm, params, eps)
    k3 = dynamics(x + 0.5 * dt * k2, um, tm, params, eps)
    k4 = dynamics(x + dt * k3, u2, t2, params, eps)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _trapezoid_step(x, tk, dt, inputs, params, eps, tol=1e-12, max_iter=50):
    """Implicit trapezoid step solved by Newton iteration (matches the
    planner's collocation rule on the same grid)."""
    n = params.n
    u1, t1 = _input_at(inputs, tk, n)
    u2, t2 = _input_at(inputs, tk + dt, n)
    f1 = dynamics(x, u1, t1, params, eps)
    xn = x + dt * f1  # explicit Euler predictor
    nx = x.size
    for _ in range(max_iter):
        f2, fx2, _, _ = dynamics_jacobians(xn, u2, t2, params, eps)
        r = xn - x - 0.5 * dt * (f1 + f2[0])
        if np.max(np.abs(r)) < tol:
            break
        J = np.eye(nx) - 0.5 * dt * fx2[0]
        xn = xn - np.linalg.solve(J, r)
    return xn
