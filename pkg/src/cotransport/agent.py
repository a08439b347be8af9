"""Agent kinematics and dynamics.

Two concrete models share one informal interface (``n_q``, ``task_dim``,
``forward_kinematics``, ``jacobian``, ``jacobian_dot``, ``joint_space_terms``,
``singularity_measure``, grasp data):

* ``PlanarAgent`` -- ground vehicle base (x, y) plus a two-revolute arm in the
  vertical plane; task vector (x_E, y_E, z_E, roll). This is the reduced model
  used by the desk-scale team scenario; all its terms are analytic.
* ``SpatialAgent`` -- floating 6-DOF base (position + x-y-z Euler angles) plus
  a revolute chain; task vector is the full 6-D end-effector twist. Inertia
  terms are assembled from per-body Jacobians; Coriolis terms come from
  Christoffel symbols of the inertia matrix so that Bdot - 2N stays
  antisymmetric.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Ellipsoid,
    euler_from_rotation,
    euler_rate_jacobian,
    rot_x,
    rot_xyz,
    skew,
)


class SingularityError(RuntimeError):
    """Configuration is (numerically) singular for the requested operation."""


@dataclass
class AgentState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.qdot = np.asarray(self.qdot, dtype=float).reshape(-1)
        if self.q.shape != self.qdot.shape:
            raise ValueError("q and qdot must have equal length")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qdot))):
            raise ValueError("agent state must be finite")

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])


@dataclass
class EndEffectorPose:
    position: np.ndarray
    euler: np.ndarray


@dataclass
class AgentLimits:
    """Input/state bounds; non-finite entries disable the matching constraint."""

    input_box: float = np.inf            # per-component |u_j| bound
    tau_limit: float = np.inf            # ||J^T u||
    tau_rate_limit: float = np.inf       # ||Jdot^T u + J^T udot||
    joint_velocity_limit: float = np.inf  # per-joint |qdot_k|
    arm_rate_limit: float = np.inf       # ||alpha_dot||
    singularity_floor: float = 0.05      # det(J J^T) >= floor
    tilt_limit: float = 1.0              # |theta| bound for base and object
    arm_angle_lower: np.ndarray | None = None
    arm_angle_upper: np.ndarray | None = None


def _as_limits(limits) -> AgentLimits:
    return limits if limits is not None else AgentLimits()


@dataclass
class PlanarAgentParams:
    """Planar-base agent: double-integrator base plus 2R arm in the y-z plane.

    Arm angles are measured from the vertical (+z), positive rolling about +x;
    link k points along Rx(angle) @ e_z. The end-effector roll equals the sum
    of the two arm angles.
    """

    base_mass: float = 2.0
    link_masses: tuple[float, float] = (0.3, 0.3)
    link_lengths: tuple[float, float] = (1.0, 1.5)
    link_inertias: tuple[float, float] | None = None  # about CoM, x-axis; rod default
    mount_height: float = 0.2
    grasp_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))  # E-frame
    grasp_roll_offset: float = 0.0
    load_share: float = 1.0
    limits: AgentLimits = field(default_factory=AgentLimits)
    base_sphere_radius: float = 0.2
    link_sphere_radius: float = 0.2
    spheres_per_link: tuple[int, int] = (3, 4)

    def __post_init__(self):
        self.grasp_offset = np.asarray(self.grasp_offset, dtype=float).reshape(3)
        if self.link_inertias is None:
            self.link_inertias = tuple(
                m * l**2 / 12.0 for m, l in zip(self.link_masses, self.link_lengths)
            )
        if not 0.0 < self.load_share <= 1.0:
            raise ValueError(f"load share must be in (0, 1], got {self.load_share}")
        if min(self.link_lengths) <= 0 or min(self.link_masses) <= 0 or self.base_mass <= 0:
            raise ValueError("masses and lengths must be positive")


class PlanarAgent:
    n_q = 4
    n_alpha = 2
    task_dim = 4

    def __init__(self, params: PlanarAgentParams, gravity: float = 9.81, name: str = "agent"):
        self.params = params
        self.gravity = gravity
        self.name = name

    # -- kinematics ---------------------------------------------------------

    def _arm_directions(self, q):
        a1, a2 = q[2], q[3]
        s1, c1 = np.sin(a1), np.cos(a1)
        s12, c12 = np.sin(a1 + a2), np.cos(a1 + a2)
        return s1, c1, s12, c12

    def forward_kinematics(self, q) -> EndEffectorPose:
        p = self.params
        s1, c1, s12, c12 = self._arm_directions(q)
        l1, l2 = p.link_lengths
        pos = np.array(
            [
                q[0],
                q[1] - l1 * s1 - l2 * s12,
                p.mount_height + l1 * c1 + l2 * c12,
            ]
        )
        return EndEffectorPose(pos, np.array([q[2] + q[3], 0.0, 0.0]))

    def task_pose(self, q) -> np.ndarray:
        ee = self.forward_kinematics(q)
        return np.append(ee.position, ee.euler[0])

    def end_effector_rotation(self, q) -> np.ndarray:
        return rot_x(q[2] + q[3])

    def jacobian(self, q) -> np.ndarray:
        l1, l2 = self.params.link_lengths
        s1, c1, s12, c12 = self._arm_directions(q)
        return np.array(
            [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, -l1 * c1 - l2 * c12, -l2 * c12],
                [0.0, 0.0, -l1 * s1 - l2 * s12, -l2 * s12],
                [0.0, 0.0, 1.0, 1.0],
            ]
        )

    def jacobian_dot(self, q, qdot) -> np.ndarray:
        l1, l2 = self.params.link_lengths
        s1, c1, s12, c12 = self._arm_directions(q)
        w1 = qdot[2]
        w12 = qdot[2] + qdot[3]
        jd = np.zeros((4, 4))
        jd[1, 2] = l1 * s1 * w1 + l2 * s12 * w12
        jd[1, 3] = l2 * s12 * w12
        jd[2, 2] = -l1 * c1 * w1 - l2 * c12 * w12
        jd[2, 3] = -l2 * c12 * w12
        return jd

    def singularity_measure(self, q) -> float:
        j = self.jacobian(q)
        return float(np.linalg.det(j @ j.T))

    # -- dynamics -----------------------------------------------------------

    def _mass_constants(self):
        p = self.params
        m1, m2 = p.link_masses
        l1, l2 = p.link_lengths
        r1, r2 = l1 / 2.0, l2 / 2.0
        i1, i2 = p.link_inertias
        h1 = m1 * r1 + m2 * l1
        h2 = m2 * r2
        ia = m1 * r1**2 + i1 + m2 * (l1**2 + r2**2) + i2
        ib = m2 * r2**2 + i2
        return m1, m2, l1, r2, h1, h2, ia, ib

    def inertia_matrix(self, q) -> np.ndarray:
        p = self.params
        m1, m2, l1, r2, h1, h2, ia, ib = self._mass_constants()
        s1, c1, s12, c12 = self._arm_directions(q)
        c2 = np.cos(q[3])
        m_tot = p.base_mass + m1 + m2
        b = np.zeros((4, 4))
        b[0, 0] = m_tot
        b[1, 1] = m_tot
        b[1, 2] = b[2, 1] = -h1 * c1 - h2 * c12
        b[1, 3] = b[3, 1] = -h2 * c12
        b[2, 2] = ia + 2.0 * m2 * l1 * r2 * c2
        b[2, 3] = b[3, 2] = ib + m2 * l1 * r2 * c2
        b[3, 3] = ib
        return b

    def inertia_gradient(self, q) -> np.ndarray:
        """dB/dq as an (n, n, n) tensor, index order [k, i, j] = dB[i, j]/dq_k."""
        m1, m2, l1, r2, h1, h2, _, _ = self._mass_constants()
        s1, c1, s12, c12 = self._arm_directions(q)
        s2 = np.sin(q[3])
        db = np.zeros((4, 4, 4))
        d1 = db[2]
        d1[1, 2] = d1[2, 1] = h1 * s1 + h2 * s12
        d1[1, 3] = d1[3, 1] = h2 * s12
        d2 = db[3]
        d2[1, 2] = d2[2, 1] = h2 * s12
        d2[1, 3] = d2[3, 1] = h2 * s12
        d2[2, 2] = -2.0 * m2 * l1 * r2 * s2
        d2[2, 3] = d2[3, 2] = -m2 * l1 * r2 * s2
        return db

    def gravity_vector(self, q) -> np.ndarray:
        _, _, _, _, h1, h2, _, _ = self._mass_constants()
        s1, _, s12, _ = self._arm_directions(q)
        g = self.gravity
        return np.array([0.0, 0.0, -g * (h1 * s1 + h2 * s12), -g * h2 * s12])

    def potential_energy(self, q) -> float:
        p = self.params
        m1, m2 = p.link_masses
        l1, l2 = p.link_lengths
        _, c1, _, c12 = self._arm_directions(q)
        z1 = p.mount_height + 0.5 * l1 * c1
        z2 = p.mount_height + l1 * c1 + 0.5 * l2 * c12
        return self.gravity * (m1 * z1 + m2 * z2)

    def joint_space_terms(self, q, qdot):
        b = self.inertia_matrix(q)
        n = christoffel_coriolis(self.inertia_gradient(q), qdot)
        return b, n, self.gravity_vector(q)

    # -- batched evaluation (used by the horizon transcription) ---------------

    def _trig_batch(self, q):
        a1 = q[..., 2]
        a12 = q[..., 2] + q[..., 3]
        return np.sin(a1), np.cos(a1), np.sin(a12), np.cos(a12)

    def object_pose_batch(self, q) -> np.ndarray:
        """Object pose [p_O, roll] for an array of configurations (..., 4)."""
        p = self.params
        l1, l2 = p.link_lengths
        s1, c1, s12, c12 = self._trig_batch(q)
        offx, offy, offz = p.grasp_offset
        ox = q[..., 0] + offx
        oy = q[..., 1] - l1 * s1 - l2 * s12 + c12 * offy - s12 * offz
        oz = p.mount_height + l1 * c1 + l2 * c12 + s12 * offy + c12 * offz
        phi = q[..., 2] + q[..., 3] + p.grasp_roll_offset
        return np.stack([ox, oy, oz, phi], axis=-1)

    def object_twist_batch(self, q, qdot) -> np.ndarray:
        p = self.params
        l1, l2 = p.link_lengths
        s1, c1, s12, c12 = self._trig_batch(q)
        w1 = qdot[..., 2]
        wx = qdot[..., 2] + qdot[..., 3]
        w2 = qdot[..., 3]
        vy = qdot[..., 1] + (-l1 * c1 - l2 * c12) * w1 + (-l2 * c12) * w2
        vz = (-l1 * s1 - l2 * s12) * w1 + (-l2 * s12) * w2
        offy, offz = p.grasp_offset[1], p.grasp_offset[2]
        peo_y = -(c12 * offy - s12 * offz)
        peo_z = -(s12 * offy + c12 * offz)
        voy = vy + peo_z * wx
        voz = vz - peo_y * wx
        return np.stack([qdot[..., 0], voy, voz, wx], axis=-1)

    def singularity_batch(self, q) -> np.ndarray:
        l1 = self.params.link_lengths[0]
        return (l1 * np.sin(q[..., 2])) ** 2

    def collision_spheres_batch(self, q) -> np.ndarray:
        """Sphere rows (cx, cy, cz, r) for configurations (..., 4) -> (..., n_s, 4)."""
        p = self.params
        l1, l2 = p.link_lengths
        a1 = q[..., 2]
        a12 = q[..., 2] + q[..., 3]
        mount = np.stack(
            [q[..., 0], q[..., 1], np.full(q[..., 0].shape, p.mount_height)], axis=-1
        )
        d1 = np.stack([np.zeros_like(a1), -np.sin(a1), np.cos(a1)], axis=-1)
        d2 = np.stack([np.zeros_like(a12), -np.sin(a12), np.cos(a12)], axis=-1)
        elbow = mount + l1 * d1[..., :]
        n1, n2 = p.spheres_per_link
        rows = []
        base = np.concatenate(
            [
                q[..., :2],
                np.full(q.shape[:-1] + (1,), p.base_sphere_radius / 2.0),
                np.full(q.shape[:-1] + (1,), p.base_sphere_radius),
            ],
            axis=-1,
        )
        rows.append(base)
        r_link = np.full(q.shape[:-1] + (1,), p.link_sphere_radius)
        for k in range(n1):
            f = (2 * k + 1) / (2 * n1)
            rows.append(np.concatenate([mount + f * l1 * d1, r_link], axis=-1))
        for k in range(n2):
            f = (2 * k + 1) / (2 * n2)
            rows.append(np.concatenate([elbow + f * l2 * d2, r_link], axis=-1))
        return np.stack(rows, axis=-2)

    # -- closed-form inverse kinematics ---------------------------------------

    def ik_object_pose(self, x_obj, branch_hint=None) -> np.ndarray:
        """Configuration reproducing the object pose [p_O, roll].

        Two elbow branches exist; the one whose first arm angle is closest to
        `branch_hint` (a configuration) is returned. Raises SingularityError
        when the pose is out of reach.
        """
        p = self.params
        l1, l2 = p.link_lengths
        x_obj = np.asarray(x_obj, dtype=float)
        phi_e = x_obj[3] - p.grasp_roll_offset
        ce, se = np.cos(phi_e), np.sin(phi_e)
        off = p.grasp_offset
        p_e = x_obj[:3] - np.array(
            [off[0], ce * off[1] - se * off[2], se * off[1] + ce * off[2]]
        )
        c1 = (p_e[2] - p.mount_height - l2 * np.cos(phi_e)) / l1
        if abs(c1) > 1.0 + 1e-12:
            raise SingularityError(f"{self.name}: object pose out of reach (|cos|={abs(c1):.4f})")
        c1 = np.clip(c1, -1.0, 1.0)
        a1_pos = np.arccos(c1)
        candidates = [a1_pos, -a1_pos]
        if branch_hint is not None:
            hint = float(np.asarray(branch_hint)[2])
            candidates.sort(key=lambda a: abs(a - hint))
        a1 = candidates[0]
        a2 = phi_e - a1
        s1 = np.sin(a1)
        y_b = p_e[1] + l1 * s1 + l2 * np.sin(phi_e)
        return np.array([p_e[0], y_b, a1, a2])

    def ik_object_twist(self, q, v_obj) -> np.ndarray:
        """Joint rates reproducing the object twist at configuration q."""
        from .payload import coupling_jacobian_inverse

        v_e = coupling_jacobian_inverse(self, q) @ np.asarray(v_obj, dtype=float)
        return np.linalg.solve(self.jacobian(q), v_e)

    def ik_elbow_cosine_batch(self, x_obj) -> np.ndarray:
        """cos(alpha1) required to reach object poses (..., 4); >1 means out of reach."""
        p = self.params
        l1, l2 = p.link_lengths
        phi_e = x_obj[..., 3] - p.grasp_roll_offset
        ce, se = np.cos(phi_e), np.sin(phi_e)
        off = p.grasp_offset
        z_e = x_obj[..., 2] - (se * off[1] + ce * off[2])
        return (z_e - p.mount_height - l2 * ce) / l1

    def ik_batch(self, x_obj, branch: int) -> np.ndarray:
        """Vectorized grasp-consistent configurations for object poses (..., 4).

        The elbow cosine is clamped into [-1, 1], so out-of-reach poses map to
        the stretched configuration; callers constrain reach separately.
        """
        p = self.params
        l1, l2 = p.link_lengths
        x_obj = np.asarray(x_obj, dtype=float)
        phi_e = x_obj[..., 3] - p.grasp_roll_offset
        ce, se = np.cos(phi_e), np.sin(phi_e)
        off = p.grasp_offset
        y_e = x_obj[..., 1] - (ce * off[1] - se * off[2])
        c1 = np.clip(self.ik_elbow_cosine_batch(x_obj), -1.0, 1.0)
        a1 = float(branch) * np.arccos(c1)
        a2 = phi_e - a1
        y_b = y_e + l1 * np.sin(a1) + l2 * se
        x_b = x_obj[..., 0] - off[0]
        return np.stack([x_b, y_b, a1, a2], axis=-1)

    # -- collision volumes --------------------------------------------------

    def collision_spheres(self, q) -> np.ndarray:
        """World bounding spheres as rows (cx, cy, cz, radius)."""
        p = self.params
        l1, l2 = p.link_lengths
        a1, a12 = q[2], q[2] + q[3]
        mount = np.array([q[0], q[1], p.mount_height])
        d1 = np.array([0.0, -np.sin(a1), np.cos(a1)])
        d2 = np.array([0.0, -np.sin(a12), np.cos(a12)])
        elbow = mount + l1 * d1
        rows = [np.array([q[0], q[1], p.base_sphere_radius / 2.0, p.base_sphere_radius])]
        n1, n2 = p.spheres_per_link
        for k in range(n1):
            f = (2 * k + 1) / (2 * n1)
            rows.append(np.append(mount + f * l1 * d1, p.link_sphere_radius))
        for k in range(n2):
            f = (2 * k + 1) / (2 * n2)
            rows.append(np.append(elbow + f * l2 * d2, p.link_sphere_radius))
        return np.array(rows)

    def collision_ellipsoids(self, q) -> list[Ellipsoid]:
        return [Ellipsoid.sphere(row[:3], row[3]) for row in self.collision_spheres(q)]


# -- spatial chain model ------------------------------------------------------


@dataclass
class RevoluteJoint:
    axis: np.ndarray          # unit axis in the parent frame
    offset: np.ndarray        # joint origin in the parent frame
    link_mass: float = 0.5
    link_com: np.ndarray = field(default_factory=lambda: np.zeros(3))  # in link frame
    link_inertia: np.ndarray = field(default_factory=lambda: 1e-2 * np.eye(3))

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float).reshape(3)
        self.axis = self.axis / np.linalg.norm(self.axis)
        self.offset = np.asarray(self.offset, dtype=float).reshape(3)
        self.link_com = np.asarray(self.link_com, dtype=float).reshape(3)
        self.link_inertia = np.asarray(self.link_inertia, dtype=float).reshape(3, 3)


def _axis_rotation(axis, angle):
    s = skew(axis)
    return np.eye(3) + np.sin(angle) * s + (1.0 - np.cos(angle)) * (s @ s)


@dataclass
class SpatialAgentParams:
    joints: list[RevoluteJoint] = field(default_factory=list)
    tip_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base_mass: float = 4.0
    base_inertia: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(3))
    grasp_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    grasp_euler_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    load_share: float = 1.0
    limits: AgentLimits = field(default_factory=AgentLimits)

    def __post_init__(self):
        self.tip_offset = np.asarray(self.tip_offset, dtype=float).reshape(3)
        self.grasp_offset = np.asarray(self.grasp_offset, dtype=float).reshape(3)
        self.grasp_euler_offset = np.asarray(self.grasp_euler_offset, dtype=float).reshape(3)
        self.base_inertia = np.asarray(self.base_inertia, dtype=float).reshape(3, 3)


class SpatialAgent:
    """Floating 6-DOF base (p_B, x-y-z Euler) plus a revolute arm chain.

    q = [p_B (3), eta_B (3), alpha (n_alpha)]. End-effector Euler coordinates
    follow the additive composition eta_E = eta_B + k_eta(alpha); the grasp
    transport uses the exact rotation R_B @ R_arm. The additive form matches
    the rotation exactly only when base and arm rotations commute (planar and
    single-axis scenarios); general scenarios should restrict to such chains.
    """

    task_dim = 6

    def __init__(self, params: SpatialAgentParams, gravity: float = 9.81, name: str = "agent"):
        self.params = params
        self.gravity = gravity
        self.name = name
        self.n_alpha = len(params.joints)
        self.n_q = 6 + self.n_alpha

    # -- arm chain in the base frame ----------------------------------------

    def _chain(self, alpha):
        """Joint origins, axes and cumulative rotations in the base frame."""
        origins, axes, rots = [], [], []
        o = np.zeros(3)
        r = np.eye(3)
        for joint, angle in zip(self.params.joints, alpha):
            o = o + r @ joint.offset
            axis_world = r @ joint.axis
            r = r @ _axis_rotation(joint.axis, angle)
            origins.append(o)
            axes.append(axis_world)
            rots.append(r)
        tip = o + r @ self.params.tip_offset if rots else self.params.tip_offset.copy()
        return origins, axes, rots, tip

    def arm_tip_position(self, alpha) -> np.ndarray:
        return self._chain(alpha)[3]

    def arm_rotation(self, alpha) -> np.ndarray:
        rots = self._chain(alpha)[2]
        return rots[-1] if rots else np.eye(3)

    def arm_position_jacobian(self, alpha) -> np.ndarray:
        origins, axes, _, tip = self._chain(alpha)
        cols = [np.cross(a, tip - o) for a, o in zip(axes, origins)]
        return np.column_stack(cols) if cols else np.zeros((3, 0))

    def arm_angular_jacobian(self, alpha) -> np.ndarray:
        _, axes, _, _ = self._chain(alpha)
        return np.column_stack(axes) if axes else np.zeros((3, 0))

    # -- task kinematics ------------------------------------------------------

    def forward_kinematics(self, q) -> EndEffectorPose:
        p_b, eta_b, alpha = q[:3], q[3:6], q[6:]
        r_b = rot_xyz(eta_b)
        pos = p_b + r_b @ self.arm_tip_position(alpha)
        k_eta = euler_from_rotation(self.arm_rotation(alpha))
        return EndEffectorPose(pos, eta_b + k_eta)

    def end_effector_rotation(self, q) -> np.ndarray:
        return rot_xyz(q[3:6]) @ self.arm_rotation(q[6:])

    def jacobian(self, q) -> np.ndarray:
        eta_b, alpha = q[3:6], q[6:]
        r_b = rot_xyz(eta_b)
        j_b = euler_rate_jacobian(eta_b)
        k_p = self.arm_tip_position(alpha)
        top = np.hstack(
            [np.eye(3), -skew(r_b @ k_p) @ j_b, r_b @ self.arm_position_jacobian(alpha)]
        )
        bottom = np.hstack(
            [np.zeros((3, 3)), j_b, r_b @ self.arm_angular_jacobian(alpha)]
        )
        return np.vstack([top, bottom])

    def jacobian_dot(self, q, qdot, step: float = 1e-6) -> np.ndarray:
        return directional_jacobian_dot(self.jacobian, q, qdot, step)

    def singularity_measure(self, q) -> float:
        j = self.jacobian(q)
        return float(np.linalg.det(j @ j.T))

    # -- dynamics by body assembly --------------------------------------------

    def _bodies(self, q):
        """Per-body (mass, world inertia, linear Jacobian, angular Jacobian)."""
        p_b, eta_b, alpha = q[:3], q[3:6], q[6:]
        r_b = rot_xyz(eta_b)
        j_rate = euler_rate_jacobian(eta_b)
        n = self.n_q
        prm = self.params

        bodies = []
        jv = np.zeros((3, n))
        jv[:, :3] = np.eye(3)
        jw = np.zeros((3, n))
        jw[:, 3:6] = j_rate
        bodies.append((prm.base_mass, r_b @ prm.base_inertia @ r_b.T, jv, jw, p_b))

        origins, axes, rots, _ = self._chain(alpha)
        for k, joint in enumerate(prm.joints):
            com_base = origins[k] + rots[k] @ joint.link_com
            com_world = p_b + r_b @ com_base
            jv = np.zeros((3, n))
            jv[:, :3] = np.eye(3)
            jv[:, 3:6] = -skew(r_b @ com_base) @ j_rate
            jw = np.zeros((3, n))
            jw[:, 3:6] = j_rate
            for j in range(k + 1):
                jv[:, 6 + j] = r_b @ np.cross(axes[j], com_base - origins[j])
                jw[:, 6 + j] = r_b @ axes[j]
            r_world = r_b @ rots[k]
            bodies.append(
                (joint.link_mass, r_world @ joint.link_inertia @ r_world.T, jv, jw, com_world)
            )
        return bodies

    def inertia_matrix(self, q) -> np.ndarray:
        b = np.zeros((self.n_q, self.n_q))
        for mass, inertia, jv, jw, _ in self._bodies(q):
            b += mass * jv.T @ jv + jw.T @ inertia @ jw
        return 0.5 * (b + b.T)

    def inertia_gradient(self, q, step: float = 1e-6) -> np.ndarray:
        n = self.n_q
        db = np.zeros((n, n, n))
        for k in range(n):
            dq = np.zeros(n)
            dq[k] = step
            db[k] = (self.inertia_matrix(q + dq) - self.inertia_matrix(q - dq)) / (2 * step)
        return db

    def gravity_vector(self, q) -> np.ndarray:
        g = np.zeros(self.n_q)
        for mass, _, jv, _, _ in self._bodies(q):
            g += mass * self.gravity * jv[2, :]
        return g

    def potential_energy(self, q) -> float:
        return sum(mass * self.gravity * com[2] for mass, _, _, _, com in self._bodies(q))

    def joint_space_terms(self, q, qdot):
        b = self.inertia_matrix(q)
        n = christoffel_coriolis(self.inertia_gradient(q), qdot)
        return b, n, self.gravity_vector(q)

    def collision_spheres(self, q) -> np.ndarray:
        return np.zeros((0, 4))


# -- shared helpers -----------------------------------------------------------


def christoffel_coriolis(inertia_gradient: np.ndarray, qdot) -> np.ndarray:
    """Coriolis matrix from Christoffel symbols of the first kind.

    With N built this way, Bdot - 2N is antisymmetric for any consistent
    inertia gradient, which preserves the energy balance of the model.
    """
    db = inertia_gradient
    term = np.einsum("kij,k->ij", db, qdot)
    term2 = np.einsum("jik,k->ij", db, qdot)
    term3 = np.einsum("ikj,k->ij", db, qdot)
    return 0.5 * (term + term2 - term3)


def directional_jacobian_dot(jac_fn, q, qdot, step: float = 1e-6) -> np.ndarray:
    """Central finite difference of a Jacobian along qdot (time derivative)."""
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    return (jac_fn(q + step * qdot) - jac_fn(q - step * qdot)) / (2.0 * step)


def task_space_terms(agent, q, qdot):
    """Task-space inertia, Coriolis and gravity of one agent.

    M = (J B^-1 J^T)^-1 restricted to the agent's task rows; raises
    SingularityError when the configuration is inside the singular margin.
    """
    measure = agent.singularity_measure(q)
    if measure < agent.params.limits.singularity_floor:
        raise SingularityError(
            f"{agent.name}: singularity measure {measure:.3e} below floor "
            f"{agent.params.limits.singularity_floor:.3e}"
        )
    j = agent.jacobian(q)
    jd = agent.jacobian_dot(q, qdot)
    b, n, g_q = agent.joint_space_terms(q, qdot)
    b_inv_jt = np.linalg.solve(b, j.T)
    a = j @ b_inv_jt
    m = np.linalg.inv(a)
    m = 0.5 * (m + m.T)
    cj = m @ (j @ np.linalg.solve(b, n) - jd)     # C(q, qdot) @ J(q), exact
    c = cj @ np.linalg.pinv(j)
    g = m @ (j @ np.linalg.solve(b, g_q))
    return m, c, g


def task_coriolis_times_jacobian(agent, q, qdot, m=None):
    """The product C_i(q, qdot) @ J_i(q) without the pseudo-inverse detour."""
    j = agent.jacobian(q)
    jd = agent.jacobian_dot(q, qdot)
    b, n, _ = agent.joint_space_terms(q, qdot)
    if m is None:
        m = np.linalg.inv(j @ np.linalg.solve(b, j.T))
    return m @ (j @ np.linalg.solve(b, n) - jd)


def input_map(agent, q, u) -> np.ndarray:
    """Joint torques tau = J^T u; the nullspace term is identically zero."""
    return agent.jacobian(q).T @ np.asarray(u, dtype=float)


def tau_limit_residual(agent, q, u) -> float:
    return float(np.linalg.norm(input_map(agent, q, u))) - agent.params.limits.tau_limit
