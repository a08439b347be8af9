"""Rigid-object state, Newton-Euler terms and object/agent coupling.

The object pose is x_O = [p_O, eta_O] and the twist v_O = [v_linear, omega].
For the planar-reduction pipeline both collapse to four coordinates
(x, y, z, roll) / (vx, vy, vz, omega_x); the general 6-D forms are used by the
spatial model and the unit tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agent import SingularityError, directional_jacobian_dot
from .geometry import Ellipsoid, euler_rate_jacobian, rot_xyz, skew


class RepresentationSingularityError(SingularityError):
    """Euler-rate map is singular (pitch at +-pi/2)."""


@dataclass
class ObjectParams:
    mass: float = 1.0
    inertia: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(3))  # body frame
    bounding_semi_axes: np.ndarray = field(default_factory=lambda: 0.5 * np.ones(3))
    gravity: float = 9.81

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float).reshape(3, 3)
        self.bounding_semi_axes = np.asarray(self.bounding_semi_axes, dtype=float).reshape(3)
        if self.mass <= 0:
            raise ValueError("object mass must be positive")
        if np.any(np.linalg.eigvalsh(0.5 * (self.inertia + self.inertia.T)) <= 0):
            raise ValueError("object inertia must be positive definite")


@dataclass
class ObjectPose:
    position: np.ndarray
    euler: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.euler])


@dataclass
class ObjectTwist:
    linear: np.ndarray
    angular: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])


def object_representation_jacobian(euler) -> np.ndarray:
    """J_Or = diag(I3, J_rate(eta)); singular when the pitch hits +-pi/2."""
    j = np.eye(6)
    j[3:, 3:] = euler_rate_jacobian(euler)
    return j


def object_dynamics_terms(params: ObjectParams, pose: ObjectPose, twist: ObjectTwist):
    """Newton-Euler terms (M_O, C_O, g_O, J_Or) of the free object.

    C_O carries the gyroscopic term so that C_O @ v equals omega x (I omega)
    and Mdot_O - 2 C_O is antisymmetric.
    """
    theta = pose.euler[1]
    if abs(abs(theta) - np.pi / 2) < 1e-9:
        raise RepresentationSingularityError("object pitch at +-pi/2")
    r = rot_xyz(pose.euler)
    inertia_w = r @ params.inertia @ r.T
    m = np.zeros((6, 6))
    m[:3, :3] = params.mass * np.eye(3)
    m[3:, 3:] = inertia_w
    c = np.zeros((6, 6))
    c[3:, 3:] = skew(twist.angular) @ inertia_w
    g = np.zeros(6)
    g[2] = params.mass * params.gravity
    return m, c, g, object_representation_jacobian(pose.euler)


def planar_object_terms(params: ObjectParams):
    """4-D reduction (x, y, z, roll): constant inertia, zero Coriolis.

    With all rotation about the world x-axis the gyroscopic term vanishes and
    the world-frame roll inertia is the body (0, 0) component.
    """
    m = np.diag([params.mass, params.mass, params.mass, params.inertia[0, 0]])
    g = np.array([0.0, 0.0, params.mass * params.gravity, 0.0])
    return m, np.zeros((4, 4)), g


def object_bounding_ellipsoid(params: ObjectParams, pose_vec) -> Ellipsoid:
    pose_vec = np.asarray(pose_vec, dtype=float)
    if pose_vec.size == 4:
        rotation = rot_xyz([pose_vec[3], 0.0, 0.0])
    else:
        rotation = rot_xyz(pose_vec[3:6])
    return Ellipsoid.from_semi_axes(pose_vec[:3], params.bounding_semi_axes, rotation)


# -- coupling through the rigid grasp -----------------------------------------


def object_pose_from_agent(agent, q) -> np.ndarray:
    """Object pose seen through one agent's chain (task-dim vector)."""
    ee = agent.forward_kinematics(q)
    p_o = ee.position + agent.end_effector_rotation(q) @ agent.params.grasp_offset
    if agent.task_dim == 4:
        return np.append(p_o, ee.euler[0] + agent.params.grasp_roll_offset)
    return np.concatenate([p_o, ee.euler + agent.params.grasp_euler_offset])


def end_effector_offset_world(agent, q) -> np.ndarray:
    """p_{E/O}: end-effector position relative to the object centre, world frame."""
    return -(agent.end_effector_rotation(q) @ agent.params.grasp_offset)


def coupling_jacobian(agent, q) -> np.ndarray:
    """J_iO mapping the end-effector twist to the object twist."""
    p_eo = end_effector_offset_world(agent, q)
    if agent.task_dim == 4:
        j = np.eye(4)
        j[1, 3] = p_eo[2]
        j[2, 3] = -p_eo[1]
        return j
    j = np.eye(6)
    j[:3, 3:] = skew(p_eo)
    return j


def coupling_jacobian_inverse(agent, q) -> np.ndarray:
    """J_Oi = J_iO^-1 in closed form (unit-triangular block structure)."""
    p_eo = end_effector_offset_world(agent, q)
    if agent.task_dim == 4:
        j = np.eye(4)
        j[1, 3] = -p_eo[2]
        j[2, 3] = p_eo[1]
        return j
    j = np.eye(6)
    j[:3, 3:] = -skew(p_eo)
    return j


def coupling_jacobian_dot(agent, q, qdot, step: float = 1e-6) -> np.ndarray:
    if agent.task_dim == 4:
        # p_EO rotates rigidly with the body: pdot = omega x p, omega = (wx, 0, 0)
        p_eo = end_effector_offset_world(agent, q)
        wx = qdot[2] + qdot[3]
        jd = np.zeros((4, 4))
        jd[1, 3] = wx * p_eo[1]
        jd[2, 3] = wx * p_eo[2]
        return jd
    return directional_jacobian_dot(lambda qq: coupling_jacobian(agent, qq), q, qdot, step)


def object_twist_from_agent(agent, q, qdot) -> np.ndarray:
    return coupling_jacobian(agent, q) @ (agent.jacobian(q) @ np.asarray(qdot, dtype=float))


def grasp_matrix(agents, qs) -> np.ndarray:
    """Stacked [J_O1^T; ...; J_ON^T] mapping contact wrenches to the object wrench."""
    blocks = [coupling_jacobian_inverse(agent, q).T for agent, q in zip(agents, qs)]
    return np.vstack(blocks)


def contact_wrenches(agents, qs, object_wrench) -> np.ndarray:
    """Diagnostic minimum-norm decomposition of the object wrench onto agents.

    The rigid grasp leaves internal forces undetermined; this returns the
    least-squares solution of G^T lambda = lambda_O.
    """
    g = grasp_matrix(agents, qs)
    lam, *_ = np.linalg.lstsq(g.T, np.asarray(object_wrench, dtype=float), rcond=None)
    return lam
