"""Per-agent load-shared coupled dynamics and the leader error dynamics.

Each agent carries its load share c of the object's Newton-Euler terms plus
its own task-space dynamics transported to the object frame:

    Mt(q) qddot + Ct(q, qdot) qdot + gt(q) = J_O^T u

The forward map inverts Mt through its right pseudo-inverse (minimum-norm
least squares), which is the exact inverse in the square planar reduction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lstsq as _lstsq

from .agent import SingularityError
from .payload import (
    ObjectParams,
    ObjectPose,
    ObjectTwist,
    coupling_jacobian,
    coupling_jacobian_dot,
    coupling_jacobian_inverse,
    object_dynamics_terms,
    object_pose_from_agent,
    object_representation_jacobian,
    object_twist_from_agent,
    planar_object_terms,
)


@dataclass
class CoupledTerms:
    inertia: np.ndarray      # Mt, task_dim x n_q
    coriolis: np.ndarray     # Ct, task_dim x n_q
    gravity: np.ndarray      # gt, task_dim
    coupling_inverse: np.ndarray  # J_O, task_dim x task_dim


@dataclass
class ErrorState:
    """Leader tracking error e = [x_O - x_des; v_O]."""

    pose_error: np.ndarray
    twist: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.pose_error, self.twist])


def _object_terms_for(agent, obj: ObjectParams, q, qdot):
    if agent.task_dim == 4:
        return planar_object_terms(obj)
    pose_vec = object_pose_from_agent(agent, q)
    twist_vec = object_twist_from_agent(agent, q, qdot)
    m, c, g, _ = object_dynamics_terms(
        obj, ObjectPose(pose_vec[:3], pose_vec[3:]), ObjectTwist(twist_vec[:3], twist_vec[3:])
    )
    return m, c, g


def coupled_terms(agent, obj: ObjectParams, q, qdot) -> CoupledTerms:
    """Load-shared coupled terms of one agent.

    Raises SingularityError inside the singular margin (the task-space inertia
    is not defined there).
    """
    measure = agent.singularity_measure(q)
    if measure < agent.params.limits.singularity_floor:
        raise SingularityError(
            f"{agent.name}: measure {measure:.3e} below floor"
        )
    c_share = agent.params.load_share
    j = agent.jacobian(q)
    jd = agent.jacobian_dot(q, qdot)
    b, n, g_q = agent.joint_space_terms(q, qdot)
    t = j.shape[0]
    b_inv = np.linalg.solve(b, np.column_stack([j.T, g_q[:, None], n]))
    b_inv_jt = b_inv[:, :t]
    b_inv_g = b_inv[:, t]
    b_inv_n = b_inv[:, t + 1 :]
    a = j @ b_inv_jt
    m_i = np.linalg.inv(a)
    m_i = 0.5 * (m_i + m_i.T)

    j_io = coupling_jacobian(agent, q)
    j_oi = coupling_jacobian_inverse(agent, q)
    j_io_dot = coupling_jacobian_dot(agent, q, qdot)
    m_o, c_o, g_o = _object_terms_for(agent, obj, q, qdot)

    # M_i Jdot + C_i J simplifies to M_i J B^-1 N
    mi_jbn = m_i @ (j @ b_inv_n)
    mt = c_share * m_o @ (j_io @ j) + j_oi.T @ (m_i @ j)
    ct = (
        j_oi.T @ mi_jbn
        + c_share * (m_o @ (j_io @ jd) + m_o @ (j_io_dot @ j) + c_o @ (j_io @ j))
    )
    gt = c_share * g_o + j_oi.T @ (m_i @ (j @ b_inv_g))
    return CoupledTerms(mt, ct, gt, j_oi)


def acceleration_map(terms: CoupledTerms, qdot, u) -> np.ndarray:
    """qddot = Mt^+ (J_O^T u - Ct qdot - gt) via minimum-norm least squares."""
    rhs = terms.coupling_inverse.T @ np.asarray(u, dtype=float) - terms.coriolis @ qdot - terms.gravity
    sol, _, rank, _ = _lstsq(terms.inertia, rhs, lapack_driver="gelsy")
    if rank < terms.inertia.shape[0]:
        raise SingularityError("coupled inertia matrix is rank deficient")
    return sol


def forward_dynamics(agent, obj: ObjectParams, state_vec, u) -> np.ndarray:
    """State derivative [qdot; qddot] of the decoupled per-agent model."""
    n = agent.n_q
    q, qdot = state_vec[:n], state_vec[n:]
    terms = coupled_terms(agent, obj, q, qdot)
    return np.concatenate([qdot, acceleration_map(terms, qdot, u)])


def equilibrium_input(agent, obj: ObjectParams, q) -> np.ndarray:
    """Input with J_O^T u = gt at rest, so that qddot = 0."""
    terms = coupled_terms(agent, obj, q, np.zeros(agent.n_q))
    return np.linalg.solve(terms.coupling_inverse.T, terms.gravity)


def error_state(agent, obj: ObjectParams, q, qdot, x_des) -> ErrorState:
    pose = object_pose_from_agent(agent, q)
    twist = object_twist_from_agent(agent, q, qdot)
    return ErrorState(pose - np.asarray(x_des, dtype=float), twist)


def error_dynamics(agent, obj: ObjectParams, state_vec, u, x_des) -> np.ndarray:
    """Time derivative of the leader error state [x_O - x_des; v_O]."""
    n = agent.n_q
    q, qdot = state_vec[:n], state_vec[n:]
    j = agent.jacobian(q)
    j_io = coupling_jacobian(agent, q)
    if agent.task_dim == 4:
        j_or_inv = np.eye(4)
    else:
        pose = object_pose_from_agent(agent, q)
        theta = pose[4]
        if abs(abs(theta) - np.pi / 2) < 1e-9:
            raise SingularityError("object pitch at +-pi/2")
        j_or_inv = np.linalg.inv(object_representation_jacobian(pose[3:]))
    pose_rate = j_or_inv @ (j_io @ (j @ qdot))

    terms = coupled_terms(agent, obj, q, qdot)
    qddot = acceleration_map(terms, qdot, u)
    jd = agent.jacobian_dot(q, qdot)
    j_io_dot = coupling_jacobian_dot(agent, q, qdot)
    twist_rate = j_io @ (j @ qddot) + (j_io @ jd + j_io_dot @ j) @ qdot
    return np.concatenate([pose_rate, twist_rate])
