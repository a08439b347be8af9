"""Labeled residual evaluation of the state, input and terminal constraint sets.

Every residual uses the convention value <= 0 <=> satisfied. Vector bounds are
split per component; collision terms are negated separation margins. The
leader carries object-related rows (object tilt, object vs obstacle) that
follower sets do not contain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import input_map
from .geometry import Ellipsoid, ellipsoid_margin, sphere_margin
from .payload import ObjectParams, object_bounding_ellipsoid, object_pose_from_agent


@dataclass
class ConstraintResiduals:
    items: list[tuple[str, float]]

    def __post_init__(self):
        labels = [k for k, _ in self.items]
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate residual labels")
        if not all(np.isfinite(v) for _, v in self.items):
            raise ValueError("non-finite residual value")

    @property
    def labels(self) -> list[str]:
        return [k for k, _ in self.items]

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, v in self.items])

    def max_violation(self) -> float:
        return float(np.max(self.values, initial=-np.inf))

    def satisfied(self, tol: float = 0.0) -> bool:
        return bool(np.all(self.values <= tol))

    def as_dict(self) -> dict[str, float]:
        return dict(self.items)


@dataclass
class TerminalSetParams:
    weight: np.ndarray  # P, symmetric positive definite
    threshold: float    # epsilon > 0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        if self.threshold <= 0:
            raise ValueError("terminal threshold must be positive")
        if np.any(np.linalg.eigvalsh(0.5 * (self.weight + self.weight.T)) <= 0):
            raise ValueError("terminal weight matrix must be positive definite")


def terminal_membership(tp: TerminalSetParams, e) -> tuple[bool, float]:
    """Membership in {e : e' P e <= eps}; returns (member, residual)."""
    e = np.asarray(e, dtype=float).reshape(-1)
    residual = float(e @ tp.weight @ e) - tp.threshold
    return residual <= 0.0, residual


def _as_sphere(ell: Ellipsoid):
    if ell.is_sphere(1e-9):
        return ell.center, float(1.0 / np.sqrt(ell.shape[0, 0]))
    return None


def volume_margin(a: Ellipsoid, b: Ellipsoid) -> float:
    """ellipsoid_margin with the closed-form shortcut for sphere pairs."""
    sa, sb = _as_sphere(a), _as_sphere(b)
    if sa is not None and sb is not None:
        return sphere_margin(sa[0], sa[1], sb[0], sb[1])
    return ellipsoid_margin(a, b)


def sphere_to_volume_margin(sphere_row, volume: Ellipsoid) -> float:
    center, radius = sphere_row[:3], sphere_row[3]
    sv = _as_sphere(volume)
    if sv is not None:
        return sphere_margin(center, radius, sv[0], sv[1])
    return ellipsoid_margin(Ellipsoid.sphere(center, radius), volume)


def sphere_pair_margins(spheres_a: np.ndarray, spheres_b: np.ndarray) -> np.ndarray:
    """All-pairs closed-form sphere margins, (n_a, n_b)."""
    ca = spheres_a[:, None, :3]
    cb = spheres_b[None, :, :3]
    d = np.linalg.norm(ca - cb, axis=2)
    ra = spheres_a[:, None, 3]
    rb = spheres_b[None, :, 3]
    sep = d > rb
    out = np.full(d.shape, -1.0)
    out[sep] = ((d[sep] - np.broadcast_to(rb, d.shape)[sep]) / np.broadcast_to(ra, d.shape)[sep]) ** 2 - 1.0
    return out


def input_residuals(agent, q, qdot, u, udot=None) -> ConstraintResiduals:
    """Input-set rows: per-component box plus torque norm and torque-rate norm.

    The torque-rate row needs qdot (through Jdot) and udot; it is produced only
    when the corresponding limit is finite.
    """
    u = np.asarray(u, dtype=float)
    lim = agent.params.limits
    items: list[tuple[str, float]] = []
    if np.isfinite(lim.input_box):
        for j, uj in enumerate(u):
            items.append((f"input_box[{j}]", abs(float(uj)) - lim.input_box))
    if np.isfinite(lim.tau_limit):
        items.append(("tau_norm", float(np.linalg.norm(input_map(agent, q, u))) - lim.tau_limit))
    if np.isfinite(lim.tau_rate_limit):
        if udot is None:
            raise ValueError("tau rate constraint requires udot")
        udot = np.asarray(udot, dtype=float)
        jac = agent.jacobian(q)
        jd = agent.jacobian_dot(q, np.asarray(qdot, dtype=float))
        items.append(
            (
                "tau_rate_norm",
                float(np.linalg.norm(jd.T @ u + jac.T @ udot)) - lim.tau_rate_limit,
            )
        )
    return ConstraintResiduals(items)


def state_residuals(
    agent,
    q,
    qdot,
    *,
    neighbor_spheres: dict[str, np.ndarray] | None = None,
    obstacles: list[Ellipsoid] | None = None,
    object_params: ObjectParams | None = None,
    workspace_radius: float = np.inf,
    is_leader: bool = False,
) -> ConstraintResiduals:
    """State-set rows of one agent given frozen neighbor collision volumes.

    Object tilt and object-obstacle rows are produced only for the leader.
    """
    lim = agent.params.limits
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    items: list[tuple[str, float]] = []

    if np.isfinite(lim.joint_velocity_limit):
        for j, qd in enumerate(qdot):
            items.append((f"joint_velocity[{j}]", abs(float(qd)) - lim.joint_velocity_limit))
    if np.isfinite(lim.arm_rate_limit):
        alpha_dot = qdot[agent.n_q - agent.n_alpha :]
        items.append(("arm_rate_norm", float(np.linalg.norm(alpha_dot)) - lim.arm_rate_limit))

    items.append(("singularity", lim.singularity_floor - agent.singularity_measure(q)))

    alpha = q[agent.n_q - agent.n_alpha :]
    if lim.arm_angle_lower is not None:
        for j, (a, lo) in enumerate(zip(alpha, lim.arm_angle_lower)):
            items.append((f"arm_angle_lower[{j}]", float(lo) - float(a)))
    if lim.arm_angle_upper is not None:
        for j, (a, hi) in enumerate(zip(alpha, lim.arm_angle_upper)):
            items.append((f"arm_angle_upper[{j}]", float(a) - float(hi)))

    base_tilt = 0.0 if agent.task_dim == 4 else abs(float(q[4]))
    items.append(("base_tilt", base_tilt - lim.tilt_limit))

    spheres = agent.collision_spheres(q)
    obstacles = obstacles or []
    for z, obstacle in enumerate(obstacles):
        for s, row in enumerate(spheres):
            items.append((f"agent_obstacle[{s},{z}]", -sphere_to_volume_margin(row, obstacle)))

    for other_name, other_spheres in (neighbor_spheres or {}).items():
        if len(other_spheres) and len(spheres):
            margins = sphere_pair_margins(spheres, other_spheres)
            for s in range(margins.shape[0]):
                for o in range(margins.shape[1]):
                    items.append((f"agent_agent[{other_name},{s},{o}]", -float(margins[s, o])))

    if np.isfinite(workspace_radius):
        items.append(("workspace_base", float(np.linalg.norm(q[:2] if agent.task_dim == 4 else q[:3])) - workspace_radius))

    if is_leader and object_params is not None:
        pose = object_pose_from_agent(agent, q)
        object_tilt = 0.0 if agent.task_dim == 4 else abs(float(pose[4]))
        items.append(("object_tilt", object_tilt - lim.tilt_limit))
        volume = object_bounding_ellipsoid(object_params, pose)
        for z, obstacle in enumerate(obstacles):
            items.append((f"object_obstacle[{z}]", -volume_margin(volume, obstacle)))
        if np.isfinite(workspace_radius):
            items.append(("workspace_object", float(np.linalg.norm(pose[:3])) - workspace_radius))

    return ConstraintResiduals(items)


def feasibility_assumption_check(
    agents,
    qs,
    obstacles,
    object_params: ObjectParams | None = None,
    workspace_radius: float = np.inf,
    tol: float = 0.0,
) -> bool:
    """Pointwise membership in the hard configuration sets.

    Checks collision separation (agents vs obstacles, agents pairwise, object
    vs obstacles), the singularity margin and the tilt bounds; velocity and
    input rows are not part of the set membership.
    """
    sphere_map = {a.name: a.collision_spheres(q) for a, q in zip(agents, qs)}
    for i, (agent, q) in enumerate(zip(agents, qs)):
        if agent.singularity_measure(q) < agent.params.limits.singularity_floor - tol:
            return False
        lim = agent.params.limits
        alpha = np.asarray(q)[agent.n_q - agent.n_alpha :]
        if lim.arm_angle_lower is not None and np.any(alpha < np.asarray(lim.arm_angle_lower) - tol):
            return False
        if lim.arm_angle_upper is not None and np.any(alpha > np.asarray(lim.arm_angle_upper) + tol):
            return False
        if agent.task_dim == 6 and abs(q[4]) > lim.tilt_limit + tol:
            return False
        spheres = sphere_map[agent.name]
        for obstacle in obstacles:
            for row in spheres:
                if sphere_to_volume_margin(row, obstacle) < -tol:
                    return False
        for other_agent, other_q in list(zip(agents, qs))[i + 1 :]:
            margins = sphere_pair_margins(spheres, sphere_map[other_agent.name])
            if margins.size and margins.min() < -tol:
                return False
    if object_params is not None and agents:
        pose = object_pose_from_agent(agents[0], qs[0])
        volume = object_bounding_ellipsoid(object_params, pose)
        for obstacle in obstacles:
            if volume_margin(volume, obstacle) < -tol:
                return False
        if np.isfinite(workspace_radius) and np.linalg.norm(pose[:3]) > workspace_radius + tol:
            return False
    return True
