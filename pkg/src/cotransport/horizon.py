"""Direct transcription of the leader and follower horizon problems.

Single shooting: the decision vector is the piecewise-constant control
sequence, states are reconstructed by an RK4 rollout (two sub-steps per
interval), so the discrete dynamics hold by construction and the dynamics
defect of any returned solution is identically zero. Constraints are imposed
at the grid nodes; the running cost uses Simpson quadrature on the interval
(node, midpoint, node) with the exact h * u'Ru control term.

The terminal-set row of the leader problem is elastic with a fixed penalty
weight: far from the goal the solver runs in soft mode and the solution
reports `terminal_mode = "soft"`; once the set is reachable the row behaves
as a hard constraint.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fastpath
from .constraints import TerminalSetParams
from .nlp import NlpProblem, SolveResult, SolverOptions, solve_nlp

TERMINAL_SOFT_WEIGHT = 1e4
PAIR_PRUNE_GUARD = 0.25


@dataclass(frozen=True)
class HorizonGrid:
    step: float
    horizon: float

    def __post_init__(self):
        if self.step <= 0 or self.horizon <= 0:
            raise ValueError("step and horizon must be positive")
        ratio = self.horizon / self.step
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("horizon must be a positive integer multiple of the step")

    @property
    def n_intervals(self) -> int:
        return int(round(self.horizon / self.step))

    def node_times(self, t0: float) -> np.ndarray:
        return t0 + self.step * np.arange(self.n_intervals + 1)


@dataclass
class CostGains:
    state_weight: np.ndarray     # Q, positive semi-definite
    input_weight: np.ndarray     # R, positive definite
    terminal_weight: np.ndarray  # P, positive definite

    def __post_init__(self):
        self.state_weight = np.asarray(self.state_weight, dtype=float)
        self.input_weight = np.asarray(self.input_weight, dtype=float)
        self.terminal_weight = np.asarray(self.terminal_weight, dtype=float)
        if np.any(np.linalg.eigvalsh(0.5 * (self.state_weight + self.state_weight.T)) < -1e-12):
            raise ValueError("state weight must be positive semi-definite")
        for name, mat in (("input", self.input_weight), ("terminal", self.terminal_weight)):
            if np.any(np.linalg.eigvalsh(0.5 * (mat + mat.T)) <= 0):
                raise ValueError(f"{name} weight must be positive definite")


@dataclass
class FollowerCost:
    input_weight: np.ndarray
    velocity_weight: np.ndarray

    def __post_init__(self):
        self.input_weight = np.asarray(self.input_weight, dtype=float)
        self.velocity_weight = np.asarray(self.velocity_weight, dtype=float)


@dataclass
class HorizonSolution:
    controls: np.ndarray        # (K, m)
    node_states: np.ndarray     # (K+1, 2n)
    mid_states: np.ndarray      # (K, 2n)
    node_times: np.ndarray      # (K+1,)
    object_poses: np.ndarray    # (K+1, t)
    object_twists: np.ndarray   # (K+1, t)
    cost: float
    status: str
    kkt_residual: float
    iterations: int
    terminal_mode: str          # "hard" | "soft" | "n/a"
    tracking_residual: float    # follower equality residual; 0 for leader
    diagnostics: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "degraded")


def _sphere_margins_vs(spheres, center, radius):
    """Margins of sphere rows (..., 4) against one fixed sphere."""
    d = np.linalg.norm(spheres[..., :3] - center, axis=-1)
    sep = d > radius
    out = np.full(d.shape, -1.0)
    ra = spheres[..., 3]
    out[sep] = ((d[sep] - radius) / ra[sep]) ** 2 - 1.0
    return out


def _obstacle_sphere(obstacle):
    if not obstacle.is_sphere(1e-9):
        return None
    return obstacle.center, float(1.0 / np.sqrt(obstacle.shape[0, 0]))


class PlanarTranscription:
    """Row assembly shared by the leader and follower problems (planar model)."""

    def __init__(
        self,
        grid: HorizonGrid,
        agent,
        obj,
        x0,
        obstacles,
        *,
        workspace_radius: float = np.inf,
        n_sub: int = 2,
    ):
        if agent.task_dim != 4:
            raise NotImplementedError("horizon transcription is implemented for the planar model")
        self.grid = grid
        self.agent = agent
        self.obj = obj
        self.x0 = np.asarray(x0, dtype=float).copy()
        self.obstacles = list(obstacles or [])
        self.workspace_radius = workspace_radius
        self.n_sub = n_sub
        self.par = fastpath.pack_params(agent, obj)
        self.k_int = grid.n_intervals
        self.m = agent.task_dim
        self.n_vars = self.k_int * self.m
        self._rollout_cache: tuple[bytes, tuple] | None = None

    # -- dynamics -------------------------------------------------------------

    def rollout(self, u_flat):
        key = np.asarray(u_flat, dtype=float).tobytes()
        if self._rollout_cache is not None and self._rollout_cache[0] == key:
            return self._rollout_cache[1]
        u = np.asarray(u_flat, dtype=float).reshape(1, self.k_int, self.m)
        nodes, mids = fastpath.rollout_batch(self.par, self.x0, u, self.grid.step, self.n_sub)
        out = (nodes[0], mids[0])
        self._rollout_cache = (key, out)
        return out

    def rollout_batch(self, u_batch):
        u = np.ascontiguousarray(np.asarray(u_batch, dtype=float).reshape(-1, self.k_int, self.m))
        return fastpath.rollout_batch(self.par, self.x0, u, self.grid.step, self.n_sub)

    # -- constraint rows --------------------------------------------------------

    def build_rows(self, extra_sphere_tracks: dict[str, np.ndarray]):
        """Define the inequality row layout given neighbor collision volumes.

        extra_sphere_tracks maps a neighbor name to either a static sphere set
        (n_o, 4) or a per-node track (K+1, n_o, 4). Pairs that cannot close the
        gap within one horizon at the velocity bounds are dropped.
        """
        agent = self.agent
        lim = agent.params.limits
        labels: list[str] = []

        def add(label):
            labels.append(label)

        k_nodes = self.k_int  # constraint nodes 1..K
        self._has_vel = np.isfinite(lim.joint_velocity_limit)
        self._has_arm_rate = np.isfinite(lim.arm_rate_limit)
        self._has_boxes = lim.arm_angle_lower is not None
        self._has_workspace = np.isfinite(self.workspace_radius)
        self._has_input_box = np.isfinite(lim.input_box)
        self._has_tau = np.isfinite(lim.tau_limit)
        self._has_tau_rate = np.isfinite(lim.tau_rate_limit)

        for k in range(1, k_nodes + 1):
            if self._has_vel:
                for j in range(4):
                    add(f"vel_hi[{k},{j}]")
                    add(f"vel_lo[{k},{j}]")
            if self._has_arm_rate:
                add(f"arm_rate[{k}]")
            add(f"singularity[{k}]")
            if self._has_boxes:
                for j in range(agent.n_alpha):
                    add(f"arm_lo[{k},{j}]")
                    add(f"arm_hi[{k},{j}]")
            if self._has_workspace:
                add(f"workspace_base[{k}]")

        # collision pair selection against the initial configuration
        my0 = agent.collision_spheres(self.x0[:4])
        reach_self = self._reach_bound()
        self._obstacle_pairs = []
        for z, obstacle in enumerate(self.obstacles):
            sph = _obstacle_sphere(obstacle)
            if sph is None:
                raise NotImplementedError("non-spherical obstacles not supported in the NLP rows")
            center, radius = sph
            d0 = np.linalg.norm(my0[:, :3] - center, axis=1)
            keep = np.nonzero(d0 <= my0[:, 3] + radius + reach_self + PAIR_PRUNE_GUARD)[0]
            for s in keep:
                self._obstacle_pairs.append((int(s), z, center, radius))
                for k in range(1, k_nodes + 1):
                    add(f"agent_obstacle[{k},{s},{z}]")

        self._neighbor_pairs = []
        for name, track in extra_sphere_tracks.items():
            track = np.asarray(track, dtype=float)
            moving = track.ndim == 3
            other0 = track[0] if moving else track
            reach = reach_self + (self._reach_bound() if moving else 0.0)
            d0 = np.linalg.norm(my0[:, None, :3] - other0[None, :, :3], axis=2)
            rsum = my0[:, None, 3] + other0[None, :, 3]
            keep = np.argwhere(d0 <= rsum + reach + PAIR_PRUNE_GUARD)
            for s, o in keep:
                self._neighbor_pairs.append((name, int(s), int(o), track, moving))
                for k in range(1, k_nodes + 1):
                    add(f"agent_agent[{name},{k},{s},{o}]")

        if self._has_input_box:
            for k in range(self.k_int):
                for j in range(self.m):
                    add(f"input_hi[{k},{j}]")
                    add(f"input_lo[{k},{j}]")
        if self._has_tau:
            for k in range(self.k_int):
                add(f"tau_norm[{k}]")
        if self._has_tau_rate:
            for k in range(self.k_int):
                add(f"tau_rate[{k}]")
        self._base_labels = labels
        return labels

    def _reach_bound(self) -> float:
        lim = self.agent.params.limits
        qd = lim.joint_velocity_limit if np.isfinite(lim.joint_velocity_limit) else 2.0
        arm = lim.arm_rate_limit if np.isfinite(lim.arm_rate_limit) else qd
        total_len = sum(self.agent.params.link_lengths)
        return (np.hypot(qd, qd) + arm * total_len) * self.grid.horizon

    def assemble_rows(self, u, nodes):
        """Stack all inequality rows for a batch: u (B, K, m), nodes (B, K+1, 2n)."""
        agent = self.agent
        lim = agent.params.limits
        b = nodes.shape[0]
        qn = nodes[:, 1:, :4]
        qdn = nodes[:, 1:, 4:]
        cols: list[np.ndarray] = []

        per_node: list[np.ndarray] = []
        if self._has_vel:
            hi = qdn - lim.joint_velocity_limit
            lo = -qdn - lim.joint_velocity_limit
            per_node.append(np.stack([hi, lo], axis=-1).reshape(b, self.k_int, -1))
        if self._has_arm_rate:
            rate = np.sum(qdn[..., 2:] ** 2, axis=-1) - lim.arm_rate_limit**2
            per_node.append(rate[..., None])
        per_node.append(
            (lim.singularity_floor - agent.singularity_batch(qn))[..., None]
        )
        if self._has_boxes:
            alpha = qn[..., 2:]
            lo = np.asarray(lim.arm_angle_lower) - alpha
            hi = alpha - np.asarray(lim.arm_angle_upper)
            per_node.append(np.stack([lo, hi], axis=-1).reshape(b, self.k_int, -1))
        if self._has_workspace:
            per_node.append(
                (np.linalg.norm(qn[..., :2], axis=-1) - self.workspace_radius)[..., None]
            )
        stacked = np.concatenate(per_node, axis=-1)  # (B, K, rows_per_node), node-major
        cols.append(stacked.reshape(b, -1))

        if self._obstacle_pairs or self._neighbor_pairs:
            spheres = agent.collision_spheres_batch(qn)  # (B, K, ns, 4)
        for s, z, center, radius in self._obstacle_pairs:
            cols.append(-_sphere_margins_vs(spheres[:, :, s, :], center, radius).reshape(b, -1))
        for name, s, o, track, moving in self._neighbor_pairs:
            mine = spheres[:, :, s, :]
            if moving:
                other = track[1:, o, :]  # (K, 4) aligned with nodes 1..K
                d = np.linalg.norm(mine[..., :3] - other[None, :, :3], axis=-1)
                rb = other[None, :, 3]
            else:
                other = track[o]
                d = np.linalg.norm(mine[..., :3] - other[:3], axis=-1)
                rb = other[3]
            sep = d > rb
            margins = np.full(d.shape, -1.0)
            rb_arr = np.broadcast_to(rb, d.shape)
            margins[sep] = ((d[sep] - rb_arr[sep]) / mine[..., 3][sep]) ** 2 - 1.0
            cols.append(-margins.reshape(b, -1))

        if self._has_input_box:
            hi = u - lim.input_box
            lo = -u - lim.input_box
            cols.append(np.stack([hi, lo], axis=-1).reshape(b, -1))
        if self._has_tau or self._has_tau_rate:
            cols.append(self._torque_rows(u, nodes))
        return np.concatenate(cols, axis=1)

    def _torque_rows(self, u, nodes):
        agent = self.agent
        lim = agent.params.limits
        b, k_int = u.shape[0], self.k_int
        out = []
        taus = np.empty((b, k_int))
        rates = np.empty((b, k_int))
        for i in range(b):
            for k in range(k_int):
                q = nodes[i, k, :4]
                qd = nodes[i, k, 4:]
                jac = agent.jacobian(q)
                if self._has_tau:
                    taus[i, k] = np.linalg.norm(jac.T @ u[i, k]) - lim.tau_limit
                if self._has_tau_rate:
                    u_prev = self.prev_control if k == 0 else u[i, k - 1]
                    udot = (u[i, k] - u_prev) / self.grid.step
                    jd = agent.jacobian_dot(q, qd)
                    rates[i, k] = (
                        np.linalg.norm(jd.T @ u[i, k] + jac.T @ udot) - lim.tau_rate_limit
                    )
        if self._has_tau:
            out.append(taus)
        if self._has_tau_rate:
            out.append(rates)
        return np.concatenate(out, axis=1)

    # -- shared state features ----------------------------------------------------

    def error_batch(self, states, x_des):
        q = states[..., :4]
        qd = states[..., 4:]
        pose = self.agent.object_pose_batch(q)
        twist = self.agent.object_twist_batch(q, qd)
        return np.concatenate([pose - x_des, twist], axis=-1)

    def solution_from(self, result: SolveResult, t0: float, terminal_mode="n/a", tracking=0.0):
        u = result.x.reshape(self.k_int, self.m)
        nodes, mids = self.rollout(result.x)
        q = nodes[:, :4]
        qd = nodes[:, 4:]
        return HorizonSolution(
            controls=u.copy(),
            node_states=nodes.copy(),
            mid_states=mids.copy(),
            node_times=self.grid.node_times(t0),
            object_poses=self.agent.object_pose_batch(q),
            object_twists=self.agent.object_twist_batch(q, qd),
            cost=result.cost,
            status=result.status,
            kkt_residual=result.kkt_residual,
            iterations=result.iterations,
            terminal_mode=terminal_mode,
            tracking_residual=tracking,
            diagnostics=result.diagnostics,
        )


class LeaderTranscription(PlanarTranscription):
    def __init__(
        self,
        grid,
        agent,
        obj,
        x0,
        team_spheres: dict[str, np.ndarray],
        obstacles,
        gains: CostGains,
        terminal: TerminalSetParams,
        x_des,
        *,
        workspace_radius=np.inf,
        object_radius=None,
        n_sub: int = 2,
        prev_control=None,
        follower_watch=None,
    ):
        super().__init__(grid, agent, obj, x0, obstacles, workspace_radius=workspace_radius, n_sub=n_sub)
        self.gains = gains
        self.terminal = terminal
        self.x_des = np.asarray(x_des, dtype=float)
        self.prev_control = (
            np.zeros(self.m) if prev_control is None else np.asarray(prev_control, dtype=float)
        )
        self.object_radius = (
            float(np.max(obj.bounding_semi_axes)) if object_radius is None else object_radius
        )
        labels = self.build_rows(team_spheres)
        self._object_obstacle_pairs = []
        for z, obstacle in enumerate(self.obstacles):
            center, radius = _obstacle_sphere(obstacle)
            for k in range(1, self.k_int + 1):
                labels.append(f"object_obstacle[{k},{z}]")
            self._object_obstacle_pairs.append((z, center, radius))
        if np.isfinite(workspace_radius):
            for k in range(1, self.k_int + 1):
                labels.append(f"workspace_object[{k}]")

        # The followers are slaved to the predicted object pose through the
        # rigid grasp; planning their reach, arm boxes, singular margin and
        # obstacle clearance here keeps the follower problems solvable (the
        # protocol itself gives the leader no view of their future arms).
        self._watch = []
        for follower, current_q in follower_watch or []:
            branch = 1 if current_q[2] >= 0 else -1
            lim = follower.params.limits
            obstacle_pairs = []
            spheres_now = follower.collision_spheres(current_q)
            reach = self._reach_bound()
            for z, obstacle in enumerate(self.obstacles):
                center, radius = _obstacle_sphere(obstacle)
                d0 = np.linalg.norm(spheres_now[:, :3] - center, axis=1)
                keep = np.nonzero(d0 <= spheres_now[:, 3] + radius + reach + PAIR_PRUNE_GUARD)[0]
                for s in keep:
                    obstacle_pairs.append((int(s), z, center, radius))
            self._watch.append((follower, branch, obstacle_pairs))
            name = follower.name
            for k in range(1, self.k_int + 1):
                labels.append(f"team_singularity[{name},{k}]")
            if lim.arm_angle_lower is not None:
                for k in range(1, self.k_int + 1):
                    for j in range(follower.n_alpha):
                        labels.append(f"team_arm_lo[{name},{k},{j}]")
                        labels.append(f"team_arm_hi[{name},{k},{j}]")
            for s, z, _, _ in obstacle_pairs:
                for k in range(1, self.k_int + 1):
                    labels.append(f"team_obstacle[{name},{k},{s},{z}]")

        self.labels = tuple(labels)          # hard rows; terminal row appended in hard phase
        self.n_ineq = len(labels)

    def _feature_jacobians(self, u_flat, step: float = 1e-6):
        """Central-difference Jacobians of the node/mid error features wrt u."""
        u_flat = np.asarray(u_flat, dtype=float)
        eps = step * np.maximum(1.0, np.abs(u_flat))
        pert = np.vstack([np.diag(eps), -np.diag(eps)]) + u_flat
        nodes, mids = self.rollout_batch(pert)
        e_nodes = self.error_batch(nodes, self.x_des)  # (2n, K+1, 8)
        e_mids = self.error_batch(mids, self.x_des)
        n = self.n_vars
        je_nodes = (e_nodes[:n] - e_nodes[n:]) / (2.0 * eps[:, None, None])
        je_mids = (e_mids[:n] - e_mids[n:]) / (2.0 * eps[:, None, None])
        return np.moveaxis(je_nodes, 0, -1), np.moveaxis(je_mids, 0, -1)  # (K+1, 8, n)

    def gauss_newton_hess0(self, u_flat, terminal: str = "penalty") -> np.ndarray:
        """Gauss-Newton Hessian of the objective (plus active terminal penalty).

        The cost is quadratic in the error features, so this captures the
        dominant curvature (including the penalty-scaled terminal direction)
        that a unit-initialized BFGS would need many iterations to learn.
        """
        je_nodes, je_mids = self._feature_jacobians(u_flat)
        h = self.grid.step
        q_w = self.gains.state_weight
        k_int = self.k_int
        hess = np.zeros((self.n_vars, self.n_vars))
        for k in range(1, k_int + 1):
            w_node = h / 6.0 * (2.0 if k < k_int else 1.0)
            jk = je_nodes[k]
            hess += 2.0 * w_node * jk.T @ q_w @ jk
        for k in range(k_int):
            jm = je_mids[k]
            hess += 2.0 * (4.0 * h / 6.0) * jm.T @ q_w @ jm
        for k in range(k_int):
            sl = slice(k * self.m, (k + 1) * self.m)
            hess[sl, sl] += 2.0 * h * self.gains.input_weight
        j_term = je_nodes[k_int]
        hess += 2.0 * j_term.T @ self.gains.terminal_weight @ j_term
        resid = self.terminal_residual(u_flat)
        if terminal == "penalty":
            if resid > 0.0:
                nodes, _ = self.rollout(u_flat)
                e_term = self.error_batch(nodes[None, -1:, :], self.x_des)[0, 0]
                grad_c = 2.0 * j_term.T @ (self.terminal.weight @ e_term)
                hess += 2.0 * TERMINAL_SOFT_WEIGHT * np.outer(grad_c, grad_c)
                hess += (
                    4.0 * TERMINAL_SOFT_WEIGHT * resid * j_term.T @ self.terminal.weight @ j_term
                )
        elif terminal == "hard":
            # Lagrangian curvature of the active terminal row, with the multiplier
            # estimated from the penalty phase (2 w max(resid, 0)); without it the
            # hard phase zigzags on the curved constraint surface
            lam_est = 2.0 * TERMINAL_SOFT_WEIGHT * max(resid, 0.0) + 1.0
            hess += 2.0 * lam_est * j_term.T @ self.terminal.weight @ j_term
        hess = 0.5 * (hess + hess.T)
        hess += 1e-8 * np.eye(self.n_vars)
        return hess

    def terminal_residual(self, u_flat) -> float:
        nodes, _ = self.rollout(np.asarray(u_flat, dtype=float).ravel())
        e_term = self.error_batch(nodes[None, -1:, :], self.x_des)[0, 0]
        return float(e_term @ self.terminal.weight @ e_term) - self.terminal.threshold

    def evaluate_batch(self, u_flat_batch, terminal: str = "penalty"):
        u_flat_batch = np.atleast_2d(np.asarray(u_flat_batch, dtype=float))
        b = u_flat_batch.shape[0]
        u = u_flat_batch.reshape(b, self.k_int, self.m)
        nodes, mids = self.rollout_batch(u_flat_batch)

        e_nodes = self.error_batch(nodes, self.x_des)
        e_mids = self.error_batch(mids, self.x_des)
        q_w = self.gains.state_weight
        f_nodes = np.einsum("bki,ij,bkj->bk", e_nodes, q_w, e_nodes)
        f_mids = np.einsum("bki,ij,bkj->bk", e_mids, q_w, e_mids)
        h = self.grid.step
        integral = (h / 6.0) * np.sum(f_nodes[:, :-1] + 4.0 * f_mids + f_nodes[:, 1:], axis=1)
        integral += h * np.einsum("bki,ij,bkj->b", u, self.gains.input_weight, u)
        e_term = e_nodes[:, -1, :]
        terminal_value = np.einsum("bi,ij,bj->b", e_term, self.gains.terminal_weight, e_term)
        cost = integral + terminal_value

        term_row = (
            np.einsum("bi,ij,bj->b", e_term, self.terminal.weight, e_term)
            - self.terminal.threshold
        )
        if terminal == "penalty":
            cost = cost + TERMINAL_SOFT_WEIGHT * np.maximum(term_row, 0.0) ** 2
        # "off": plain objective; the terminal weight still acts through the cost

        rows = [self.assemble_rows(u, nodes)]
        pose = self.agent.object_pose_batch(nodes[:, 1:, :4])
        for z, center, radius in self._object_obstacle_pairs:
            d = np.linalg.norm(pose[..., :3] - center, axis=-1)
            sep = d > radius
            margins = np.full(d.shape, -1.0)
            margins[sep] = ((d[sep] - radius) / self.object_radius) ** 2 - 1.0
            rows.append(-margins.reshape(b, -1))
        if np.isfinite(self.workspace_radius):
            rows.append(
                np.linalg.norm(pose[..., :3], axis=-1).reshape(b, -1) - self.workspace_radius
            )
        for follower, branch, obstacle_pairs in self._watch:
            lim = follower.params.limits
            c1 = follower.ik_elbow_cosine_batch(pose)
            # reach and singular margin in one row: sin^2(a1) >= floor
            rows.append(
                (c1**2 - (1.0 - lim.singularity_floor)).reshape(b, -1)
            )
            q_f = follower.ik_batch(pose, branch)
            if lim.arm_angle_lower is not None:
                alpha = q_f[..., 2:]
                lo = np.asarray(lim.arm_angle_lower) - alpha
                hi = alpha - np.asarray(lim.arm_angle_upper)
                rows.append(np.stack([lo, hi], axis=-1).reshape(b, -1))
            if obstacle_pairs:
                spheres_f = follower.collision_spheres_batch(q_f)
                for s, z, center, radius in obstacle_pairs:
                    rows.append(
                        -_sphere_margins_vs(spheres_f[:, :, s, :], center, radius).reshape(b, -1)
                    )
        if terminal == "hard":
            rows.append(term_row[:, None])
        ci = np.concatenate(rows, axis=1)
        return cost, ci, np.zeros((b, 0))

    def as_problem(self, terminal: str = "penalty") -> NlpProblem:
        """NLP with the terminal set as a squared penalty, a hard row, or off."""
        if terminal not in ("penalty", "hard", "off"):
            raise ValueError(f"unknown terminal treatment {terminal!r}")

        def eval_batch(xs, terminal=terminal):
            return self.evaluate_batch(xs, terminal=terminal)

        def eval_single(x, terminal=terminal):
            f, ci, ce = self.evaluate_batch(x[None, :], terminal=terminal)
            return f[0], ci[0], ce[0]

        labels = self.labels + (("terminal",) if terminal == "hard" else ())
        return NlpProblem(
            n_vars=self.n_vars,
            eval_single=eval_single,
            n_ineq=self.n_ineq + (1 if terminal == "hard" else 0),
            n_eq=0,
            eval_batch=eval_batch,
            labels=labels,
            meta={
                "transcription": self,
                "kind": "leader",
                "terminal": terminal,
                "hess0": lambda x, terminal=terminal: self.gauss_newton_hess0(x, terminal),
            },
        )


class FollowerTranscription(PlanarTranscription):
    def __init__(
        self,
        grid,
        agent,
        obj,
        x0,
        leader_poses,       # (K+1, 4) predicted object poses from the leader
        leader_twists,      # (K+1, 4)
        higher_tracks: dict[str, np.ndarray],   # name -> (K+1, n_o, 4) predicted spheres
        lower_spheres: dict[str, np.ndarray],   # name -> (n_o, 4) current spheres
        obstacles,
        cost: FollowerCost,
        *,
        penalty: float = 1e4,
        workspace_radius=np.inf,
        n_sub: int = 2,
        prev_control=None,
    ):
        super().__init__(grid, agent, obj, x0, obstacles, workspace_radius=workspace_radius, n_sub=n_sub)
        self.leader_poses = np.asarray(leader_poses, dtype=float)
        self.leader_twists = np.asarray(leader_twists, dtype=float)
        self.cost_gains = cost
        self.penalty = penalty
        self.prev_control = (
            np.zeros(self.m) if prev_control is None else np.asarray(prev_control, dtype=float)
        )
        tracks: dict[str, np.ndarray] = {}
        tracks.update(higher_tracks)
        tracks.update(lower_spheres)
        labels = self.build_rows(tracks)
        self.labels = tuple(labels)
        self.n_ineq = len(labels)
        self.soft_weights = np.full(self.n_ineq, np.inf)

    def tracking_errors(self, u_flat):
        nodes, _ = self.rollout(np.asarray(u_flat, dtype=float))
        pose = self.agent.object_pose_batch(nodes[1:, :4])
        twist = self.agent.object_twist_batch(nodes[1:, :4], nodes[1:, 4:])
        return pose - self.leader_poses[1:], twist - self.leader_twists[1:]

    def gauss_newton_hess0(self, u_flat) -> np.ndarray:
        """Gauss-Newton Hessian of the penalty-dominated tracking objective."""
        u_flat = np.asarray(u_flat, dtype=float)
        eps = 1e-6 * np.maximum(1.0, np.abs(u_flat))
        pert = np.vstack([np.diag(eps), -np.diag(eps)]) + u_flat
        nodes, _ = self.rollout_batch(pert)
        q = nodes[:, 1:, :4]
        qd = nodes[:, 1:, 4:]
        feats = np.concatenate(
            [self.agent.object_pose_batch(q), self.agent.object_twist_batch(q, qd)], axis=-1
        )
        n = self.n_vars
        jac = (feats[:n] - feats[n:]) / (2.0 * eps[:, None, None])
        jac = jac.reshape(n, -1).T  # (K*8, n)
        hess = 2.0 * self.penalty * jac.T @ jac
        h = self.grid.step
        for k in range(self.k_int):
            sl = slice(k * self.m, (k + 1) * self.m)
            hess[sl, sl] += 2.0 * h * self.cost_gains.input_weight
        hess = 0.5 * (hess + hess.T)
        hess += 1e-8 * np.eye(n)
        return hess

    def tracking_residual(self, u_flat) -> float:
        dp, dv = self.tracking_errors(u_flat)
        return float(max(np.linalg.norm(dp, axis=1).max(), np.linalg.norm(dv, axis=1).max()))

    def evaluate_batch(self, u_flat_batch):
        u_flat_batch = np.atleast_2d(np.asarray(u_flat_batch, dtype=float))
        b = u_flat_batch.shape[0]
        u = u_flat_batch.reshape(b, self.k_int, self.m)
        nodes, _ = self.rollout_batch(u_flat_batch)
        q = nodes[:, 1:, :4]
        qd = nodes[:, 1:, 4:]
        pose = self.agent.object_pose_batch(q)
        twist = self.agent.object_twist_batch(q, qd)
        dp = pose - self.leader_poses[None, 1:]
        dv = twist - self.leader_twists[None, 1:]
        h = self.grid.step
        cost = h * np.einsum("bki,ij,bkj->b", u, self.cost_gains.input_weight, u)
        cost += h * np.einsum("bki,ij,bkj->b", qd, self.cost_gains.velocity_weight, qd)
        cost += self.penalty * (np.sum(dp**2, axis=(1, 2)) + np.sum(dv**2, axis=(1, 2)))
        ci = self.assemble_rows(u, nodes)
        return cost, ci, np.zeros((b, 0))

    def as_problem(self) -> NlpProblem:
        def eval_single(x):
            f, ci, ce = self.evaluate_batch(x[None, :])
            return f[0], ci[0], ce[0]

        return NlpProblem(
            n_vars=self.n_vars,
            eval_single=eval_single,
            n_ineq=self.n_ineq,
            n_eq=0,
            eval_batch=self.evaluate_batch,
            soft_weights=self.soft_weights,
            labels=self.labels,
            meta={"transcription": self, "kind": "follower", "hess0": self.gauss_newton_hess0},
        )


def transcribe_leader(*args, **kwargs) -> NlpProblem:
    return LeaderTranscription(*args, **kwargs).as_problem()


def transcribe_follower(*args, **kwargs) -> NlpProblem:
    return FollowerTranscription(*args, **kwargs).as_problem()


HARD_ATTEMPT_THRESHOLD = 1e-2
PENALTY_BAND = 1.0


def _acceptable(result: SolveResult) -> bool:
    return result.status in ("optimal", "degraded") or (
        result.status == "max_iterations" and result.feasibility <= 1e-6
    )


def solve_leader(
    problem: NlpProblem, warm_start, t0: float, options: SolverOptions | None = None
) -> HorizonSolution:
    """Terminal-set handling in phases keyed on the warm-start residual.

    Far from the goal the set is unreachable within one horizon and the plain
    objective (which already carries the terminal cost) is solved; inside a
    residual band the squared soft penalty pushes into the set; once a solution
    lands close to the set the problem is re-solved with the terminal row as a
    hard constraint. `terminal_mode` records "hard" only when the row was
    enforced as a constraint and met.
    """
    trans: LeaderTranscription = problem.meta["transcription"]
    warm = np.asarray(warm_start, dtype=float).ravel()
    resid_warm = trans.terminal_residual(warm)
    treatment = "off" if resid_warm > PENALTY_BAND else "penalty"
    result = solve_nlp(trans.as_problem(treatment), warm, options)
    terminal_mode = "soft"
    resid = trans.terminal_residual(result.x)
    if treatment == "penalty" and resid <= HARD_ATTEMPT_THRESHOLD:
        hard_result = solve_nlp(trans.as_problem("hard"), result.x, options)
        hard_resid = trans.terminal_residual(hard_result.x)
        if _acceptable(hard_result) and hard_result.feasibility <= 1e-6 and hard_resid <= 1e-6:
            result = hard_result
            terminal_mode = "hard"
    solution = trans.solution_from(result, t0, terminal_mode=terminal_mode)
    if _acceptable(result):
        solution.status = result.status if result.status != "max_iterations" else "degraded"
    return solution


def solve_follower_with_continuation(
    make_transcription,
    warm_start,
    t0: float,
    options: SolverOptions | None = None,
    penalties=(1e4, 1e6, 1e8),
    equality_tol: float = 1e-4,
) -> HorizonSolution:
    """Penalty continuation on the grasp-consistency equalities.

    `make_transcription(penalty)` builds a FollowerTranscription; the penalty
    grows until the node equality residual drops below `equality_tol` or the
    schedule is exhausted (the best iterate is returned either way).
    """
    warm = np.asarray(warm_start, dtype=float).ravel()
    best = None
    prev_resid = np.inf
    for rho in penalties:
        trans = make_transcription(rho)
        result = solve_nlp(trans.as_problem(), warm, options)
        warm = result.x
        resid = trans.tracking_residual(result.x)
        best = (trans, result, resid)
        if resid <= equality_tol and _acceptable(result):
            break
        if resid > 0.5 * prev_resid:
            # residual floor reached (discretization infeasibility): stop escalating
            break
        prev_resid = resid
    trans, result, resid = best
    solution = trans.solution_from(result, t0, tracking=resid)
    if _acceptable(result):
        solution.status = result.status if result.status != "max_iterations" else "degraded"
    return solution


def receding_step(solution: HorizonSolution, grid: HorizonGrid):
    """First-interval control plus the shifted warm start (last interval doubled)."""
    if not solution.ok:
        raise RuntimeError(f"solution status {solution.status} is not acceptable")
    u = solution.controls
    shifted = np.vstack([u[1:], u[-1:]])
    return u[0].copy(), shifted
