"""Closed-loop plant simulation, constraint monitoring and trace recording.

Each agent integrates its own decoupled ODE under the applied round controls
(RK4, four sub-steps of h/4). Because the physical chain is closed, follower
configurations are projected back onto the grasp-consistency manifold after
every step through the closed-form inverse kinematics; the pre-projection
drift is logged as a model-fidelity diagnostic.

Trace rows are written at every sampling instant: row j carries the state at
t_j together with the round-j solver data and the control applied on
[t_j, t_j + h); the final row repeats the last applied control so that all
columns stay complete. All floats are serialized with round-trippable
precision, so identical runs produce bit-identical CSV files.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fastpath
from .agent import SingularityError
from .comms import MessageBus, PredictionMessage, RoundAbortError, run_round
from .constraints import (
    feasibility_assumption_check,
    input_residuals,
    state_residuals,
)
from .coupled import equilibrium_input, error_state, forward_dynamics
from .horizon import LeaderTranscription
from .payload import object_pose_from_agent, object_twist_from_agent
from .scenario import ScenarioConfig, Team, build_team

TRACE_SCHEMA_VERSION = 1
EARLY_STOP_ERROR = 1e-8


class InitialInfeasibilityError(RuntimeError):
    pass


class MonitorViolationError(RuntimeError):
    def __init__(self, message, labels):
        super().__init__(message)
        self.labels = labels


class StepRejectedError(RuntimeError):
    pass


def obstacle_function(x_obj, obstacles) -> float:
    """Signed obstacle indicator r^2 - ||p_O - c||^2 (max over obstacles).

    Negative iff the object's centre lies outside every obstacle sphere;
    -inf when the scenario has no obstacles.
    """
    p = np.asarray(x_obj, dtype=float)[:3]
    best = -np.inf
    for obstacle in obstacles:
        radius_sq = 1.0 / obstacle.shape[0, 0]
        best = max(best, float(radius_sq - np.sum((p - obstacle.center) ** 2)))
    return best


def integrate_step(agent, obj, state, u, h, n_sub: int = 4, check_singularity: bool = True):
    """Reference RK4 plant step (n_sub sub-steps of h/n_sub); returns sub-states.

    Raises StepRejectedError when a sub-state crosses the singular margin.
    """
    x = np.asarray(state, dtype=float).copy()
    out = [x.copy()]
    dt = h / n_sub
    for _ in range(n_sub):
        k1 = forward_dynamics(agent, obj, x, u)
        k2 = forward_dynamics(agent, obj, x + 0.5 * dt * k1, u)
        k3 = forward_dynamics(agent, obj, x + 0.5 * dt * k2, u)
        k4 = forward_dynamics(agent, obj, x + dt * k3, u)
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if check_singularity and agent.singularity_measure(x[: agent.n_q]) < agent.params.limits.singularity_floor * (1 - 1e-9):
            raise StepRejectedError(f"{agent.name}: singular margin crossed mid-step")
        out.append(x.copy())
    return np.array(out)


def plant_step_fast(par, agent, state, u, h, n_sub: int = 4):
    sub = fastpath.plant_step(par, np.asarray(state, dtype=float), np.asarray(u, dtype=float), h, n_sub)
    measures = agent.singularity_batch(sub[:, :4])
    if np.any(measures < agent.params.limits.singularity_floor * (1 - 1e-9)):
        raise StepRejectedError(f"{agent.name}: singular margin crossed mid-step")
    return sub


def project_closure(team: Team, states: list[np.ndarray]):
    """Snap follower states onto the leader-implied object pose and twist.

    Returns (projected states, pre-projection drift, post-projection drift)
    where drift is the worst pairwise deviation of the per-agent object poses.
    """
    leader = team.agents[0]
    poses = [object_pose_from_agent(a, s[:4]) for a, s in zip(team.agents, states)]
    drift_pre = 0.0
    for i in range(len(poses)):
        for j in range(i + 1, len(poses)):
            drift_pre = max(drift_pre, float(np.linalg.norm(poses[i] - poses[j])))
    x_obj = poses[0]
    v_obj = object_twist_from_agent(leader, states[0][:4], states[0][4:])
    projected = [states[0]]
    for agent, state in zip(team.agents[1:], states[1:]):
        q = agent.ik_object_pose(x_obj, branch_hint=state[:4])
        qd = agent.ik_object_twist(q, v_obj)
        projected.append(np.concatenate([q, qd]))
    poses_post = [object_pose_from_agent(a, s[:4]) for a, s in zip(team.agents, projected)]
    drift_post = 0.0
    for i in range(len(poses_post)):
        for j in range(i + 1, len(poses_post)):
            drift_post = max(drift_post, float(np.linalg.norm(poses_post[i] - poses_post[j])))
    return projected, drift_pre, drift_post


@dataclass
class Trace:
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def append(self, values: dict[str, float]):
        if set(values) != set(self.columns):
            missing = set(self.columns) - set(values)
            extra = set(values) - set(self.columns)
            raise ValueError(f"trace row mismatch: missing {missing}, extra {extra}")
        self.rows.append([float(values[c]) for c in self.columns])

    def column(self, name: str) -> np.ndarray:
        return np.array([row[self.columns.index(name)] for row in self.rows])

    def array(self, prefix: str) -> np.ndarray:
        idx = [i for i, c in enumerate(self.columns) if c.startswith(prefix)]
        return np.array([[row[i] for i in idx] for row in self.rows])

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(f"# trace schema v{TRACE_SCHEMA_VERSION}\n")
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(repr(v) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Trace":
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        header_idx = 1 if lines and lines[0].startswith("#") else 0
        columns = lines[header_idx].split(",")
        rows = [
            [float(tok) for tok in ln.split(",")]
            for ln in lines[header_idx + 1 :]
            if ln.strip()
        ]
        return cls(columns=columns, rows=rows)


def trace_columns(n_agents: int) -> list[str]:
    cols = ["t"]
    for i in range(1, n_agents + 1):
        cols += [f"q{i}[{j}]" for j in range(4)]
        cols += [f"qd{i}[{j}]" for j in range(4)]
        cols += [f"u{i}[{j}]" for j in range(4)]
    for i in range(1, n_agents + 1):
        cols += [f"xo{i}[{j}]" for j in range(4)]
    cols += [f"vo[{j}]" for j in range(4)]
    cols += ["err_norm", "obstacle_function", "closure_drift_pre", "closure_drift_post"]
    for i in range(1, n_agents + 1):
        cols += [f"status{i}", f"iters{i}", f"kkt{i}", f"cost{i}", f"tracking{i}"]
    cols += ["terminal_mode", "max_state_residual", "max_input_residual", "decrease_gap"]
    return cols


_STATUS_CODE = {"optimal": 0.0, "degraded": 1.0, "max_iterations": 2.0, "infeasible": 3.0}
_TERMINAL_CODE = {"hard": 0.0, "soft": 1.0, "n/a": -1.0}


@dataclass
class RunResult:
    trace: Trace
    summary: dict
    messages: list[PredictionMessage]
    status: str

    @property
    def final_error(self) -> float:
        return self.summary["final_error"]


def _monitor_step(team: Team, sub_states: list[np.ndarray], controls: list[np.ndarray], tol: float):
    """Worst state/input residuals over the plant sub-grid of one step."""
    worst_state = -np.inf
    worst_input = -np.inf
    violations = []
    n_sub = sub_states[0].shape[0]
    for s in range(n_sub):
        states_s = [sub[s] for sub in sub_states]
        spheres = {a.name: a.collision_spheres(st[:4]) for a, st in zip(team.agents, states_s)}
        for i, (agent, st) in enumerate(zip(team.agents, states_s)):
            others = {n: v for n, v in spheres.items() if n != agent.name}
            res = state_residuals(
                agent,
                st[:4],
                st[4:],
                neighbor_spheres=others,
                obstacles=team.obstacles,
                object_params=team.obj,
                workspace_radius=team.config.workspace_radius_m,
                is_leader=(i == 0),
            )
            worst_state = max(worst_state, res.max_violation())
            if res.max_violation() > tol:
                violations += [
                    f"{agent.name}:{lab}" for lab, v in res.items if v > tol
                ]
            res_u = input_residuals(agent, st[:4], st[4:], controls[i])
            worst_input = max(worst_input, res_u.max_violation())
            if res_u.max_violation() > tol:
                violations += [f"{agent.name}:{lab}" for lab, v in res_u.items if v > tol]
    return worst_state, worst_input, violations


def leader_warm_cost(team: Team, state: np.ndarray, warm: np.ndarray) -> float:
    """Objective value of a candidate control sequence from the current state."""
    trans = LeaderTranscription(
        team.grid,
        team.agents[0],
        team.obj,
        state,
        {},
        [],
        team.gains,
        team.terminal,
        team.x_des,
        workspace_radius=np.inf,
        n_sub=team.config.prediction_substeps,
    )
    cost, _, _ = trans.evaluate_batch(np.asarray(warm, dtype=float).ravel()[None, :])
    return float(cost[0])


def run_scenario(
    config: ScenarioConfig,
    out_dir: str | Path | None = None,
    strict_monitor: bool = False,
    solver_options=None,
    replay_messages: list[PredictionMessage] | None = None,
) -> RunResult:
    """Closed-loop run of a scenario; see module docstring for trace semantics.

    With `replay_messages`, followers consume the logged messages instead of
    the freshly produced ones (states still evolve through the plant), which
    reproduces the original applied controls when the log matches the run.
    """
    team = build_team(config)
    cfg = config
    n_agents = len(team.agents)
    h = cfg.sampling_period_s
    t_start = time.perf_counter()

    states = team.initial_states()
    states, drift_pre0, drift_post0 = project_closure(team, states)
    if not feasibility_assumption_check(
        team.agents,
        [s[:4] for s in states],
        team.obstacles,
        team.obj,
        cfg.workspace_radius_m,
    ):
        raise InitialInfeasibilityError("initial configuration violates the hard constraint sets")

    pars = [fastpath.pack_params(a, team.obj) for a in team.agents]
    k_int = team.grid.n_intervals
    warm_starts = [
        np.tile(equilibrium_input(a, team.obj, s[:4]), (k_int, 1))
        for a, s in zip(team.agents, states)
    ]
    prev_controls = [np.zeros(team.agents[0].task_dim) for _ in team.agents]

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    bus = MessageBus(out_path / "messages.jsonl" if out_path is not None else None)
    replay_by_round: dict[int, dict[str, PredictionMessage]] = {}
    for msg in replay_messages or []:
        replay_by_round.setdefault(msg.round_index, {})[msg.sender] = msg

    trace = Trace(trace_columns(n_agents))
    monitor_violations: list[str] = []
    prev_cost = np.nan
    prev_running = np.nan
    status = "completed"
    pending_drift = (drift_pre0, drift_post0)

    def leader_error(states_):
        e = error_state(team.agents[0], team.obj, states_[0][:4], states_[0][4:], team.x_des)
        return e.as_vector()

    try:
        round_index = 0
        while round_index < cfg.n_rounds:
            t_j = round_index * h
            e_vec = leader_error(states)
            err_norm = float(np.linalg.norm(e_vec))

            warm_cost = leader_warm_cost(team, states[0], warm_starts[0])
            decrease_gap = (
                warm_cost - (prev_cost - h * prev_running)
                if np.isfinite(prev_cost)
                else 0.0
            )

            injected = replay_by_round.get(round_index)
            if injected is not None:
                round_result = _run_round_with_injection(
                    team, t_j, round_index, states, warm_starts, prev_controls, bus, solver_options, injected
                )
            else:
                round_result = run_round(
                    team, t_j, round_index, states, warm_starts, prev_controls, bus, solver_options
                )
            controls = round_result.controls

            sub_states = [
                plant_step_fast(par, agent, st, u, h, cfg.plant_substeps)
                for par, agent, st, u in zip(pars, team.agents, states, controls)
            ]
            new_states = [sub[-1].copy() for sub in sub_states]
            new_states, drift_pre, drift_post = project_closure(team, new_states)

            worst_state, worst_input, violations = _monitor_step(
                team, sub_states, controls, cfg.monitor_tolerance
            )
            monitor_violations += violations
            if strict_monitor and violations:
                raise MonitorViolationError(
                    f"monitor violation at t={t_j:.2f}", violations
                )

            x_obj = object_pose_from_agent(team.agents[0], states[0][:4])
            row = {"t": t_j}
            for i, (st, u) in enumerate(zip(states, controls), start=1):
                for j in range(4):
                    row[f"q{i}[{j}]"] = st[j]
                    row[f"qd{i}[{j}]"] = st[4 + j]
                    row[f"u{i}[{j}]"] = u[j]
            for i, (agent, st) in enumerate(zip(team.agents, states), start=1):
                pose_i = object_pose_from_agent(agent, st[:4])
                for j in range(4):
                    row[f"xo{i}[{j}]"] = pose_i[j]
            v_obj = object_twist_from_agent(team.agents[0], states[0][:4], states[0][4:])
            for j in range(4):
                row[f"vo[{j}]"] = v_obj[j]
            row["err_norm"] = err_norm
            row["obstacle_function"] = obstacle_function(x_obj, team.obstacles)
            row["closure_drift_pre"] = pending_drift[0]
            row["closure_drift_post"] = pending_drift[1]
            for i, sol in enumerate(round_result.solutions, start=1):
                row[f"status{i}"] = _STATUS_CODE[sol.status]
                row[f"iters{i}"] = float(sol.iterations)
                row[f"kkt{i}"] = sol.kkt_residual
                row[f"cost{i}"] = sol.cost
                row[f"tracking{i}"] = sol.tracking_residual
            row["terminal_mode"] = _TERMINAL_CODE[round_result.solutions[0].terminal_mode]
            row["max_state_residual"] = worst_state
            row["max_input_residual"] = worst_input
            row["decrease_gap"] = decrease_gap
            trace.append(row)

            prev_cost = round_result.solutions[0].cost
            u0 = controls[0]
            prev_running = float(
                e_vec @ team.gains.state_weight @ e_vec + u0 @ team.gains.input_weight @ u0
            )
            states = new_states
            warm_starts = round_result.warm_starts
            prev_controls = controls
            pending_drift = (drift_pre, drift_post)
            round_index += 1

            err_new = float(np.linalg.norm(leader_error(states)))
            if err_norm <= EARLY_STOP_ERROR and err_new <= EARLY_STOP_ERROR:
                status = "terminal_set_settled"
                break
    except RoundAbortError as exc:
        exc.trace = trace
        raise
    finally:
        bus.close()

    # final row: state at the end, repeating the last applied control
    t_end = round_index * h
    e_vec = leader_error(states)
    row = {"t": t_end}
    for i, (st, u) in enumerate(zip(states, prev_controls), start=1):
        for j in range(4):
            row[f"q{i}[{j}]"] = st[j]
            row[f"qd{i}[{j}]"] = st[4 + j]
            row[f"u{i}[{j}]"] = u[j]
    for i, (agent, st) in enumerate(zip(team.agents, states), start=1):
        pose_i = object_pose_from_agent(agent, st[:4])
        for j in range(4):
            row[f"xo{i}[{j}]"] = pose_i[j]
    v_obj = object_twist_from_agent(team.agents[0], states[0][:4], states[0][4:])
    for j in range(4):
        row[f"vo[{j}]"] = v_obj[j]
    x_obj = object_pose_from_agent(team.agents[0], states[0][:4])
    row["err_norm"] = float(np.linalg.norm(e_vec))
    row["obstacle_function"] = obstacle_function(x_obj, team.obstacles)
    row["closure_drift_pre"] = pending_drift[0]
    row["closure_drift_post"] = pending_drift[1]
    for i in range(1, n_agents + 1):
        last = trace.rows[-1] if trace.rows else None
        for name in (f"status{i}", f"iters{i}", f"kkt{i}", f"cost{i}", f"tracking{i}"):
            row[name] = last[trace.columns.index(name)] if last is not None else -1.0
    row["terminal_mode"] = (
        trace.rows[-1][trace.columns.index("terminal_mode")] if trace.rows else -1.0
    )
    row["max_state_residual"] = trace.rows[-1][trace.columns.index("max_state_residual")] if trace.rows else -np.inf
    row["max_input_residual"] = trace.rows[-1][trace.columns.index("max_input_residual")] if trace.rows else -np.inf
    row["decrease_gap"] = 0.0
    trace.append(row)

    final_error = float(np.linalg.norm(x_obj - team.x_des))
    summary = {
        "scenario": cfg.name,
        "status": status,
        "rounds": round_index,
        "final_error": final_error,
        "final_error_norm_full": float(np.linalg.norm(e_vec)),
        "min_obstacle_clearance": float(-trace.column("obstacle_function").max())
        if team.obstacles
        else float("inf"),
        "max_abs_input": float(np.max(np.abs(trace.array("u")))),
        "max_closure_drift_pre": float(trace.column("closure_drift_pre").max()),
        "max_closure_drift_post": float(trace.column("closure_drift_post").max()),
        "max_state_residual": float(trace.column("max_state_residual").max()),
        "max_input_residual": float(trace.column("max_input_residual").max()),
        "monitor_violations": len(monitor_violations),
        "wall_clock_s": time.perf_counter() - t_start,
    }
    if out_path is not None:
        trace.to_csv(out_path / "trace.csv")
        with open(out_path / "summary.txt", "w") as fh:
            for key, value in summary.items():
                fh.write(f"{key}: {value}\n")
    return RunResult(trace=trace, summary=summary, messages=list(bus.published), status=status)


def _run_round_with_injection(
    team, t_j, round_index, states, warm_starts, prev_controls, bus, options, injected
):
    """run_round but followers consume injected (logged) messages."""
    from .comms import RoundResult, message_from_solution
    from .horizon import (
        FollowerTranscription,
        LeaderTranscription,
        receding_step,
        solve_follower_with_continuation,
        solve_leader,
    )

    agents = team.agents
    cfg = team.config
    frozen = {a.name: a.collision_spheres(s[:4]) for a, s in zip(agents, states)}
    by_name = {a.name: a for a in agents}

    leader = agents[0]
    leader_problem = LeaderTranscription(
        team.grid, leader, team.obj, states[0],
        {name: frozen[name] for name in team.schedule.lower_priority(leader.name)},
        team.obstacles, team.gains, team.terminal, team.x_des,
        workspace_radius=cfg.workspace_radius_m, n_sub=cfg.prediction_substeps,
        prev_control=prev_controls[0],
        follower_watch=[(a, s[:4]) for a, s in zip(agents[1:], states[1:])],
    ).as_problem()
    leader_solution = solve_leader(leader_problem, warm_starts[0], t_j, options)
    if not leader_solution.ok:
        raise RoundAbortError("leader replay solve failed", leader.name, leader_solution)
    solutions = [leader_solution]
    fresh = [message_from_solution(leader.name, round_index, t_j, leader_solution)] if len(agents) > 1 else []

    received: list[PredictionMessage] = []
    if leader.name in injected:
        received.append(injected[leader.name])
    for idx, follower in enumerate(agents[1:], start=1):
        leader_msg = next(m for m in received if m.sender == team.schedule.leader)
        higher_tracks = {
            m.sender: by_name[m.sender].collision_spheres_batch(m.q) for m in received
        }
        lower = {n: frozen[n] for n in team.schedule.lower_priority(follower.name)}

        def make_transcription(penalty, follower=follower, idx=idx,
                               leader_msg=leader_msg, higher=dict(higher_tracks), lower=lower):
            return FollowerTranscription(
                team.grid, follower, team.obj, states[idx],
                leader_msg.object_poses, leader_msg.object_twists,
                higher, lower, team.obstacles, team.follower_cost,
                penalty=penalty, workspace_radius=cfg.workspace_radius_m,
                n_sub=cfg.prediction_substeps, prev_control=prev_controls[idx],
            )

        penalties = tuple(cfg.follower_penalty * (100.0**k) for k in range(3))
        solution = solve_follower_with_continuation(
            make_transcription, warm_starts[idx], t_j, options,
            penalties=penalties, equality_tol=cfg.follower_equality_tol,
        )
        if not solution.ok:
            raise RoundAbortError("follower replay solve failed", follower.name, solution)
        solutions.append(solution)
        if team.schedule.lower_priority(follower.name):
            fresh.append(message_from_solution(follower.name, round_index, t_j, solution))
        if follower.name in injected:
            received.append(injected[follower.name])

    controls, shifted = [], []
    for solution in solutions:
        u0, warm = receding_step(solution, team.grid)
        controls.append(u0)
        shifted.append(warm)
    return RoundResult(t_j, controls, shifted, solutions, fresh)
