"""Synchronous priority-ordered message passing within each sampling round.

The leader solves first and broadcasts its predicted joint trajectory plus the
object pose/twist computed from it; each follower solves after receiving every
higher-priority prediction and forwards only its own prediction down the
chain. Delivery is reliable, in order and without delay; the bus assigns
monotone sequence numbers so causality (no solve consumes a message published
after it) is checkable from the log.

The message log is JSON-lines, one record per message, with round-trippable
float precision; see `PredictionMessage.to_record` for the schema.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class PredictionMessage:
    sender: str
    round_index: int
    sequence: int            # bus-assigned, monotone within a run
    t_j: float
    node_times: np.ndarray   # (K+1,)
    q: np.ndarray            # (K+1, n)
    qdot: np.ndarray         # (K+1, n)
    object_poses: np.ndarray   # (K+1, t)
    object_twists: np.ndarray  # (K+1, t)

    def to_record(self) -> dict:
        return {
            "sender": self.sender,
            "round": self.round_index,
            "sequence": self.sequence,
            "t_j": self.t_j,
            "node_times": self.node_times.tolist(),
            "q": self.q.tolist(),
            "qdot": self.qdot.tolist(),
            "object_poses": self.object_poses.tolist(),
            "object_twists": self.object_twists.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PredictionMessage":
        return cls(
            sender=rec["sender"],
            round_index=rec["round"],
            sequence=rec["sequence"],
            t_j=rec["t_j"],
            node_times=np.array(rec["node_times"]),
            q=np.array(rec["q"]),
            qdot=np.array(rec["qdot"]),
            object_poses=np.array(rec["object_poses"]),
            object_twists=np.array(rec["object_twists"]),
        )


def message_from_solution(sender, round_index, t_j, solution) -> PredictionMessage:
    return PredictionMessage(
        sender=sender,
        round_index=round_index,
        sequence=-1,
        t_j=t_j,
        node_times=solution.node_times.copy(),
        q=solution.node_states[:, : solution.node_states.shape[1] // 2].copy(),
        qdot=solution.node_states[:, solution.node_states.shape[1] // 2 :].copy(),
        object_poses=solution.object_poses.copy(),
        object_twists=solution.object_twists.copy(),
    )


def verify_message_consistency(agent, message: PredictionMessage, tol: float = 1e-10) -> float:
    """Receiver-side recomputation of the object fields from q, qdot.

    Returns the worst deviation; the sender's object fields must be
    reproducible from the transmitted joint predictions.
    """
    poses = agent.object_pose_batch(message.q)
    twists = agent.object_twist_batch(message.q, message.qdot)
    worst = max(
        float(np.max(np.abs(poses - message.object_poses), initial=0.0)),
        float(np.max(np.abs(twists - message.object_twists), initial=0.0)),
    )
    return worst


@dataclass
class RoundSchedule:
    order: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.order)) != len(self.order) or not self.order:
            raise ValueError("priority order must be a non-empty permutation of agent names")

    @property
    def leader(self) -> str:
        return self.order[0]

    def higher_priority(self, name: str) -> tuple[str, ...]:
        return self.order[: self.order.index(name)]

    def lower_priority(self, name: str) -> tuple[str, ...]:
        return self.order[self.order.index(name) + 1 :]


class MessageBus:
    """Reliable, zero-delay, in-order in-process bus with an optional JSONL log."""

    def __init__(self, log_path: str | Path | None = None):
        self._sequence = 0
        self._mailboxes: dict[str, list[PredictionMessage]] = {}
        self.published: list[PredictionMessage] = []
        self.consumed_log: list[tuple[str, int, int]] = []  # (consumer, round, sequence)
        self._log_file = open(log_path, "w") if log_path is not None else None

    def publish(self, message: PredictionMessage, recipients) -> PredictionMessage:
        message.sequence = self._sequence
        self._sequence += 1
        self.published.append(message)
        for name in recipients:
            self._mailboxes.setdefault(name, []).append(message)
        if self._log_file is not None:
            json.dump(message.to_record(), self._log_file)
            self._log_file.write("\n")
        return message

    def collect(self, recipient: str) -> list[PredictionMessage]:
        """Drain the recipient's mailbox (in publish order) and log consumption."""
        inbox = self._mailboxes.get(recipient, [])
        self._mailboxes[recipient] = []
        for msg in inbox:
            self.consumed_log.append((recipient, msg.round_index, msg.sequence))
        return inbox

    def close(self):
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_message_log(path: str | Path) -> list[PredictionMessage]:
    messages = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                messages.append(PredictionMessage.from_record(json.loads(line)))
    return messages


# -- sampling-round orchestration ----------------------------------------------


class RoundAbortError(RuntimeError):
    def __init__(self, message: str, agent: str, solution=None):
        super().__init__(message)
        self.agent = agent
        self.solution = solution


@dataclass
class RoundResult:
    t_j: float
    controls: list[np.ndarray]
    warm_starts: list[np.ndarray]
    solutions: list
    messages: list[PredictionMessage]


def run_round(
    team,
    t_j: float,
    round_index: int,
    states: list[np.ndarray],
    warm_starts: list[np.ndarray],
    prev_controls: list[np.ndarray],
    bus: MessageBus,
    options=None,
) -> RoundResult:
    """One synchronous sampling round in priority order.

    The leader solves against the followers' measured configurations; follower
    i solves after receiving predictions from every agent of higher priority
    and against the measured configurations of lower-priority agents. Returns
    the receding-horizon controls and the shifted warm starts.
    """
    from .horizon import (
        FollowerTranscription,
        LeaderTranscription,
        receding_step,
        solve_follower_with_continuation,
        solve_leader,
    )

    agents = team.agents
    cfg = team.config
    by_name = {a.name: (a, s) for a, s in zip(agents, states)}

    frozen = {
        a.name: a.collision_spheres(s[:4]) for a, s in zip(agents, states)
    }

    leader = agents[0]
    leader_problem = LeaderTranscription(
        team.grid,
        leader,
        team.obj,
        states[0],
        {name: frozen[name] for name in team.schedule.lower_priority(leader.name)},
        team.obstacles,
        team.gains,
        team.terminal,
        team.x_des,
        workspace_radius=cfg.workspace_radius_m,
        n_sub=cfg.prediction_substeps,
        prev_control=prev_controls[0],
        follower_watch=[(a, s[:4]) for a, s in zip(agents[1:], states[1:])],
    ).as_problem()
    leader_solution = solve_leader(leader_problem, warm_starts[0], t_j, options)
    if not leader_solution.ok:
        raise RoundAbortError(
            f"leader solve failed with status {leader_solution.status} at t={t_j:.2f}",
            leader.name,
            leader_solution,
        )
    solutions = [leader_solution]
    messages = []
    if len(agents) > 1:
        msg = message_from_solution(leader.name, round_index, t_j, leader_solution)
        bus.publish(msg, team.schedule.lower_priority(leader.name))
        messages.append(msg)

    for idx, follower in enumerate(agents[1:], start=1):
        inbox = bus.collect(follower.name)
        leader_msg = next(m for m in inbox if m.sender == team.schedule.leader)
        higher_tracks = {}
        for m in inbox:
            other_agent = by_name[m.sender][0]
            higher_tracks[m.sender] = other_agent.collision_spheres_batch(m.q)
        lower = {
            name: frozen[name] for name in team.schedule.lower_priority(follower.name)
        }

        def make_transcription(penalty, follower=follower, idx=idx,
                               leader_msg=leader_msg, higher=higher_tracks, lower=lower):
            return FollowerTranscription(
                team.grid,
                follower,
                team.obj,
                states[idx],
                leader_msg.object_poses,
                leader_msg.object_twists,
                higher,
                lower,
                team.obstacles,
                team.follower_cost,
                penalty=penalty,
                workspace_radius=cfg.workspace_radius_m,
                n_sub=cfg.prediction_substeps,
                prev_control=prev_controls[idx],
            )

        penalties = tuple(cfg.follower_penalty * (100.0**k) for k in range(3))
        solution = solve_follower_with_continuation(
            make_transcription,
            warm_starts[idx],
            t_j,
            options,
            penalties=penalties,
            equality_tol=cfg.follower_equality_tol,
        )
        if not solution.ok:
            raise RoundAbortError(
                f"follower {follower.name} solve failed with status {solution.status} "
                f"at t={t_j:.2f}",
                follower.name,
                solution,
            )
        solutions.append(solution)
        lower_names = team.schedule.lower_priority(follower.name)
        if lower_names:
            msg = message_from_solution(follower.name, round_index, t_j, solution)
            bus.publish(msg, lower_names)
            messages.append(msg)

    controls, shifted = [], []
    for solution in solutions:
        u0, warm = receding_step(solution, team.grid)
        controls.append(u0)
        shifted.append(warm)
    return RoundResult(t_j, controls, shifted, solutions, messages)
