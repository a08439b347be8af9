"""Scenario files: schema, validation, (de)serialization, team construction.

Scenarios are YAML with explicit units in field names. Unknown keys are
rejected; every invariant violation is reported with the name of the invariant
that failed. Bundled scenarios live in the package `scenarios/` directory and
can be referenced by bare name.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .agent import AgentLimits, PlanarAgent, PlanarAgentParams
from .comms import RoundSchedule
from .constraints import TerminalSetParams
from .geometry import Ellipsoid
from .horizon import CostGains, FollowerCost, HorizonGrid
from .payload import ObjectParams

SCHEMA_VERSION = 1


class ScenarioValidationError(ValueError):
    def __init__(self, invariant: str, message: str):
        self.invariant = invariant
        super().__init__(f"[{invariant}] {message}")


def _require_keys(mapping: dict, allowed: set[str], context: str):
    unknown = set(mapping) - allowed
    if unknown:
        raise ScenarioValidationError(
            "unknown_keys", f"unknown keys {sorted(unknown)} in {context}"
        )


@dataclass
class ObstacleSpec:
    center_m: list[float]
    radii_m: list[float]

    _ALLOWED = {"center_m", "radii_m"}

    @classmethod
    def from_dict(cls, data: dict, context: str) -> "ObstacleSpec":
        _require_keys(data, cls._ALLOWED, context)
        spec = cls(**data)
        if len(spec.center_m) != 3 or len(spec.radii_m) != 3:
            raise ScenarioValidationError("obstacle_shape", f"{context}: center/radii must be 3-vectors")
        if min(spec.radii_m) <= 0:
            raise ScenarioValidationError("obstacle_radii_positive", f"{context}: radii must be positive")
        return spec

    def to_ellipsoid(self) -> Ellipsoid:
        return Ellipsoid.from_semi_axes(self.center_m, self.radii_m)


@dataclass
class AgentSpec:
    name: str
    load_share: float
    initial_q: list[float]
    initial_qdot: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    base_mass_kg: float = 2.0
    link_masses_kg: list[float] = field(default_factory=lambda: [0.1, 0.1])
    link_lengths_m: list[float] = field(default_factory=lambda: [1.0, 1.5])
    link_inertias_kgm2: list[float] | None = None
    mount_height_m: float = 0.2
    grasp_offset_m: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    grasp_roll_offset_rad: float = 0.0
    input_box: float = 8.5
    joint_velocity_limit_per_s: float = 2.0
    arm_rate_limit_per_s: float = 1.0
    singularity_floor: float = 0.05
    tilt_limit_rad: float = 1.0
    arm_angle_lower_rad: list[float] | None = None
    arm_angle_upper_rad: list[float] | None = None
    tau_limit: float | None = None
    tau_rate_limit: float | None = None
    base_sphere_radius_m: float = 0.2
    link_sphere_radius_m: float = 0.2
    spheres_per_link: list[int] = field(default_factory=lambda: [3, 4])

    _ALLOWED = {
        "name", "load_share", "initial_q", "initial_qdot", "base_mass_kg",
        "link_masses_kg", "link_lengths_m", "link_inertias_kgm2", "mount_height_m",
        "grasp_offset_m", "grasp_roll_offset_rad", "input_box",
        "joint_velocity_limit_per_s", "arm_rate_limit_per_s", "singularity_floor",
        "tilt_limit_rad", "arm_angle_lower_rad", "arm_angle_upper_rad",
        "tau_limit", "tau_rate_limit", "base_sphere_radius_m",
        "link_sphere_radius_m", "spheres_per_link",
    }

    @classmethod
    def from_dict(cls, data: dict, context: str) -> "AgentSpec":
        _require_keys(data, cls._ALLOWED, context)
        spec = cls(**data)
        if len(spec.initial_q) != 4 or len(spec.initial_qdot) != 4:
            raise ScenarioValidationError("agent_state_dim", f"{context}: initial state must have 4 joints")
        if not 0.0 < spec.load_share <= 1.0:
            raise ScenarioValidationError("load_share_range", f"{context}: load share in (0, 1]")
        for bound_name in ("input_box", "joint_velocity_limit_per_s", "arm_rate_limit_per_s",
                           "singularity_floor", "tilt_limit_rad"):
            if getattr(spec, bound_name) is not None and getattr(spec, bound_name) <= 0:
                raise ScenarioValidationError("bounds_positive", f"{context}: {bound_name} must be positive")
        return spec

    def build(self, gravity: float) -> PlanarAgent:
        limits = AgentLimits(
            input_box=self.input_box,
            tau_limit=np.inf if self.tau_limit is None else self.tau_limit,
            tau_rate_limit=np.inf if self.tau_rate_limit is None else self.tau_rate_limit,
            joint_velocity_limit=self.joint_velocity_limit_per_s,
            arm_rate_limit=self.arm_rate_limit_per_s,
            singularity_floor=self.singularity_floor,
            tilt_limit=self.tilt_limit_rad,
            arm_angle_lower=None if self.arm_angle_lower_rad is None else np.array(self.arm_angle_lower_rad),
            arm_angle_upper=None if self.arm_angle_upper_rad is None else np.array(self.arm_angle_upper_rad),
        )
        params = PlanarAgentParams(
            base_mass=self.base_mass_kg,
            link_masses=tuple(self.link_masses_kg),
            link_lengths=tuple(self.link_lengths_m),
            link_inertias=None if self.link_inertias_kgm2 is None else tuple(self.link_inertias_kgm2),
            mount_height=self.mount_height_m,
            grasp_offset=np.array(self.grasp_offset_m),
            grasp_roll_offset=self.grasp_roll_offset_rad,
            load_share=self.load_share,
            limits=limits,
            base_sphere_radius=self.base_sphere_radius_m,
            link_sphere_radius=self.link_sphere_radius_m,
            spheres_per_link=tuple(self.spheres_per_link),
        )
        return PlanarAgent(params, gravity=gravity, name=self.name)


@dataclass
class ScenarioConfig:
    name: str
    agents: list[AgentSpec]
    goal_pose: list[float]
    sampling_period_s: float = 0.1
    prediction_horizon_s: float = 0.5
    total_time_s: float = 60.0
    seed: int = 0
    workspace_radius_m: float = 20.0
    gravity_m_s2: float = 9.81
    object_mass_kg: float = 1.0
    object_inertia_xx_kgm2: float = 0.1
    object_bounding_radius_m: float = 0.5
    terminal_epsilon: float = 1e-2
    state_weight: float = 0.5
    input_weight: float = 0.5
    terminal_weight: float = 0.5
    follower_input_weight: float = 0.5
    follower_velocity_weight: float = 1e-3
    follower_penalty: float = 1e4
    follower_equality_tol: float = 1e-4
    prediction_substeps: int = 2
    plant_substeps: int = 4
    monitor_tolerance: float = 1e-4
    obstacles: list[ObstacleSpec] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    _ALLOWED = {
        "name", "agents", "goal_pose", "sampling_period_s", "prediction_horizon_s",
        "total_time_s", "seed", "workspace_radius_m", "gravity_m_s2",
        "object_mass_kg", "object_inertia_xx_kgm2", "object_bounding_radius_m",
        "terminal_epsilon", "state_weight", "input_weight", "terminal_weight",
        "follower_input_weight", "follower_velocity_weight", "follower_penalty",
        "follower_equality_tol", "prediction_substeps", "plant_substeps",
        "monitor_tolerance", "obstacles", "schema_version",
    }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        _require_keys(data, cls._ALLOWED, "scenario")
        agents = [
            AgentSpec.from_dict(a, f"agents[{i}]") for i, a in enumerate(data.get("agents", []))
        ]
        obstacles = [
            ObstacleSpec.from_dict(o, f"obstacles[{i}]")
            for i, o in enumerate(data.get("obstacles", []))
        ]
        rest = {k: v for k, v in data.items() if k not in ("agents", "obstacles")}
        config = cls(agents=agents, obstacles=obstacles, **rest)
        config.validate()
        return config

    def to_dict(self) -> dict:
        data = asdict(self)
        return data

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ScenarioValidationError("schema_version", f"expected {SCHEMA_VERSION}")
        if not self.agents:
            raise ScenarioValidationError("agents_nonempty", "at least one agent required")
        total = sum(a.load_share for a in self.agents)
        if abs(total - 1.0) > 1e-9:
            raise ScenarioValidationError(
                "load_shares_sum_to_one", f"load shares sum to {total!r}, must equal 1"
            )
        names = [a.name for a in self.agents]
        if len(set(names)) != len(names):
            raise ScenarioValidationError("agent_names_unique", f"duplicate names in {names}")
        if len(self.goal_pose) != 4:
            raise ScenarioValidationError("goal_pose_dim", "goal pose must be [x, y, z, roll]")
        HorizonGrid(self.sampling_period_s, self.prediction_horizon_s)  # raises on bad grid
        n_rounds = self.total_time_s / self.sampling_period_s
        if abs(n_rounds - round(n_rounds)) > 1e-9 or round(n_rounds) < 1:
            raise ScenarioValidationError(
                "total_time_multiple_of_step", "total time must be a multiple of the sampling period"
            )
        for bound_name in ("terminal_epsilon", "input_weight", "terminal_weight", "monitor_tolerance"):
            if getattr(self, bound_name) <= 0:
                raise ScenarioValidationError("bounds_positive", f"{bound_name} must be positive")
        if self.object_mass_kg <= 0 or self.object_inertia_xx_kgm2 <= 0:
            raise ScenarioValidationError("object_params_positive", "object mass/inertia must be positive")
        for i, obs in enumerate(self.obstacles):
            if np.linalg.norm(obs.center_m) + max(obs.radii_m) > self.workspace_radius_m:
                raise ScenarioValidationError(
                    "obstacle_inside_workspace", f"obstacles[{i}] exceeds the workspace ball"
                )
        if self.plant_substeps < 1 or self.prediction_substeps < 1 or self.prediction_substeps % 2:
            raise ScenarioValidationError(
                "substeps_valid", "plant substeps >= 1, prediction substeps even and >= 2"
            )

    @property
    def n_rounds(self) -> int:
        return int(round(self.total_time_s / self.sampling_period_s))


@dataclass
class Team:
    """Runtime objects built from a ScenarioConfig."""

    config: ScenarioConfig
    agents: list[PlanarAgent]
    obj: ObjectParams
    grid: HorizonGrid
    gains: CostGains
    terminal: TerminalSetParams
    follower_cost: FollowerCost
    obstacles: list[Ellipsoid]
    schedule: RoundSchedule
    x_des: np.ndarray

    @property
    def leader(self) -> PlanarAgent:
        return self.agents[0]

    @property
    def followers(self) -> list[PlanarAgent]:
        return self.agents[1:]

    def initial_states(self) -> list[np.ndarray]:
        return [
            np.array(spec.initial_q + spec.initial_qdot, dtype=float)
            for spec in self.config.agents
        ]


def build_team(config: ScenarioConfig) -> Team:
    agents = [spec.build(config.gravity_m_s2) for spec in config.agents]
    obj = ObjectParams(
        mass=config.object_mass_kg,
        inertia=np.diag([config.object_inertia_xx_kgm2] * 3),
        bounding_semi_axes=np.full(3, config.object_bounding_radius_m),
        gravity=config.gravity_m_s2,
    )
    grid = HorizonGrid(config.sampling_period_s, config.prediction_horizon_s)
    t2 = 2 * agents[0].task_dim
    gains = CostGains(
        state_weight=config.state_weight * np.eye(t2),
        input_weight=config.input_weight * np.eye(agents[0].task_dim),
        terminal_weight=config.terminal_weight * np.eye(t2),
    )
    terminal = TerminalSetParams(
        weight=config.terminal_weight * np.eye(t2), threshold=config.terminal_epsilon
    )
    follower_cost = FollowerCost(
        input_weight=config.follower_input_weight * np.eye(agents[0].task_dim),
        velocity_weight=config.follower_velocity_weight * np.eye(agents[0].task_dim),
    )
    return Team(
        config=config,
        agents=agents,
        obj=obj,
        grid=grid,
        gains=gains,
        terminal=terminal,
        follower_cost=follower_cost,
        obstacles=[o.to_ellipsoid() for o in config.obstacles],
        schedule=RoundSchedule(tuple(a.name for a in agents)),
        x_des=np.asarray(config.goal_pose, dtype=float),
    )


def parse_scenario(path_or_name: str | Path) -> ScenarioConfig:
    """Load a scenario from a path or a bundled scenario name."""
    path = Path(path_or_name)
    if not path.exists():
        candidate = resources.files("cotransport").joinpath(f"scenarios/{path_or_name}.yaml")
        if candidate.is_file():
            return ScenarioConfig.from_dict(yaml.safe_load(candidate.read_text()))
        raise FileNotFoundError(f"scenario {path_or_name!r} not found (no file, no bundled name)")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ScenarioValidationError("scenario_mapping", f"{path} does not contain a mapping")
    return ScenarioConfig.from_dict(data)


def save_scenario(config: ScenarioConfig, path: str | Path):
    data = config.to_dict()
    data["agents"] = [
        {k: v for k, v in a.items() if v is not None} for a in data["agents"]
    ]
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)


def bundled_scenario_names() -> list[str]:
    base = resources.files("cotransport").joinpath("scenarios")
    return sorted(p.name.removesuffix(".yaml") for p in base.iterdir() if p.name.endswith(".yaml"))
