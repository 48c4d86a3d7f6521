"""Comparison controllers behind one policy interface.

Five policies: the interaction-aware planner ("ours"), vanilla alternating
best response without its legibility/budget machinery ("vibr"), single-shot
optimal control against constant-velocity predictions ("oc"), a social-force
controller ("sfm"), and a constant-velocity reactive avoider ("reactive_cv",
a deliberately simple stand-in for reachability-based avoidance). All are
stateless: each control is a pure function of the observation, which keeps
episodes reproducible from the seed alone.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import planner
from .dynamics import AgentControl, AgentState, Limits, Trajectory, rollout
from .planner import Peripheral, PlannerConfig, Wall

POLICY_NAMES = ("ours", "vibr", "oc", "sfm", "reactive_cv", "ideal")

# Slack weighting used by the optimal-control and vanilla-alternation
# baselines (collision treated much harder than the interactive planner).
OC_SLACK_WEIGHT = 1000.0


@dataclass(frozen=True)
class ObservedAgent:
    """Another agent as seen by a policy: state, and goal when known."""

    state: AgentState
    goal: tuple[float, float] | None = None
    interactive: bool = False

    @property
    def position(self) -> np.ndarray:
        return self.state.position

    @property
    def velocity(self) -> np.ndarray:
        return self.state.velocity


@dataclass(frozen=True)
class Observation:
    own: AgentState
    goal: tuple[float, float]
    others: tuple[ObservedAgent, ...] = ()
    walls: tuple[Wall, ...] = ()
    dt: float = 0.1


@dataclass(frozen=True)
class SfmParams:
    """Social-force gains; values from the common pedestrian-model range."""

    desired_speed: float = 1.5
    relaxation_time: float = 0.5
    repulsion_amplitude: float = 2.0
    repulsion_range: float = 0.8
    wall_amplitude: float = 3.0
    wall_range: float = 0.5
    comfort_radius: float = 1.0
    steering_gain: float = 2.0

    def __post_init__(self):
        for name in (
            "desired_speed", "relaxation_time", "repulsion_amplitude",
            "repulsion_range", "wall_amplitude", "wall_range",
            "comfort_radius", "steering_gain",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "desired_speed": self.desired_speed,
            "relaxation_time": self.relaxation_time,
            "repulsion_amplitude": self.repulsion_amplitude,
            "repulsion_range": self.repulsion_range,
            "wall_amplitude": self.wall_amplitude,
            "wall_range": self.wall_range,
            "comfort_radius": self.comfort_radius,
            "steering_gain": self.steering_gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SfmParams":
        return cls(**d)


def _clamp(control: AgentControl, limits: Limits) -> AgentControl:
    return limits.clamp_control(control)


def _signed_angle(vec: np.ndarray, heading: float) -> float:
    return (math.atan2(vec[1], vec[0]) - heading + math.pi) % (2 * math.pi) - math.pi


def sfm_control(
    state: AgentState,
    goal,
    others,
    walls=(),
    params: SfmParams = SfmParams(),
    limits: Limits = Limits(),
) -> AgentControl:
    """Goal attraction plus exponential repulsion, mapped onto (omega, a).

    others is a sequence of (position, velocity) pairs; velocity is unused by
    the force law but part of the observation contract.
    """
    goal = np.asarray(goal, dtype=float)
    pos = state.position
    to_goal = goal - pos
    dist_goal = float(np.linalg.norm(to_goal))
    if dist_goal > 1e-9:
        desired_vel = params.desired_speed * to_goal / dist_goal
    else:
        desired_vel = np.zeros(2)
    force = (desired_vel - state.velocity) / params.relaxation_time

    for other_pos, _other_vel in others:
        away = pos - np.asarray(other_pos, dtype=float)
        dist = float(np.linalg.norm(away))
        # cap the magnitude as if at the comfort radius when overlapping
        magnitude = params.repulsion_amplitude * math.exp(
            min((params.comfort_radius - dist) / params.repulsion_range, params.comfort_radius / params.repulsion_range)
        )
        direction = away / dist if dist > 1e-9 else np.array([1.0, 0.0])
        force += magnitude * direction

    for wall in walls:
        normal = np.asarray(wall.normal)
        depth = float(pos @ normal - wall.offset)
        force += params.wall_amplitude * math.exp(-depth / params.wall_range) * normal

    a = float(force @ np.array([math.cos(state.theta), math.sin(state.theta)]))
    if np.linalg.norm(force) > 1e-9:
        omega = params.steering_gain * _signed_angle(force, state.theta)
    else:
        omega = 0.0
    return _clamp(AgentControl(omega=omega, a=a), limits)


def _goal_tracking_control(state: AgentState, goal, limits: Limits) -> AgentControl:
    to_goal = np.asarray(goal, dtype=float) - state.position
    dist = float(np.linalg.norm(to_goal))
    if dist < 1e-9:
        return _clamp(AgentControl(0.0, 2.0 * (0.0 - state.v)), limits)
    omega = 2.0 * _signed_angle(to_goal, state.theta)
    v_des = min(limits.v_bounds[1], dist)
    return _clamp(AgentControl(omega, 2.0 * (v_des - state.v)), limits)


def reactive_cv_control(
    state: AgentState,
    goal,
    others,
    dt: float = 0.1,
    horizon_s: float = 2.5,
    collision_radius: float = 1.0,
    limits: Limits = Limits(),
) -> AgentControl:
    """Evade when a constant-velocity projection predicts a conflict.

    All agents are projected forward at constant velocity over horizon_s; if
    the closest predicted approach falls below the collision radius, the
    extremal control (corner of the control box, held constant) maximizing
    the predicted closest approach is applied, otherwise a proportional
    goal-tracking law.
    """
    if horizon_s <= 0:
        raise ValueError("horizon must be positive")
    if not others:
        return _goal_tracking_control(state, goal, limits)
    steps = max(int(round(horizon_s / dt)), 1)
    t_grid = np.arange(1, steps + 1)[:, None] * dt

    other_paths = [
        np.asarray(p, dtype=float) + t_grid * np.asarray(v, dtype=float) for p, v in others
    ]

    def min_clearance(own_path):
        return min(
            float(np.linalg.norm(own_path - path, axis=1).min()) for path in other_paths
        )

    own_cv = state.position + t_grid * state.velocity
    if min_clearance(own_cv) >= collision_radius:
        return _goal_tracking_control(state, goal, limits)

    corners = [
        AgentControl(om, a)
        for om in (limits.omega_bounds[0], 0.0, limits.omega_bounds[1])
        for a in (limits.a_bounds[0], 0.0, limits.a_bounds[1])
    ]
    best = None
    for control in corners:
        path = rollout(state, np.tile(control.as_array(), (steps, 1)), dt, limits).positions[1:]
        clearance = min_clearance(path)
        if best is None or clearance > best[0] + 1e-12:
            best = (clearance, control)
    return best[1]


def _constant_velocity_trajectory(agent: ObservedAgent, config: PlannerConfig) -> Trajectory:
    """Time-indexed constant-velocity extrapolation in trajectory form."""
    steps = config.horizon + 2
    t_grid = np.arange(steps)[:, None] * config.dt
    positions = agent.position + t_grid * agent.velocity
    states = np.column_stack(
        [
            positions,
            np.full(steps, agent.state.theta),
            np.full(steps, agent.state.v),
        ]
    )
    return Trajectory(states=states, controls=np.zeros((steps - 1, 2)), dt=config.dt)


def oc_config(base: PlannerConfig = PlannerConfig()) -> PlannerConfig:
    """The planner stripped to plain optimal control: no markup, no budget,
    much stiffer collision slack."""
    return replace(
        base, markup=1.0, inconvenience_budget=None, slack_weight=OC_SLACK_WEIGHT
    )


def _split_others(others):
    interactive = [o for o in others if o.interactive and o.goal is not None]
    passive = [o for o in others if not (o.interactive and o.goal is not None)]
    return interactive, passive


def _as_peripherals(agents) -> tuple[Peripheral, ...]:
    return tuple(
        Peripheral(position=tuple(o.position), velocity=tuple(o.velocity)) for o in agents
    )


def oc_control(obs: Observation, config: PlannerConfig | None = None):
    """One best response against constant-velocity predictions of everyone."""
    config = oc_config(config or PlannerConfig())
    interactive, passive = _split_others(obs.others)
    ideal = planner.solve_ideal(obs.own, obs.goal, obs.walls, config)
    if not obs.others:
        plan = None
        control = (
            AgentControl.from_array(ideal.trajectory.controls[0])
            if ideal.trajectory.controls.size
            else AgentControl(0.0, 0.0)
        )
        return _clamp(control, config.limits), _plan_info(None, ideal)
    # nearest observed agent becomes the fixed trajectory; the rest are
    # constant-velocity obstacles
    ranked = sorted(
        obs.others, key=lambda o: float(np.linalg.norm(o.position - obs.own.position))
    )
    leader, rest = ranked[0], ranked[1:]
    scene = planner.InteractionScene(
        follower_start=obs.own,
        follower_goal=tuple(np.asarray(obs.goal, dtype=float)),
        leader=_constant_velocity_trajectory(leader, config),
        peripherals=_as_peripherals(rest),
        walls=tuple(obs.walls),
    )
    plan = planner.best_response(scene, ideal, obs.goal, config)
    return _clamp(plan.first_control, config.limits), _plan_info(plan, ideal)


def vibr_control(
    obs: Observation,
    config: PlannerConfig | None = None,
    ibr_iterations: int | None = None,
):
    """The optimal-control baseline wrapped in alternating best responses."""
    base = oc_config(config or PlannerConfig())
    rounds = base.ibr_iterations if ibr_iterations is None else ibr_iterations
    if rounds == 0:
        return oc_control(obs, config)
    base = replace(base, ibr_iterations=rounds)
    interactive, passive = _split_others(obs.others)
    if not interactive:
        return oc_control(obs, config)
    nearest = min(
        interactive, key=lambda o: float(np.linalg.norm(o.position - obs.own.position))
    )
    peripherals = _as_peripherals([o for o in obs.others if o is not nearest])
    robot_plan, human_plan = planner.ibr_plan(
        obs.own,
        obs.goal,
        nearest.state,
        nearest.goal,
        peripherals=peripherals,
        walls=obs.walls,
        robot_config=base,
        human_model_config=base,
    )
    return _clamp(robot_plan.first_control, base.limits), _plan_info(robot_plan, None)


def _plan_info(plan, ideal) -> dict:
    if plan is None:
        return {
            "solve_time": 0.0,
            "scp_iterations": 0,
            "slack_sum": 0.0,
            "inconvenience": 0.0,
            "converged": True,
            "flags": (),
        }
    return {
        "solve_time": plan.solve_time,
        "scp_iterations": plan.scp_iterations,
        "slack_sum": float(np.sum(plan.slacks)),
        "inconvenience": plan.inconvenience,
        "converged": plan.converged,
        "flags": plan.flags,
    }


class Policy:
    """Stateless control policy; subclasses implement control(observation)."""

    name = "base"

    def control(self, obs: Observation) -> tuple[AgentControl, dict]:
        raise NotImplementedError


class InteractivePlannerPolicy(Policy):
    """The full interaction-aware planner run in MPC fashion ("ours")."""

    name = "ours"

    def __init__(self, config: PlannerConfig | None = None, model_config: PlannerConfig | None = None):
        self.config = config or PlannerConfig()
        # the internal model of the other agent; deliberately not told the
        # other agent's true parameters
        self.model_config = model_config or replace(self.config)

    def control(self, obs: Observation) -> tuple[AgentControl, dict]:
        t0 = time.perf_counter()
        interactive, _ = _split_others(obs.others)
        if not interactive:
            ideal = planner.solve_ideal(obs.own, obs.goal, obs.walls, self.config)
            control = AgentControl.from_array(ideal.trajectory.controls[0])
            info = _plan_info(None, ideal)
            info["solve_time"] = time.perf_counter() - t0
            return _clamp(control, self.config.limits), info
        nearest = min(
            interactive, key=lambda o: float(np.linalg.norm(o.position - obs.own.position))
        )
        peripherals = _as_peripherals([o for o in obs.others if o is not nearest])
        plan, _predicted = planner.ibr_plan(
            obs.own,
            obs.goal,
            nearest.state,
            nearest.goal,
            peripherals=peripherals,
            walls=obs.walls,
            robot_config=self.config,
            human_model_config=self.model_config,
        )
        info = _plan_info(plan, None)
        info["solve_time"] = time.perf_counter() - t0
        info["plan_positions"] = plan.trajectory.positions.tolist()
        return _clamp(plan.first_control, self.config.limits), info


class VanillaIbrPolicy(Policy):
    name = "vibr"

    def __init__(self, config: PlannerConfig | None = None):
        self.config = config or PlannerConfig()

    def control(self, obs: Observation) -> tuple[AgentControl, dict]:
        t0 = time.perf_counter()
        control, info = vibr_control(obs, self.config)
        info["solve_time"] = time.perf_counter() - t0
        return control, info


class OptimalControlPolicy(Policy):
    name = "oc"

    def __init__(self, config: PlannerConfig | None = None):
        self.config = config or PlannerConfig()

    def control(self, obs: Observation) -> tuple[AgentControl, dict]:
        t0 = time.perf_counter()
        control, info = oc_control(obs, self.config)
        info["solve_time"] = time.perf_counter() - t0
        return control, info


class SocialForcePolicy(Policy):
    name = "sfm"

    def __init__(self, params: SfmParams | None = None, limits: Limits | None = None):
        self.params = params or SfmParams()
        self.limits = limits or Limits()

    def control(self, obs: Observation) -> tuple[AgentControl, dict]:
        others = [(o.position, o.velocity) for o in obs.others]
        control = sfm_control(obs.own, obs.goal, others, obs.walls, self.params, self.limits)
        return control, {}


class ReactivePolicy(Policy):
    name = "reactive_cv"

    def __init__(
        self,
        horizon_s: float = 2.5,
        collision_radius: float = 1.0,
        limits: Limits | None = None,
    ):
        self.horizon_s = horizon_s
        self.collision_radius = collision_radius
        self.limits = limits or Limits()

    def control(self, obs: Observation) -> tuple[AgentControl, dict]:
        others = [(o.position, o.velocity) for o in obs.others]
        control = reactive_cv_control(
            obs.own, obs.goal, others, obs.dt, self.horizon_s, self.collision_radius, self.limits
        )
        return control, {}


class IdealPolicy(Policy):
    """Plans as if alone; useful for unobstructed checks."""

    name = "ideal"

    def __init__(self, config: PlannerConfig | None = None):
        self.config = config or PlannerConfig()

    def control(self, obs: Observation) -> tuple[AgentControl, dict]:
        t0 = time.perf_counter()
        ideal = planner.solve_ideal(obs.own, obs.goal, obs.walls, self.config)
        control = AgentControl.from_array(ideal.trajectory.controls[0])
        info = _plan_info(None, ideal)
        info["solve_time"] = time.perf_counter() - t0
        return _clamp(control, self.config.limits), info


def make_policy(
    name: str,
    planner_config: PlannerConfig | None = None,
    model_config: PlannerConfig | None = None,
    sfm_params: SfmParams | None = None,
) -> Policy:
    """Instantiate a registered policy by its CLI/scenario name."""
    if name == "ours":
        return InteractivePlannerPolicy(planner_config, model_config)
    if name == "vibr":
        return VanillaIbrPolicy(planner_config)
    if name == "oc":
        return OptimalControlPolicy(planner_config)
    if name == "sfm":
        limits = (planner_config or PlannerConfig()).limits
        return SocialForcePolicy(sfm_params, limits)
    if name == "reactive_cv":
        cfg = planner_config or PlannerConfig()
        return ReactivePolicy(
            horizon_s=cfg.horizon * cfg.dt, collision_radius=cfg.collision_radius, limits=cfg.limits
        )
    if name == "ideal":
        return IdealPolicy(planner_config)
    raise ValueError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
