"""Goal-directed trajectory planner with interaction-aware extensions.

Three layers, bottom up:

* an idealized solver (`solve_ideal`): goal reaching with dynamics, speed,
  control, and wall constraints only, solved by SCP with a trust-region cost;
* a follower solver (`best_response`): the same problem against a fixed
  other-agent trajectory, with time-markup on stage costs, slacked and
  discounted collision constraints, constant-velocity obstacle constraints,
  and a hard budget on how much the plan may degrade relative to the
  idealized one;
* an alternating two-agent loop (`ibr_plan`) that replans both agents'
  responses a fixed number of rounds and returns the robot's plan, whose
  first control an MPC loop executes.

Each convexified subproblem is a ConvexProgram solved by `convex.solve`.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import convex
from ._assembly import SubproblemAssembler
from .convex import ConvexProgram, QuadConstraint, SolveStatus
from .dynamics import AgentState, Limits, Trajectory, _step_scalar, linearize_array, rollout

# Objective-increase tolerance when deciding whether to accept an SCP iterate.
_SCP_ACCEPT_SLACK = 1e-8
# Non-final alternation rounds only seed the next one; they converge to a
# coarser tolerance (and fewer SCP iterations) than the returned
# final-round plans.
_COARSE_TOL_FACTOR = 5.0
_COARSE_MAX_ITERATIONS = 4
# Trust damping adapts Levenberg-Marquardt style: decay after an accepted
# step (toward pure relinearization, which converges fast near the fixed
# point), inflate and retry the same linearization when the trust-free
# objective failed to descend.
_TRUST_DECAY = 0.5
_TRUST_RETRY_FACTOR = 4.0
_TRUST_MAX_RETRIES = 2
# Positions closer than this to an obstacle center get the fixed fallback normal.
_DEGENERATE_DIST = 1e-9
_FALLBACK_NORMAL = np.array([1.0, 0.0])
# Wall half-planes are hard constraints in the subproblems; the merit function
# only needs them stiff enough that no violating iterate can ever win.
_WALL_MERIT_WEIGHT = 1e4


@dataclass(frozen=True)
class PlannerConfig:
    """All parameters of the follower/idealized trajectory problems.

    markup >= 1 inflates stage costs later in the horizon (legibility knob);
    collision_discount in (0, 1] shrinks the penalty on collision slack later
    in the horizon; inconvenience_budget is the hard cap on relative plan
    degradation (None disables the constraint entirely).
    """

    horizon: int = 25
    dt: float = 0.1
    markup: float = 1.05
    collision_discount: float = 0.98
    slack_weight: float = 150.0
    inconvenience_budget: float | None = 0.2
    trust_weight: float = 5.0
    convenience_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    control_cost: tuple[tuple[float, float], tuple[float, float]] = ((0.5, 0.0), (0.0, 0.5))
    goal_weight: float = 0.02
    terminal_weight: float = 5.0
    collision_radius: float = 1.0
    # Extra clearance the avoidance constraints aim for beyond the collision
    # radius. Slack settles at a small positive equilibrium against soft
    # constraints, so planning exactly at the radius executes slightly inside
    # it; the margin absorbs that plus human-control noise.
    planning_margin: float = 0.08
    ibr_iterations: int = 3
    scp_iterations: int = 10
    scp_tol: float = 1e-3
    convenience_floor: float = 1e-3
    feasibility_tol: float = 1e-6
    budget_mode: str = "native"  # "native" (quadratic constraint) or "linearized" (debug)
    limits: Limits = field(default_factory=Limits)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.markup < 1.0:
            raise ValueError("markup must be >= 1")
        if not 0.0 < self.collision_discount <= 1.0:
            raise ValueError("collision discount must be in (0, 1]")
        if self.slack_weight < 0 or self.trust_weight < 0:
            raise ValueError("weights must be nonnegative")
        if self.inconvenience_budget is not None and self.inconvenience_budget < 0:
            raise ValueError("inconvenience budget must be >= 0")
        if any(w < 0 for w in self.convenience_weights):
            raise ValueError("convenience weights must be nonnegative")
        if self.goal_weight < 0 or self.terminal_weight < 0:
            raise ValueError("goal weights must be nonnegative")
        if self.convenience_floor <= 0:
            raise ValueError("convenience floor must be positive")
        if self.budget_mode not in ("native", "linearized"):
            raise ValueError("budget_mode must be 'native' or 'linearized'")

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "dt": self.dt,
            "markup": self.markup,
            "collision_discount": self.collision_discount,
            "slack_weight": self.slack_weight,
            "inconvenience_budget": self.inconvenience_budget,
            "trust_weight": self.trust_weight,
            "convenience_weights": list(self.convenience_weights),
            "control_cost": [list(row) for row in self.control_cost],
            "goal_weight": self.goal_weight,
            "terminal_weight": self.terminal_weight,
            "collision_radius": self.collision_radius,
            "planning_margin": self.planning_margin,
            "ibr_iterations": self.ibr_iterations,
            "scp_iterations": self.scp_iterations,
            "scp_tol": self.scp_tol,
            "convenience_floor": self.convenience_floor,
            "feasibility_tol": self.feasibility_tol,
            "budget_mode": self.budget_mode,
            "limits": self.limits.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        d = dict(d)
        if "limits" in d:
            d["limits"] = Limits.from_dict(d["limits"])
        if "convenience_weights" in d:
            d["convenience_weights"] = tuple(d["convenience_weights"])
        if "control_cost" in d:
            d["control_cost"] = tuple(tuple(row) for row in d["control_cost"])
        return cls(**d)


@dataclass(frozen=True)
class Wall:
    """Half-plane the agent must stay inside: normal . position >= offset."""

    normal: tuple[float, float]
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = float(np.linalg.norm(n))
        if norm < 1e-12:
            raise ValueError("wall normal must be nonzero")
        n = n / norm
        object.__setattr__(self, "normal", (float(n[0]), float(n[1])))
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def to_dict(self) -> dict:
        return {"normal": list(self.normal), "offset": self.offset}

    @classmethod
    def from_dict(cls, d: dict) -> "Wall":
        return cls(normal=tuple(d["normal"]), offset=d["offset"])


@dataclass(frozen=True)
class Peripheral:
    """Non-interacting nearby agent, treated as a constant-velocity obstacle."""

    position: tuple[float, float]
    velocity: tuple[float, float]

    def positions_over(self, steps: int, dt: float) -> np.ndarray:
        """Predicted positions at t = 0..steps-1, shape (steps, 2)."""
        t = np.arange(steps)[:, None] * dt
        return np.asarray(self.position) + t * np.asarray(self.velocity)

    def to_dict(self) -> dict:
        return {"position": list(self.position), "velocity": list(self.velocity)}

    @classmethod
    def from_dict(cls, d: dict) -> "Peripheral":
        return cls(position=tuple(d["position"]), velocity=tuple(d["velocity"]))


@dataclass(frozen=True)
class IdealSolution:
    """Agent-free optimal trajectory and its convenience value."""

    trajectory: Trajectory
    convenience: float
    converged: bool = True


@dataclass(frozen=True)
class InteractionScene:
    """Inputs of one best response: follower start/goal, the other agent's
    fixed trajectory, constant-velocity obstacles, and wall half-planes."""

    follower_start: AgentState
    follower_goal: tuple[float, float]
    leader: Trajectory
    peripherals: tuple[Peripheral, ...] = ()
    walls: tuple[Wall, ...] = ()


@dataclass(frozen=True)
class PlanResult:
    trajectory: Trajectory
    slacks: np.ndarray
    inconvenience: float
    scp_iterations: int
    objective_history: tuple[float, ...]
    solve_time: float
    converged: bool
    flags: tuple[str, ...] = ()

    @property
    def first_control(self):
        return self.trajectory.control(0)


class DecisionLayout:
    """Flat variable layout: states x_{0..T+1}, controls u_{0..T}, and for
    the follower problem collision slacks e_{0..T+1}; total
    4(T+2) + 2(T+1) + (T+2) variables (slack-free for the ideal problem)."""

    def __init__(self, horizon: int, with_slacks: bool = True):
        self.horizon = horizon
        self.n_state_steps = horizon + 2
        self.n_control_steps = horizon + 1
        self.n_slacks = self.n_state_steps if with_slacks else 0
        self.state_offset = 0
        self.control_offset = 4 * self.n_state_steps
        self.slack_offset = self.control_offset + 2 * self.n_control_steps
        self.size = self.slack_offset + self.n_slacks

    def state_index(self, t: int, component: int) -> int:
        return self.state_offset + 4 * t + component

    def state_slice(self, t: int) -> slice:
        return slice(self.state_offset + 4 * t, self.state_offset + 4 * (t + 1))

    def control_slice(self, t: int) -> slice:
        return slice(self.control_offset + 2 * t, self.control_offset + 2 * (t + 1))

    def slack_index(self, t: int) -> int:
        return self.slack_offset + t

    def states(self, z: np.ndarray) -> np.ndarray:
        return z[self.state_offset : self.control_offset].reshape(self.n_state_steps, 4)

    def controls(self, z: np.ndarray) -> np.ndarray:
        return z[self.control_offset : self.slack_offset].reshape(self.n_control_steps, 2)

    def slacks(self, z: np.ndarray) -> np.ndarray:
        return z[self.slack_offset :]

    def pack(self, states: np.ndarray, controls: np.ndarray, slacks=None) -> np.ndarray:
        z = np.zeros(self.size)
        z[self.state_offset : self.control_offset] = np.asarray(states).ravel()
        z[self.control_offset : self.slack_offset] = np.asarray(controls).ravel()
        if slacks is not None and self.n_slacks:
            z[self.slack_offset :] = slacks
        return z


def convenience(traj: Trajectory, goal, weights=(1.0, 1.0, 1.0)) -> float:
    """Weighted sum of squared step lengths, squared planar-velocity changes,
    and squared final distance to goal. Lower is more convenient."""
    w1, w2, w3 = weights
    dp = np.diff(traj.positions, axis=0)
    dvel = np.diff(traj.velocities, axis=0)
    final_gap = traj.positions[-1] - np.asarray(goal, dtype=float)
    return float(w1 * np.sum(dp**2) + w2 * np.sum(dvel**2) + w3 * np.sum(final_gap**2))


def inconvenience(
    traj: Trajectory,
    ideal: IdealSolution,
    goal,
    weights=(1.0, 1.0, 1.0),
    convenience_floor: float = 1e-3,
) -> float:
    """Relative degradation of traj's convenience versus the idealized plan.

    The denominator is floored so degenerate scenes (ideal convenience near
    zero, e.g. starting on the goal) stay well posed.
    """
    c = convenience(traj, goal, weights)
    return (c - ideal.convenience) / max(ideal.convenience, convenience_floor)


def _convenience_rows(layout: DecisionLayout, goal, weights, v_max: float):
    """Rows (M, m) with ||M z - m||^2 an upper bound on the convenience of the
    trajectory in z, exact except for heading changes.

    Planar velocity (v cos th, v sin th) is not linear in the state, so the
    velocity-change feature cannot be represented exactly by a quadratic in z.
    ||dvel||^2 = dv^2 + 2 v v' (1 - cos dth) <= dv^2 + v_max^2 dth^2 for speeds
    in [0, v_max]; using the right side keeps the budget constraint convex
    quadratic and conservative, so plans evaluated with `convenience` can only
    come in under budget.
    """
    w1, w2, w3 = weights
    steps = layout.n_state_steps - 1
    rows = 4 * steps + 2
    M = np.zeros((rows, layout.size))
    m = np.zeros(rows)
    sw1, sw2, sw3 = np.sqrt(w1), np.sqrt(w2), np.sqrt(w3)
    r = 0
    for t in range(steps):
        for comp in (0, 1):  # position differences
            M[r, layout.state_index(t + 1, comp)] = sw1
            M[r, layout.state_index(t, comp)] = -sw1
            r += 1
        M[r, layout.state_index(t + 1, 3)] = sw2  # speed difference
        M[r, layout.state_index(t, 3)] = -sw2
        r += 1
        M[r, layout.state_index(t + 1, 2)] = sw2 * v_max  # heading difference
        M[r, layout.state_index(t, 2)] = -sw2 * v_max
        r += 1
    for comp in (0, 1):  # final distance to goal
        M[r, layout.state_index(layout.n_state_steps - 1, comp)] = sw3
        m[r] = sw3 * goal[comp]
        r += 1
    return M, m


def _stage_objective(
    layout: DecisionLayout,
    goal,
    config: PlannerConfig,
    lin_z: np.ndarray,
    markup: bool,
    with_slack_cost: bool,
    trust_weight: float | None = None,
):
    """Quadratic objective (P diag-blocks, q, r) for one subproblem:
    stage costs with optional markup, slack penalty, and the trust-region
    cost centered on the linearization point."""
    n = layout.size
    P = np.zeros((n, n))
    q = np.zeros(n)
    r = 0.0
    goal = np.asarray(goal, dtype=float)
    R = 2.0 * np.asarray(config.control_cost, dtype=float)
    T = layout.horizon

    factors = config.markup ** np.arange(T + 1) if markup else np.ones(T + 1)
    for t in range(T + 1):
        cs = layout.control_slice(t)
        P[cs, cs] += factors[t] * R
        for comp in (0, 1):
            i = layout.state_index(t, comp)
            P[i, i] += 2.0 * factors[t] * config.goal_weight
            q[i] += -2.0 * factors[t] * config.goal_weight * goal[comp]
        r += factors[t] * config.goal_weight * float(goal @ goal)
    for comp in (0, 1):
        i = layout.state_index(T + 1, comp)
        P[i, i] += 2.0 * config.terminal_weight
        q[i] += -2.0 * config.terminal_weight * goal[comp]
    r += config.terminal_weight * float(goal @ goal)

    if with_slack_cost:
        t_idx = np.arange(layout.n_state_steps)
        sl = layout.slack_offset + t_idx
        P[sl, sl] += 2.0 * config.slack_weight * config.collision_discount**t_idx

    beta = config.trust_weight if trust_weight is None else trust_weight
    if beta > 0:
        core = slice(0, layout.slack_offset)  # states and controls, not slacks
        idx = np.arange(layout.slack_offset)
        P[idx, idx] += 2.0 * beta
        q[core] += -2.0 * beta * lin_z[core]
        r += beta * float(lin_z[core] @ lin_z[core])
    return P, q, r


def _dynamics_constraints(layout: DecisionLayout, start: AgentState, traj: Trajectory):
    """Linearized dynamics equalities around traj plus the pinned initial state."""
    T = layout.horizon
    A_all, B_all, c_all = linearize_array(traj.states[: T + 1], traj.controls, traj.dt)
    rows = 4 * (T + 1) + 4
    A_eq = np.zeros((rows, layout.size))
    b_eq = np.zeros(rows)
    for t in range(T + 1):
        rs = slice(4 * t, 4 * (t + 1))
        A_eq[rs, layout.state_slice(t + 1)] = np.eye(4)
        A_eq[rs, layout.state_slice(t)] = -A_all[t]
        A_eq[rs, layout.control_slice(t)] = -B_all[t]
        b_eq[rs] = c_all[t]
    rs = slice(4 * (T + 1), rows)
    A_eq[rs, layout.state_slice(0)] = np.eye(4)
    b_eq[rs] = start.as_array()
    return A_eq, b_eq


def _avoidance_rows(layout, prev_positions, obstacle_positions, radius, slack: bool):
    """Linearized clearance constraints against a time-indexed obstacle path.

    ||p_t - o_t|| - radius >= -e_t, linearized around the previous iterate's
    positions, becomes -n_t . p_t - e_t <= -radius - n_t . o_t with
    n_t the unit vector from obstacle to previous position. Coincident points
    get a fixed fallback normal; the caller is told through the degenerate flag.
    """
    steps = layout.n_state_steps
    diff = prev_positions - obstacle_positions
    dist = np.linalg.norm(diff, axis=1)
    degenerate = bool((dist < _DEGENERATE_DIST).any())
    normals = np.where(
        (dist < _DEGENERATE_DIST)[:, None], _FALLBACK_NORMAL, diff / np.maximum(dist, _DEGENERATE_DIST)[:, None]
    )
    A = np.zeros((steps, layout.size))
    t_idx = np.arange(steps)
    A[t_idx, layout.state_offset + 4 * t_idx] = -normals[:, 0]
    A[t_idx, layout.state_offset + 4 * t_idx + 1] = -normals[:, 1]
    if slack:
        A[t_idx, layout.slack_offset + t_idx] = -1.0
    b = -radius - np.einsum("ij,ij->i", normals, obstacle_positions)
    return A, b, degenerate


def _wall_rows(layout: DecisionLayout, walls):
    steps = layout.n_state_steps
    A = np.zeros((len(walls) * steps, layout.size))
    b = np.zeros(len(walls) * steps)
    t_idx = np.arange(steps)
    for k, wall in enumerate(walls):
        rows = k * steps + t_idx
        A[rows, layout.state_offset + 4 * t_idx] = -wall.normal[0]
        A[rows, layout.state_offset + 4 * t_idx + 1] = -wall.normal[1]
        b[rows] = -wall.offset
    return A, b


def _variable_bounds(layout: DecisionLayout, limits: Limits):
    lb = np.full(layout.size, -np.inf)
    ub = np.full(layout.size, np.inf)
    t_idx = np.arange(layout.n_state_steps)
    v_idx = layout.state_offset + 4 * t_idx + 3
    lb[v_idx], ub[v_idx] = limits.v_bounds
    c_idx = np.arange(layout.n_control_steps)
    om_idx = layout.control_offset + 2 * c_idx
    lb[om_idx], ub[om_idx] = limits.omega_bounds
    lb[om_idx + 1], ub[om_idx + 1] = limits.a_bounds
    if layout.n_slacks:
        lb[layout.slack_offset :] = 0.0
    return lb, ub


def build_ideal_program(
    start: AgentState,
    goal,
    walls,
    lin_traj: Trajectory,
    config: PlannerConfig,
    trust_weight: float | None = None,
) -> ConvexProgram:
    """One SCP subproblem of the idealized (agent-free) goal-reaching problem:
    no markup, no slack variables, no collision or budget constraints."""
    layout = DecisionLayout(config.horizon, with_slacks=False)
    lin_z = layout.pack(lin_traj.states, lin_traj.controls)
    P, q, r = _stage_objective(
        layout, goal, config, lin_z, markup=False, with_slack_cost=False, trust_weight=trust_weight
    )
    A_eq, b_eq = _dynamics_constraints(layout, start, lin_traj)
    A_in = b_in = None
    if walls:
        A_in, b_in = _wall_rows(layout, walls)
    lb, ub = _variable_bounds(layout, config.limits)
    return ConvexProgram(P=P, q=q, r=r, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in, lb=lb, ub=ub)


def build_follower_program(
    scene: InteractionScene,
    ideal: IdealSolution,
    linearization_point: tuple[Trajectory, np.ndarray],
    goal=None,
    config: PlannerConfig = PlannerConfig(),
) -> ConvexProgram:
    """One SCP subproblem of the follower problem against scene.leader."""
    program, _ = _build_follower(scene, ideal, linearization_point, goal, config)
    return program


def _build_follower(scene, ideal, linearization_point, goal, config, trust_weight=None):
    layout = DecisionLayout(config.horizon)
    lin_traj, _lin_slacks = linearization_point
    goal = np.asarray(scene.follower_goal if goal is None else goal, dtype=float)
    if len(scene.leader) != layout.n_state_steps:
        raise ValueError(
            f"leader trajectory has {len(scene.leader)} states, expected {layout.n_state_steps}"
        )

    lin_z = layout.pack(lin_traj.states, lin_traj.controls)
    P, q, r = _stage_objective(
        layout, goal, config, lin_z, markup=True, with_slack_cost=True, trust_weight=trust_weight
    )
    A_eq, b_eq = _dynamics_constraints(layout, scene.follower_start, lin_traj)

    prev_pos = lin_traj.positions
    ineq_blocks = []
    degenerate = False
    A_c, b_c, degen = _avoidance_rows(
        layout, prev_pos, scene.leader.positions,
        config.collision_radius + config.planning_margin, slack=True
    )
    degenerate |= degen
    ineq_blocks.append((A_c, b_c))
    for periph in scene.peripherals:
        obs = periph.positions_over(layout.n_state_steps, config.dt)
        A_p, b_p, degen = _avoidance_rows(
            layout, prev_pos, obs, config.collision_radius + config.planning_margin, slack=True
        )
        degenerate |= degen
        ineq_blocks.append((A_p, b_p))
    if scene.walls:
        ineq_blocks.append(_wall_rows(layout, scene.walls))

    quad_constraints = []
    if config.inconvenience_budget is not None:
        M, m = _convenience_rows(
            layout, goal, config.convenience_weights, config.limits.v_bounds[1]
        )
        floor = max(ideal.convenience, config.convenience_floor)
        rhs = ideal.convenience + config.inconvenience_budget * floor
        if config.budget_mode == "native":
            quad_constraints.append(
                QuadConstraint(factor=M, a=-2.0 * (M.T @ m), c=float(m @ m) - rhs)
            )
        else:
            # Debug fallback: outer-linearize the budget around the iterate.
            resid = M @ lin_z - m
            grad = 2.0 * (M.T @ resid)
            val = float(resid @ resid)
            row = grad.reshape(1, -1)
            rhs_lin = rhs - val + float(grad @ lin_z)
            ineq_blocks.append((row, np.array([rhs_lin])))

    A_in = np.concatenate([blk[0] for blk in ineq_blocks], axis=0)
    b_in = np.concatenate([blk[1] for blk in ineq_blocks])
    lb, ub = _variable_bounds(layout, config.limits)
    program = ConvexProgram(
        P=P, q=q, r=r, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in,
        quad_constraints=quad_constraints, lb=lb, ub=ub,
    )
    return program, degenerate


def _trajectory_change(layout: DecisionLayout, z_new: np.ndarray, z_old: np.ndarray) -> float:
    core = slice(0, layout.slack_offset)
    return float(np.abs(z_new[core] - z_old[core]).max())


# Assemblers carry a factorized solver whose symbolic structure depends only
# on (problem kind, config, goal, walls, peripheral count); reusing them
# across planning calls skips per-call setup. Thread-local because a cached
# solver must not be shared between concurrently planning agents.
_assembler_tls = threading.local()
_ASSEMBLER_CACHE_MAX = 32


def _cached_assembler(kind, start, goal, config, walls, scene=None, ideal_convenience=None):
    cache = getattr(_assembler_tls, "cache", None)
    if cache is None:
        cache = {}
        _assembler_tls.cache = cache
    key = (
        kind,
        config,
        tuple(float(g) for g in np.asarray(goal, dtype=float)),
        tuple(walls),
        0 if scene is None else len(scene.peripherals),
    )
    assembler = cache.get(key)
    if assembler is None:
        assembler = SubproblemAssembler(
            start, goal, config, walls=walls, scene=scene, ideal_convenience=ideal_convenience
        )
        if len(cache) >= _ASSEMBLER_CACHE_MAX:
            cache.clear()
        cache[key] = assembler
    else:
        assembler.reset_solver()
        assembler.set_start(start)
        if scene is not None:
            assembler.set_scene(scene)
            assembler.set_budget_level(ideal_convenience)
    return assembler


def _zero_control_rollout(start: AgentState, config: PlannerConfig) -> Trajectory:
    controls = np.zeros((config.horizon + 1, 2))
    return rollout(start, controls, config.dt, config.limits)


def _tracking_rollout(start: AgentState, goal, config: PlannerConfig) -> Trajectory:
    """Proportional goal-tracking rollout used to warm-start the ideal SCP.

    Deterministic function of (start, goal, config) only, so planning stays
    independent of earlier MPC steps.
    """
    limits = config.limits
    goal = np.asarray(goal, dtype=float)
    controls = np.empty((config.horizon + 1, 2))
    x, y, theta, v = start.x, start.y, start.theta, start.v
    for t in range(config.horizon + 1):
        dx, dy = goal[0] - x, goal[1] - y
        dist = float(np.hypot(dx, dy))
        if dist > 1e-9:
            bearing_err = (np.arctan2(dy, dx) - theta + np.pi) % (2 * np.pi) - np.pi
            omega = float(np.clip(2.0 * bearing_err, *limits.omega_bounds))
            v_des = min(limits.v_bounds[1], dist)
        else:
            omega = 0.0
            v_des = 0.0
        a = float(np.clip(2.0 * (v_des - v), *limits.a_bounds))
        controls[t] = (omega, a)
        x, y, theta, v = _step_scalar(x, y, theta, v, omega, a, config.dt, limits.v_bounds)
    return rollout(start, controls, config.dt, limits)


def _reroll(traj_states, traj_controls, start: AgentState, config: PlannerConfig) -> Trajectory:
    controls = np.clip(
        traj_controls,
        [config.limits.omega_bounds[0], config.limits.a_bounds[0]],
        [config.limits.omega_bounds[1], config.limits.a_bounds[1]],
    )
    return rollout(start, controls, config.dt, config.limits)


def _scp_loop(
    subsolve,
    merit,
    init_traj: Trajectory,
    config: PlannerConfig,
    layout: DecisionLayout,
    scp_tol: float | None = None,
    max_iterations: int | None = None,
):
    """Shared SCP driver with trust-region acceptance.

    subsolve(traj, trust_weight) -> (SolveStatus, x or None, degenerate);
    merit(traj) -> true (re-rolled, nonlinear) cost of an iterate, which is
    what acceptance descends on -- subproblem objectives alone can be
    linearization-optimistic. The trust weight decays after accepted steps
    and is inflated (with a retry of the same linearization) when a candidate
    fails to descend. Returns (traj, slacks, history, iterations, converged,
    flags); history holds the merit of each accepted iterate and is
    non-increasing by construction.
    """
    traj = init_traj
    scp_tol = config.scp_tol if scp_tol is None else scp_tol
    slacks = np.zeros(layout.n_slacks)
    z = layout.pack(traj.states, traj.controls, slacks)
    flags: set[str] = set()
    history: list[float] = []
    converged = False
    iterations = 0
    beta = config.trust_weight
    merit_prev = merit(traj)
    cap = config.scp_iterations if max_iterations is None else max_iterations
    for _ in range(cap):
        accepted = False
        at_fixed_point = False
        for _retry in range(_TRUST_MAX_RETRIES + 1):
            status, x, degen = subsolve(traj, beta)
            if degen:
                flags.add("degenerate-linearization")
            if status is not SolveStatus.OPTIMAL:
                # A stiffer (more regularized) subproblem often recovers from
                # numeric trouble; inflate the trust weight and retry.
                flags.add(f"subproblem-{status.value}")
                beta = max(beta * _TRUST_RETRY_FACTOR, config.trust_weight)
                continue
            candidate = Trajectory(
                states=layout.states(x).copy(),
                controls=layout.controls(x).copy(),
                dt=config.dt,
            )
            change = _trajectory_change(layout, x, z)
            cand_merit = merit(candidate)
            slack_tol = _SCP_ACCEPT_SLACK * max(1.0, abs(merit_prev))
            if cand_merit <= merit_prev + slack_tol:
                accepted = True
                break
            if change < scp_tol:
                # Within tolerance of the current iterate but not descending:
                # treat the current iterate as the fixed point.
                at_fixed_point = True
                break
            beta = max(beta * _TRUST_RETRY_FACTOR, config.trust_weight)
        if at_fixed_point:
            converged = True
            break
        if not accepted:
            if status is SolveStatus.OPTIMAL:
                flags.add("scp-objective-increase")
            break
        history.append(cand_merit)
        merit_prev = cand_merit
        iterations += 1
        z = x
        traj = candidate
        slacks = np.maximum(layout.slacks(z), 0.0)
        if change < scp_tol:
            converged = True
            break
        beta *= _TRUST_DECAY
    if not converged:
        flags.add("scp-not-converged")
    return traj, slacks, history, iterations, converged, flags


def _stage_cost_value(traj: Trajectory, goal, config: PlannerConfig, markup: bool) -> float:
    """Stage costs of a trajectory under exact dynamics (no trust term)."""
    goal = np.asarray(goal, dtype=float)
    T = len(traj.controls) - 1
    factors = config.markup ** np.arange(T + 1) if markup else np.ones(T + 1)
    R = np.asarray(config.control_cost, dtype=float)
    control_cost = float(np.sum(factors * np.einsum("ti,ij,tj->t", traj.controls, R, traj.controls)))
    gaps = traj.positions - goal
    running = float(config.goal_weight * np.sum(factors * np.sum(gaps[: T + 1] ** 2, axis=1)))
    terminal = float(config.terminal_weight * np.sum(gaps[-1] ** 2))
    return control_cost + running + terminal


def _clearance_violations(traj: Trajectory, scene: InteractionScene, config: PlannerConfig):
    """Worst true clearance violation per step across leader and peripherals."""
    radius = config.collision_radius + config.planning_margin
    viol = np.maximum(
        radius - np.linalg.norm(traj.positions - scene.leader.positions, axis=1),
        0.0,
    )
    for periph in scene.peripherals:
        obs = periph.positions_over(len(traj), config.dt)
        viol = np.maximum(
            viol, radius - np.linalg.norm(traj.positions - obs, axis=1)
        )
    return viol


def _slack_penalty_value(traj: Trajectory, scene: InteractionScene, config: PlannerConfig) -> float:
    viol = _clearance_violations(traj, scene, config)
    t_idx = np.arange(len(viol))
    return float(config.slack_weight * np.sum(config.collision_discount**t_idx * viol**2))


def _wall_penalty_value(traj: Trajectory, walls) -> float:
    total = 0.0
    for wall in walls:
        depth = np.maximum(wall.offset - traj.positions @ np.asarray(wall.normal), 0.0)
        total += float(np.sum(depth**2))
    return _WALL_MERIT_WEIGHT * total


def solve_ideal(start: AgentState, goal, walls=(), config: PlannerConfig = PlannerConfig()) -> IdealSolution:
    """SCP fixed point of the agent-free goal-reaching problem."""
    if not np.all(np.isfinite(start.as_array())) or not np.all(np.isfinite(np.asarray(goal, float))):
        raise ValueError("non-finite start or goal")
    walls = tuple(walls)
    assembler = _cached_assembler("ideal", start, goal, config, walls)

    def merit(traj):
        rolled = _reroll(traj.states, traj.controls, start, config)
        return _stage_cost_value(rolled, goal, config, markup=False) + _wall_penalty_value(
            rolled, walls
        )

    traj, _, _, _, converged, _ = _scp_loop(
        assembler.solve,
        merit,
        _tracking_rollout(start, goal, config),
        config,
        assembler.layout,
    )
    executed = _reroll(traj.states, traj.controls, start, config)
    return IdealSolution(
        trajectory=executed,
        convenience=convenience(executed, goal, config.convenience_weights),
        converged=converged,
    )


def best_response(
    scene: InteractionScene,
    ideal: IdealSolution,
    goal=None,
    config: PlannerConfig = PlannerConfig(),
    initial: Trajectory | None = None,
    scp_tol: float | None = None,
    max_scp_iterations: int | None = None,
    _assembler: SubproblemAssembler | None = None,
) -> PlanResult:
    """SCP solve of the follower problem, initialized at the ideal trajectory.

    Returns the last accepted iterate re-rolled through exact dynamics. On a
    failed subproblem the previous iterate is returned, flagged.
    """
    t_start = time.perf_counter()
    goal = np.asarray(scene.follower_goal if goal is None else goal, dtype=float)

    if config.budget_mode == "native":
        assembler = _assembler
        if assembler is None:
            assembler = _cached_assembler(
                "follower",
                scene.follower_start,
                goal,
                config,
                tuple(scene.walls),
                scene=scene,
                ideal_convenience=ideal.convenience,
            )
        else:
            assembler.set_leader(scene.leader)
        subsolve = assembler.solve
        layout = assembler.layout
    else:
        # Debug fallback (outer-linearized budget) through the reference path.
        layout = DecisionLayout(config.horizon)

        def subsolve(traj, beta, _slacks=np.zeros(layout.n_slacks)):
            program, degen = _build_follower(
                scene, ideal, (traj, _slacks), goal, config, trust_weight=beta
            )
            res = convex.solve(program, tol=config.feasibility_tol)
            return res.status, res.x, degen

    budget_rhs = budget_deadband = None
    if config.inconvenience_budget is not None:
        den = max(ideal.convenience, config.convenience_floor)
        budget_rhs = ideal.convenience + config.inconvenience_budget * den
        # PlanResult must satisfy the budget even when SCP stops early, so
        # candidates whose re-rolled convenience oversteps it are rejected;
        # the deadband leaves converged-solution drift unpenalized.
        budget_deadband = 0.5e-3 * den

    def merit(traj):
        rolled = _reroll(traj.states, traj.controls, scene.follower_start, config)
        value = (
            _stage_cost_value(rolled, goal, config, markup=True)
            + _slack_penalty_value(rolled, scene, config)
            + _wall_penalty_value(rolled, scene.walls)
        )
        if budget_rhs is not None:
            over = convenience(rolled, goal, config.convenience_weights) - budget_rhs
            if over > budget_deadband:
                value += _WALL_MERIT_WEIGHT * (over - budget_deadband) ** 2
        return value

    init = initial if initial is not None else ideal.trajectory
    traj, slacks, history, iterations, converged, flags = _scp_loop(
        subsolve, merit, init, config, layout, scp_tol, max_scp_iterations
    )
    executed = _reroll(traj.states, traj.controls, scene.follower_start, config)
    return PlanResult(
        trajectory=executed,
        slacks=slacks.copy(),
        inconvenience=inconvenience(
            executed, ideal, goal, config.convenience_weights, config.convenience_floor
        ),
        scp_iterations=iterations,
        objective_history=tuple(history),
        solve_time=time.perf_counter() - t_start,
        converged=converged,
        flags=tuple(sorted(flags)),
    )


def ibr_plan(
    robot_state: AgentState,
    robot_goal,
    human_state: AgentState,
    human_goal,
    peripherals=(),
    walls=(),
    robot_config: PlannerConfig = PlannerConfig(),
    human_model_config: PlannerConfig | None = None,
) -> tuple[PlanResult, PlanResult]:
    """Alternating best responses between robot and modeled human.

    Both agents' ideal trajectories are recomputed from the current states, so
    the output depends only on the present scene, never on earlier MPC steps.
    The human responds last each round; the robot's returned plan is the one
    an MPC loop executes (first control).
    """
    if human_model_config is None:
        human_model_config = robot_config
    if (robot_config.horizon, robot_config.dt) != (human_model_config.horizon, human_model_config.dt):
        raise ValueError("robot and human-model configs must share horizon and dt")
    peripherals = tuple(peripherals)
    walls = tuple(walls)

    ideal_robot = solve_ideal(robot_state, robot_goal, walls, robot_config)
    ideal_human = solve_ideal(human_state, human_goal, walls, human_model_config)

    # Round 1 starts from the ideal trajectories (leader prediction and SCP
    # initialization alike); later rounds continue from this call's previous
    # responses, which carries no state across MPC steps. Intermediate rounds
    # only seed the next one and run at a coarser SCP tolerance; the final
    # round uses the configured tolerance.
    human_traj = ideal_human.trajectory
    robot_goal = tuple(np.asarray(robot_goal, dtype=float))
    human_goal = tuple(np.asarray(human_goal, dtype=float))
    robot_scene = InteractionScene(
        follower_start=robot_state, follower_goal=robot_goal,
        leader=human_traj, peripherals=peripherals, walls=walls,
    )
    human_scene = InteractionScene(
        follower_start=human_state, follower_goal=human_goal,
        leader=ideal_robot.trajectory, peripherals=peripherals, walls=walls,
    )
    robot_assembler = human_assembler = None
    if robot_config.budget_mode == "native":
        robot_assembler = _cached_assembler(
            "follower", robot_state, robot_goal, robot_config, walls,
            scene=robot_scene, ideal_convenience=ideal_robot.convenience,
        )
    if human_model_config.budget_mode == "native":
        human_assembler = _cached_assembler(
            "follower", human_state, human_goal, human_model_config, walls,
            scene=human_scene, ideal_convenience=ideal_human.convenience,
        )

    robot_init: Trajectory | None = None
    human_init: Trajectory | None = None
    robot_plan: PlanResult | None = None
    human_plan: PlanResult | None = None
    rounds = max(robot_config.ibr_iterations, 1)
    for k in range(rounds):
        final = k == rounds - 1
        robot_tol = robot_config.scp_tol if final else _COARSE_TOL_FACTOR * robot_config.scp_tol
        human_tol = (
            human_model_config.scp_tol
            if final
            else _COARSE_TOL_FACTOR * human_model_config.scp_tol
        )
        robot_scene = InteractionScene(
            follower_start=robot_state, follower_goal=robot_goal,
            leader=human_traj, peripherals=peripherals, walls=walls,
        )
        cap = None if final else _COARSE_MAX_ITERATIONS
        robot_plan = best_response(
            robot_scene, ideal_robot, robot_goal, robot_config, robot_init,
            scp_tol=robot_tol, max_scp_iterations=cap, _assembler=robot_assembler,
        )
        robot_init = robot_plan.trajectory
        human_scene = InteractionScene(
            follower_start=human_state, follower_goal=human_goal,
            leader=robot_plan.trajectory, peripherals=peripherals, walls=walls,
        )
        human_plan = best_response(
            human_scene, ideal_human, human_goal, human_model_config, human_init,
            scp_tol=human_tol, max_scp_iterations=cap, _assembler=human_assembler,
        )
        human_init = human_plan.trajectory
        human_traj = human_plan.trajectory
    return robot_plan, human_plan
