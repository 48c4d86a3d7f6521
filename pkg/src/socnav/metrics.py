"""Benchmark metrics for navigation episodes and batch aggregation.

Four per-episode quantities: closest approach between an agent pair
(min_dist), total unnecessary turning relative to the goal direction
(path_irregularity), final distance to goal (dist_to_goal), and total
planar acceleration (total_acceleration). Batch reports aggregate them as
min/Q1/median/Q3/max per (policy, role) group, quartiles by linear
interpolation so reports are comparable across runs.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import Trajectory

# Steps where speed or goal distance is below this contribute no turning
# angle (the direction is undefined there).
ZERO_NORM_GUARD = 1e-6

QUARTILE_KEYS = ("min", "q1", "median", "q3", "max")


def min_dist(traj_a: Trajectory, traj_b: Trajectory) -> float:
    """Closest same-time approach between two equally long trajectories."""
    if len(traj_a) != len(traj_b):
        raise ValueError(f"trajectory lengths differ: {len(traj_a)} vs {len(traj_b)}")
    return float(np.linalg.norm(traj_a.positions - traj_b.positions, axis=1).min())


def path_irregularity(traj: Trajectory, goal) -> float:
    """Sum of angles between planar velocity and the goal direction.

    Zero-speed steps and steps on top of the goal contribute nothing.
    """
    goal = np.asarray(goal, dtype=float)
    vel = traj.velocities
    to_goal = goal - traj.positions
    nv = np.linalg.norm(vel, axis=1)
    ng = np.linalg.norm(to_goal, axis=1)
    ok = (nv > ZERO_NORM_GUARD) & (ng > ZERO_NORM_GUARD)
    cosang = np.einsum("ij,ij->i", vel[ok], to_goal[ok]) / (nv[ok] * ng[ok])
    return float(np.sum(np.arccos(np.clip(cosang, -1.0, 1.0))))


def dist_to_goal(traj: Trajectory, goal) -> float:
    """Euclidean distance from the final position to the goal."""
    return float(np.linalg.norm(traj.positions[-1] - np.asarray(goal, dtype=float)))


def total_acceleration(traj: Trajectory) -> float:
    """Sum of planar velocity changes divided by the step size."""
    dvel = np.diff(traj.velocities, axis=0)
    return float(np.sum(np.linalg.norm(dvel, axis=1)) / traj.dt)


def first_heading_deviation(traj: Trajectory, threshold: float = 0.1):
    """First state index where heading left its initial value by more than
    threshold [rad]; None if it never does. Used by markup sweeps."""
    dev = np.abs(traj.headings - traj.headings[0])
    idx = np.flatnonzero(dev > threshold)
    return int(idx[0]) if len(idx) else None


@dataclass
class EpisodeMetrics:
    """Metric values of one episode, one row per agent plus the pair value."""

    seed: int
    policy: str
    min_dist: float
    per_agent: dict  # agent_id -> {"role", "pi", "d2g", "acc"}

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "policy": self.policy,
            "min_dist": self.min_dist,
            "per_agent": self.per_agent,
        }


@dataclass
class MetricsReport:
    """Per-episode metric rows plus quartile aggregates per (policy, role)."""

    episodes: list[EpisodeMetrics] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "episodes": [e.to_dict() for e in self.episodes],
            "aggregates": self.aggregates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        episodes = [EpisodeMetrics(**e) for e in d["episodes"]]
        return cls(episodes=episodes, aggregates=d["aggregates"])


def _quartiles(values) -> dict:
    arr = np.asarray(values, dtype=float)
    qs = np.quantile(arr, [0.0, 0.25, 0.5, 0.75, 1.0])  # linear interpolation
    return dict(zip(QUARTILE_KEYS, (float(v) for v in qs)))


def episode_metrics(log) -> EpisodeMetrics:
    """Metrics of one EpisodeLog: MinDist over the robot-human pair, and
    PI/D2G/ACC per interactive agent."""
    interactive = [a for a in log.scenario.agents if a.role in ("robot", "human")]
    if len(interactive) != 2:
        raise ValueError("episode metrics expect exactly one robot and one human")
    by_role = {a.role: a for a in interactive}
    pair_dist = min_dist(
        log.trajectories[by_role["robot"].agent_id],
        log.trajectories[by_role["human"].agent_id],
    )
    per_agent = {}
    for agent in interactive:
        traj = log.trajectories[agent.agent_id]
        per_agent[agent.agent_id] = {
            "role": agent.role,
            "pi": path_irregularity(traj, agent.goal),
            "d2g": dist_to_goal(traj, agent.goal),
            "acc": total_acceleration(traj),
        }
    robot_policy = by_role["robot"].policy
    return EpisodeMetrics(
        seed=log.seed, policy=robot_policy, min_dist=pair_dist, per_agent=per_agent
    )


def aggregate(logs) -> MetricsReport:
    """Quartile summaries per (robot policy, agent role) over a batch."""
    logs = list(logs)
    if not logs:
        raise ValueError("no episodes to aggregate")
    episodes = [episode_metrics(log) for log in logs]
    groups: dict = {}
    for ep in episodes:
        groups.setdefault(ep.policy, {"min_dist": [], "roles": {}})
        groups[ep.policy]["min_dist"].append(ep.min_dist)
        for _agent_id, row in sorted(ep.per_agent.items()):
            role_rows = groups[ep.policy]["roles"].setdefault(
                row["role"], {"pi": [], "d2g": [], "acc": []}
            )
            for key in ("pi", "d2g", "acc"):
                role_rows[key].append(row[key])
    aggregates = {}
    for policy in sorted(groups):
        entry = {"min_dist": _quartiles(groups[policy]["min_dist"]), "roles": {}}
        for role in sorted(groups[policy]["roles"]):
            entry["roles"][role] = {
                key: _quartiles(vals)
                for key, vals in sorted(groups[policy]["roles"][role].items())
            }
        aggregates[policy] = entry
    return MetricsReport(episodes=episodes, aggregates=aggregates)


def write_report_csv(report: MetricsReport, path):
    """One row per episode per agent per metric (plus the pair MinDist)."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "policy", "agent_id", "role", "metric", "value"])
        for ep in report.episodes:
            writer.writerow([ep.seed, ep.policy, "", "pair", "min_dist", repr(ep.min_dist)])
            for agent_id, row in sorted(ep.per_agent.items()):
                for key in ("pi", "d2g", "acc"):
                    writer.writerow(
                        [ep.seed, ep.policy, agent_id, row["role"], key, repr(row[key])]
                    )


def write_report_json(report: MetricsReport, path):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)


def read_report_json(path) -> MetricsReport:
    with open(path) as f:
        return MetricsReport.from_dict(json.load(f))
