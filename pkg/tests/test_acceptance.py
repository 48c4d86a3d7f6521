"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
(run with `pytest -s tests/test_acceptance.py` to see them live).

Batch-based criteria share the 40-episode head-on batches through session
fixtures: seeds 0..39, relative heading drawn uniformly in [-pi/4, pi/4]
from each seed, human simulation model alternating between the interactive
planner and plain optimal control, paper-style planner parameters
(markup 1.05, collision discount 0.98, slack weight 150, budget 0.2,
collision radius 1 m, horizon 25 at dt 0.1).
"""

import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import brute_force_qp, rk4_batch
from socnav import cli, convex, metrics, simulation
from socnav import dynamics as dyn
from socnav import planner as pl

N_EPISODES = 40


def check(name: str, condition: bool, detail: str):
    print(f"\n[{name}] {'PASS' if condition else 'FAIL'}: {detail}")
    assert condition, f"{name}: {detail}"


def run_headon_batch(policy: str):
    robot_cfg, _model, human_cfg, _ = cli.resolve_configs({})
    logs = []
    t0 = time.perf_counter()
    for seed in range(N_EPISODES):
        variant = ("ibr", "oc")[seed % 2]
        scenario = cli.headon_scenario(seed, policy, variant, robot_cfg, human_cfg)
        logs.append(simulation.run_episode(scenario))
    return logs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def batch_ours():
    return run_headon_batch("ours")


@pytest.fixture(scope="session")
def batch_oc():
    return run_headon_batch("oc")


@pytest.fixture(scope="session")
def batch_reactive():
    return run_headon_batch("reactive_cv")


@pytest.fixture(scope="session")
def batch_sfm():
    return run_headon_batch("sfm")


def role_values(episodes, key, role):
    return [
        next(v[key] for v in ep.per_agent.values() if v["role"] == role) for ep in episodes
    ]


class TestA1DynamicsOracle:
    def test_a1(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(101)
        n = 1000
        states = rng.uniform([-5, -5, -np.pi, 0.0], [5, 5, np.pi, 1.5], size=(n, 4))
        controls = rng.uniform([-1, -1.5], [1, 1.5], size=(n, 2))
        dt = 0.1

        stepped = dyn.step_array(states, controls, dt)
        reference = rk4_batch(states, controls, dt, substeps=1000)
        step_err = float(np.abs(stepped - reference).max())

        A, B, _ = dyn.linearize_array(states, controls, dt)
        h = 1e-5
        jac_err = 0.0
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            col = (dyn.step_array(states + e, controls, dt) - dyn.step_array(states - e, controls, dt)) / (2 * h)
            jac_err = max(jac_err, float(np.abs(A[..., j] - col).max()))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            col = (dyn.step_array(states, controls + e, dt) - dyn.step_array(states, controls - e, dt)) / (2 * h)
            jac_err = max(jac_err, float(np.abs(B[..., j] - col).max()))
        elapsed = time.perf_counter() - t0
        check(
            "A1",
            step_err < 1e-8 and jac_err < 1e-5 and elapsed < 10.0,
            f"step-vs-RK4 max err {step_err:.2e} (<1e-8), jacobian-vs-FD max err "
            f"{jac_err:.2e} (<1e-5), runtime {elapsed:.1f}s (<10s) over {n} samples",
        )


class TestA2SolverOracle:
    def test_a2(self):
        t0 = time.perf_counter()
        rng = np.random.default_rng(202)
        worst_rel = 0.0
        for k in range(50):
            n = int(rng.integers(2, 5))
            G = rng.normal(size=(n, n))
            P = G @ G.T + n * np.eye(n)
            q = 2 * rng.normal(size=n)
            lb = rng.uniform(-1.0, -0.2, size=n)
            ub = rng.uniform(0.2, 1.0, size=n)
            program = convex.ConvexProgram(P=P, q=q, lb=lb, ub=ub)
            if k % 3 == 0:
                program.A_in = rng.normal(size=(2, n))
                program.b_in = rng.uniform(0.5, 1.5, size=2)
            res = convex.solve(program)
            assert res.status is convex.SolveStatus.OPTIMAL
            val, _ = brute_force_qp(
                P, q, A_in=program.A_in, b_in=program.b_in, lb=lb, ub=ub
            )
            rel = abs(res.objective - val) / max(abs(val), 1e-9)
            worst_rel = max(worst_rel, rel)

        # tiny trajectory instances against exhaustive control-grid search
        grid_ratio = 0.0
        config = replace(pl.PlannerConfig(), horizon=3, scp_iterations=15)
        omegas = np.linspace(-1, 1, 5)
        accels = np.linspace(-1.5, 1.5, 5)
        combos = np.array(list(itertools.product(omegas, accels)))
        idx = np.array(list(itertools.product(range(25), repeat=4)))
        sequences = combos[idx]  # (25^4, 4, 2)
        for start, goal in (
            (dyn.AgentState(0, 0, 0.4, 1.0), (1.5, 0.2)),
            (dyn.AgentState(0, 0, -0.6, 0.8), (1.2, -0.5)),
            (dyn.AgentState(0, 0, 0.0, 1.2), (2.0, 0.6)),
        ):
            ideal = pl.solve_ideal(start, goal, (), config)
            got = pl._stage_cost_value(ideal.trajectory, goal, config, markup=False)
            states = np.tile(start.as_array(), (len(sequences), 1))
            costs = np.zeros(len(sequences))
            R = np.asarray(config.control_cost)
            goal_arr = np.asarray(goal, dtype=float)
            for t in range(4):
                costs += np.einsum("ni,ij,nj->n", sequences[:, t], R, sequences[:, t])
                costs += config.goal_weight * np.sum((states[:, :2] - goal_arr) ** 2, axis=1)
                states = dyn.step_array(states, sequences[:, t], config.dt, config.limits)
            costs += config.terminal_weight * np.sum((states[:, :2] - goal_arr) ** 2, axis=1)
            grid_ratio = max(grid_ratio, got / float(costs.min()))
        elapsed = time.perf_counter() - t0
        check(
            "A2",
            worst_rel < 1e-4 and grid_ratio <= 1.05 and elapsed < 120.0,
            f"50 QPs worst rel err {worst_rel:.2e} (<1e-4), SCP/grid ratio "
            f"{grid_ratio:.4f} (<=1.05) over 3 instances, runtime {elapsed:.0f}s (<120s)",
        )


class TestA3BudgetHardness:
    def test_a3(self, batch_ours):
        logs, _ = batch_ours
        worst = -np.inf
        for log in logs:
            for diag in log.diagnostics["robot"]:
                worst = max(worst, diag.inconvenience)
        ideal = pl.solve_ideal(dyn.AgentState(0, 0, 0, 1.0), (10, 0))
        ideal_incon = pl.inconvenience(ideal.trajectory, ideal, (10, 0))
        check(
            "A3",
            worst <= 0.201 and ideal_incon == 0.0,
            f"max per-step robot inconvenience {worst:.4f} (<=0.201) over "
            f"{len(logs)} episodes; ideal-trajectory inconvenience {ideal_incon} (== 0)",
        )


class TestA4Safety:
    def test_a4(self, batch_ours):
        logs, elapsed = batch_ours
        dists = [metrics.episode_metrics(log).min_dist for log in logs]
        n_above_1 = sum(d >= 1.0 for d in dists)
        check(
            "A4",
            n_above_1 >= 39 and min(dists) >= 0.95 and elapsed < 600.0,
            f"MinDist >= 1.0 in {n_above_1}/{len(dists)} episodes (>=39/40), "
            f"min {min(dists):.3f} (>=0.95), batch runtime {elapsed:.0f}s (<600s)",
        )


class TestA5MarkupLegibility:
    def test_a5(self):
        _, _model, human_cfg, _ = cli.resolve_configs({})
        firsts = []
        for markup in (1.0, 1.05, 1.10):
            robot_cfg = replace(cli.resolve_configs({})[0], markup=markup)
            scenario = cli.headon_scenario(0, "ours", "ibr", robot_cfg, human_cfg)
            log = simulation.run_episode(scenario)
            firsts.append(metrics.first_heading_deviation(log.trajectories["robot"]))
        ok = all(f is not None for f in firsts) and all(
            nxt <= prev + 1 for prev, nxt in zip(firsts, firsts[1:])
        )
        check(
            "A5",
            ok,
            f"first |heading change| > 0.1 rad at steps {firsts} for markup "
            "(1.0, 1.05, 1.10): non-increasing within one step",
        )


class TestA6Prosociality:
    def test_a6(self, batch_ours, batch_oc, batch_reactive, batch_sfm):
        stats = {}
        for name, (logs, _) in (
            ("ours", batch_ours), ("oc", batch_oc),
            ("reactive_cv", batch_reactive), ("sfm", batch_sfm),
        ):
            episodes = [metrics.episode_metrics(log) for log in logs]
            pi_h = role_values(episodes, "pi", "human")
            pi_r = role_values(episodes, "pi", "robot")
            stats[name] = {
                "pi_gap": float(np.median([abs(h - r) for h, r in zip(pi_h, pi_r)])),
                "acc_h": float(np.median(role_values(episodes, "acc", "human"))),
            }
        ok = (
            stats["ours"]["pi_gap"] < stats["oc"]["pi_gap"]
            and stats["ours"]["pi_gap"] < stats["reactive_cv"]["pi_gap"]
            and stats["ours"]["acc_h"] <= stats["sfm"]["acc_h"]
        )
        check(
            "A6",
            ok,
            "median |PI_human - PI_robot|: ours "
            f"{stats['ours']['pi_gap']:.2f} < oc {stats['oc']['pi_gap']:.2f} and "
            f"< reactive_cv {stats['reactive_cv']['pi_gap']:.2f}; median human ACC: "
            f"ours {stats['ours']['acc_h']:.2f} <= sfm {stats['sfm']['acc_h']:.2f}",
        )


class TestA7Timing:
    def test_a7(self):
        # representative world states along one interactive episode
        robot_cfg, _model, human_cfg, _ = cli.resolve_configs({})
        log = simulation.run_episode(cli.headon_scenario(0, "ours", "ibr", robot_cfg, human_cfg))
        traj_r = log.trajectories["robot"]
        traj_h = log.trajectories["human"]
        robot_goal = log.scenario.agents[0].goal
        human_goal = log.scenario.agents[1].goal
        config = pl.PlannerConfig()
        samples = range(0, 48, 4)
        peripherals = (
            pl.Peripheral((3.0, 2.5), (0.1, -0.2)),
            pl.Peripheral((6.0, -2.5), (-0.1, 0.2)),
            pl.Peripheral((2.0, -3.0), (0.2, 0.2)),
            pl.Peripheral((8.0, 3.0), (-0.2, -0.2)),
        )

        def timed_call(r, h, periph):
            t0 = time.perf_counter()
            pl.ibr_plan(
                r, robot_goal, h, human_goal, peripherals=periph,
                robot_config=config, human_model_config=config,
            )
            return time.perf_counter() - t0

        # paired, interleaved measurement so scheduler drift on a shared box
        # cancels out of the ratio; GC paused for the same reason
        import gc

        base_times, loaded_times = [], []
        first = dyn.AgentState.from_array(traj_r.states[0])
        first_h = dyn.AgentState.from_array(traj_h.states[0])
        timed_call(first, first_h, ())  # warm the structure caches
        timed_call(first, first_h, peripherals)
        gc.collect()
        gc.disable()
        try:
            for t in samples:
                r = dyn.AgentState.from_array(traj_r.states[t])
                h = dyn.AgentState.from_array(traj_h.states[t])
                base_times.append(timed_call(r, h, ()))
                loaded_times.append(timed_call(r, h, peripherals))
        finally:
            gc.enable()
        base = float(np.mean(base_times))
        loaded = float(np.mean(loaded_times))
        increase = (loaded - base) / base
        check(
            "A7",
            base <= 0.100 and increase < 0.25,
            f"mean plan time {base*1000:.0f}ms (<=100ms) over {len(list(samples))} "
            f"world states; +4 peripherals: {loaded*1000:.0f}ms, increase "
            f"{increase*100:+.0f}% (<25%)",
        )


class TestA8MetricFixtures:
    def test_a8(self):
        failures = []

        def expect(cond, label):
            if not cond:
                failures.append(label)

        straight = dyn.rollout(dyn.AgentState(0, 0, 0, 1.0), np.zeros((25, 2)), 0.1)
        offset = dyn.rollout(dyn.AgentState(0, 2.0, 0, 1.0), np.zeros((25, 2)), 0.1)
        expect(metrics.min_dist(straight, offset) == 2.0, "parallel lines MinDist 2.0")
        expect(metrics.min_dist(straight, straight) == 0.0, "identical MinDist 0")
        expect(metrics.path_irregularity(straight, (100.0, 0.0)) == 0.0, "straight PI 0")
        perp = dyn.Trajectory(
            states=np.array([[0, 0, np.pi / 2, 1.0], [0, 0.1, np.pi / 2, 0.0]]),
            controls=np.zeros((1, 2)), dt=0.1,
        )
        expect(
            abs(metrics.path_irregularity(perp, (10.0, 0.0)) - np.pi / 2) < 1e-12,
            "perpendicular step contributes pi/2",
        )
        expect(metrics.dist_to_goal(straight, straight.positions[-1]) == 0.0, "D2G at goal 0")
        p345 = dyn.Trajectory(
            states=np.array([[0, 0, 0, 0.0], [3.0, 4.0, 0, 0.0]]),
            controls=np.zeros((1, 2)), dt=0.1,
        )
        expect(metrics.dist_to_goal(p345, (0.0, 0.0)) == 5.0, "D2G 3-4-5")
        expect(metrics.total_acceleration(straight) == 0.0, "constant velocity ACC 0")
        jump = dyn.Trajectory(
            states=np.array([[0, 0, 0, 0.0], [0, 0, 0, 1.5]]),
            controls=np.zeros((1, 2)), dt=0.1,
        )
        expect(metrics.total_acceleration(jump) == 15.0, "speed step ACC 15")

        rng = np.random.default_rng(808)
        traj = dyn.rollout(
            dyn.AgentState(0, 0, 0.2, 1.0), rng.uniform(-1, 1, (25, 2)), 0.1, dyn.Limits()
        )
        other = dyn.rollout(
            dyn.AgentState(2, 1, -0.5, 1.0), rng.uniform(-1, 1, (25, 2)), 0.1, dyn.Limits()
        )
        goal = (4.0, 2.0)
        base = (
            metrics.path_irregularity(traj, goal),
            metrics.dist_to_goal(traj, goal),
            metrics.min_dist(traj, other),
        )
        worst = 0.0
        for _ in range(100):
            angle = rng.uniform(-np.pi, np.pi)
            shift = rng.uniform(-10, 10, 2)
            c, s = np.cos(angle), np.sin(angle)
            R = np.array([[c, -s], [s, c]])

            def xf(t):
                st = t.states.copy()
                st[:, :2] = st[:, :2] @ R.T + shift
                st[:, 2] += angle
                return dyn.Trajectory(states=st, controls=t.controls, dt=t.dt)

            g2 = R @ np.asarray(goal) + shift
            got = (
                metrics.path_irregularity(xf(traj), g2),
                metrics.dist_to_goal(xf(traj), g2),
                metrics.min_dist(xf(traj), xf(other)),
            )
            worst = max(worst, max(abs(a - b) for a, b in zip(base, got)))
        expect(worst < 1e-9, f"rigid-transform invariance (worst dev {worst:.1e})")
        check(
            "A8",
            not failures,
            "all trivial metric fixtures exact and invariance < 1e-9"
            + (f"; failures: {failures}" if failures else ""),
        )


class TestA9Determinism:
    def test_a9(self, tmp_path):
        argv_base = [
            "run", "--policies", "ours", "--episodes", "2", "--human-models", "ibr,oc",
            "--seed-base", "0",
        ]
        outs = []
        for name, par in (("serial_a", 1), ("serial_b", 1), ("parallel", 2)):
            out = tmp_path / name
            code = cli.main(argv_base + ["--out", str(out), "--parallelism", str(par)])
            assert code == cli.EXIT_OK
            outs.append(out)
        names = sorted(p.name for p in (outs[0] / "episodes").glob("*.json"))
        identical = all(
            (outs[0] / "episodes" / n).read_bytes()
            == (outs[1] / "episodes" / n).read_bytes()
            == (outs[2] / "episodes" / n).read_bytes()
            for n in names
        )
        check(
            "A9",
            identical and len(names) == 2,
            f"{len(names)} episode logs byte-identical across repeated serial runs "
            "and a parallel run",
        )
