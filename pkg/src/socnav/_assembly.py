"""Pattern-cached assembly of SCP subproblems in solver canonical form.

Within one SCP run the subproblem's sparsity structure is fixed; only the
dynamics linearization, collision normals, and trust terms change between
iterations. This module enumerates the structure once and refills value
arrays per iteration, avoiding the dense-matrix construction and nonzero
scans of the reference ConvexProgram path (which remains the documented,
test-checked formulation; equivalence of the two is asserted in tests).
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from . import convex
from .convex import SolveStatus
from .dynamics import Trajectory, linearize_array

_DEGENERATE_DIST = 1e-9
_FALLBACK_NORMAL = np.array([1.0, 0.0])


def _pattern_csc(rows, cols, shape):
    """CSC with the given structural pattern plus a gather map such that
    csc.data = values[order] reproduces triplet values in csc order."""
    nnz = len(rows)
    ids = sparse.coo_matrix((np.arange(1, nnz + 1, dtype=float), (rows, cols)), shape=shape)
    csc = ids.tocsc()
    if csc.nnz != nnz:
        raise AssertionError("duplicate entries in structural pattern")
    order = csc.data.astype(np.int64) - 1
    return csc, order


class SubproblemAssembler:
    """One SCP run's subproblem family: ideal (scene None) or follower."""

    def __init__(self, start, goal, config, walls=(), scene=None, ideal_convenience=None):
        from .planner import (  # late import; planner owns the layout/objective logic
            DecisionLayout,
            _convenience_rows,
            _stage_objective,
            _wall_rows,
        )

        self.config = config
        self.start = start
        self.goal = np.asarray(goal, dtype=float)
        self.scene = scene
        follower = scene is not None
        layout = DecisionLayout(config.horizon, with_slacks=follower)
        self.layout = layout
        n = layout.size
        ns, nc = layout.n_state_steps, layout.n_control_steps
        T = layout.horizon
        walls = tuple(walls)

        # Static objective pieces (trust-free); trust adds 2*beta on the core
        # diagonal of P and -2*beta*center to q.
        P0, q0, _ = _stage_objective(
            layout,
            self.goal,
            config,
            np.zeros(n),
            markup=follower,
            with_slack_cost=follower,
            trust_weight=0.0,
        )
        self._q_static = q0
        P0u = np.triu(P0)
        structure = P0u != 0.0
        diag_idx = np.arange(layout.slack_offset)
        structure[diag_idx, diag_idx] = True  # trust weight lands here
        rows_p, cols_p = np.nonzero(structure)
        self._P_static = P0u[rows_p, cols_p]
        self._P_mask = ((rows_p == cols_p) & (rows_p < layout.slack_offset)).astype(float)
        self._P_csc, self._P_order = _pattern_csc(rows_p, cols_p, (n, n))

        # Constraint rows, in block order: equalities, nonnegatives, SOC.
        self.m_eq = 4 * nc + 4
        obstacle_paths = []
        if follower:
            obstacle_paths.append(scene.leader.positions)
            for periph in scene.peripherals:
                obstacle_paths.append(periph.positions_over(ns, config.dt))
        self._obstacle_paths = obstacle_paths
        n_avoid = len(obstacle_paths) * ns

        wall_A = wall_b = None
        if walls:
            wall_A, wall_b = _wall_rows(layout, walls)

        # Bound rows: speed box, control boxes, slack lower bounds.
        bnd_rows, bnd_cols, bnd_vals, bnd_b = [], [], [], []

        def add_bound(col, sign, rhs):
            bnd_rows.append(len(bnd_rows))
            bnd_cols.append(col)
            bnd_vals.append(sign)
            bnd_b.append(rhs)

        lim = config.limits
        for t in range(ns):
            v = layout.state_index(t, 3)
            add_bound(v, -1.0, -lim.v_bounds[0])
            add_bound(v, 1.0, lim.v_bounds[1])
        for t in range(nc):
            om = layout.control_offset + 2 * t
            add_bound(om, -1.0, -lim.omega_bounds[0])
            add_bound(om, 1.0, lim.omega_bounds[1])
            add_bound(om + 1, -1.0, -lim.a_bounds[0])
            add_bound(om + 1, 1.0, lim.a_bounds[1])
        for t in range(layout.n_slacks):
            add_bound(layout.slack_offset + t, -1.0, 0.0)

        n_walls_rows = 0 if wall_A is None else wall_A.shape[0]
        self.m_nn = n_avoid + n_walls_rows + len(bnd_b)

        # SOC block for the convenience budget (native mode only).
        self._has_budget = bool(
            follower and config.inconvenience_budget is not None and config.budget_mode == "native"
        )
        soc_rows_n = 0
        M = m_off = None
        if self._has_budget:
            M, m_off = _convenience_rows(
                layout, self.goal, config.convenience_weights, lim.v_bounds[1]
            )
            self._soc_a = -2.0 * (M.T @ m_off)
            self._soc_mm = float(m_off @ m_off)
            soc_rows_n = M.shape[0] + 2

        m_total = self.m_eq + self.m_nn + soc_rows_n
        self.m_total = m_total

        rows, cols = [], []
        static_parts = {}

        # Equalities: x_{t+1} - A_t x_t - B_t u_t = c_t, then x_0 = start.
        # Enumeration per t: identity(4), -A diag(4), -A offdiag(4), -B(6).
        for t in range(nc):
            r0 = 4 * t
            for i in range(4):
                rows.append(r0 + i)
                cols.append(layout.state_index(t + 1, i))
            for i in range(4):
                rows.append(r0 + i)
                cols.append(layout.state_index(t, i))
            for ri, ci in ((0, 2), (0, 3), (1, 2), (1, 3)):
                rows.append(r0 + ri)
                cols.append(layout.state_index(t, ci))
            for ri, ci in ((0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (3, 1)):
                rows.append(r0 + ri)
                cols.append(layout.control_offset + 2 * t + ci)
        for i in range(4):
            rows.append(4 * nc + i)
            cols.append(layout.state_index(0, i))
        self._n_eq_entries = len(rows)

        # Avoidance rows: -(n_t . p_t) - e_t <= -radius - n_t . o_t.
        row = self.m_eq
        for k in range(len(obstacle_paths)):
            for t in range(ns):
                rows.append(row)
                cols.append(layout.state_index(t, 0))
                rows.append(row)
                cols.append(layout.state_index(t, 1))
                rows.append(row)
                cols.append(layout.slack_offset + t)
                row += 1
        self._n_avoid_entries = 3 * n_avoid

        if wall_A is not None:
            wr, wc = np.nonzero(wall_A)
            rows.extend((row + wr).tolist())
            cols.extend(wc.tolist())
            static_parts["walls"] = wall_A[wr, wc]
            row += n_walls_rows
        else:
            static_parts["walls"] = np.empty(0)

        rows.extend((row + np.asarray(bnd_rows)).tolist())
        cols.extend(bnd_cols)
        static_parts["bounds"] = np.asarray(bnd_vals)
        row += len(bnd_b)

        if self._has_budget:
            a_cols = np.flatnonzero(self._soc_a)
            for c in a_cols:
                rows.append(row)
                cols.append(c)
            mr, mc = np.nonzero(M)
            rows.extend((row + 1 + mr).tolist())
            cols.extend(mc.tolist())
            for c in a_cols:
                rows.append(row + 1 + M.shape[0])
                cols.append(c)
            static_parts["soc"] = np.concatenate(
                [self._soc_a[a_cols], -2.0 * M[mr, mc], -self._soc_a[a_cols]]
            )
        else:
            static_parts["soc"] = np.empty(0)

        self._A_csc, self._A_order = _pattern_csc(rows, cols, (m_total, n))
        self._static_tail = np.concatenate([static_parts["walls"], static_parts["bounds"], static_parts["soc"]])

        b = np.zeros(m_total)
        b[4 * nc : self.m_eq] = start.as_array()
        if wall_b is not None:
            b[self.m_eq + n_avoid : self.m_eq + n_avoid + n_walls_rows] = wall_b
        b[self.m_eq + n_avoid + n_walls_rows : self.m_eq + self.m_nn] = bnd_b
        self._b = b
        self._n_avoid = n_avoid
        self._n_walls_rows = n_walls_rows
        if self._has_budget:
            self.set_budget_level(ideal_convenience)

        import clarabel

        cones = []
        cones.append(clarabel.ZeroConeT(self.m_eq))
        if self.m_nn:
            cones.append(clarabel.NonnegativeConeT(self.m_nn))
        if self._has_budget:
            cones.append(clarabel.SecondOrderConeT(soc_rows_n))
        self._cones = cones
        self._settings = convex.make_settings(config.feasibility_tol, convex.DEFAULT_MAX_ITERATIONS)
        # Presolve would strip rows and block same-pattern data updates.
        self._settings.presolve_enable = False
        self._solver = None

    def set_leader(self, leader: Trajectory):
        """Swap the leader trajectory between best responses; the constraint
        structure is unchanged, only avoidance values move."""
        if self.scene is None:
            raise ValueError("ideal-problem assembler has no leader")
        if len(leader) != self.layout.n_state_steps:
            raise ValueError("leader length mismatch")
        self.scene = type(self.scene)(
            follower_start=self.scene.follower_start,
            follower_goal=self.scene.follower_goal,
            leader=leader,
            peripherals=self.scene.peripherals,
            walls=self.scene.walls,
        )
        self._obstacle_paths[0] = leader.positions

    def reset_solver(self):
        """Drop the factorized solver. The solver's equilibration scaling is
        computed from the data present at construction, so a reused assembler
        must start cold to make results independent of cache history."""
        self._solver = None

    def set_start(self, start):
        """Re-pin the initial state; everything else is untouched."""
        self.start = start
        nc = self.layout.n_control_steps
        self._b[4 * nc : self.m_eq] = start.as_array()

    def set_scene(self, scene):
        """Swap leader and peripheral paths for a new planning query with the
        same structure (same peripheral count, walls, goal, config)."""
        if self.scene is None:
            raise ValueError("ideal-problem assembler has no scene")
        if len(scene.peripherals) != len(self.scene.peripherals):
            raise ValueError("peripheral count differs from cached structure")
        self.scene = scene
        paths = [scene.leader.positions]
        for periph in scene.peripherals:
            paths.append(periph.positions_over(self.layout.n_state_steps, self.config.dt))
        self._obstacle_paths = paths

    def set_budget_level(self, ideal_convenience: float):
        """Update the budget right-hand side for a new idealized reference."""
        if not self._has_budget:
            return
        floor = max(ideal_convenience, self.config.convenience_floor)
        rhs = ideal_convenience + self.config.inconvenience_budget * floor
        soc_c = self._soc_mm - rhs
        self._b[self.m_eq + self.m_nn] = 1.0 - soc_c
        self._b[-1] = 1.0 + soc_c

    def solve(self, traj: Trajectory, beta: float):
        """Assemble around traj with trust weight beta; returns
        (status, x or None, degenerate_normals)."""
        layout, config = self.layout, self.config
        ns, nc = layout.n_state_steps, layout.n_control_steps

        A_lin, B_lin, c_lin = linearize_array(traj.states[:nc], traj.controls, config.dt)
        eq_vals = np.empty((nc, 18))
        eq_vals[:, 0:4] = 1.0
        eq_vals[:, 4:8] = -1.0
        eq_vals[:, 8] = -A_lin[:, 0, 2]
        eq_vals[:, 9] = -A_lin[:, 0, 3]
        eq_vals[:, 10] = -A_lin[:, 1, 2]
        eq_vals[:, 11] = -A_lin[:, 1, 3]
        eq_vals[:, 12] = -B_lin[:, 0, 0]
        eq_vals[:, 13] = -B_lin[:, 0, 1]
        eq_vals[:, 14] = -B_lin[:, 1, 0]
        eq_vals[:, 15] = -B_lin[:, 1, 1]
        eq_vals[:, 16] = -config.dt
        eq_vals[:, 17] = -config.dt
        pieces = [eq_vals.ravel(), np.ones(4)]

        degenerate = False
        b = self._b
        b[: 4 * nc] = c_lin.ravel()
        if self._n_avoid:
            prev_pos = traj.positions
            avoid_vals = np.empty((len(self._obstacle_paths), ns, 3))
            row0 = self.m_eq
            for k, obs in enumerate(self._obstacle_paths):
                diff = prev_pos - obs
                dist = np.linalg.norm(diff, axis=1)
                bad = dist < _DEGENERATE_DIST
                if bad.any():
                    degenerate = True
                normals = np.where(
                    bad[:, None], _FALLBACK_NORMAL, diff / np.maximum(dist, _DEGENERATE_DIST)[:, None]
                )
                avoid_vals[k, :, 0] = -normals[:, 0]
                avoid_vals[k, :, 1] = -normals[:, 1]
                avoid_vals[k, :, 2] = -1.0
                b[row0 : row0 + ns] = (
                    -config.collision_radius
                    - config.planning_margin
                    - np.einsum("ij,ij->i", normals, obs)
                )
                row0 += ns
            pieces.append(avoid_vals.ravel())
        pieces.append(self._static_tail)
        values = np.concatenate(pieces)

        P_data = (self._P_static + 2.0 * beta * self._P_mask)[self._P_order]
        A_data = values[self._A_order]
        q = self._q_static.copy()
        core = slice(0, layout.slack_offset)
        if beta:
            lin_core = np.concatenate([traj.states.ravel(), traj.controls.ravel()])
            q[core] -= 2.0 * beta * lin_core

        import clarabel

        # Keep the csc mirrors current; residual checks read them.
        self._P_csc.data = P_data
        self._A_csc.data = A_data
        if self._solver is None:
            self._solver = clarabel.DefaultSolver(
                self._P_csc, q, self._A_csc, b, self._cones, self._settings
            )
        else:
            # Same sparsity pattern every iteration; skip symbolic setup.
            self._solver.update(P=P_data, q=q, A=A_data, b=b)
        sol = self._solver.solve()
        status = convex.map_status(sol.status)
        x = np.asarray(sol.x) if status is not SolveStatus.INFEASIBLE else None
        if status is SolveStatus.NUMERIC_FAILURE and x is not None:
            # Borderline subproblems (budget cone near equality) occasionally
            # trip the interior point's numerics after it has already found a
            # feasible near-solution; such a point is still a valid SCP
            # candidate since trust-region acceptance judges it on merit.
            if np.all(np.isfinite(x)) and self._residual_violation(x, b) <= 10 * self.config.feasibility_tol:
                status = SolveStatus.OPTIMAL
        return status, x, degenerate

    def _residual_violation(self, x: np.ndarray, b: np.ndarray) -> float:
        r = b - self._A_csc @ x
        worst = float(np.abs(r[: self.m_eq]).max()) if self.m_eq else 0.0
        if self.m_nn:
            nn = r[self.m_eq : self.m_eq + self.m_nn]
            worst = max(worst, float(-(nn.min())))
        if self._has_budget:
            soc = r[self.m_eq + self.m_nn :]
            worst = max(worst, float(np.linalg.norm(soc[1:]) - soc[0]))
        return worst
