"""Convex subproblem representation and solution.

Each SCP iteration produces one ConvexProgram: a quadratic objective with
linear equalities/inequalities, variable bounds, and optionally convex
quadratic inequalities (handled natively through a second-order-cone
reformulation, no outer linearization). Solved with Clarabel, an
interior-point conic solver; results are deterministic for fixed inputs.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
from scipy import sparse

DEFAULT_FEASIBILITY_TOL = 1e-6
DEFAULT_MAX_ITERATIONS = 200


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max-iterations"
    NUMERIC_FAILURE = "numeric-failure"


@dataclass
class QuadConstraint:
    """Convex quadratic inequality z' Q z + a' z + c <= 0 with Q PSD.

    Prefer supplying `factor` F with Q = F' F (e.g. when the constraint is
    ||F z - g||^2 <= rhs); it is used directly in the cone reformulation and
    avoids an eigenvalue factorization per solve.
    """

    a: np.ndarray
    c: float
    Q: np.ndarray | None = None
    factor: np.ndarray | None = None

    def __post_init__(self):
        if self.Q is None and self.factor is None:
            raise ValueError("QuadConstraint needs Q or factor")
        self.a = np.asarray(self.a, dtype=float)

    def quadratic_matrix(self) -> np.ndarray:
        if self.Q is not None:
            return np.asarray(self.Q, dtype=float)
        f = np.asarray(self.factor, dtype=float)
        return f.T @ f

    def cone_factor(self, psd_tol: float = 1e-10) -> np.ndarray:
        if self.factor is not None:
            return np.asarray(self.factor, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        vals, vecs = np.linalg.eigh(0.5 * (Q + Q.T))
        if vals.min() < -1e-8:
            raise ValueError(f"quadratic constraint matrix not PSD (min eig {vals.min():.3e})")
        keep = vals > psd_tol
        return (np.sqrt(vals[keep])[:, None] * vecs[:, keep].T)

    def value(self, z: np.ndarray) -> float:
        if self.factor is not None:
            Fz = self.factor @ z
            return float(Fz @ Fz + self.a @ z + self.c)
        Q = self.quadratic_matrix()
        return float(z @ Q @ z + self.a @ z + self.c)


@dataclass
class ConvexProgram:
    """cost(z) = 0.5 z' P z + q' z + r, subject to
    A_eq z = b_eq, A_in z <= b_in, quadratic inequalities, and lb <= z <= ub.
    """

    P: np.ndarray
    q: np.ndarray
    r: float = 0.0
    A_eq: np.ndarray | sparse.spmatrix | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | sparse.spmatrix | None = None
    b_in: np.ndarray | None = None
    quad_constraints: list[QuadConstraint] = field(default_factory=list)
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.q)

    def cost(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        Pz = self.P @ z
        return float(0.5 * z @ Pz + self.q @ z + self.r)

    def validate(self, psd_tol: float = 1e-8):
        """Check symmetry/PSD of the cost and dimension consistency."""
        n = self.n
        P = _to_dense(self.P)
        if P.shape != (n, n):
            raise ValueError(f"P shape {P.shape} does not match n={n}")
        if np.abs(P - P.T).max() > 1e-9:
            raise ValueError("cost matrix not symmetric")
        min_eig = float(np.linalg.eigvalsh(P).min())
        if min_eig < -psd_tol:
            raise ValueError(f"cost matrix not PSD (min eig {min_eig:.3e})")
        for A, b, name in ((self.A_eq, self.b_eq, "eq"), (self.A_in, self.b_in, "in")):
            if A is None:
                continue
            if A.shape[1] != n or A.shape[0] != len(b):
                raise ValueError(f"{name} constraint dimensions inconsistent")
        for qc in self.quad_constraints:
            if len(qc.a) != n:
                raise ValueError("quadratic constraint dimension mismatch")
        for bound in (self.lb, self.ub):
            if bound is not None and len(bound) != n:
                raise ValueError("bound dimension mismatch")


@dataclass
class FeasibilityReport:
    """Signed worst violation per constraint class (<= 0 means satisfied)."""

    equality: float
    inequality: float
    quadratic: float
    bounds: float

    @property
    def max_violation(self) -> float:
        return max(self.equality, self.inequality, self.quadratic, self.bounds)


@dataclass
class SolveResult:
    status: SolveStatus
    x: np.ndarray | None
    objective: float | None
    max_violation: float | None
    iterations: int
    solve_time: float


def check_feasibility(program: ConvexProgram, z) -> FeasibilityReport:
    """Signed violations of z per constraint class (0.0 for empty classes)."""
    z = np.asarray(z, dtype=float)
    if len(z) != program.n:
        raise ValueError(f"point has dimension {len(z)}, program has {program.n}")

    eq = 0.0
    if program.A_eq is not None and program.A_eq.shape[0]:
        eq = float(np.abs(program.A_eq @ z - program.b_eq).max())
    ineq = 0.0
    if program.A_in is not None and program.A_in.shape[0]:
        ineq = float((program.A_in @ z - program.b_in).max())
    quad = 0.0
    if program.quad_constraints:
        quad = max(qc.value(z) for qc in program.quad_constraints)
    bounds = 0.0
    if program.lb is not None:
        bounds = max(bounds, float((program.lb - z).max()))
    if program.ub is not None:
        bounds = max(bounds, float((z - program.ub).max()))
    return FeasibilityReport(equality=eq, inequality=ineq, quadratic=quad, bounds=bounds)


def _to_dense(M) -> np.ndarray:
    return M.toarray() if sparse.issparse(M) else np.asarray(M, dtype=float)


def _to_csr(M) -> sparse.csr_matrix:
    return M.tocsr() if sparse.issparse(M) else sparse.csr_matrix(np.asarray(M, dtype=float))


_STATUS_BY_NAME = {
    "Solved": SolveStatus.OPTIMAL,
    "AlmostSolved": SolveStatus.OPTIMAL,
    "PrimalInfeasible": SolveStatus.INFEASIBLE,
    "AlmostPrimalInfeasible": SolveStatus.INFEASIBLE,
    "DualInfeasible": SolveStatus.NUMERIC_FAILURE,
    "AlmostDualInfeasible": SolveStatus.NUMERIC_FAILURE,
    "MaxIterations": SolveStatus.MAX_ITERATIONS,
    "MaxTime": SolveStatus.MAX_ITERATIONS,
}

STATUS_MAP = {
    getattr(clarabel.SolverStatus, name): status
    for name, status in _STATUS_BY_NAME.items()
    if hasattr(clarabel.SolverStatus, name)
}


def map_status(raw) -> SolveStatus:
    return STATUS_MAP.get(raw, _STATUS_BY_NAME.get(str(raw), SolveStatus.NUMERIC_FAILURE))


def make_settings(tol: float, max_iterations: int) -> "clarabel.DefaultSettings":
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iterations
    # One order tighter than the feasibility contract; the defaults (1e-8)
    # spend extra interior-point iterations the callers never rely on.
    eps = min(0.1 * tol, 1e-7)
    settings.tol_gap_abs = eps
    settings.tol_gap_rel = eps
    settings.tol_feas = eps
    return settings


def solve_canonical(P_csc, q, A_csc, b, cones, settings):
    """Solve min 0.5 z'Pz + q'z s.t. b - A z in cones; returns (status, x, iters)."""
    solver = clarabel.DefaultSolver(P_csc, q, A_csc, b, cones, settings)
    sol = solver.solve()
    status = map_status(sol.status)
    x = np.asarray(sol.x, dtype=float) if status is not SolveStatus.INFEASIBLE else None
    return status, x, int(sol.iterations)


def solve(
    program: ConvexProgram,
    warm_start: np.ndarray | None = None,
    tol: float = DEFAULT_FEASIBILITY_TOL,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
) -> SolveResult:
    """Solve the program; never raises for infeasible or failed solves.

    warm_start is accepted for interface stability but unused: the
    interior-point method restarts cold and is already deterministic.
    """
    del warm_start
    t0 = time.perf_counter()
    n = program.n

    # Assemble one dense constraint matrix, then convert to CSC in a single
    # pass; repeated small sparse constructions dominate runtime otherwise.
    m_eq = program.A_eq.shape[0] if program.A_eq is not None else 0
    m_in = program.A_in.shape[0] if program.A_in is not None else 0
    lb_idx = (
        np.flatnonzero(np.isfinite(program.lb)) if program.lb is not None else np.empty(0, int)
    )
    ub_idx = (
        np.flatnonzero(np.isfinite(program.ub)) if program.ub is not None else np.empty(0, int)
    )
    factors = [qc.cone_factor() for qc in program.quad_constraints]
    m_soc = sum(f.shape[0] + 2 for f in factors)
    m_nn = m_in + len(lb_idx) + len(ub_idx)

    A = np.zeros((m_eq + m_nn + m_soc, n))
    b = np.zeros(m_eq + m_nn + m_soc)
    cones = []
    row = 0
    if m_eq:
        A[:m_eq] = _to_dense(program.A_eq)
        b[:m_eq] = program.b_eq
        cones.append(clarabel.ZeroConeT(m_eq))
        row = m_eq
    if m_nn:
        if m_in:
            A[row : row + m_in] = _to_dense(program.A_in)
            b[row : row + m_in] = program.b_in
            row += m_in
        if len(lb_idx):
            A[row + np.arange(len(lb_idx)), lb_idx] = -1.0
            b[row : row + len(lb_idx)] = -program.lb[lb_idx]
            row += len(lb_idx)
        if len(ub_idx):
            A[row + np.arange(len(ub_idx)), ub_idx] = 1.0
            b[row : row + len(ub_idx)] = program.ub[ub_idx]
            row += len(ub_idx)
        cones.append(clarabel.NonnegativeConeT(m_nn))
    # z'Qz + a'z + c <= 0 with Q = F'F becomes the second-order cone
    # || (2 F z, 1 + a'z + c) || <= 1 - a'z - c.
    for qc, F in zip(program.quad_constraints, factors):
        k = F.shape[0]
        A[row] = qc.a
        b[row] = 1.0 - qc.c
        A[row + 1 : row + 1 + k] = -2.0 * F
        A[row + 1 + k] = -qc.a
        b[row + 1 + k] = 1.0 + qc.c
        cones.append(clarabel.SecondOrderConeT(k + 2))
        row += k + 2

    settings = make_settings(tol, max_iterations)
    P = sparse.csc_matrix(np.triu(_to_dense(program.P)))
    status, x, iterations = solve_canonical(
        P, np.asarray(program.q, dtype=float), sparse.csc_matrix(A), b, cones, settings
    )
    elapsed = time.perf_counter() - t0

    if status is not SolveStatus.OPTIMAL:
        x = x if status is SolveStatus.MAX_ITERATIONS else None
        return SolveResult(status, x, None, None, iterations, elapsed)

    violation = check_feasibility(program, x).max_violation
    if violation > tol:
        return SolveResult(
            SolveStatus.NUMERIC_FAILURE, x, program.cost(x), violation, iterations, elapsed
        )
    return SolveResult(SolveStatus.OPTIMAL, x, program.cost(x), violation, iterations, elapsed)


def dump_program(program: ConvexProgram, path):
    """Write a self-describing JSON dump of the program for offline inspection."""
    doc = {
        "format": "socnav-convex-program",
        "version": 1,
        "description": (
            "Quadratic program: minimize 0.5 z'Pz + q'z + r subject to "
            "A_eq z = b_eq, A_in z <= b_in, quadratic inequalities "
            "z'Qz + a'z + c <= 0, and lb <= z <= ub."
        ),
        "n": program.n,
        "objective": {
            "P": _to_dense(program.P).tolist(),
            "q": np.asarray(program.q).tolist(),
            "r": program.r,
        },
        "equalities": None
        if program.A_eq is None
        else {"A": _to_dense(program.A_eq).tolist(), "b": np.asarray(program.b_eq).tolist()},
        "inequalities": None
        if program.A_in is None
        else {"A": _to_dense(program.A_in).tolist(), "b": np.asarray(program.b_in).tolist()},
        "quadratic_inequalities": [
            {"Q": qc.quadratic_matrix().tolist(), "a": qc.a.tolist(), "c": qc.c}
            for qc in program.quad_constraints
        ],
        "bounds": {
            "lb": None if program.lb is None else [_json_float(v) for v in program.lb],
            "ub": None if program.ub is None else [_json_float(v) for v in program.ub],
        },
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def _json_float(v: float):
    if np.isneginf(v):
        return "-inf"
    if np.isposinf(v):
        return "inf"
    return float(v)
