"""Dynamically extended unicycle model.

State is [x, y, theta, v] (position, heading, forward speed), control is
[omega, a] (turn rate, longitudinal acceleration). The discrete step is the
exact zero-order-hold integral of the continuous dynamics
xdot = [v cos(theta), v sin(theta), omega, a], with an analytic series
fallback for |omega * dt| below 1e-6. Jacobians are taken of the same
discrete map, so optimizer constraints describe simulation behavior to
first order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this |omega * dt| the closed form cancels catastrophically (its error
# grows like eps / omega^2); switch to a third-order-in-omega series expansion
# of the same integrals, whose truncation error is O((omega dt)^4).
_SERIES_THRESHOLD = 1e-3


@dataclass(frozen=True)
class Limits:
    """Control and speed bounds. Speed lower bound must be nonnegative."""

    omega_bounds: tuple[float, float] = (-1.0, 1.0)
    a_bounds: tuple[float, float] = (-1.5, 1.5)
    v_bounds: tuple[float, float] = (0.0, 1.5)

    def __post_init__(self):
        for name in ("omega_bounds", "a_bounds", "v_bounds"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.v_bounds[0] < 0.0:
            raise ValueError("speed lower bound must be >= 0")

    def clamp_speed(self, v: float) -> float:
        return float(min(max(v, self.v_bounds[0]), self.v_bounds[1]))

    def clamp_control(self, control: "AgentControl") -> "AgentControl":
        return AgentControl(
            omega=float(np.clip(control.omega, *self.omega_bounds)),
            a=float(np.clip(control.a, *self.a_bounds)),
        )

    def to_dict(self) -> dict:
        return {
            "omega_bounds": list(self.omega_bounds),
            "a_bounds": list(self.a_bounds),
            "v_bounds": list(self.v_bounds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Limits":
        return cls(
            omega_bounds=tuple(d["omega_bounds"]),
            a_bounds=tuple(d["a_bounds"]),
            v_bounds=tuple(d["v_bounds"]),
        )


@dataclass(frozen=True)
class AgentState:
    """Unicycle state: position [m], heading [rad], forward speed [m/s]."""

    x: float
    y: float
    theta: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "AgentState":
        x, y, theta, v = (float(c) for c in arr)
        return cls(x, y, theta, v)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        """Planar velocity vector (v cos(theta), v sin(theta))."""
        return np.array([self.v * np.cos(self.theta), self.v * np.sin(self.theta)])


@dataclass(frozen=True)
class AgentControl:
    """Unicycle control: turn rate [rad/s], longitudinal acceleration [m/s^2]."""

    omega: float
    a: float

    def as_array(self) -> np.ndarray:
        return np.array([self.omega, self.a], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "AgentControl":
        omega, a = (float(c) for c in arr)
        return cls(omega, a)


@dataclass(frozen=True)
class Trajectory:
    """Paired state/control sequences with one more state than controls.

    states has shape (N, 4) and controls shape (N-1, 2); a trajectory
    produced by rollout() satisfies states[t+1] = step(states[t], controls[t]).
    """

    states: np.ndarray
    controls: np.ndarray
    dt: float

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        controls = np.asarray(self.controls, dtype=float)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)
        if states.ndim != 2 or states.shape[1] != 4:
            raise ValueError(f"states must be (N, 4), got {states.shape}")
        if controls.ndim != 2 or controls.shape[1] != 2:
            raise ValueError(f"controls must be (N-1, 2), got {controls.shape}")
        if len(states) != len(controls) + 1:
            raise ValueError(
                f"got {len(states)} states for {len(controls)} controls; "
                "need exactly one more state than controls"
            )
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def __len__(self) -> int:
        return len(self.states)

    def state(self, t: int) -> AgentState:
        return AgentState.from_array(self.states[t])

    def control(self, t: int) -> AgentControl:
        return AgentControl.from_array(self.controls[t])

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    @property
    def headings(self) -> np.ndarray:
        return self.states[:, 2]

    @property
    def speeds(self) -> np.ndarray:
        return self.states[:, 3]

    @property
    def velocities(self) -> np.ndarray:
        """Planar velocity vectors, shape (N, 2)."""
        return self.states[:, 3:4] * np.stack(
            [np.cos(self.states[:, 2]), np.sin(self.states[:, 2])], axis=1
        )

    def to_dict(self) -> dict:
        return {
            "states": self.states.tolist(),
            "controls": self.controls.tolist(),
            "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            states=np.asarray(d["states"], dtype=float),
            controls=np.asarray(d["controls"], dtype=float),
            dt=float(d["dt"]),
        )


def _zoh_integrals(theta, v, omega, a, dt):
    """Moments of the ZOH position integral, vectorized over leading dims.

    Returns (Ic, Is, C1, S1, C2, S2, Jc, Js) where
      Ic = int (v + a s) cos(theta + omega s) ds     (x displacement)
      Is = int (v + a s) sin(theta + omega s) ds     (y displacement)
      C1 = int cos ds, S1 = int sin ds               (d displacement / d v)
      C2 = int s cos ds, S2 = int s sin ds           (d displacement / d a)
      Jc = int s (v + a s) cos ds                    (d y' / d omega)
      Js = int s (v + a s) sin ds                    (-d x' / d omega)
    all integrated over s in [0, dt].
    """
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    omega = np.asarray(omega, dtype=float)
    a = np.asarray(a, dtype=float)

    small = np.abs(omega * dt) < _SERIES_THRESHOLD
    # Avoid 0/0 in the closed-form branch; its results are discarded where small.
    w = np.where(small, 1.0, omega)

    sin0, cos0 = np.sin(theta), np.cos(theta)
    theta1 = theta + omega * dt
    sin1, cos1 = np.sin(theta1), np.cos(theta1)

    c1_exact = (sin1 - sin0) / w
    s1_exact = (cos0 - cos1) / w
    c2_exact = dt * sin1 / w + (cos1 - cos0) / w**2
    s2_exact = -dt * cos1 / w + (sin1 - sin0) / w**2
    c3_exact = dt**2 * sin1 / w - 2.0 * s2_exact / w
    s3_exact = -(dt**2) * cos1 / w + 2.0 * c2_exact / w

    # Third-order series in omega around 0 (error O((omega dt)^4)).
    w2, w3 = omega**2, omega**3
    c1_series = (
        cos0 * (dt - w2 * dt**3 / 6.0) - sin0 * (omega * dt**2 / 2.0 - w3 * dt**4 / 24.0)
    )
    s1_series = (
        sin0 * (dt - w2 * dt**3 / 6.0) + cos0 * (omega * dt**2 / 2.0 - w3 * dt**4 / 24.0)
    )
    c2_series = (
        cos0 * (dt**2 / 2.0 - w2 * dt**4 / 8.0) - sin0 * (omega * dt**3 / 3.0 - w3 * dt**5 / 30.0)
    )
    s2_series = (
        sin0 * (dt**2 / 2.0 - w2 * dt**4 / 8.0) + cos0 * (omega * dt**3 / 3.0 - w3 * dt**5 / 30.0)
    )
    c3_series = (
        cos0 * (dt**3 / 3.0 - w2 * dt**5 / 10.0) - sin0 * (omega * dt**4 / 4.0 - w3 * dt**6 / 36.0)
    )
    s3_series = (
        sin0 * (dt**3 / 3.0 - w2 * dt**5 / 10.0) + cos0 * (omega * dt**4 / 4.0 - w3 * dt**6 / 36.0)
    )

    C1 = np.where(small, c1_series, c1_exact)
    S1 = np.where(small, s1_series, s1_exact)
    C2 = np.where(small, c2_series, c2_exact)
    S2 = np.where(small, s2_series, s2_exact)
    C3 = np.where(small, c3_series, c3_exact)
    S3 = np.where(small, s3_series, s3_exact)

    Ic = v * C1 + a * C2
    Is = v * S1 + a * S2
    Jc = v * C2 + a * C3
    Js = v * S2 + a * S3
    return Ic, Is, C1, S1, C2, S2, Jc, Js


def step_array(states, controls, dt: float, limits: Limits | None = None) -> np.ndarray:
    """Exact ZOH step on raw arrays, vectorized over leading dimensions.

    states (..., 4), controls (..., 2) -> next states (..., 4). When limits
    is given, output speed is clamped into v_bounds (controls are the
    caller's responsibility).
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    theta, v = states[..., 2], states[..., 3]
    omega, a = controls[..., 0], controls[..., 1]

    Ic, Is, *_ = _zoh_integrals(theta, v, omega, a, dt)
    out = np.empty(np.broadcast_shapes(states.shape[:-1], controls.shape[:-1]) + (4,))
    out[..., 0] = states[..., 0] + Ic
    out[..., 1] = states[..., 1] + Is
    out[..., 2] = theta + omega * dt
    out[..., 3] = v + a * dt
    if limits is not None:
        out[..., 3] = np.clip(out[..., 3], *limits.v_bounds)
    return out


def step(
    state: AgentState, control: AgentControl, dt: float, limits: Limits | None = None
) -> AgentState:
    """Advance one state by dt under constant control (exact ZOH integral)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s, u = state.as_array(), control.as_array()
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or control")
    return AgentState.from_array(step_array(s, u, dt, limits))


def linearize_array(states, controls, dt: float):
    """Jacobians of the (unclamped) discrete step, vectorized.

    Returns (A, B, c) with shapes (..., 4, 4), (..., 4, 2), (..., 4) such
    that step(x, u) ~= A x + B u + c to first order around each input point.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    theta, v = states[..., 2], states[..., 3]
    omega, a = controls[..., 0], controls[..., 1]

    Ic, Is, C1, S1, C2, S2, Jc, Js = _zoh_integrals(theta, v, omega, a, dt)
    shape = np.broadcast_shapes(states.shape[:-1], controls.shape[:-1])

    A = np.zeros(shape + (4, 4))
    A[..., 0, 0] = 1.0
    A[..., 1, 1] = 1.0
    A[..., 2, 2] = 1.0
    A[..., 3, 3] = 1.0
    A[..., 0, 2] = -Is
    A[..., 0, 3] = C1
    A[..., 1, 2] = Ic
    A[..., 1, 3] = S1

    B = np.zeros(shape + (4, 2))
    B[..., 0, 0] = -Js
    B[..., 0, 1] = C2
    B[..., 1, 0] = Jc
    B[..., 1, 1] = S2
    B[..., 2, 0] = dt
    B[..., 3, 1] = dt

    nxt = step_array(states, controls, dt)
    c = nxt - np.einsum("...ij,...j->...i", A, states) - np.einsum(
        "...ij,...j->...i", B, controls
    )
    return A, B, c


def linearize(state: AgentState, control: AgentControl, dt: float):
    """First-order Taylor expansion of step around (state, control)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s, u = state.as_array(), control.as_array()
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or control")
    return linearize_array(s, u, dt)


def _step_scalar(x, y, theta, v, omega, a, dt, v_bounds):
    """Scalar fast path of step_array; same branches, plain math."""
    if abs(omega * dt) < _SERIES_THRESHOLD:
        sin0, cos0 = math.sin(theta), math.cos(theta)
        w2, w3 = omega * omega, omega * omega * omega
        c1 = cos0 * (dt - w2 * dt**3 / 6.0) - sin0 * (omega * dt**2 / 2.0 - w3 * dt**4 / 24.0)
        s1 = sin0 * (dt - w2 * dt**3 / 6.0) + cos0 * (omega * dt**2 / 2.0 - w3 * dt**4 / 24.0)
        c2 = cos0 * (dt**2 / 2.0 - w2 * dt**4 / 8.0) - sin0 * (
            omega * dt**3 / 3.0 - w3 * dt**5 / 30.0
        )
        s2 = sin0 * (dt**2 / 2.0 - w2 * dt**4 / 8.0) + cos0 * (
            omega * dt**3 / 3.0 - w3 * dt**5 / 30.0
        )
    else:
        sin0, cos0 = math.sin(theta), math.cos(theta)
        theta1 = theta + omega * dt
        sin1, cos1 = math.sin(theta1), math.cos(theta1)
        c1 = (sin1 - sin0) / omega
        s1 = (cos0 - cos1) / omega
        c2 = dt * sin1 / omega + (cos1 - cos0) / omega**2
        s2 = -dt * cos1 / omega + (sin1 - sin0) / omega**2
    v_next = v + a * dt
    if v_bounds is not None:
        v_next = min(max(v_next, v_bounds[0]), v_bounds[1])
    return (x + v * c1 + a * c2, y + v * s1 + a * s2, theta + omega * dt, v_next)


def rollout(
    initial: AgentState, controls, dt: float, limits: Limits | None = None
) -> Trajectory:
    """Iterate step over a control sequence; controls shape (N, 2) or list."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    if controls.size == 0:
        raise ValueError("controls must be non-empty")
    states = np.empty((len(controls) + 1, 4))
    x, y, theta, v = initial.x, initial.y, initial.theta, initial.v
    states[0] = (x, y, theta, v)
    if not np.all(np.isfinite(states[0])) or not np.all(np.isfinite(controls)):
        raise ValueError("non-finite initial state or controls")
    v_bounds = limits.v_bounds if limits is not None else None
    ulist = controls.tolist()
    for t, (omega, a) in enumerate(ulist):
        x, y, theta, v = _step_scalar(x, y, theta, v, omega, a, dt, v_bounds)
        states[t + 1] = (x, y, theta, v)
    return Trajectory(states=states, controls=controls, dt=dt)
