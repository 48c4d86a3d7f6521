"""Realtime human-in-the-loop service.

A fixed-rate loop steps the world at the simulation period: each tick reads
the latest client command (zero-order hold on the last one received), plans
the robot within the tick budget, steps all agents simultaneously, and
broadcasts the world state. Planner overruns never stall the loop; the robot
holds its previous control and the overrun is logged. Sessions record the
per-tick inputs and overrun decisions, so they replay headlessly to a
byte-identical episode log.

Wire protocol (length-delimited JSON over a websocket), schema version 1:
  client -> server
    {"type": "hello", "schema": 1}
    {"type": "input", "schema": 1, "t_client": <s>, "omega": <rad/s>, "a": <m/s2>}
    {"type": "input", "schema": 1, "t_client": <s>,
     "keys": {"up": bool, "down": bool, "left": bool, "right": bool}}
  server -> client
    {"type": "hello", "schema": 1, "dt": <s>, "collision_radius": <m>,
     "goals": {...}, "walls": [...]}
    {"type": "state", "schema": 1, "tick": <int>, "sim_time": <s>,
     "agents": [{"id", "x", "y", "theta", "v"}...],
     "plan_preview": [[x, y]...], "paused": bool}
    {"type": "pause", "schema": 1, "reason": <str>}
    {"type": "error", "schema": 1, "message": <str>}
"""

from __future__ import annotations

import asyncio
import http
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, simulation
from .dynamics import AgentControl, AgentState, Trajectory, step
from .simulation import EpisodeLog, Scenario, StepDiagnostics

WIRE_SCHEMA = 1
TICK_BUDGET = 0.1  # seconds; equals the simulation period (10 Hz)
STALE_INPUT_TIMEOUT = 1.0


@dataclass
class TickRecord:
    """Everything needed to reproduce one tick headlessly."""

    tick: int
    omega: float
    a: float
    overrun: bool

    def to_dict(self) -> dict:
        return {"tick": self.tick, "omega": self.omega, "a": self.a, "overrun": self.overrun}

    @classmethod
    def from_dict(cls, d: dict) -> "TickRecord":
        return cls(tick=d["tick"], omega=d["omega"], a=d["a"], overrun=d["overrun"])


@dataclass
class SessionRecording:
    scenario: Scenario
    ticks: list[TickRecord] = field(default_factory=list)
    truncated: bool = False

    def to_dict(self) -> dict:
        return {
            "schema_version": WIRE_SCHEMA,
            "scenario": self.scenario.to_dict(),
            "ticks": [t.to_dict() for t in self.ticks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionRecording":
        return cls(
            scenario=Scenario.from_dict(d["scenario"]),
            ticks=[TickRecord.from_dict(t) for t in d["ticks"]],
        )


def save_recording(rec: SessionRecording, path):
    with open(path, "w") as f:
        json.dump(rec.to_dict(), f, indent=1, sort_keys=True)


def load_recording(path) -> SessionRecording:
    with open(path) as f:
        return SessionRecording.from_dict(json.load(f))


def translate_keys(keys: dict, limits) -> tuple[float, float]:
    """Discrete key-state to (omega, a): up/down full acceleration range,
    left/right full turn-rate range (left turns counterclockwise)."""
    omega = 0.0
    if keys.get("left"):
        omega += limits.omega_bounds[1]
    if keys.get("right"):
        omega += limits.omega_bounds[0]
    a = 0.0
    if keys.get("up"):
        a += limits.a_bounds[1]
    if keys.get("down"):
        a += limits.a_bounds[0]
    return omega, a


class HitlSim:
    """Headless core of the loop: one planner-driven robot, one externally
    driven human, constant-velocity peripherals."""

    def __init__(self, scenario: Scenario):
        roles = {spec.role: spec for spec in scenario.agents}
        if set(roles) != {"robot", "human"} or len(scenario.agents) != 2:
            raise ValueError("HITL needs exactly one robot and one human agent")
        self.scenario = scenario
        self.robot_spec = roles["robot"]
        self.human_spec = roles["human"]
        self.policy = baselines.make_policy(
            self.robot_spec.policy,
            planner_config=self.robot_spec.planner_config,
            model_config=self.robot_spec.model_config,
            sfm_params=self.robot_spec.sfm_params,
        )
        self.limits = self.robot_spec.planner_config.limits
        self.human_limits = self.human_spec.planner_config.limits
        self.dt = scenario.dt
        self.tick = 0
        self.robot = self.robot_spec.start
        self.human = self.human_spec.start
        self.peripheral_positions = [
            np.asarray(p.position, dtype=float) for p in scenario.peripherals
        ]
        self.last_robot_control = AgentControl(0.0, 0.0)
        self.plan_preview: list = []
        self.records: list[TickRecord] = []
        self.diagnostics: list[StepDiagnostics] = []
        self._robot_states = [self.robot.as_array()]
        self._human_states = [self.human.as_array()]
        self._robot_controls: list = []
        self._human_controls: list = []
        self.overruns = 0
        self.planning_times: list[float] = []

    def clamp_input(self, omega: float, a: float) -> AgentControl:
        return self.human_limits.clamp_control(AgentControl(omega, a))

    def step_once(self, human_control: AgentControl, force_overrun: bool | None = None) -> dict:
        """Advance one tick; force_overrun replays a recorded decision."""
        obs = baselines.Observation(
            own=self.robot,
            goal=self.robot_spec.goal,
            others=self._observed_others(),
            walls=self.scenario.walls,
            dt=self.dt,
        )
        t0 = time.perf_counter()
        diag = StepDiagnostics()
        planned = None
        try:
            planned, info = self.policy.control(obs)
            positions = info.get("plan_positions")
            diag = StepDiagnostics(
                solve_time=float(info.get("solve_time", 0.0)),
                scp_iterations=int(info.get("scp_iterations", 0)),
                slack_sum=float(info.get("slack_sum", 0.0)),
                inconvenience=float(info.get("inconvenience", 0.0)),
                converged=bool(info.get("converged", True)),
            )
        except Exception:
            positions = None
            diag = StepDiagnostics(failed=True)
        elapsed = time.perf_counter() - t0
        self.planning_times.append(elapsed)
        overrun = (elapsed > TICK_BUDGET or planned is None) if force_overrun is None else force_overrun
        if positions is not None:
            self.plan_preview = positions
        if overrun or planned is None:
            robot_control = self.last_robot_control
            self.overruns += 1
        else:
            robot_control = planned

        self.robot = step(self.robot, robot_control, self.dt, self.limits)
        self.human = step(self.human, human_control, self.dt, self.human_limits)
        for k, periph in enumerate(self.scenario.peripherals):
            self.peripheral_positions[k] = self.peripheral_positions[k] + self.dt * np.asarray(
                periph.velocity
            )
        self.last_robot_control = robot_control
        self.tick += 1
        self.records.append(
            TickRecord(
                tick=self.tick, omega=human_control.omega, a=human_control.a, overrun=bool(overrun)
            )
        )
        self.diagnostics.append(diag)
        self._robot_states.append(self.robot.as_array())
        self._human_states.append(self.human.as_array())
        self._robot_controls.append(robot_control.as_array())
        self._human_controls.append(human_control.as_array())
        return self.state_message()

    def _observed_others(self):
        others = [
            baselines.ObservedAgent(state=self.human, goal=self.human_spec.goal, interactive=True)
        ]
        for pos, periph in zip(self.peripheral_positions, self.scenario.peripherals):
            others.append(
                baselines.ObservedAgent(
                    state=AgentState(
                        pos[0], pos[1],
                        float(np.arctan2(periph.velocity[1], periph.velocity[0])),
                        float(np.hypot(*periph.velocity)),
                    ),
                    goal=None,
                    interactive=False,
                )
            )
        return tuple(others)

    def state_message(self, paused: bool = False) -> dict:
        agents = [
            {"id": self.robot_spec.agent_id, "x": self.robot.x, "y": self.robot.y,
             "theta": self.robot.theta, "v": self.robot.v},
            {"id": self.human_spec.agent_id, "x": self.human.x, "y": self.human.y,
             "theta": self.human.theta, "v": self.human.v},
        ]
        for k, pos in enumerate(self.peripheral_positions):
            periph = self.scenario.peripherals[k]
            agents.append(
                {"id": f"peripheral_{k}", "x": float(pos[0]), "y": float(pos[1]),
                 "theta": float(np.arctan2(periph.velocity[1], periph.velocity[0])),
                 "v": float(np.hypot(*periph.velocity))}
            )
        return {
            "type": "state",
            "schema": WIRE_SCHEMA,
            "tick": self.tick,
            "sim_time": round(self.tick * self.dt, 10),
            "agents": agents,
            "plan_preview": [[float(x), float(y)] for x, y in self.plan_preview],
            "paused": paused,
        }

    def hello_message(self) -> dict:
        return {
            "type": "hello",
            "schema": WIRE_SCHEMA,
            "dt": self.dt,
            "collision_radius": self.robot_spec.planner_config.collision_radius,
            "human_id": self.human_spec.agent_id,
            "limits": {
                "omega": list(self.human_limits.omega_bounds),
                "a": list(self.human_limits.a_bounds),
            },
            "goals": {
                self.robot_spec.agent_id: list(self.robot_spec.goal),
                self.human_spec.agent_id: list(self.human_spec.goal),
            },
            "walls": [w.to_dict() for w in self.scenario.walls],
        }

    def to_episode_log(self) -> EpisodeLog:
        n = self.tick
        trajectories = {
            self.robot_spec.agent_id: Trajectory(
                states=np.asarray(self._robot_states),
                controls=np.asarray(self._robot_controls).reshape(n, 2),
                dt=self.dt,
            ),
            self.human_spec.agent_id: Trajectory(
                states=np.asarray(self._human_states),
                controls=np.asarray(self._human_controls).reshape(n, 2),
                dt=self.dt,
            ),
        }
        return EpisodeLog(
            scenario=self.scenario,
            seed=self.scenario.seed,
            trajectories=trajectories,
            diagnostics={self.robot_spec.agent_id: list(self.diagnostics)},
            flags=("hitl",),
        )

    def recording(self) -> SessionRecording:
        return SessionRecording(scenario=self.scenario, ticks=list(self.records))


def replay(recording: SessionRecording) -> EpisodeLog:
    """Re-run a recorded session headlessly; reproduces the live log exactly.

    Recorded inputs are applied tick for tick, and the recorded overrun
    decisions are honored instead of re-measuring wall time (which is the
    only nondeterministic input to the loop). Truncated recordings replay up
    to the truncation point; the resulting log is flagged.
    """
    sim = HitlSim(recording.scenario)
    for record in recording.ticks:
        control = sim.clamp_input(record.omega, record.a)
        sim.step_once(control, force_overrun=record.overrun)
    log = sim.to_episode_log()
    if recording.truncated:
        log = EpisodeLog(
            scenario=log.scenario, seed=log.seed, trajectories=log.trajectories,
            diagnostics=log.diagnostics, flags=log.flags + ("truncated-recording",),
        )
    return log


def default_scenario() -> Scenario:
    """Head-on scene with a planner robot and an externally driven human."""
    return simulation.generate_headon(seed=0, relative_heading=0.0)


class HitlServer:
    """Transport layer: one driving client, fixed-rate loop, broadcasts."""

    def __init__(self, scenario: Scenario, static_dir: str | None = None):
        self.sim = HitlSim(scenario)
        self.static_dir = Path(static_dir) if static_dir else None
        self.client = None
        self.latest_input: tuple[float, AgentControl] | None = None
        self.dropped_messages = 0
        self._stop = asyncio.Event()

    # -- message handling ----------------------------------------------
    async def handle_client(self, websocket):
        hello_raw = await websocket.recv()
        try:
            hello = json.loads(hello_raw)
            assert hello.get("type") == "hello"
        except Exception:
            await websocket.send(json.dumps(
                {"type": "error", "schema": WIRE_SCHEMA, "message": "expected hello"}
            ))
            return
        if hello.get("schema") != WIRE_SCHEMA:
            await websocket.send(json.dumps(
                {"type": "error", "schema": WIRE_SCHEMA,
                 "message": f"schema mismatch: server speaks {WIRE_SCHEMA}"}
            ))
            return
        if self.client is not None:
            await websocket.send(json.dumps(
                {"type": "error", "schema": WIRE_SCHEMA, "message": "session occupied"}
            ))
            return
        self.client = websocket
        await websocket.send(json.dumps(self.sim.hello_message()))
        try:
            async for raw in websocket:
                self._ingest(raw)
        finally:
            self.client = None
            self.latest_input = None  # pause until a client reconnects

    def _ingest(self, raw):
        try:
            msg = json.loads(raw)
            if msg.get("type") != "input" or msg.get("schema") != WIRE_SCHEMA:
                raise ValueError("not an input message")
            if "keys" in msg:
                omega, a = translate_keys(msg["keys"], self.sim.human_limits)
            else:
                omega, a = float(msg["omega"]), float(msg["a"])
        except Exception:
            self.dropped_messages += 1
            return
        # single latest-input slot, clamped on ingestion
        self.latest_input = (time.monotonic(), self.sim.clamp_input(omega, a))

    # -- fixed-rate loop -------------------------------------------------
    async def run_loop(self):
        next_tick = time.monotonic()
        while not self._stop.is_set():
            now = time.monotonic()
            if now < next_tick:
                await asyncio.sleep(next_tick - now)
            next_tick = max(next_tick + self.sim.dt, time.monotonic())
            if self.client is None or self.latest_input is None:
                continue  # paused: no client yet, or never received input
            received, control = self.latest_input
            if time.monotonic() - received > STALE_INPUT_TIMEOUT:
                await self._send(json.dumps(
                    {"type": "pause", "schema": WIRE_SCHEMA, "reason": "stale input"}
                ))
                continue
            state = self.sim.step_once(control)
            await self._send(json.dumps(state))

    async def _send(self, payload: str):
        client = self.client
        if client is None:
            return
        try:
            await client.send(payload)
        except Exception:
            self.client = None

    def stop(self):
        self._stop.set()

    # -- HTTP for the static client --------------------------------------
    def process_request(self, connection, request):
        if request.headers.get("Upgrade", "").lower() == "websocket":
            return None  # continue the websocket handshake
        from websockets.datastructures import Headers
        from websockets.http11 import Response

        def http_response(status, content_type, body: bytes):
            headers = Headers(
                [("Content-Type", content_type), ("Content-Length", str(len(body)))]
            )
            return Response(status.value, status.phrase, headers, body)

        if self.static_dir is None:
            return http_response(
                http.HTTPStatus.NOT_FOUND, "text/plain", b"no static dir configured\n"
            )
        name = "index.html" if request.path in ("/", "") else request.path.lstrip("/")
        target = (self.static_dir / name).resolve()
        if not str(target).startswith(str(self.static_dir.resolve())) or not target.is_file():
            return http_response(http.HTTPStatus.NOT_FOUND, "text/plain", b"not found\n")
        content_types = {
            ".html": "text/html", ".js": "text/javascript", ".css": "text/css",
            ".map": "application/json", ".json": "application/json",
        }
        return http_response(
            http.HTTPStatus.OK,
            content_types.get(target.suffix, "application/octet-stream"),
            target.read_bytes(),
        )

    async def serve(self, host: str, port: int):
        from websockets.asyncio.server import serve as ws_serve

        async with ws_serve(
            self.handle_client, host, port, process_request=self.process_request
        ):
            await self.run_loop()


def serve(scenario: Scenario, bind: str, static_dir: str | None = None):
    """Blocking entry point: run the loop until interrupted."""
    host, _, port = bind.rpartition(":")
    server = HitlServer(scenario, static_dir)
    try:
        asyncio.run(server.serve(host or "127.0.0.1", int(port)))
    except KeyboardInterrupt:
        pass
    return server


def run_server_cli(scenario_path: str | None, bind: str, static_dir: str | None) -> int:
    scenario = simulation.load_scenario(scenario_path) if scenario_path else default_scenario()
    print(f"serving HITL on {bind} (scenario {scenario.name!r}, "
          f"robot policy {scenario.agents[0].policy!r})")
    serve(scenario, bind, static_dir)
    return 0
