// Wire protocol shared with the server (length-delimited JSON over a
// websocket). Schema version 1; the handshake refuses anything else.

export const WIRE_SCHEMA = 1;

export interface AgentView {
  id: string;
  x: number;
  y: number;
  theta: number;
  v: number;
}

export interface HelloMsg {
  type: "hello";
  schema: number;
  dt: number;
  collision_radius: number;
  human_id: string;
  limits: { omega: [number, number]; a: [number, number] };
  goals: Record<string, [number, number]>;
  walls: { normal: [number, number]; offset: number }[];
}

export interface StateMsg {
  type: "state";
  schema: number;
  tick: number;
  sim_time: number;
  agents: AgentView[];
  plan_preview: [number, number][];
  paused: boolean;
}

export interface PauseMsg {
  type: "pause";
  schema: number;
  reason: string;
}

export interface ErrorMsg {
  type: "error";
  schema: number;
  message: string;
}

export type ServerMsg = HelloMsg | StateMsg | PauseMsg | ErrorMsg;

export interface InputMsg {
  type: "input";
  schema: number;
  t_client: number;
  omega: number;
  a: number;
}

export function makeHello(): string {
  return JSON.stringify({ type: "hello", schema: WIRE_SCHEMA });
}

export function makeInput(omega: number, a: number, tClient: number): string {
  const msg: InputMsg = {
    type: "input",
    schema: WIRE_SCHEMA,
    t_client: tClient,
    omega,
    a,
  };
  return JSON.stringify(msg);
}

/** Parse a server message; returns null for anything malformed. */
export function parseServerMsg(raw: string): ServerMsg | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null) return null;
  const msg = data as Record<string, unknown>;
  if (typeof msg.type !== "string") return null;
  switch (msg.type) {
    case "hello":
      if (typeof msg.dt !== "number" || typeof msg.collision_radius !== "number") return null;
      return msg as unknown as HelloMsg;
    case "state":
      if (typeof msg.tick !== "number" || !Array.isArray(msg.agents)) return null;
      return msg as unknown as StateMsg;
    case "pause":
      return msg as unknown as PauseMsg;
    case "error":
      return msg as unknown as ErrorMsg;
    default:
      return null;
  }
}
