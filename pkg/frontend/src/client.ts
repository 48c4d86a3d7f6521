// Connection session: handshake with schema check, state ingestion, command
// stream at the server tick rate, and reconnect-with-banner on drops. The
// socket and timers are injectable so the state machine is testable without
// a browser or network.

import {
  HelloMsg,
  StateMsg,
  WIRE_SCHEMA,
  makeHello,
  makeInput,
  parseServerMsg,
} from "./protocol.js";

export type ConnectionStatus =
  | "connecting"
  | "connected"
  | "refused"
  | "reconnecting";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((event: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
}

export interface ViewModel {
  status: ConnectionStatus;
  hello: HelloMsg | null;
  state: StateMsg | null;
  lastStateAtMs: number | null;
  pausedReason: string | null;
  errorBanner: string | null;
}

export interface SessionOptions {
  url: string;
  socketFactory: (url: string) => SocketLike;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
  now?: () => number;
  reconnectDelayMs?: number;
}

export const STALE_AFTER_MS = 1000;

export class ClientSession {
  readonly vm: ViewModel = {
    status: "connecting",
    hello: null,
    state: null,
    lastStateAtMs: null,
    pausedReason: null,
    errorBanner: null,
  };

  /** Current command; the tick loop sends whatever is here. */
  command = { omega: 0, a: 0 };

  private socket: SocketLike | null = null;
  private tickTimer: unknown = null;
  private readonly opts: Required<SessionOptions>;
  private closedByUs = false;

  constructor(options: SessionOptions) {
    this.opts = {
      setTimer: (fn, ms) => setTimeout(fn, ms),
      clearTimer: (h) => clearTimeout(h as Parameters<typeof clearTimeout>[0]),
      now: () => Date.now(),
      reconnectDelayMs: 1000,
      ...options,
    };
  }

  connect(): void {
    this.vm.status = this.vm.hello ? "reconnecting" : "connecting";
    const socket = this.opts.socketFactory(this.opts.url);
    this.socket = socket;
    socket.onopen = () => {
      socket.send(makeHello());
    };
    socket.onmessage = (event) => this.handleMessage(event.data);
    socket.onerror = () => undefined;
    socket.onclose = () => this.handleClose();
  }

  close(): void {
    this.closedByUs = true;
    this.stopTicking();
    this.socket?.close();
  }

  handleMessage(raw: string): void {
    const msg = parseServerMsg(raw);
    if (msg === null) return;
    switch (msg.type) {
      case "hello": {
        if (msg.schema !== WIRE_SCHEMA) {
          this.refuse(`server schema ${msg.schema}, client speaks ${WIRE_SCHEMA}`);
          return;
        }
        this.vm.hello = msg;
        this.vm.status = "connected";
        this.vm.errorBanner = null;
        this.startTicking(msg.dt * 1000);
        break;
      }
      case "state": {
        this.vm.state = msg as StateMsg;
        this.vm.lastStateAtMs = this.opts.now();
        this.vm.pausedReason = msg.paused ? "server paused" : null;
        break;
      }
      case "pause":
        this.vm.pausedReason = msg.reason;
        break;
      case "error": {
        if (/schema/.test(msg.message)) {
          this.refuse(msg.message);
        } else {
          this.vm.errorBanner = msg.message;
        }
        break;
      }
    }
  }

  /** True when no state arrived for longer than the staleness window. */
  isStale(): boolean {
    if (this.vm.lastStateAtMs === null) return false;
    return this.opts.now() - this.vm.lastStateAtMs > STALE_AFTER_MS;
  }

  private refuse(message: string): void {
    this.vm.status = "refused";
    this.vm.errorBanner = message;
    this.closedByUs = true; // a schema mismatch is terminal: no silent retry
    this.stopTicking();
    this.socket?.close();
  }

  private handleClose(): void {
    this.stopTicking();
    if (this.closedByUs || this.vm.status === "refused") return;
    this.vm.status = "reconnecting";
    this.vm.pausedReason = "connection lost";
    this.opts.setTimer(() => this.connect(), this.opts.reconnectDelayMs);
  }

  private startTicking(periodMs: number): void {
    this.stopTicking();
    const tick = () => {
      this.sendCommand();
      this.tickTimer = this.opts.setTimer(tick, periodMs);
    };
    this.tickTimer = this.opts.setTimer(tick, periodMs);
  }

  private stopTicking(): void {
    if (this.tickTimer !== null) {
      this.opts.clearTimer(this.tickTimer);
      this.tickTimer = null;
    }
  }

  private sendCommand(): void {
    if (this.vm.status !== "connected" || this.socket === null) return;
    this.socket.send(
      makeInput(this.command.omega, this.command.a, this.opts.now() / 1000),
    );
  }
}
