import { describe, expect, it } from "vitest";

import { ViewModel } from "../src/client.js";
import { DrawContext, renderScene } from "../src/render.js";
import { defaultCamera, worldToScreen } from "../src/transform.js";

class RecordingContext implements DrawContext {
  fillStyle: string | CanvasGradient | CanvasPattern = "";
  strokeStyle: string | CanvasGradient | CanvasPattern = "";
  lineWidth = 1;
  globalAlpha = 1;
  font = "";
  calls: { op: string; args: unknown[] }[] = [];

  private log(op: string, ...args: unknown[]) {
    this.calls.push({ op, args });
  }

  clearRect(...args: unknown[]) { this.log("clearRect", ...args); }
  fillRect(...args: unknown[]) { this.log("fillRect", ...args); }
  beginPath() { this.log("beginPath"); }
  arc(...args: unknown[]) { this.log("arc", ...args); }
  moveTo(...args: unknown[]) { this.log("moveTo", ...args); }
  lineTo(...args: unknown[]) { this.log("lineTo", ...args); }
  stroke() { this.log("stroke"); }
  fill() { this.log("fill"); }
  fillText(...args: unknown[]) { this.log("fillText", ...args); }
}

const W = 960;
const H = 640;

function headonViewModel(previewLength = 27): ViewModel {
  const preview: [number, number][] = Array.from({ length: previewLength }, (_, i) => [
    i * 0.15,
    0,
  ]);
  return {
    status: "connected",
    hello: {
      type: "hello", schema: 1, dt: 0.1, collision_radius: 1.0, human_id: "human",
      limits: { omega: [-1, 1], a: [-1.5, 1.5] },
      goals: { robot: [10, 0], human: [0, 0] }, walls: [],
    },
    state: {
      type: "state", schema: 1, tick: 5, sim_time: 0.5,
      agents: [
        { id: "robot", x: 0, y: 0, theta: 0, v: 1 },
        { id: "human", x: 10, y: 0, theta: Math.PI, v: 1 },
      ],
      plan_preview: preview, paused: false,
    },
    lastStateAtMs: 0,
    pausedReason: null,
    errorBanner: null,
  };
}

describe("scene rendering", () => {
  it("draws the two head-on agents ten meters apart on screen", () => {
    const ctx = new RecordingContext();
    const cam = defaultCamera();
    renderScene(ctx, W, H, headonViewModel(), cam, { stale: false });
    const arcs = ctx.calls.filter((c) => c.op === "arc");
    expect(arcs.length).toBe(2);
    const [ax, ay] = arcs[0].args as number[];
    const [bx, by] = arcs[1].args as number[];
    expect(Math.hypot(bx - ax, by - ay)).toBeCloseTo(10 * cam.scale, 6);
    const [ex, ey] = worldToScreen(cam, W, H, 0, 0);
    expect(ax).toBeCloseTo(ex, 6);
    expect(ay).toBeCloseTo(ey, 6);
    // disk radius is half the collision radius in pixels
    expect((arcs[0].args as number[])[2]).toBeCloseTo(0.5 * cam.scale, 6);
  });

  it("draws the full plan preview polyline", () => {
    const ctx = new RecordingContext();
    renderScene(ctx, W, H, headonViewModel(27), defaultCamera(), { stale: false });
    // preview: one moveTo plus 26 lineTo before the agents are drawn
    const first = ctx.calls.findIndex(
      (c) => c.op === "moveTo" && ctx.calls[ctx.calls.indexOf(c) - 1]?.op === "beginPath",
    );
    const lineTos = ctx.calls.filter((c) => c.op === "lineTo");
    expect(lineTos.length).toBeGreaterThanOrEqual(26);
    expect(first).toBeGreaterThanOrEqual(0);
  });

  it("pause and staleness dim the scene with an overlay", () => {
    const ctx = new RecordingContext();
    const vm = headonViewModel();
    vm.pausedReason = "connection lost";
    renderScene(ctx, W, H, vm, defaultCamera(), { stale: false });
    const texts = ctx.calls.filter((c) => c.op === "fillText");
    expect(texts.some((c) => String(c.args[0]).includes("paused"))).toBe(true);

    const ctx2 = new RecordingContext();
    renderScene(ctx2, W, H, headonViewModel(), defaultCamera(), { stale: true });
    const texts2 = ctx2.calls.filter((c) => c.op === "fillText");
    expect(texts2.some((c) => String(c.args[0]).includes("stale"))).toBe(true);
  });

  it("waits for state before drawing the scene", () => {
    const ctx = new RecordingContext();
    const vm = headonViewModel();
    vm.state = null;
    renderScene(ctx, W, H, vm, defaultCamera(), { stale: false });
    expect(ctx.calls.filter((c) => c.op === "arc").length).toBe(0);
    expect(ctx.calls.some((c) => c.op === "fillText")).toBe(true);
  });
});
