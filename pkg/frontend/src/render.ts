// Immediate-mode top-down scene rendering. Only the subset of the canvas
// API we use appears in DrawContext, so tests can record draw calls.

import { ViewModel } from "./client.js";
import { Camera, worldToScreen } from "./transform.js";

export interface DrawContext {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  globalAlpha: number;
  font: string;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  stroke(): void;
  fill(): void;
  fillText(text: string, x: number, y: number): void;
}

export interface RenderOptions {
  stale: boolean;
}

const AGENT_COLORS: Record<string, string> = {
  robot: "#4f8df0",
  human: "#f0a44f",
};

export function renderScene(
  ctx: DrawContext,
  width: number,
  height: number,
  vm: ViewModel,
  cam: Camera,
  opts: RenderOptions,
): void {
  ctx.globalAlpha = 1;
  ctx.fillStyle = "#11151c";
  ctx.clearRect(0, 0, width, height);
  ctx.fillRect(0, 0, width, height);
  if (vm.hello === null || vm.state === null) {
    ctx.fillStyle = "#aab4c4";
    ctx.font = "16px sans-serif";
    ctx.fillText("waiting for server state...", 20, 30);
    return;
  }
  const toScreen = (x: number, y: number) => worldToScreen(cam, width, height, x, y);

  // walls: boundary line of each half-plane, drawn across the view
  ctx.strokeStyle = "#7a4b4b";
  ctx.lineWidth = 2;
  for (const wall of vm.hello.walls) {
    const [nx, ny] = wall.normal;
    const px = nx * wall.offset;
    const py = ny * wall.offset;
    const span = Math.max(width, height) / cam.scale;
    const [ax, ay] = toScreen(px - ny * span, py + nx * span);
    const [bx, by] = toScreen(px + ny * span, py - nx * span);
    ctx.beginPath();
    ctx.moveTo(ax, ay);
    ctx.lineTo(bx, by);
    ctx.stroke();
  }

  // goals as crosses
  ctx.strokeStyle = "#6fcf6f";
  ctx.lineWidth = 2;
  for (const goal of Object.values(vm.hello.goals)) {
    const [gx, gy] = toScreen(goal[0], goal[1]);
    ctx.beginPath();
    ctx.moveTo(gx - 6, gy);
    ctx.lineTo(gx + 6, gy);
    ctx.moveTo(gx, gy - 6);
    ctx.lineTo(gx, gy + 6);
    ctx.stroke();
  }

  // robot plan preview polyline
  const preview = vm.state.plan_preview;
  if (preview.length > 1) {
    ctx.strokeStyle = "#3d6db0";
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    const [sx, sy] = toScreen(preview[0][0], preview[0][1]);
    ctx.moveTo(sx, sy);
    for (const [wx, wy] of preview.slice(1)) {
      const [px, py] = toScreen(wx, wy);
      ctx.lineTo(px, py);
    }
    ctx.stroke();
  }

  // agents as disks of half the collision radius (touching disks = contact)
  const radiusPx = (vm.hello.collision_radius / 2) * cam.scale;
  for (const agent of vm.state.agents) {
    const [ax, ay] = toScreen(agent.x, agent.y);
    ctx.fillStyle = AGENT_COLORS[agent.id] ?? "#888f99";
    ctx.beginPath();
    ctx.arc(ax, ay, radiusPx, 0, 2 * Math.PI);
    ctx.fill();
    // heading arrow
    const hx = agent.x + Math.cos(agent.theta) * (vm.hello.collision_radius / 2 + 0.3);
    const hy = agent.y + Math.sin(agent.theta) * (vm.hello.collision_radius / 2 + 0.3);
    const [tx, ty] = toScreen(hx, hy);
    ctx.strokeStyle = "#e8edf4";
    ctx.lineWidth = 2;
    ctx.beginPath();
    ctx.moveTo(ax, ay);
    ctx.lineTo(tx, ty);
    ctx.stroke();
    ctx.fillStyle = "#e8edf4";
    ctx.font = "12px sans-serif";
    ctx.fillText(agent.id, ax + radiusPx + 4, ay - 4);
  }

  // status overlays
  if (opts.stale || vm.pausedReason !== null) {
    ctx.globalAlpha = 0.55;
    ctx.fillStyle = "#11151c";
    ctx.fillRect(0, 0, width, height);
    ctx.globalAlpha = 1;
    ctx.fillStyle = "#e8edf4";
    ctx.font = "20px sans-serif";
    ctx.fillText(
      opts.stale ? "stale state (no update > 1 s)" : `paused: ${vm.pausedReason}`,
      20,
      40,
    );
  }
}
