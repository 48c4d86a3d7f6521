// Browser wiring: canvas, keyboard, camera controls, render loop.

import { ClientSession, SocketLike } from "./client.js";
import { KeyState, applyKeyEvent, emptyKeys, keysToCommand } from "./input.js";
import { renderScene } from "./render.js";
import { Camera, defaultCamera, followAgent } from "./transform.js";

const canvas = document.getElementById("scene") as HTMLCanvasElement;
const statusLine = document.getElementById("status") as HTMLDivElement;
const ctx = canvas.getContext("2d")!;

const wsUrl = `ws://${location.host || "127.0.0.1:8765"}/`;
const session = new ClientSession({
  url: wsUrl,
  socketFactory: (url) => new WebSocket(url) as unknown as SocketLike,
});

let keys: KeyState = emptyKeys();
let camera: Camera = defaultCamera();
let firstPerson = false;

function refreshCommand(): void {
  const limits = session.vm.hello?.limits ?? { omega: [-1, 1], a: [-1.5, 1.5] };
  session.command = keysToCommand(keys, limits as { omega: [number, number]; a: [number, number] });
}

window.addEventListener("keydown", (event) => {
  if (event.key === "f") {
    firstPerson = !firstPerson;
    return;
  }
  const next = applyKeyEvent(keys, event.key, true);
  if (next !== keys) {
    keys = next;
    refreshCommand();
    event.preventDefault();
  }
});
window.addEventListener("keyup", (event) => {
  const next = applyKeyEvent(keys, event.key, false);
  if (next !== keys) {
    keys = next;
    refreshCommand();
  }
});
canvas.addEventListener("wheel", (event) => {
  camera = { ...camera, scale: Math.max(5, Math.min(200, camera.scale * (event.deltaY < 0 ? 1.1 : 0.9))) };
  event.preventDefault();
});

let dragFrom: { sx: number; sy: number; cx: number; cy: number } | null = null;
canvas.addEventListener("mousedown", (event) => {
  dragFrom = { sx: event.offsetX, sy: event.offsetY, cx: camera.centerX, cy: camera.centerY };
});
window.addEventListener("mouseup", () => {
  dragFrom = null;
});
canvas.addEventListener("mousemove", (event) => {
  if (dragFrom === null || firstPerson) return;
  const dx = (event.offsetX - dragFrom.sx) / camera.scale;
  const dy = (event.offsetY - dragFrom.sy) / camera.scale;
  camera = { ...camera, centerX: dragFrom.cx - dx, centerY: dragFrom.cy + dy };
});

function frame(): void {
  const vm = session.vm;
  let cam = camera;
  if (firstPerson && vm.state !== null && vm.hello !== null) {
    const human = vm.state.agents.find((a) => a.id === vm.hello!.human_id);
    if (human) cam = followAgent(camera, human.x, human.y, human.theta);
  }
  renderScene(ctx, canvas.width, canvas.height, vm, cam, { stale: session.isStale() });
  statusLine.textContent =
    `${vm.status}` +
    (vm.state ? ` | t=${vm.state.sim_time.toFixed(1)}s tick=${vm.state.tick}` : "") +
    (vm.errorBanner ? ` | ERROR: ${vm.errorBanner}` : "") +
    (firstPerson ? " | first-person (f to toggle)" : " | top-down (f to toggle)");
  requestAnimationFrame(frame);
}

session.connect();
requestAnimationFrame(frame);
