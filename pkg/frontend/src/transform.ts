// World-to-screen mapping. World coordinates are meters, x east / y north;
// screen coordinates are canvas pixels with y growing downward.

export interface Camera {
  /** World point at the canvas center. */
  centerX: number;
  centerY: number;
  /** Pixels per meter. */
  scale: number;
  /** Camera rotation [rad]; in first-person mode this tracks the
   *  followed agent's heading so it points up the screen. */
  rotation: number;
}

export function defaultCamera(): Camera {
  return { centerX: 5, centerY: 0, scale: 40, rotation: 0 };
}

export function worldToScreen(
  cam: Camera,
  width: number,
  height: number,
  wx: number,
  wy: number,
): [number, number] {
  const dx = wx - cam.centerX;
  const dy = wy - cam.centerY;
  const cos = Math.cos(-cam.rotation);
  const sin = Math.sin(-cam.rotation);
  const rx = dx * cos - dy * sin;
  const ry = dx * sin + dy * cos;
  return [width / 2 + rx * cam.scale, height / 2 - ry * cam.scale];
}

export function screenToWorld(
  cam: Camera,
  width: number,
  height: number,
  sx: number,
  sy: number,
): [number, number] {
  const rx = (sx - width / 2) / cam.scale;
  const ry = (height / 2 - sy) / cam.scale;
  const cos = Math.cos(cam.rotation);
  const sin = Math.sin(cam.rotation);
  return [cam.centerX + rx * cos - ry * sin, cam.centerY + rx * sin + ry * cos];
}

/** First-person anchor: center on the agent and rotate its heading to
 *  point up the screen. */
export function followAgent(cam: Camera, x: number, y: number, theta: number): Camera {
  return { ...cam, centerX: x, centerY: y, rotation: theta - Math.PI / 2 };
}
