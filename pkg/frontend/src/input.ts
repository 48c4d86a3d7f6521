// Keyboard state to control commands. Arrows or WASD; releasing all keys
// commands zero. Commands are sent at the server tick rate by the session.

export interface KeyState {
  up: boolean;
  down: boolean;
  left: boolean;
  right: boolean;
}

export function emptyKeys(): KeyState {
  return { up: false, down: false, left: false, right: false };
}

const KEY_MAP: Record<string, keyof KeyState> = {
  ArrowUp: "up",
  ArrowDown: "down",
  ArrowLeft: "left",
  ArrowRight: "right",
  w: "up",
  s: "down",
  a: "left",
  d: "right",
  W: "up",
  S: "down",
  A: "left",
  D: "right",
};

/** Returns a new key state; unknown keys leave it unchanged. */
export function applyKeyEvent(keys: KeyState, key: string, pressed: boolean): KeyState {
  const name = KEY_MAP[key];
  if (!name) return keys;
  if (keys[name] === pressed) return keys;
  return { ...keys, [name]: pressed };
}

/** Key state to (omega, a): up/down command the acceleration extremes,
 *  left/right the turn-rate extremes (left is counterclockwise). */
export function keysToCommand(
  keys: KeyState,
  limits: { omega: [number, number]; a: [number, number] },
): { omega: number; a: number } {
  let omega = 0;
  if (keys.left) omega += limits.omega[1];
  if (keys.right) omega += limits.omega[0];
  let a = 0;
  if (keys.up) a += limits.a[1];
  if (keys.down) a += limits.a[0];
  return { omega, a };
}
