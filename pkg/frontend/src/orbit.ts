/** Orbit-camera state and its conversion to the wire pose format.
 *
 * The server expects a 3x4 camera-to-world matrix, row-major, with the
 * camera looking down its own -z axis and world +y as the up reference.
 * The math here mirrors the renderer's pose construction exactly so a
 * pose computed client-side and one computed server-side for the same
 * orbit coordinates agree to floating-point precision.
 */

export interface OrbitState {
  /** Rotation about world +y; 0 puts the camera on the +z side. */
  azimuth: number;
  /** Lift toward +y, clamped inside (-pi/2, pi/2). */
  elevation: number;
  radius: number;
  center: [number, number, number];
}

export const ELEVATION_LIMIT = Math.PI / 2 - 1e-3;

export function clampState(s: OrbitState): OrbitState {
  return {
    azimuth: s.azimuth,
    elevation: Math.min(ELEVATION_LIMIT, Math.max(-ELEVATION_LIMIT, s.elevation)),
    radius: Math.max(1e-6, s.radius),
    center: s.center,
  };
}

type Vec3 = [number, number, number];

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(a: Vec3): Vec3 {
  const n = Math.hypot(a[0], a[1], a[2]);
  if (n < 1e-12) throw new Error("cannot normalize a zero vector");
  return [a[0] / n, a[1] / n, a[2] / n];
}

/** 12-float row-major 3x4 camera-to-world matrix for an orbit state. */
export function orbitToPose(state: OrbitState): number[] {
  const { azimuth, elevation, radius, center } = state;
  if (!(radius > 0)) throw new Error(`orbit radius must be positive, got ${radius}`);
  const ce = Math.cos(elevation);
  const eye: Vec3 = [
    center[0] + radius * Math.sin(azimuth) * ce,
    center[1] + radius * Math.sin(elevation),
    center[2] + radius * Math.cos(azimuth) * ce,
  ];
  const forward = normalize(sub(center, eye));
  const right = normalize(cross(forward, [0, 1, 0]));
  const trueUp = cross(right, forward);
  // columns: right, trueUp, -forward; translation: eye
  return [
    right[0], trueUp[0], -forward[0], eye[0],
    right[1], trueUp[1], -forward[1], eye[1],
    right[2], trueUp[2], -forward[2], eye[2],
  ];
}

/** Frobenius distance of the pose's rotation block from orthonormality. */
export function rotationDefect(pose: number[]): number {
  if (pose.length !== 12) throw new Error(`pose must have 12 entries, got ${pose.length}`);
  const r = [
    [pose[0], pose[1], pose[2]],
    [pose[4], pose[5], pose[6]],
    [pose[8], pose[9], pose[10]],
  ];
  let sum = 0;
  for (let i = 0; i < 3; i++) {
    for (let j = 0; j < 3; j++) {
      let dot = 0;
      for (let k = 0; k < 3; k++) dot += r[k][i] * r[k][j];
      const want = i === j ? 1 : 0;
      sum += (dot - want) * (dot - want);
    }
  }
  return Math.sqrt(sum);
}
