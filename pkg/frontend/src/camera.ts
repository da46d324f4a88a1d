/**
 * Client-side camera math, mirroring the service's convention exactly:
 * right-handed, camera looks down -Z in its own frame, x right, y up,
 * pose is camera-to-world (row-major when serialized).
 */

export interface OrbitState {
  azimuth: number; // radians around +Z
  elevation: number; // radians above the XY plane
  radius: number;
  target: [number, number, number];
}

export type Mat4 = number[]; // 16 numbers, row-major

export interface CameraSpec {
  pose: Mat4;
  focal: number;
  width: number;
  height: number;
}

const cross = (a: number[], b: number[]): number[] => [
  a[1] * b[2] - a[2] * b[1],
  a[2] * b[0] - a[0] * b[2],
  a[0] * b[1] - a[1] * b[0],
];

const norm = (a: number[]): number => Math.hypot(a[0], a[1], a[2]);

const normalize = (a: number[]): number[] => {
  const n = norm(a);
  return [a[0] / n, a[1] / n, a[2] / n];
};

/** Camera origin of an orbit state. */
export function orbitOrigin(o: OrbitState): [number, number, number] {
  const ce = Math.cos(o.elevation);
  return [
    o.target[0] + o.radius * ce * Math.cos(o.azimuth),
    o.target[1] + o.radius * ce * Math.sin(o.azimuth),
    o.target[2] + o.radius * Math.sin(o.elevation),
  ];
}

/** Camera-to-world pose of an orbit state (row-major 4x4). */
export function orbitPose(o: OrbitState): Mat4 {
  const origin = orbitOrigin(o);
  const fwd = normalize([
    o.target[0] - origin[0],
    o.target[1] - origin[1],
    o.target[2] - origin[2],
  ]);
  let up = [0, 0, 1];
  let right = cross(fwd, up);
  if (norm(right) < 1e-8) {
    right = cross(fwd, [0, 1, 0]);
  }
  right = normalize(right);
  const trueUp = cross(right, fwd);
  // columns: right, trueUp, -fwd, origin
  return [
    right[0], trueUp[0], -fwd[0], origin[0],
    right[1], trueUp[1], -fwd[1], origin[1],
    right[2], trueUp[2], -fwd[2], origin[2],
    0, 0, 0, 1,
  ];
}

/** Recover an orbit state from a pose produced by orbitPose (bijectivity). */
export function orbitFromPose(pose: Mat4, target: [number, number, number]): OrbitState {
  const origin = [pose[3], pose[7], pose[11]];
  const rel = [origin[0] - target[0], origin[1] - target[1], origin[2] - target[2]];
  const radius = norm(rel);
  const elevation = Math.asin(rel[2] / radius);
  const azimuth = Math.atan2(rel[1], rel[0]);
  return { azimuth, elevation, radius, target };
}

/**
 * Project a world point with a pinhole camera; returns pixel coordinates
 * and view-space depth, or null when behind the camera.
 */
export function projectPoint(
  spec: CameraSpec,
  p: [number, number, number],
): { u: number; v: number; depth: number } | null {
  const m = spec.pose;
  const rel = [p[0] - m[3], p[1] - m[7], p[2] - m[11]];
  // camera frame = R^T * rel; R columns are m[0,4,8], m[1,5,9], m[2,6,10]
  const x = m[0] * rel[0] + m[4] * rel[1] + m[8] * rel[2];
  const y = m[1] * rel[0] + m[5] * rel[1] + m[9] * rel[2];
  const z = m[2] * rel[0] + m[6] * rel[1] + m[10] * rel[2];
  const depth = -z;
  if (depth <= 0) return null;
  const u = spec.width / 2 + (spec.focal * x) / depth;
  const v = spec.height / 2 - (spec.focal * y) / depth;
  return { u, v, depth };
}

/** Camera spec for an orbit state at the given image size. */
export function orbitCamera(o: OrbitState, width: number, height: number, focal?: number): CameraSpec {
  return { pose: orbitPose(o), focal: focal ?? 1.1 * width, width, height };
}
