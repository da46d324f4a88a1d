"""Procedural desk-scale scenes with analytic ground truth.

Each scene is a set of analytic surfaces (plane pieces, cube faces, sphere)
with closed-form color functions. The point cloud is sampled uniformly on
the surfaces; ground-truth images come from an independent per-pixel
ray/surface intersection renderer (nearest hit, flat shading), so the
splatting pipeline is never used to make its own supervision.
"""

from __future__ import annotations

import zlib

import numpy as np

from .errors import DataError
from .scene import Camera, Frame, PointCloud, SceneDataset

TOY_KINDS = ("checker-plane", "textured-cube", "two-object")


# -- analytic surfaces ----------------------------------------------------


class _Plane:
    """Axis-aligned rectangle in the z=0 plane, x,y in [-half, half]."""

    def __init__(self, half: float, color_fn):
        self.half = half
        self.color_fn = color_fn

    def hit(self, origins, dirs):
        t = np.full(len(dirs), np.inf)
        dz = dirs[:, 2]
        ok = np.abs(dz) > 1e-12
        tt = np.where(ok, -origins[:, 2] / np.where(ok, dz, 1.0), np.inf)
        pts = origins + tt[:, None] * dirs
        inside = ok & (tt > 1e-9) & (np.abs(pts[:, 0]) <= self.half) & (np.abs(pts[:, 1]) <= self.half)
        t[inside] = tt[inside]
        return t

    def sample(self, rng, n):
        xy = rng.uniform(-self.half, self.half, size=(n, 2))
        pts = np.concatenate([xy, np.zeros((n, 1))], axis=1)
        return pts

    def color(self, pts):
        return self.color_fn(pts)

    def area(self):
        return (2 * self.half) ** 2


class _Cube:
    """Axis-aligned cube centered at ``center`` with side ``side``."""

    def __init__(self, center, side: float, color_fn):
        self.center = np.asarray(center, dtype=np.float64)
        self.half = side / 2.0
        self.color_fn = color_fn

    def hit(self, origins, dirs):
        lo = self.center - self.half
        hi = self.center + self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        hit = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where(hit, t, np.inf)

    def sample(self, rng, n):
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-self.half, self.half, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        for a in range(3):
            sel = axis == a
            others = [i for i in range(3) if i != a]
            pts[sel, a] = sign[sel] * self.half
            pts[sel, others[0]] = uv[sel, 0]
            pts[sel, others[1]] = uv[sel, 1]
        return pts + self.center

    def color(self, pts):
        return self.color_fn(pts)

    def area(self):
        return 6 * (2 * self.half) ** 2


class _Sphere:
    def __init__(self, center, radius: float, color_fn):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = radius
        self.color_fn = color_fn

    def hit(self, origins, dirs):
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        return np.where(ok & (t > 1e-9), t, np.inf)

    def sample(self, rng, n):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.center + self.radius * v

    def color(self, pts):
        return self.color_fn(pts)

    def area(self):
        return 4 * np.pi * self.radius**2


# -- color functions ------------------------------------------------------


def _checker_plane_color(pts):
    """Left half (x < 0) flat gray; right half an 8x8 checker."""
    n = len(pts)
    out = np.full((n, 3), 0.55)
    right = pts[:, 0] >= 0.0
    # 8x8 cells over x in [0, 1], y in [-1, 1]
    cx = np.clip((pts[right, 0] / 1.0 * 8).astype(np.int64), 0, 7)
    cy = np.clip(((pts[right, 1] + 1.0) / 2.0 * 8).astype(np.int64), 0, 7)
    dark = (cx + cy) % 2 == 0
    out[right] = np.where(dark[:, None], [[0.12, 0.12, 0.16]], [[0.92, 0.92, 0.88]])
    return out


def _smooth_cube_color(pts, center, half):
    """Per-face base hue plus a smooth low-frequency pattern."""
    rel = (pts - center) / half  # in [-1, 1]^3 on the surface
    axis = np.argmax(np.abs(rel), axis=1)
    sign = np.take_along_axis(rel, axis[:, None], axis=1)[:, 0] > 0
    face = axis * 2 + sign.astype(np.int64)
    base = np.array([
        [0.85, 0.30, 0.25],
        [0.25, 0.65, 0.85],
        [0.30, 0.75, 0.35],
        [0.90, 0.75, 0.25],
        [0.60, 0.35, 0.80],
        [0.90, 0.55, 0.30],
    ])
    out = base[face]
    wave = 0.18 * np.sin(2.5 * np.pi * rel[:, 0]) * np.sin(2.5 * np.pi * rel[:, 1]) \
        + 0.12 * np.sin(2.5 * np.pi * rel[:, 2])
    return np.clip(out + wave[:, None], 0.02, 0.98)


def _sphere_color(pts, center):
    rel = pts - center
    lat = rel[:, 2] / np.linalg.norm(rel, axis=1)
    stripe = 0.5 + 0.45 * np.sin(6.0 * np.arcsin(np.clip(lat, -1, 1)))
    return np.stack([stripe, 0.25 + 0.4 * stripe, 1.0 - 0.6 * stripe], axis=1)


# -- cameras ---------------------------------------------------------------


def _look_at(origin, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from origin toward target (-Z forward)."""
    origin = np.asarray(origin, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - origin
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -fwd
    pose[:3, 3] = origin
    return pose


def _sphere_cameras(n: int, radius: float, width: int, height: int, focal: float,
                    z_near: float, z_far: float, rng: np.random.Generator,
                    min_elev: float = 0.15, max_elev: float = 1.25) -> list[Camera]:
    cams = []
    for i in range(n):
        az = 2.0 * np.pi * i / n + rng.uniform(-0.08, 0.08)
        el = rng.uniform(min_elev, max_elev)
        origin = radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(Camera(width, height, focal, _look_at(origin, (0.0, 0.0, 0.0)), z_near, z_far))
    return cams


# -- analytic renderer (the supervision oracle) ----------------------------


def render_analytic(surfaces, camera: Camera, background) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-surface flat shading along pixel-center rays.

    Returns (image, alpha) where alpha marks pixels whose ray hits any
    surface. This renderer shares no code with the splatting pipeline.
    """
    H, W = camera.height, camera.width
    py, px = np.mgrid[0:H, 0:W]
    dirs, _ = camera.pixel_rays(px.ravel(), py.ravel())
    origins = np.broadcast_to(camera.origin, dirs.shape)
    best_t = np.full(H * W, np.inf)
    best_color = np.tile(np.asarray(background, dtype=np.float64), (H * W, 1))
    for surf in surfaces:
        t = surf.hit(origins, dirs)
        closer = t < best_t
        if np.any(closer):
            pts = origins[closer] + t[closer, None] * dirs[closer]
            best_color[closer] = surf.color(pts)
            best_t[closer] = t[closer]
    alpha = np.isfinite(best_t).astype(np.float32).reshape(H, W)
    return best_color.reshape(H, W, 3).astype(np.float32), alpha


# -- dataset assembly -------------------------------------------------------


def _sample_cloud(surfaces, rng, total_points: int, radius_ndc: float) -> PointCloud:
    areas = np.array([s.area() for s in surfaces], dtype=np.float64)
    counts = np.maximum(1, np.rint(total_points * areas / areas.sum()).astype(np.int64))
    pts, cols = [], []
    for surf, n in zip(surfaces, counts):
        p = surf.sample(rng, int(n))
        pts.append(p)
        cols.append(surf.color(p))
    positions = np.concatenate(pts, axis=0)
    colors = np.concatenate(cols, axis=0)
    return PointCloud.from_positions(positions, radius=radius_ndc, color_seed=colors)


def generate_toy_scene(kind: str, seed: int = 0, num_points: int | None = None,
                       image_size: int = 64, num_train: int | None = None,
                       num_test: int = 6) -> SceneDataset:
    """Deterministic procedural dataset: dense surface point cloud, cameras
    on a sphere, and analytic ground-truth renders."""
    if kind not in TOY_KINDS:
        raise DataError(f"unknown toy scene kind {kind!r}; options: {TOY_KINDS}")
    kind_tag = zlib.crc32(kind.encode("ascii"))
    rng = np.random.default_rng(np.random.SeedSequence([kind_tag, seed]))
    background = np.ones(3, dtype=np.float32)

    if kind == "checker-plane":
        surfaces = [_Plane(1.0, _checker_plane_color)]
        cam_radius, min_elev, max_elev = 2.6, 0.5, 1.35
        n_points = num_points or 200_000
        n_train = num_train or 24
        radius_mult = 1.35
    elif kind == "textured-cube":
        center = np.zeros(3)
        surfaces = [_Cube(center, 1.0, lambda p: _smooth_cube_color(p, center, 0.5))]
        cam_radius, min_elev, max_elev = 2.8, 0.1, 1.2
        n_points = num_points or 500_000
        n_train = num_train or 64
        radius_mult = 1.35
    else:  # two-object
        c_cube = np.array([-0.75, 0.0, 0.0])
        c_sph = np.array([0.75, 0.0, 0.0])
        surfaces = [
            _Cube(c_cube, 0.9, lambda p: _smooth_cube_color(p, c_cube, 0.45)),
            _Sphere(c_sph, 0.48, lambda p: _sphere_color(p, c_sph)),
        ]
        cam_radius, min_elev, max_elev = 3.0, 0.1, 1.1
        n_points = num_points or 200_000
        n_train = num_train or 24
        radius_mult = 1.35

    num_train = n_train
    focal = 1.1 * image_size
    z_near, z_far = 0.2, 12.0
    cams = _sphere_cameras(num_train + num_test, cam_radius, image_size, image_size,
                           focal, z_near, z_far, rng, min_elev, max_elev)
    # disk radius that covers the mean point spacing at the camera distance
    area = sum(s.area() for s in surfaces)
    spacing = np.sqrt(area / n_points)
    radius_ndc = radius_mult * spacing * focal / cam_radius * 2.0 / image_size
    cloud = _sample_cloud(surfaces, rng, n_points, radius_ndc)

    frames = []
    for cam in cams:
        img, alpha = render_analytic(surfaces, cam, background)
        frames.append(Frame(camera=cam, image=img, alpha=alpha))
    return SceneDataset(
        name=kind,
        cloud=cloud,
        train_frames=frames[:num_train],
        test_frames=frames[num_train:],
        background=background,
    )
