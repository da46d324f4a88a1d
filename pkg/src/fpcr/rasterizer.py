"""Point-cloud splatting onto pixel buffers.

Points are projected to normalized device coordinates (x, y in [-1, 1],
depth measured along the camera forward axis) and splatted as isotropic
disks. A pixel center I is covered by point p iff
(p_x - I_x)^2 + (p_y - I_y)^2 < r^2; each pixel keeps the k nearest covering
disks ordered by (depth, original index).

Parallelism: the screen is cut into fixed 8-row bands; covering points are
binned per band in ascending index order and each band is filled serially.
Every pixel therefore sees its covering points in the same order no matter
how many threads run, so outputs are bit-identical across thread counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange
from scipy import ndimage

from .errors import DataError, ShapeError
from .scene import Camera, PointCloud

BAND_ROWS = 8
EMPTY_INDEX = -1

EXCLUDE_BEHIND = 1  # depth < z_near (or non-positive)
EXCLUDE_FAR = 2  # depth > z_far
EXCLUDE_OFFSCREEN = 3  # |ndc| > 1


@dataclass
class NdcCloud:
    """Frustum-culled projection of a point cloud."""

    x: np.ndarray  # (M,) NDC
    y: np.ndarray  # (M,)
    depth: np.ndarray  # (M,) view-space depth in [z_near, z_far]
    radius: np.ndarray  # (M,) NDC disk radius
    index: np.ndarray  # (M,) original point ids
    excluded_index: np.ndarray  # ids of culled points
    excluded_reason: np.ndarray  # parallel reason codes

    def __len__(self):
        return len(self.x)


@dataclass
class PixelBuffers:
    """Per-pixel nearest-surface depth/index plus the k-entry depth lists."""

    depth: np.ndarray  # (H, W) float64, +inf where empty
    index: np.ndarray  # (H, W) int64, EMPTY_INDEX where empty
    kbuf_depth: np.ndarray  # (H, W, k)
    kbuf_index: np.ndarray  # (H, W, k)
    count: np.ndarray  # (H, W) int32 valid entries

    @property
    def covered(self) -> np.ndarray:
        return self.count > 0


def project(cloud: PointCloud, camera: Camera) -> NdcCloud:
    """Pinhole projection to NDC with deterministic frustum culling."""
    p = cloud.positions
    rel = p - camera.pose[:3, 3]
    cam = rel @ camera.pose[:3, :3]  # rows become camera-frame coords
    depth = -cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.cx + camera.focal * cam[:, 0] / depth
        v = camera.cy - camera.focal * cam[:, 1] / depth
    x = 2.0 * u / camera.width - 1.0
    y = 2.0 * v / camera.height - 1.0

    near_bad = depth < camera.z_near
    far_bad = depth > camera.z_far
    off = (np.abs(x) > 1.0) | (np.abs(y) > 1.0)
    keep = ~(near_bad | far_bad | off)

    reasons = np.zeros(len(p), dtype=np.int8)
    reasons[off] = EXCLUDE_OFFSCREEN
    reasons[far_bad] = EXCLUDE_FAR
    reasons[near_bad] = EXCLUDE_BEHIND
    excluded = np.nonzero(~keep)[0]
    return NdcCloud(
        x=np.ascontiguousarray(x[keep]),
        y=np.ascontiguousarray(y[keep]),
        depth=np.ascontiguousarray(depth[keep]),
        radius=np.ascontiguousarray(cloud.radii[keep]),
        index=np.ascontiguousarray(np.nonzero(keep)[0].astype(np.int64)),
        excluded_index=excluded.astype(np.int64),
        excluded_reason=reasons[excluded],
    )


@njit(cache=True)
def _bin_bands(ys, rs, H, band_rows, nbands):
    n = ys.size
    counts = np.zeros(nbands + 1, dtype=np.int64)
    b0s = np.empty(n, dtype=np.int64)
    b1s = np.empty(n, dtype=np.int64)
    for i in range(n):
        py0 = int(np.ceil((ys[i] - rs[i] + 1.0) * 0.5 * H - 0.5)) - 1
        py1 = int(np.floor((ys[i] + rs[i] + 1.0) * 0.5 * H - 0.5)) + 1
        if py0 < 0:
            py0 = 0
        if py1 > H - 1:
            py1 = H - 1
        if py0 > py1:
            b0s[i] = -1
            b1s[i] = -2
            continue
        b0s[i] = py0 // band_rows
        b1s[i] = py1 // band_rows
        for b in range(b0s[i], b1s[i] + 1):
            counts[b + 1] += 1
    starts = np.cumsum(counts)
    fill = starts[:-1].copy()
    order = np.empty(starts[-1], dtype=np.int64)
    for i in range(n):
        for b in range(b0s[i], b1s[i] + 1):
            order[fill[b]] = i
            fill[b] += 1
    return starts, order


@njit(parallel=True, cache=True)
def _splat_kbuf(xs, ys, zs, rs, ids, starts, order, W, H, band_rows, k,
                kz, kidx, count):
    nbands = starts.size - 1
    for b in prange(nbands):
        row_lo = b * band_rows
        row_hi = min(H, row_lo + band_rows)
        for s in range(starts[b], starts[b + 1]):
            pt = order[s]
            x = xs[pt]
            y = ys[pt]
            z = zs[pt]
            r = rs[pt]
            pid = ids[pt]
            r2 = r * r
            px0 = int(np.ceil((x - r + 1.0) * 0.5 * W - 0.5)) - 1
            px1 = int(np.floor((x + r + 1.0) * 0.5 * W - 0.5)) + 1
            py0 = int(np.ceil((y - r + 1.0) * 0.5 * H - 0.5)) - 1
            py1 = int(np.floor((y + r + 1.0) * 0.5 * H - 0.5)) + 1
            if px0 < 0:
                px0 = 0
            if px1 > W - 1:
                px1 = W - 1
            if py0 < row_lo:
                py0 = row_lo
            if py1 > row_hi - 1:
                py1 = row_hi - 1
            for py in range(py0, py1 + 1):
                iy = 2.0 * (py + 0.5) / H - 1.0
                dy = y - iy
                dy2 = dy * dy
                for px in range(px0, px1 + 1):
                    ix = 2.0 * (px + 0.5) / W - 1.0
                    dx = x - ix
                    if dx * dx + dy2 < r2:
                        cnt = count[py, px]
                        if cnt == k:
                            lz = kz[py, px, k - 1]
                            if z > lz or (z == lz and pid > kidx[py, px, k - 1]):
                                continue
                            i = k - 1
                        else:
                            i = cnt
                            count[py, px] = cnt + 1
                        while i > 0:
                            pz = kz[py, px, i - 1]
                            if pz > z or (pz == z and kidx[py, px, i - 1] > pid):
                                kz[py, px, i] = pz
                                kidx[py, px, i] = kidx[py, px, i - 1]
                                i -= 1
                            else:
                                break
                        kz[py, px, i] = z
                        kidx[py, px, i] = pid


@njit(parallel=True, cache=True)
def _splat_depth(xs, ys, zs, rs, ids, starts, order, W, H, band_rows, depth, index):
    nbands = starts.size - 1
    for b in prange(nbands):
        row_lo = b * band_rows
        row_hi = min(H, row_lo + band_rows)
        for s in range(starts[b], starts[b + 1]):
            pt = order[s]
            x = xs[pt]
            y = ys[pt]
            z = zs[pt]
            r = rs[pt]
            pid = ids[pt]
            r2 = r * r
            px0 = int(np.ceil((x - r + 1.0) * 0.5 * W - 0.5)) - 1
            px1 = int(np.floor((x + r + 1.0) * 0.5 * W - 0.5)) + 1
            py0 = int(np.ceil((y - r + 1.0) * 0.5 * H - 0.5)) - 1
            py1 = int(np.floor((y + r + 1.0) * 0.5 * H - 0.5)) + 1
            if px0 < 0:
                px0 = 0
            if px1 > W - 1:
                px1 = W - 1
            if py0 < row_lo:
                py0 = row_lo
            if py1 > row_hi - 1:
                py1 = row_hi - 1
            for py in range(py0, py1 + 1):
                iy = 2.0 * (py + 0.5) / H - 1.0
                dy = y - iy
                dy2 = dy * dy
                for px in range(px0, px1 + 1):
                    ix = 2.0 * (px + 0.5) / W - 1.0
                    dx = x - ix
                    if dx * dx + dy2 < r2:
                        dz = depth[py, px]
                        if z < dz or (z == dz and pid < index[py, px]):
                            depth[py, px] = z
                            index[py, px] = pid


def rasterize(ndc: NdcCloud, width: int, height: int, k: int = 1) -> PixelBuffers:
    """Splat disks; keep the k nearest per pixel, ties broken by smaller id."""
    if k < 1:
        raise ShapeError(f"k must be >= 1, got {k}")
    nbands = (height + BAND_ROWS - 1) // BAND_ROWS
    kz = np.full((height, width, k), np.inf, dtype=np.float64)
    kidx = np.full((height, width, k), EMPTY_INDEX, dtype=np.int64)
    count = np.zeros((height, width), dtype=np.int32)
    if len(ndc):
        starts, order = _bin_bands(ndc.y, ndc.radius, height, BAND_ROWS, nbands)
        _splat_kbuf(ndc.x, ndc.y, ndc.depth, ndc.radius, ndc.index,
                    starts, order, width, height, BAND_ROWS, k, kz, kidx, count)
    depth = kz[:, :, 0].copy()
    index = kidx[:, :, 0].copy()
    return PixelBuffers(depth=depth, index=index, kbuf_depth=kz, kbuf_index=kidx, count=count)


def rasterize_depth(ndc: NdcCloud, width: int, height: int):
    """Depth-only fast path (k = 1); returns (depth, index)."""
    depth = np.full((height, width), np.inf, dtype=np.float64)
    index = np.full((height, width), EMPTY_INDEX, dtype=np.int64)
    if len(ndc):
        nbands = (height + BAND_ROWS - 1) // BAND_ROWS
        starts, order = _bin_bands(ndc.y, ndc.radius, height, BAND_ROWS, nbands)
        _splat_depth(ndc.x, ndc.y, ndc.depth, ndc.radius, ndc.index,
                     starts, order, width, height, BAND_ROWS, depth, index)
    return depth, index


def rectify(camera: Camera, px, py, z):
    """World-space surface coordinate for pixel-center rays at view depth z:
    origin + (z / cos_to_axis) * direction. Vectorized over px/py/z."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DataError("rectify: depth must be finite (empty pixels have +inf)")
    dirs, cos = camera.pixel_rays(np.asarray(px), np.asarray(py))
    t = z / cos
    return camera.origin + t[..., None] * dirs


def scene_masks(ndc_clouds: list[NdcCloud], width: int, height: int):
    """Assign each covered pixel to the scene owning the globally nearest
    disk; ties across scenes resolve to the earlier scene / smaller id.
    Returns (masks, winner) where winner[i,j] is the scene ordinal or -1."""
    if not ndc_clouds:
        raise ShapeError("scene_masks requires at least one cloud")
    xs, ys, zs, rs, gids, tags = [], [], [], [], [], []
    offset = 0
    for tag, nc in enumerate(ndc_clouds):
        xs.append(nc.x)
        ys.append(nc.y)
        zs.append(nc.depth)
        rs.append(nc.radius)
        gids.append(nc.index + offset)
        tags.append(np.full(len(nc), tag, dtype=np.int64))
        offset += int(nc.index.max()) + 1 if len(nc) else 0
    merged = NdcCloud(
        x=np.concatenate(xs), y=np.concatenate(ys), depth=np.concatenate(zs),
        radius=np.concatenate(rs), index=np.concatenate(gids),
        excluded_index=np.empty(0, dtype=np.int64), excluded_reason=np.empty(0, dtype=np.int8),
    )
    tag_of = np.concatenate(tags) if len(merged) else np.empty(0, dtype=np.int64)
    _, index = rasterize_depth(merged, width, height)
    winner = np.full((height, width), -1, dtype=np.int64)
    covered = index != EMPTY_INDEX
    if tag_of.size:
        # merged ids are unique and ascending within the concatenation
        id_to_tag = np.full(int(merged.index.max()) + 1, -1, dtype=np.int64)
        id_to_tag[merged.index] = tag_of
        winner[covered] = id_to_tag[index[covered]]
    masks = [winner == t for t in range(len(ndc_clouds))]
    return masks, winner


def erode_mask(mask: np.ndarray, radius_px: int) -> np.ndarray:
    """Morphological erosion with a (2r+1)^2 square element; pixels beyond
    the border count as uncovered."""
    if radius_px < 0:
        raise ShapeError("erosion radius must be >= 0")
    if radius_px == 0:
        return mask.copy()
    size = 2 * radius_px + 1
    return ndimage.minimum_filter(mask.astype(np.uint8), size=size, mode="constant", cval=0) == 1


def depth_debug_image(buffers: PixelBuffers, camera: Camera) -> np.ndarray:
    """Depth buffer linearly mapped from [z_near, z_far] to [0, 1]; empty -> 1."""
    d = buffers.depth.copy()
    d[~np.isfinite(d)] = camera.z_far
    return np.clip((d - camera.z_near) / (camera.z_far - camera.z_near), 0.0, 1.0)
