"""Point cloud geometry optimization.

Each point carries an opacity logit. A denoise step trains a small color
network together with all opacities by compositing the k nearest buffer
entries per pixel with the discrete rendering equation

    C = sum_i T_i * a_i * c_i,    T_i = prod_{j<i} (1 - a_j),

under L2 image loss, a sparse regularizer that pushes opacities toward
{0, 1}, and (when masks exist) an L2 transparency term; low-opacity points
are then pruned. A completion step inserts points along rays of pixels
that are occupied in ground truth but empty in the buffers, using the
depth range of the 3x3 neighborhood. The two steps alternate to
convergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .afnet import encode, encoding_width
from .errors import ConfigError, DataError, NumericError, ShapeError
from .optim import Adam
from .rasterizer import project, rasterize, rectify
from .scene import Camera, PointCloud, SceneDataset
from .tensor import (Parameter, Tape, Tensor, apply_primitive, concat,
                     fan_in_uniform, gather_rows, scatter_rows)
from .trainer import SceneNorm


@dataclass
class GeomOptConfig:
    k: int = 16  # buffer entries per pixel
    prune_threshold: float = 0.1  # remove points with alpha below this
    lambda_sparse: float = 5e-4
    epochs: int = 300  # per denoise step
    max_loops: int = 8  # denoise/complete alternations, in [4, 20]
    lr_mlp: float = 5e-4
    lr_opacity: float = 0.01
    completion_points: int = 8  # points inserted per repaired pixel
    transparency_weight: float = 0.1  # only applied when masks exist
    enc_l_pos: int = 4
    convergence_frac: float = 0.005  # stop when a loop changes fewer points
    occupancy_tol: float = 2.0 / 255.0  # GT occupancy when no alpha mask

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if not (0.0 < self.prune_threshold < 1.0):
            raise ConfigError("prune threshold must lie in (0, 1)")
        if not (4 <= self.max_loops <= 20):
            raise ConfigError("max_loops must lie in [4, 20]")
        if self.completion_points < 1 or self.epochs < 1:
            raise ConfigError("completion_points and epochs must be >= 1")


def volume_render_pixel(entries, background=(0.0, 0.0, 0.0)):
    """Composite depth-sorted (alpha, color) entries front to back.

    Returns (color, accumulated_alpha). Empty input yields the background
    with zero accumulation. Raises on unsorted entries.
    """
    bg = np.asarray(background, dtype=np.float64)
    color = np.zeros(3, dtype=np.float64)
    trans = 1.0
    acc = 0.0
    last_depth = -np.inf
    for item in entries:
        if len(item) == 3:
            alpha, c, depth = item
            if depth < last_depth:
                raise ShapeError("volume_render_pixel: entries must be depth-sorted")
            last_depth = depth
        else:
            alpha, c = item
        color += trans * alpha * np.asarray(c, dtype=np.float64)
        acc += trans * alpha
        trans *= 1.0 - alpha
    return color + (1.0 - acc) * bg, acc


def sparse_loss(alpha: np.ndarray) -> float:
    """(1/N) sum [log a + log(1-a)]; maximal at a = 0.5, drives binarization
    when minimized with positive weight."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.size == 0:
        raise DataError("sparse loss of an empty cloud")
    return float(np.mean(np.log(alpha) + np.log(1.0 - alpha)))


def transparency_loss(accumulated: np.ndarray, mask: np.ndarray) -> float:
    """Mean squared error between accumulated alpha and the GT alpha mask."""
    accumulated = np.asarray(accumulated, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if accumulated.shape != mask.shape:
        raise ShapeError(f"extent mismatch {accumulated.shape} vs {mask.shape}")
    return float(np.mean((accumulated - mask) ** 2))


class GeomOptMLP:
    """Color network: five 256-wide layers with ReLU, ray direction joined
    at the third layer's output, sigmoid RGB head."""

    WIDTH = 256

    def __init__(self, enc_l_pos: int = 4, dtype=np.float32):
        self.enc_l_pos = enc_l_pos
        self.d_pos = encoding_width(enc_l_pos, True)
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}

    def init_params(self, rng: np.random.Generator) -> None:
        w = self.WIDTH
        dims = [(self.d_pos, w), (w, w), (w, w), (w + 3, w), (w, 3)]
        for i, (fi, fo) in enumerate(dims):
            self.params[f"l{i + 1}.w"] = Parameter(
                f"geomopt.l{i + 1}.w", fan_in_uniform(rng, (fi, fo), fi, self.dtype))
            self.params[f"l{i + 1}.b"] = Parameter(f"geomopt.l{i + 1}.b", np.zeros(fo, dtype=self.dtype))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def forward(self, pe: np.ndarray, dirs: np.ndarray, tape: Tape | None = None) -> Tensor:
        def lin(idx, x):
            w = self.params[f"l{idx}.w"]
            b = self.params[f"l{idx}.b"]
            wt = tape.watch(w) if tape else Tensor(w.data)
            bt = tape.watch(b) if tape else Tensor(b.data)
            return (x @ wt) + bt

        h = lin(1, Tensor(pe.astype(self.dtype)))
        h = apply_primitive("leaky_relu", h, slope=0.0)
        h = lin(2, h)
        h = apply_primitive("leaky_relu", h, slope=0.0)
        h = lin(3, h)
        h = apply_primitive("leaky_relu", h, slope=0.0)
        h = concat(h, Tensor(dirs.astype(self.dtype)))
        h = lin(4, h)
        h = apply_primitive("leaky_relu", h, slope=0.0)
        return lin(5, h).sigmoid()


class _ViewBuffers:
    """Precomputed k-buffer structure of one training view: entry->point
    routing, per-entry encoded inputs, and pixel bookkeeping."""

    def __init__(self, cloud: PointCloud, camera: Camera, k: int, norm: SceneNorm, enc_l: int):
        buf = rasterize(project(cloud, camera), camera.width, camera.height, k)
        self.count = buf.count
        covered = buf.covered
        self.covered = covered
        py, px = np.nonzero(covered)
        self.flat = py.astype(np.int64) * camera.width + px.astype(np.int64)
        self.n_pixels = camera.height * camera.width
        p = len(self.flat)
        self.k = k
        # slot arrays over covered pixels
        self.slot_point = buf.kbuf_index[covered]  # (P, k), -1.. invalid
        self.slot_valid = (np.arange(k)[None, :] < buf.count[covered][:, None])
        depths = buf.kbuf_depth[covered]
        # per-entry rectified coordinates and directions
        dirs, _ = camera.pixel_rays(px, py)
        entries_pe = []
        entries_dirs = []
        self.slot_entry = np.full((p, k), -1, dtype=np.int64)
        e = 0
        for j in range(k):
            valid = self.slot_valid[:, j]
            nv = int(valid.sum())
            if nv == 0:
                continue
            pts = rectify(camera, px[valid], py[valid], depths[valid, j])
            entries_pe.append(encode(norm.apply(pts), enc_l, True).astype(np.float32))
            entries_dirs.append(dirs[valid].astype(np.float32))
            self.slot_entry[valid, j] = np.arange(e, e + nv)
            e += nv
        self.n_entries = e
        self.entry_pe = np.concatenate(entries_pe, axis=0) if e else np.zeros((0, encoding_width(enc_l, True)), np.float32)
        self.entry_dirs = np.concatenate(entries_dirs, axis=0) if e else np.zeros((0, 3), np.float32)
        # entry -> point routing for opacity gathers (safe index 0 when invalid)
        self.slot_point_safe = np.where(self.slot_point >= 0, self.slot_point, 0)
        self.slot_entry_safe = np.where(self.slot_entry >= 0, self.slot_entry, 0)


def _view_losses(view: _ViewBuffers, mlp: GeomOptMLP, logits: Parameter,
                 gt_flat: np.ndarray, mask_flat: np.ndarray | None,
                 background: np.ndarray, cfg: GeomOptConfig, tape: Tape):
    """Differentiable (rgb_loss, transparency_loss_or_None) for one view."""
    p, k = view.slot_point.shape
    dt = logits.data.dtype
    alpha_all = tape.watch(logits).sigmoid()  # (N, 1)
    colors = mlp.forward(view.entry_pe, view.entry_dirs, tape)  # (E, 3)

    bg = Tensor(np.tile(np.asarray(background, dtype=dt).reshape(1, 3), (p, 1)))
    color_acc = None
    trans = None  # running transmittance (P, 1)
    acc = None  # accumulated alpha (P, 1)
    for j in range(k):
        valid = view.slot_valid[:, j].astype(dt)[:, None]
        if not valid.any():
            break
        a_j = gather_rows(alpha_all, view.slot_point_safe[:, j]) * Tensor(valid)
        c_j = gather_rows(colors, view.slot_entry_safe[:, j])
        w_j = a_j if trans is None else trans * a_j  # (P, 1)
        contrib = w_j * c_j
        color_acc = contrib if color_acc is None else color_acc + contrib
        acc = w_j if acc is None else acc + w_j
        one_minus = Tensor(np.ones((p, 1), dtype=dt)) - a_j
        trans = one_minus if trans is None else trans * one_minus

    # composite over background and scatter into the full image
    color_full = color_acc + (Tensor(np.ones((p, 1), dtype=dt)) - acc) * bg
    img = scatter_rows(color_full, view.flat, view.n_pixels)
    bg_fill = np.tile(np.asarray(background, dtype=dt), (view.n_pixels, 1))
    bg_fill[view.flat] = 0.0
    img = img + Tensor(bg_fill)
    rgb_loss = (img - Tensor(gt_flat.astype(dt))).square().mean()

    t_loss = None
    if mask_flat is not None:
        acc_img = scatter_rows(acc, view.flat, view.n_pixels)
        t_loss = (acc_img - Tensor(mask_flat.astype(dt)[:, None])).square().mean()
    return rgb_loss, t_loss


@dataclass
class DenoiseReport:
    epochs: int
    points_before: int
    points_kept: int
    points_pruned: int
    final_loss: float


def denoise_step(cloud: PointCloud, dataset: SceneDataset, cfg: GeomOptConfig,
                 rng: np.random.Generator, epochs: int | None = None) -> tuple[PointCloud, DenoiseReport]:
    """Train opacities (and the color MLP) by volume rendering, then prune
    points whose opacity falls below the threshold.

    Opacity logits initialize from the cloud's current values, so repeated
    steps continue the same optimization; the color network restarts each
    step (its weights are scaffolding, not part of the cloud)."""
    if len(cloud) == 0:
        raise DataError("cannot denoise an empty cloud")
    if not dataset.train_frames:
        raise DataError("dataset has no training frames")
    epochs = cfg.epochs if epochs is None else epochs
    norm = SceneNorm.fit(cloud)
    mlp = GeomOptMLP(cfg.enc_l_pos)
    mlp.init_params(rng)
    logits = Parameter("geomopt.opacity",
                       cloud.opacity_logit.astype(np.float32).reshape(-1, 1).copy())
    opt_mlp = Adam(mlp.parameters(), lr=cfg.lr_mlp)
    opt_op = Adam([logits], lr=cfg.lr_opacity)
    bg = dataset.background

    views = [_ViewBuffers(cloud, f.camera, cfg.k, norm, cfg.enc_l_pos) for f in dataset.train_frames]
    gts = [f.image.reshape(-1, 3) for f in dataset.train_frames]
    masks = [f.alpha.reshape(-1) if f.alpha is not None else None for f in dataset.train_frames]
    has_masks = all(m is not None for m in masks)

    loss_val = np.inf
    n = len(cloud)
    for _ in range(epochs):
        for vi, view in enumerate(views):
            if view.n_entries == 0:
                continue
            tape = Tape()
            rgb_l, t_l = _view_losses(view, mlp, logits, gts[vi],
                                      masks[vi] if has_masks else None, bg, cfg, tape)
            sparse = _sparse_term(tape.watch(logits).sigmoid())
            loss = rgb_l + sparse * cfg.lambda_sparse
            if t_l is not None:
                loss = loss + t_l * cfg.transparency_weight
            if not np.isfinite(loss.data):
                raise NumericError("geometry optimization diverged (non-finite loss)")
            loss_val = float(loss.data)
            grads = tape.backward(loss)
            opt_mlp.step(grads)
            opt_op.step(grads)

    alpha = 1.0 / (1.0 + np.exp(-logits.data[:, 0].astype(np.float64)))
    keep = alpha >= cfg.prune_threshold
    kept = PointCloud(
        positions=cloud.positions[keep],
        radii=cloud.radii[keep],
        opacity_logit=logits.data[keep, 0].astype(np.float64),
        color_seed=cloud.color_seed[keep] if cloud.color_seed is not None else None,
        source_index=cloud.source_index[keep] if cloud.source_index is not None else None,
    )
    report = DenoiseReport(epochs=epochs, points_before=n, points_kept=int(keep.sum()),
                           points_pruned=int((~keep).sum()), final_loss=loss_val)
    return kept, report


_ALPHA_EPS = 1e-6


def _sparse_term(alpha: Tensor) -> Tensor:
    """mean(log a + log(1 - a)) over the opacity column.

    Float32 sigmoid saturates to exactly 0/1 for |logit| > ~17, which would
    make the logs infinite; a tiny symmetric affine squeeze keeps them
    finite while leaving alpha = 0.5 (and the maximizer) exactly in place.
    """
    squeezed = alpha * (1.0 - 2.0 * _ALPHA_EPS) + _ALPHA_EPS
    log_a = apply_primitive("log", squeezed)
    one_minus = Tensor(np.ones(alpha.shape, dtype=alpha.dtype)) - squeezed
    log_1ma = apply_primitive("log", one_minus)
    return (log_a + log_1ma).mean()


def occupancy_mask(frame_image: np.ndarray, alpha: np.ndarray | None,
                   background: np.ndarray, tol: float) -> np.ndarray:
    """Ground-truth occupancy: the alpha mask when present, else pixels that
    differ from the background by more than ``tol`` in any channel."""
    if alpha is not None:
        return alpha > 0.5
    diff = np.abs(frame_image - np.asarray(background, dtype=np.float32))
    return diff.max(axis=-1) > tol


def complete_step(cloud: PointCloud, dataset: SceneDataset, cfg: GeomOptConfig) -> tuple[PointCloud, int]:
    """Insert points along rays of occupied-but-uncovered pixels, spaced
    evenly over the 3x3 neighborhood's buffer depth range."""
    new_positions = []
    radius = float(np.median(cloud.radii)) if len(cloud) else 5e-3
    repaired = 0
    for frame in dataset.train_frames:
        cam = frame.camera
        buf = rasterize(project(cloud, cam), cam.width, cam.height, cfg.k)
        occupied = occupancy_mask(frame.image, frame.alpha, dataset.background, cfg.occupancy_tol)
        holes = occupied & ~buf.covered
        if not holes.any():
            continue
        hy, hx = np.nonzero(holes)
        depth = buf.kbuf_depth  # (H, W, k), inf at invalid slots
        for y, x in zip(hy, hx):
            y0, y1 = max(0, y - 1), min(cam.height, y + 2)
            x0, x1 = max(0, x - 1), min(cam.width, x + 2)
            neigh = depth[y0:y1, x0:x1].reshape(-1)
            neigh = neigh[np.isfinite(neigh)]
            if neigh.size == 0:
                continue  # retry next round once neighbors exist
            zs = np.linspace(neigh.min(), neigh.max(), cfg.completion_points)
            pts = rectify(cam, np.full(cfg.completion_points, x), np.full(cfg.completion_points, y), zs)
            new_positions.append(pts)
            repaired += 1
    if not new_positions:
        return cloud, 0
    added = np.concatenate(new_positions, axis=0)
    n_new = len(added)
    positions = np.concatenate([cloud.positions, added], axis=0)
    radii = np.concatenate([cloud.radii, np.full(n_new, radius)])
    logits = np.concatenate([cloud.opacity_logit, np.zeros(n_new)])
    color = None
    if cloud.color_seed is not None:
        color = np.concatenate([cloud.color_seed, np.full((n_new, 3), 0.5)], axis=0)
    src = None
    if cloud.source_index is not None:
        src = np.concatenate([cloud.source_index, np.full(n_new, -1, dtype=np.int64)])
    return PointCloud(positions=positions, radii=radii, opacity_logit=logits,
                      color_seed=color, source_index=src), n_new


def optimize_geometry(cloud: PointCloud, dataset: SceneDataset, cfg: GeomOptConfig,
                      seed: int = 0, log_fn=None) -> tuple[PointCloud, list[dict]]:
    """Alternate denoise and complete steps until fewer than
    ``convergence_frac`` of points change in a loop (or max_loops)."""
    rng = np.random.default_rng(seed)
    report: list[dict] = []
    current = cloud
    for loop in range(1, cfg.max_loops + 1):
        before = len(current)
        current, den = denoise_step(current, dataset, cfg, rng)
        current, added = complete_step(current, dataset, cfg)
        entry = {
            "loop": loop,
            "points_before": before,
            "points_after": len(current),
            "added": added,
            "pruned": den.points_pruned,
            "final_loss": den.final_loss,
        }
        report.append(entry)
        if log_fn:
            log_fn(entry)
        if before and (den.points_pruned + added) / before < cfg.convergence_frac:
            break
    return current, report
