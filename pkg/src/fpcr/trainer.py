"""End-to-end training of the radiance network (plus optional refiner).

One render pass: rasterize a depth/index buffer, rectify covered pixels into
world-space surface coordinates, evaluate the radiance network per pixel,
scatter raw RGB and features back onto the image grid, then (optionally)
run the refiner U-Net and add its offset. Supervision is plain L2 against
ground-truth frames with random scale/crop augmentation.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .afnet import AdaptiveFrequencyNet, EncodingConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .metrics import psnr, ssim
from .optim import Adam
from .rasterizer import EMPTY_INDEX, project, rasterize_depth, rectify
from .scene import Camera, Frame, PointCloud, SceneDataset
from .tensor import Tape, Tensor, concat, scatter_rows
from .unet import RefinerUNet, clamp01, compose_final


@dataclass
class TrainConfig:
    lr_afnet: float = 5e-4
    lr_unet: float = 1.5e-4
    batch: int = 2
    crop: int = 32  # pixels, divisible by 16
    scale_min: float = 0.5
    scale_max: float = 1.5
    steps: int = 4000
    seed: int = 0
    refine: bool = False
    background: tuple[float, float, float] | None = None  # None: dataset's own
    log_every: int = 200
    checkpoint_every: int = 2000

    def __post_init__(self):
        if self.crop % 16:
            raise ConfigError(f"crop size {self.crop} must be divisible by 16")
        if not (0 < self.scale_min <= self.scale_max):
            raise ConfigError("scale range must be positive and ordered")
        if self.batch < 1 or self.steps < 0:
            raise ConfigError("batch >= 1 and steps >= 0 required")


@dataclass
class SceneNorm:
    """Map world coordinates into the unit-radius sphere the encoders expect."""

    center: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.center) / self.scale

    @staticmethod
    def fit(cloud: PointCloud) -> "SceneNorm":
        if len(cloud) == 0:
            return SceneNorm(center=np.zeros(3), scale=1.0)
        lo = cloud.positions.min(axis=0)
        hi = cloud.positions.max(axis=0)
        center = (lo + hi) / 2.0
        scale = float(np.max(np.linalg.norm(cloud.positions - center, axis=1)))
        # quantize to float32-representable values so checkpoints (float32
        # payload) reproduce the training-time normalization bit-exactly
        center = center.astype(np.float32).astype(np.float64)
        scale = float(np.float32(max(scale, 1e-9)))
        return SceneNorm(center=center, scale=scale)


@dataclass
class RenderModel:
    """Everything needed to render a trained scene."""

    afnet: AdaptiveFrequencyNet
    norm: SceneNorm
    unet: RefinerUNet | None = None
    step: int = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.afnet.state_dict())
        if self.unet is not None:
            out.update(self.unet.state_dict())
        out["norm.center"] = self.norm.center.astype(np.float32)
        out["norm.scale"] = np.array([self.norm.scale], dtype=np.float32)
        out["meta.step"] = np.array([self.step], dtype=np.float32)
        return out

    def save(self, path, config_hash: str | None = None) -> None:
        state = self.state_dict()
        if config_hash is not None:
            digest = bytes.fromhex(config_hash[:16])
            state["meta.config_hash"] = np.frombuffer(digest, dtype=np.uint8).astype(np.float32)
        save_checkpoint(path, state)

    @staticmethod
    def load(path, enc: EncodingConfig = EncodingConfig()) -> "RenderModel":
        state = load_checkpoint(path)
        afnet = AdaptiveFrequencyNet(enc)
        afnet.load_state(state)
        unet = None
        if any(k.startswith("unet.") for k in state):
            unet = RefinerUNet()
            unet.load_state(state)
        norm = SceneNorm(center=state["norm.center"].astype(np.float64),
                         scale=float(state["norm.scale"][0]))
        step = int(state.get("meta.step", np.zeros(1))[0])
        return RenderModel(afnet=afnet, norm=norm, unet=unet, step=step)


def config_hash(cfg: TrainConfig) -> str:
    payload = json.dumps(cfg.__dict__, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()


# -- rendering --------------------------------------------------------------


def surface_pixels(cloud: PointCloud, camera: Camera):
    """Rasterize and rectify: returns (flat pixel ids, winner point ids,
    surface coordinates, unit ray directions) for covered pixels."""
    ndc = project(cloud, camera)
    depth, index = rasterize_depth(ndc, camera.width, camera.height)
    covered = index != EMPTY_INDEX
    py, px = np.nonzero(covered)
    z = depth[covered]
    pts = rectify(camera, px, py, z)
    dirs, _ = camera.pixel_rays(px, py)
    flat = py.astype(np.int64) * camera.width + px.astype(np.int64)
    return flat, index[covered], pts, dirs


class _FrameSurface:
    """Cached full-frame surface data: pixel ids, normalized coordinates,
    and encoded network inputs for every covered pixel of one train frame."""

    def __init__(self, cloud: PointCloud, frame: Frame, model: RenderModel):
        from .afnet import encode

        cam = frame.camera
        self.width = cam.width
        self.height = cam.height
        flat, _, pts, dirs = surface_pixels(cloud, cam)
        self.flat = flat
        self.px = (flat % cam.width).astype(np.int64)
        self.py = (flat // cam.width).astype(np.int64)
        x = model.norm.apply(pts)
        enc = model.afnet.enc
        self.pe = encode(x, enc.l_pos, enc.include_raw).astype(model.afnet.dtype)
        self.de = encode(dirs, enc.l_dir, enc.include_raw).astype(model.afnet.dtype)
        self.gt = frame.image.reshape(-1, 3)

    def crop_rows(self, ox: int, oy: int, size: int):
        """Row subset for the pixel window [oy:oy+size, ox:ox+size]; returns
        (local flat ids, pe rows, de rows, gt crop)."""
        sel = (self.px >= ox) & (self.px < ox + size) & (self.py >= oy) & (self.py < oy + size)
        local = (self.py[sel] - oy) * size + (self.px[sel] - ox)
        gt = self.gt.reshape(self.height, self.width, 3)[oy : oy + size, ox : ox + size].reshape(-1, 3)
        return local, self.pe[sel], self.de[sel], gt


def _radiance_rows(model: RenderModel, pts: np.ndarray, dirs: np.ndarray, tape: Tape | None):
    x = model.norm.apply(pts)
    out = model.afnet.forward(x, dirs, tape)
    return out


def render_view(cloud: PointCloud, camera: Camera, model: RenderModel,
                refine: bool = False, background=(1.0, 1.0, 1.0), remap=None) -> np.ndarray:
    """Render one frame; pure function of its arguments. ``remap``, when
    given, rewrites (winner ids, surface points, directions) before the
    radiance query (used by the editor's inverse-transform lookup)."""
    t = _render_tensor(cloud, camera, model, refine, background, tape=None, gt=None, remap=remap)
    return t.data.reshape(camera.height, camera.width, 3).astype(np.float32)


def _render_tensor(cloud: PointCloud, camera: Camera, model: RenderModel,
                   refine: bool, background, tape: Tape | None, gt: np.ndarray | None,
                   remap=None):
    """Shared differentiable render; returns the flat (H*W, 3) image tensor,
    or the scalar L2 loss when gt is given."""
    H, W = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float32).reshape(3)
    flat, winners, pts, dirs = surface_pixels(cloud, camera)
    if remap is not None and len(flat):
        pts, dirs = remap(winners, pts, dirs)
    n_pix = H * W

    if len(flat) == 0:
        img = Tensor(np.tile(bg, (n_pix, 1)))
    else:
        out = _radiance_rows(model, pts, dirs, tape)
        bg_fill = np.tile(bg, (n_pix, 1))
        bg_fill[flat] = 0.0
        raw_img = scatter_rows(out.raw_rgb, flat, n_pix) + Tensor(bg_fill)
        if refine:
            if model.unet is None:
                raise DataError("refine requested but no refiner parameters are loaded")
            rows11 = concat(out.raw_rgb, out.features)
            feat_img = scatter_rows(rows11, flat, n_pix).reshape((H, W, 11))
            offset = model.unet.forward(feat_img, tape)
            img = compose_final(raw_img.reshape((H, W, 3)), offset).reshape((n_pix, 3))
        else:
            img = clamp01(raw_img)

    if gt is None:
        return img
    target = Tensor(np.asarray(gt, dtype=np.float32).reshape(n_pix, 3))
    return (img - target).square().mean()


def frequency_map(cloud: PointCloud, camera: Camera, model: RenderModel, layer: int) -> np.ndarray:
    """Absolute predicted frequency of AF layer ``layer`` (1-based) per
    covered pixel; empty pixels are 0. Returns the raw (H, W) map."""
    if not (1 <= layer <= model.afnet.NUM_AF):
        raise ConfigError(f"layer must be in [1, {model.afnet.NUM_AF}]")
    from .afnet import encode

    flat, _, pts, dirs = surface_pixels(cloud, camera)
    out = np.zeros(camera.height * camera.width, dtype=np.float32)
    if len(flat):
        x = model.norm.apply(pts)
        pe = encode(x, model.afnet.enc.l_pos, model.afnet.enc.include_raw).astype(np.float32)
        fp = model.afnet.hyper_forward(pe)
        out[flat] = np.abs(fp.omega.data[:, layer - 1])
    return out.reshape(camera.height, camera.width)


def export_frequency_map(freq: np.ndarray) -> np.ndarray:
    """Normalize a raw frequency map to [0, 1] by its 99th percentile."""
    covered = freq > 0
    if not covered.any():
        return np.zeros_like(freq)
    hi = np.percentile(freq[covered], 99.0)
    if hi <= 0:
        return np.zeros_like(freq)
    return np.clip(freq / hi, 0.0, 1.0)


# -- augmentation ------------------------------------------------------------


def bilinear_resize(img: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-center alignment."""
    h, w = img.shape[:2]
    ys = (np.arange(h2) + 0.5) * h / h2 - 0.5
    xs = (np.arange(w2) + 0.5) * w / w2 - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    if img.ndim == 2:
        img = img[..., None]
        squeeze = True
    else:
        squeeze = False
    top = img[y0][:, x0] * (1 - fx[..., None]) + img[y0][:, x1] * fx[..., None]
    bot = img[y1][:, x0] * (1 - fx[..., None]) + img[y1][:, x1] * fx[..., None]
    out = top * (1 - fy[..., None]) + bot * fy[..., None]
    return out[..., 0] if squeeze else out


def augment(frame: Frame, crop: int, scale_min: float, scale_max: float,
            rng: np.random.Generator) -> Frame:
    """Random scale then random crop; the camera is adjusted so rays through
    corresponding pixels are preserved."""
    h, w = frame.image.shape[:2]
    lo = max(scale_min, crop / min(h, w))
    if lo > scale_max:
        raise DataError(f"crop {crop} cannot fit in {h}x{w} at scale <= {scale_max}")
    s = rng.uniform(lo, scale_max)
    cam_s = frame.camera.scaled(s)
    h2, w2 = cam_s.height, cam_s.width
    img = frame.image if (h2 == h and w2 == w) else bilinear_resize(frame.image, h2, w2).astype(np.float32)
    alpha = None
    if frame.alpha is not None:
        alpha = frame.alpha if (h2 == h and w2 == w) else bilinear_resize(frame.alpha, h2, w2).astype(np.float32)
    oy = int(rng.integers(0, h2 - crop + 1))
    ox = int(rng.integers(0, w2 - crop + 1))
    cam_c = cam_s.cropped(ox, oy, crop)
    img_c = np.ascontiguousarray(img[oy : oy + crop, ox : ox + crop])
    alpha_c = np.ascontiguousarray(alpha[oy : oy + crop, ox : ox + crop]) if alpha is not None else None
    return Frame(camera=cam_c, image=img_c, alpha=alpha_c)


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: RenderModel
    losses: list[float] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)


def _crop_loss_cached(model: RenderModel, cache: "_FrameSurface", cfg: TrainConfig,
                      bg: np.ndarray, ox: int, oy: int, tape: Tape):
    """Loss for one crop window using cached full-frame surface data.

    Crops are pixel subsets of the full-frame rasterization, so this matches
    how evaluation renders (full frames) exactly, without re-splatting."""
    size = cfg.crop
    local, pe, de, gt = cache.crop_rows(ox, oy, size)
    n_pix = size * size
    if len(local) == 0:
        img = Tensor(np.tile(bg, (n_pix, 1)))
    else:
        out = model.afnet.forward_encoded(pe, de, tape)
        bg_fill = np.tile(bg, (n_pix, 1))
        bg_fill[local] = 0.0
        raw_img = scatter_rows(out.raw_rgb, local, n_pix) + Tensor(bg_fill)
        if cfg.refine:
            rows11 = concat(out.raw_rgb, out.features)
            feat_img = scatter_rows(rows11, local, n_pix).reshape((size, size, 11))
            offset = model.unet.forward(feat_img, tape)
            img = compose_final(raw_img.reshape((size, size, 3)), offset).reshape((n_pix, 3))
        else:
            img = clamp01(raw_img)
    return (img - Tensor(gt)).square().mean()


def train(dataset: SceneDataset, cfg: TrainConfig, enc: EncodingConfig = EncodingConfig(),
          checkpoint_path=None, log_fn=None) -> TrainResult:
    """Adam on L2 between rendered and ground-truth crops. Deterministic for
    a fixed seed; aborts with the last good checkpoint on non-finite loss.

    When the scale range is pinned to 1.0 the per-frame surface estimation
    is computed once and crops become row subsets; otherwise each batch
    element is augmented and re-splatted at its own camera.
    """
    if not dataset.train_frames:
        raise DataError("dataset has no training frames")
    rng = np.random.default_rng(cfg.seed)
    afnet = AdaptiveFrequencyNet(enc)
    afnet.init_params(rng)
    unet = None
    if cfg.refine:
        unet = RefinerUNet()
        unet.init_params(rng)
    norm = SceneNorm.fit(dataset.cloud)
    model = RenderModel(afnet=afnet, norm=norm, unet=unet)
    bg = np.asarray(cfg.background if cfg.background is not None else dataset.background,
                    dtype=np.float32)

    opt_af = Adam(afnet.parameters(), lr=cfg.lr_afnet)
    opt_un = Adam(unet.parameters(), lr=cfg.lr_unet) if unet else None
    chash = config_hash(cfg)
    result = TrainResult(model=model)
    t0 = time.time()

    fixed_scale = cfg.scale_min == 1.0 and cfg.scale_max == 1.0
    caches: dict[int, _FrameSurface] = {}

    def save_ckpt(step):
        if checkpoint_path is not None:
            model.step = step
            model.save(checkpoint_path, chash)

    for step in range(cfg.steps):
        tape = Tape()
        loss = None
        for _ in range(cfg.batch):
            fi = int(rng.integers(0, len(dataset.train_frames)))
            frame = dataset.train_frames[fi]
            if fixed_scale:
                if fi not in caches:
                    caches[fi] = _FrameSurface(dataset.cloud, frame, model)
                h, w = frame.image.shape[:2]
                oy = int(rng.integers(0, h - cfg.crop + 1))
                ox = int(rng.integers(0, w - cfg.crop + 1))
                term = _crop_loss_cached(model, caches[fi], cfg, bg, ox, oy, tape)
            else:
                crop_frame = augment(frame, cfg.crop, cfg.scale_min, cfg.scale_max, rng)
                term = _render_tensor(dataset.cloud, crop_frame.camera, model, cfg.refine, bg,
                                      tape=tape, gt=crop_frame.image)
            loss = term if loss is None else loss + term
        if cfg.batch > 1:
            loss = loss * (1.0 / cfg.batch)
        if not np.isfinite(loss.data):
            save_ckpt(step)
            raise NumericError(f"non-finite loss at step {step}")
        loss_val = float(loss.data)
        grads = tape.backward(loss)
        opt_af.step(grads)
        if opt_un is not None:
            opt_un.step(grads)
        result.losses.append(loss_val)

        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            entry = {"step": step, "loss": round(loss_val, 6),
                     "elapsed_s": round(time.time() - t0, 1)}
            result.log.append(entry)
            if log_fn:
                log_fn(entry)
        if checkpoint_path is not None and cfg.checkpoint_every and step and step % cfg.checkpoint_every == 0:
            save_ckpt(step)

    model.step = cfg.steps
    save_ckpt(cfg.steps)
    return result


def evaluate(dataset: SceneDataset, model: RenderModel, refine: bool = False,
             background=None, split: str = "test") -> dict:
    """PSNR/SSIM per view plus means, as a JSON-ready report."""
    frames = dataset.test_frames if split == "test" else dataset.train_frames
    if not frames:
        raise DataError(f"dataset has no {split} frames")
    bg = np.asarray(background if background is not None else dataset.background, dtype=np.float32)
    views = []
    for i, frame in enumerate(frames):
        img = render_view(dataset.cloud, frame.camera, model, refine, bg)
        views.append({"view": i, "psnr": psnr(img, frame.image), "ssim": ssim(img, frame.image)})
    return {
        "scene": dataset.name,
        "split": split,
        "views": views,
        "psnr_mean": float(np.mean([v["psnr"] for v in views])),
        "ssim_mean": float(np.mean([v["ssim"] for v in views])),
    }
