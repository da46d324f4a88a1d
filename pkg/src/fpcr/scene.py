"""Scene data model and file formats.

Point clouds travel as binary little-endian PLY, cameras as a JSON file with
``camera_angle_x`` and per-frame ``transform_matrix`` entries, and images as
8-bit PNG. A scene directory looks like::

    scene/
      points.ply
      transforms_train.json
      transforms_test.json
      images/*.png

Camera convention: right-handed, the camera looks down -Z in its own frame,
x right, y up; ``pose`` is the 4x4 camera-to-world transform. Geometry is
kept in float64 end to end; only network math runs in float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

DEFAULT_RADIUS = 5e-3  # NDC units


@dataclass
class PointCloud:
    """Explicit scene geometry: positions plus per-point splat attributes."""

    positions: np.ndarray  # (N, 3) float64, world meters
    radii: np.ndarray  # (N,) float64, NDC units
    opacity_logit: np.ndarray  # (N,) float64; alpha = sigmoid(logit)
    color_seed: np.ndarray | None = None  # (N, 3) in [0, 1]
    source_index: np.ndarray | None = None  # (N,) provenance ids

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.radii = np.ascontiguousarray(self.radii, dtype=np.float64).reshape(n)
        self.opacity_logit = np.ascontiguousarray(self.opacity_logit, dtype=np.float64).reshape(n)
        if self.color_seed is not None:
            self.color_seed = np.ascontiguousarray(self.color_seed, dtype=np.float64).reshape(n, 3)
        if self.source_index is not None:
            self.source_index = np.ascontiguousarray(self.source_index, dtype=np.int64).reshape(n)
        if n and not np.all(np.isfinite(self.positions)):
            raise DataError("point cloud has non-finite positions")
        if n and np.any(self.radii <= 0):
            raise DataError("point radii must be positive")

    def __len__(self):
        return len(self.positions)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    @staticmethod
    def from_positions(positions, radius=DEFAULT_RADIUS, color_seed=None) -> "PointCloud":
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        return PointCloud(
            positions=positions,
            radii=np.full(n, radius, dtype=np.float64),
            opacity_logit=np.zeros(n, dtype=np.float64),
            color_seed=color_seed,
        )


@dataclass
class Camera:
    """Pinhole camera: intrinsics, world pose, and depth range."""

    width: int
    height: int
    focal: float  # pixels
    pose: np.ndarray  # (4, 4) camera-to-world
    z_near: float
    z_far: float
    cx: float | None = None  # principal point, defaults to image center
    cy: float | None = None

    def __post_init__(self):
        self.pose = np.ascontiguousarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0
        if not (0 < self.z_near < self.z_far):
            raise DataError(f"require 0 < z_near < z_far, got {self.z_near}, {self.z_far}")
        r = self.pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
            raise DataError("camera pose rotation is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        """World-space view direction (camera -Z axis)."""
        return -self.pose[:3, 2]

    def pixel_rays(self, px: np.ndarray, py: np.ndarray):
        """Unit rays through pixel centers (px, py); returns (dirs, cos_to_axis).

        ``cos_to_axis`` is the cosine between each ray and the camera forward
        axis, used to convert view-space depth into ray length.
        """
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        a = (px + 0.5 - self.cx) / self.focal
        b = -(py + 0.5 - self.cy) / self.focal
        d_cam = np.stack([a, b, -np.ones_like(a)], axis=-1)
        norm = np.linalg.norm(d_cam, axis=-1, keepdims=True)
        d_cam = d_cam / norm
        d_world = d_cam @ self.pose[:3, :3].T
        cos = 1.0 / norm[..., 0]
        return d_world, cos

    def scaled(self, scale: float) -> "Camera":
        """Intrinsics for the bilinearly resampled image of relative size ``scale``."""
        w = int(round(self.width * scale))
        h = int(round(self.height * scale))
        s_x = w / self.width
        s_y = h / self.height
        return Camera(w, h, self.focal * s_x, self.pose.copy(), self.z_near, self.z_far,
                      cx=self.cx * s_x, cy=self.cy * s_y)

    def cropped(self, ox: int, oy: int, size: int) -> "Camera":
        """Intrinsics for the crop [oy:oy+size, ox:ox+size]. Rays through
        cropped pixel (i, j) equal rays through original (i+ox, j+oy)."""
        if ox < 0 or oy < 0 or ox + size > self.width or oy + size > self.height:
            raise DataError(f"crop {size} at ({ox},{oy}) exceeds {self.width}x{self.height}")
        return Camera(size, size, self.focal, self.pose.copy(), self.z_near, self.z_far,
                      cx=self.cx - ox, cy=self.cy - oy)


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    alpha: np.ndarray | None = None  # (H, W) float32 in [0, 1]

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise DataError(f"image extents {self.image.shape} do not match camera "
                            f"{self.camera.height}x{self.camera.width}")
        if self.alpha is not None:
            self.alpha = np.ascontiguousarray(self.alpha, dtype=np.float32)
            if self.alpha.shape != self.image.shape[:2]:
                raise DataError("alpha extents do not match image")


@dataclass
class SceneDataset:
    name: str
    cloud: PointCloud
    train_frames: list[Frame] = field(default_factory=list)
    test_frames: list[Frame] = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float32).reshape(3)
        sizes = {(f.camera.width, f.camera.height) for f in self.train_frames + self.test_frames}
        if len(sizes) > 1:
            raise DataError(f"frames disagree on extents: {sizes}")


# -- PLY ------------------------------------------------------------------

_PLY_FLOAT_TYPES = {"float": ("<f4", 4), "float32": ("<f4", 4), "double": ("<f8", 8), "float64": ("<f8", 8)}
_PLY_SIZES = {"char": 1, "uchar": 1, "int8": 1, "uint8": 1, "short": 2, "ushort": 2,
              "int16": 2, "uint16": 2, "int": 4, "uint": 4, "int32": 4, "uint32": 4,
              "float": 4, "float32": 4, "double": 8, "float64": 8}


def save_ply(cloud: PointCloud, path) -> None:
    """Binary little-endian PLY with per-vertex x/y/z (double), radius and
    opacity (double), and optional red/green/blue (uchar from color_seed)."""
    n = len(cloud)
    has_color = cloud.color_seed is not None
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for prop in ("x", "y", "z"):
        header.append(f"property double {prop}")
    header.append("property double radius")
    header.append("property double opacity")
    if has_color:
        for prop in ("red", "green", "blue"):
            header.append(f"property uchar {prop}")
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if has_color:
            rgb8 = np.clip(np.rint(cloud.color_seed * 255.0), 0, 255).astype(np.uint8)
            rec = np.dtype([("xyz", "<f8", 3), ("radius", "<f8"), ("opacity", "<f8"), ("rgb", "u1", 3)])
            buf = np.empty(n, dtype=rec)
            buf["rgb"] = rgb8
        else:
            rec = np.dtype([("xyz", "<f8", 3), ("radius", "<f8"), ("opacity", "<f8")])
            buf = np.empty(n, dtype=rec)
        buf["xyz"] = cloud.positions
        buf["radius"] = cloud.radii
        buf["opacity"] = cloud.opacity_logit
        f.write(buf.tobytes())


def load_ply(path) -> PointCloud:
    """Parse a binary little-endian PLY with float x/y/z and optional radius,
    opacity, red/green/blue properties. Missing optionals take defaults
    (radius 5e-3, opacity logit 0)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"PLY not found: {path}")
    blob = path.read_bytes()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n"):]

    n = None
    props: list[tuple[str, str]] = []
    fmt_ok = False
    in_vertex = False
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise DataError(f"{path}: list properties unsupported")
            props.append((parts[1], parts[2]))
    if not fmt_ok:
        raise DataError(f"{path}: only binary_little_endian PLY is supported")
    if n is None:
        raise DataError(f"{path}: no vertex element")

    for coord in ("x", "y", "z"):
        typ = next((t for t, name in props if name == coord), None)
        if typ is None:
            raise DataError(f"{path}: missing {coord} property")
        if typ not in _PLY_FLOAT_TYPES:
            raise DataError(f"{path}: coordinate property {coord} must be float, got {typ}")

    fields = []
    for typ, name in props:
        if typ not in _PLY_SIZES:
            raise DataError(f"{path}: unknown property type {typ}")
        np_typ = {"char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1", "short": "<i2",
                  "ushort": "<u2", "int16": "<i2", "uint16": "<u2", "int": "<i4", "uint": "<u4",
                  "int32": "<i4", "uint32": "<u4", "float": "<f4", "float32": "<f4",
                  "double": "<f8", "float64": "<f8"}[typ]
        fields.append((name, np_typ))
    rec = np.dtype(fields)
    if len(body) < rec.itemsize * n:
        raise DataError(f"{path}: truncated body")
    data = np.frombuffer(body, dtype=rec, count=n)

    names = [name for _, name in props]
    positions = np.stack([data["x"], data["y"], data["z"]], axis=-1).astype(np.float64)
    radii = (data["radius"].astype(np.float64) if "radius" in names
             else np.full(n, DEFAULT_RADIUS, dtype=np.float64))
    opacity = data["opacity"].astype(np.float64) if "opacity" in names else np.zeros(n)
    color = None
    if all(c in names for c in ("red", "green", "blue")):
        rgb = np.stack([data["red"], data["green"], data["blue"]], axis=-1)
        scale = 255.0 if rgb.dtype == np.uint8 else 1.0
        color = rgb.astype(np.float64) / scale
    return PointCloud(positions=positions, radii=radii, opacity_logit=opacity, color_seed=color)


# -- transforms.json ------------------------------------------------------

def load_transforms(path, width: int | None = None, height: int | None = None,
                    z_near: float = 0.1, z_far: float = 100.0) -> list[Camera]:
    """Read a camera list: ``camera_angle_x`` plus frames with 4x4
    camera-to-world ``transform_matrix``. focal = 0.5*width/tan(0.5*angle)."""
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"transforms file not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}")
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise DataError(f"{path}: missing camera_angle_x or frames")
    width = int(meta.get("width", width if width is not None else 800))
    height = int(meta.get("height", height if height is not None else width))
    focal = 0.5 * width / np.tan(0.5 * float(meta["camera_angle_x"]))
    cams = []
    for frame in meta["frames"]:
        if "transform_matrix" not in frame:
            raise DataError(f"{path}: frame missing transform_matrix")
        mat = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if mat.shape != (4, 4) or abs(np.linalg.det(mat[:3, :3])) < 1e-12:
            raise DataError(f"{path}: transform_matrix must be an invertible 4x4")
        cams.append(Camera(width, height, float(focal), mat,
                           float(meta.get("z_near", z_near)), float(meta.get("z_far", z_far))))
    return cams


def save_transforms(path, cameras: list[Camera]) -> None:
    if not cameras:
        raise DataError("cannot save an empty camera list")
    cam0 = cameras[0]
    angle = 2.0 * np.arctan(0.5 * cam0.width / cam0.focal)
    meta = {
        "camera_angle_x": float(angle),
        "width": cam0.width,
        "height": cam0.height,
        "z_near": cam0.z_near,
        "z_far": cam0.z_far,
        "frames": [
            {"file_path": f"images/frame_{i:04d}", "transform_matrix": cam.pose.tolist()}
            for i, cam in enumerate(cameras)
        ],
    }
    Path(path).write_text(json.dumps(meta, indent=1))


# -- PNG ------------------------------------------------------------------

def save_png(path, image: np.ndarray, alpha: np.ndarray | None = None) -> None:
    """Write float [0,1] to 8-bit PNG; value*255 with round-half-to-even."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path, format="PNG")
        return
    if alpha is not None:
        a = np.clip(np.rint(np.asarray(alpha, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        arr = np.concatenate([arr, a[..., None]], axis=-1)
        Image.fromarray(arr, mode="RGBA").save(path, format="PNG")
    else:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def save_png_u16(path, image: np.ndarray) -> None:
    """16-bit grayscale PNG from float [0,1] (debug depth/index dumps)."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path, format="PNG")


def load_png(path):
    """Read a PNG to float32 [0,1]; returns (rgb, alpha_or_None)."""
    img = Image.open(path)
    if img.mode == "RGBA":
        arr = np.asarray(img, dtype=np.float32) / 255.0
        return np.ascontiguousarray(arr[..., :3]), np.ascontiguousarray(arr[..., 3])
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr, None


# -- scene directories ----------------------------------------------------

def save_scene(dataset: SceneDataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    save_ply(dataset.cloud, root / "points.ply")
    for split, frames in (("train", dataset.train_frames), ("test", dataset.test_frames)):
        save_transforms(root / f"transforms_{split}.json", [f.camera for f in frames])
        for i, frame in enumerate(frames):
            save_png(root / "images" / f"{split}_{i:04d}.png", frame.image, frame.alpha)
    meta = {"name": dataset.name, "background": dataset.background.tolist()}
    (root / "scene.json").write_text(json.dumps(meta, indent=1))


def load_scene(root) -> SceneDataset:
    root = Path(root)
    if not (root / "points.ply").exists():
        raise DataError(f"{root}: missing points.ply")
    cloud = load_ply(root / "points.ply")
    meta = {}
    if (root / "scene.json").exists():
        meta = json.loads((root / "scene.json").read_text())
    frames: dict[str, list[Frame]] = {"train": [], "test": []}
    for split in ("train", "test"):
        tpath = root / f"transforms_{split}.json"
        if not tpath.exists():
            continue
        for i, cam in enumerate(load_transforms(tpath)):
            ipath = root / "images" / f"{split}_{i:04d}.png"
            if not ipath.exists():
                raise DataError(f"{root}: missing image {ipath.name}")
            rgb, alpha = load_png(ipath)
            frames[split].append(Frame(camera=cam, image=rgb, alpha=alpha))
    return SceneDataset(
        name=meta.get("name", root.name),
        cloud=cloud,
        train_frames=frames["train"],
        test_frames=frames["test"],
        background=np.asarray(meta.get("background", [1.0, 1.0, 1.0]), dtype=np.float32),
    )
