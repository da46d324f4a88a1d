"""Object-level rigid editing and pixel-level scene composition.

Edits move points of the working cloud while a per-point transform table
remembers how each point left its trained position. At render time the
index buffer hands every covered pixel its winning point's transform, the
estimated surface coordinate is mapped back through the inverse, and the
radiance network is queried in the original space. Composition rasterizes
all placed clouds jointly to assign each pixel to the nearest scene, then
blends per-scene solo renders under eroded masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .rasterizer import erode_mask, project, rasterize_depth, scene_masks
from .scene import Camera, PointCloud
from .trainer import RenderModel, render_view

EDIT_KINDS = ("translate", "rotate", "scale", "duplicate", "delete")


@dataclass
class Selection:
    scene_id: str
    indices: np.ndarray  # sorted unique ids into the working cloud

    def __post_init__(self):
        self.indices = np.unique(np.asarray(self.indices, dtype=np.int64))

    def __len__(self):
        return len(self.indices)


@dataclass
class RigidEdit:
    kind: str
    target: Selection
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise ConfigError(f"unknown edit kind {self.kind!r}; options: {EDIT_KINDS}")


def translate_matrix(vector) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = np.asarray(vector, dtype=np.float64)
    return m


def rotate_matrix(axis, angle_rad: float, pivot=(0.0, 0.0, 0.0)) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ConfigError("rotation axis must be non-zero")
    x, y, z = axis / n
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    rot = np.array([
        [c + x * x * (1 - c), x * y * (1 - c) - z * s, x * z * (1 - c) + y * s],
        [y * x * (1 - c) + z * s, c + y * y * (1 - c), y * z * (1 - c) - x * s],
        [z * x * (1 - c) - y * s, z * y * (1 - c) + x * s, c + z * z * (1 - c)],
    ])
    m = np.eye(4)
    m[:3, :3] = rot
    pivot = np.asarray(pivot, dtype=np.float64)
    m[:3, 3] = pivot - rot @ pivot
    return m


def scale_matrix(factor: float, pivot=(0.0, 0.0, 0.0)) -> np.ndarray:
    if factor <= 0:
        raise ConfigError(f"scale factor must be positive, got {factor}")
    pivot = np.asarray(pivot, dtype=np.float64)
    m = np.eye(4)
    m[:3, :3] *= factor
    m[:3, 3] = pivot * (1.0 - factor)
    return m


def _edit_matrix(edit: RigidEdit) -> np.ndarray:
    p = edit.params
    if edit.kind == "translate":
        return translate_matrix(p["vector"])
    if edit.kind == "rotate":
        return rotate_matrix(p["axis"], float(p["angle"]), p.get("pivot", (0, 0, 0)))
    if edit.kind == "scale":
        return scale_matrix(float(p["factor"]), p.get("pivot", (0, 0, 0)))
    raise ConfigError(f"{edit.kind} has no transform matrix")


@dataclass
class EditedScene:
    """Working copy of a scene plus the per-point transform bookkeeping."""

    base: PointCloud
    working: PointCloud
    transforms: list[np.ndarray]  # 4x4 rigid + uniform scale; [0] is identity
    transform_id: np.ndarray  # (N,) index into transforms
    base_index: np.ndarray  # (N,) source row in the base cloud
    edits: list[RigidEdit] = field(default_factory=list)

    @staticmethod
    def fresh(base: PointCloud) -> "EditedScene":
        n = len(base)
        return EditedScene(
            base=base,
            working=PointCloud(
                positions=base.positions.copy(),
                radii=base.radii.copy(),
                opacity_logit=base.opacity_logit.copy(),
                color_seed=None if base.color_seed is None else base.color_seed.copy(),
                source_index=None if base.source_index is None else base.source_index.copy(),
            ),
            transforms=[np.eye(4)],
            transform_id=np.zeros(n, dtype=np.int64),
            base_index=np.arange(n, dtype=np.int64),
        )

    @property
    def is_identity(self) -> bool:
        return (len(self.transforms) == 1
                and np.array_equal(self.transforms[0], np.eye(4))
                and len(self.working) == len(self.base)
                and bool(np.all(self.transform_id == 0)))

    def validate(self, atol: float = 1e-5) -> None:
        """Check that stored transforms reproduce the working positions."""
        table = np.stack(self.transforms)
        t = table[self.transform_id]
        src = self.base.positions[self.base_index]
        rebuilt = np.einsum("nij,nj->ni", t[:, :3, :3], src) + t[:, :3, 3]
        if len(rebuilt) and not np.allclose(rebuilt, self.working.positions, atol=atol):
            raise DataError("transform table does not reproduce working positions")


def select(cloud: PointCloud, primitive: dict, camera: Camera | None = None,
           scene_id: str = "") -> Selection:
    """Deterministic point selection by world sphere, world box, or screen
    rectangle (projected points that win their own pixel)."""
    if "sphere" in primitive:
        spec = primitive["sphere"]
        center = np.asarray(spec["center"], dtype=np.float64)
        radius = float(spec["radius"])
        d = np.linalg.norm(cloud.positions - center, axis=1)
        idx = np.nonzero(d < radius)[0]
    elif "box" in primitive:
        spec = primitive["box"]
        lo = np.asarray(spec["min"], dtype=np.float64)
        hi = np.asarray(spec["max"], dtype=np.float64)
        inside = np.all((cloud.positions >= lo) & (cloud.positions <= hi), axis=1)
        idx = np.nonzero(inside)[0]
    elif "rect" in primitive:
        if camera is None:
            raise ConfigError("screen-rect selection requires a camera")
        spec = primitive["rect"]
        x0, y0, x1, y1 = (float(spec[k]) for k in ("x0", "y0", "x1", "y1"))
        ndc = project(cloud, camera)
        _, index = rasterize_depth(ndc, camera.width, camera.height)
        u = (ndc.x + 1.0) * 0.5 * camera.width
        v = (ndc.y + 1.0) * 0.5 * camera.height
        px = np.floor(u).astype(np.int64)
        py = np.floor(v).astype(np.int64)
        inside = (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
        inside &= (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
        wins = np.zeros(len(ndc), dtype=bool)
        ii = np.nonzero(inside)[0]
        wins[ii] = index[py[ii], px[ii]] == ndc.index[ii]
        idx = ndc.index[inside & wins]
    else:
        raise ConfigError(f"unknown selection primitive: {sorted(primitive)}")
    return Selection(scene_id=scene_id, indices=idx)


def apply_edit(state: EditedScene, edit: RigidEdit) -> EditedScene:
    """Apply one edit in place: update working positions and compose the
    transform table (new transform = edit o old)."""
    sel = edit.target.indices
    n = len(state.working)
    if len(sel) and (sel.min() < 0 or sel.max() >= n):
        raise DataError(f"selection indices out of range for {n} points")

    if edit.kind == "delete":
        keep = np.ones(n, dtype=bool)
        keep[sel] = False
        w = state.working
        state.working = PointCloud(
            positions=w.positions[keep], radii=w.radii[keep],
            opacity_logit=w.opacity_logit[keep],
            color_seed=None if w.color_seed is None else w.color_seed[keep],
            source_index=None if w.source_index is None else w.source_index[keep])
        state.transform_id = state.transform_id[keep]
        state.base_index = state.base_index[keep]
    elif edit.kind == "duplicate":
        w = state.working
        state.working = PointCloud(
            positions=np.concatenate([w.positions, w.positions[sel]]),
            radii=np.concatenate([w.radii, w.radii[sel]]),
            opacity_logit=np.concatenate([w.opacity_logit, w.opacity_logit[sel]]),
            color_seed=None if w.color_seed is None else np.concatenate([w.color_seed, w.color_seed[sel]]),
            source_index=None if w.source_index is None else np.concatenate([w.source_index, w.source_index[sel]]))
        state.transform_id = np.concatenate([state.transform_id, state.transform_id[sel]])
        state.base_index = np.concatenate([state.base_index, state.base_index[sel]])
    else:
        t_edit = _edit_matrix(edit)
        # exact identity edits leave the cloud bit-identical
        if len(sel) and not np.array_equal(t_edit, np.eye(4)):
            pos = state.working.positions
            pos[sel] = pos[sel] @ t_edit[:3, :3].T + t_edit[:3, 3]
            new_ids = {}
            for tid in np.unique(state.transform_id[sel]):
                new_ids[int(tid)] = len(state.transforms)
                state.transforms.append(t_edit @ state.transforms[int(tid)])
            state.transform_id[sel] = [new_ids[int(t)] for t in state.transform_id[sel]]
    state.edits.append(edit)
    return state


def _inverse_remap(state: EditedScene):
    """Per-pixel inverse-transform query for the radiance network: maps
    edited-space surface points and view directions back to trained space."""
    inv = np.stack([np.linalg.inv(t) for t in state.transforms])

    def remap(winners, pts, dirs):
        tids = state.transform_id[winners]
        m = inv[tids]  # (P, 4, 4)
        pts_o = np.einsum("pij,pj->pi", m[:, :3, :3], pts) + m[:, :3, 3]
        d_o = np.einsum("pij,pj->pi", m[:, :3, :3], dirs)
        norms = np.linalg.norm(d_o, axis=1, keepdims=True)
        return pts_o, d_o / np.maximum(norms, 1e-30)

    return remap


def render_edited(state: EditedScene, camera: Camera, model: RenderModel,
                  refine: bool = False, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Render the working cloud, querying radiance through each winning
    point's inverse transform. With no edits this is byte-identical to the
    plain render path."""
    remap = None if state.is_identity else _inverse_remap(state)
    return render_view(state.working, camera, model, refine, background, remap=remap)


@dataclass
class CompositionEntry:
    state: EditedScene
    model: RenderModel
    placement: np.ndarray  # 4x4 world placement
    refine: bool = False


def _placed(state: EditedScene, placement: np.ndarray) -> EditedScene:
    """Fold a placement transform into every point's composed transform."""
    if np.array_equal(placement, np.eye(4)):
        return state
    w = state.working
    pos = w.positions @ placement[:3, :3].T + placement[:3, 3]
    return EditedScene(
        base=state.base,
        working=PointCloud(positions=pos, radii=w.radii.copy(), opacity_logit=w.opacity_logit.copy()),
        transforms=[placement @ t for t in state.transforms],
        transform_id=state.transform_id.copy(),
        base_index=state.base_index.copy(),
    )


def compose(entries: list[CompositionEntry], camera: Camera,
            background=(1.0, 1.0, 1.0), erode_radius: int = 2):
    """Pixel-level multi-scene composition.

    Rasterizes all placed clouds jointly to find each pixel's owning scene,
    erodes every mask to trim splat bleed, renders each scene solo, and sums
    the masked images. Returns (image, masks).
    """
    if not entries:
        raise ConfigError("composition needs at least one entry")
    placed = [_placed(e.state, np.asarray(e.placement, dtype=np.float64)) for e in entries]
    ndcs = [project(p.working, camera) for p in placed]
    masks, _ = scene_masks(ndcs, camera.width, camera.height)
    masks = [erode_mask(m, erode_radius) for m in masks]

    bg = np.asarray(background, dtype=np.float32).reshape(3)
    out = np.tile(bg, (camera.height, camera.width, 1))
    for entry, state, mask in zip(entries, placed, masks):
        img = render_edited(state, camera, entry.model, entry.refine, background)
        out[mask] = img[mask]
    return out.astype(np.float32), masks


# -- scripted edits (CLI / service schema) ---------------------------------


def edit_from_dict(spec: dict, cloud: PointCloud, camera: Camera | None = None,
                   scene_id: str = "") -> RigidEdit:
    """Build a RigidEdit from the JSON schema
    {kind, selection: {sphere|box|rect}, params}."""
    if "kind" not in spec or "selection" not in spec:
        raise ConfigError("edit spec requires 'kind' and 'selection'")
    sel = select(cloud, spec["selection"], camera=camera, scene_id=scene_id)
    return RigidEdit(kind=spec["kind"], target=sel, params=spec.get("params", {}))


def apply_script(state: EditedScene, script: list[dict], camera: Camera | None = None) -> EditedScene:
    """Replay a JSON edit list; selections are evaluated against the working
    cloud as it exists when each edit runs."""
    for spec in script:
        edit = edit_from_dict(spec, state.working, camera=camera)
        apply_edit(state, edit)
    return state
