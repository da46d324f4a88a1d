"""HTTP facade over rendering, editing, and composition.

State lives in one in-process session: scenes loaded from a data directory
(``FPCR_DATA_DIR`` or --data-dir), a per-scene edit stack kept replayable
for undo, and a monotone revision counter bumped by every mutating call.
Render responses are PNG bytes tagged with the revision they reflect; a
request may pin a revision and receives 409 if the state moved on.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel, Field

from .editor import (CompositionEntry, EditedScene, RigidEdit, apply_edit,
                     compose, render_edited, select)
from .errors import ConfigError, DataError, FpcrError
from .scene import Camera, load_scene, save_png
from .trainer import RenderModel

CHECKPOINT_NAME = "checkpoint.fpcr"


# -- request/response models -------------------------------------------------


class CameraModel(BaseModel):
    pose: list[float] = Field(min_length=16, max_length=16, description="camera-to-world, row-major")
    focal: float = Field(gt=0)
    width: int = Field(gt=0, le=4096)
    height: int = Field(gt=0, le=4096)
    z_near: float | None = None
    z_far: float | None = None


class RenderRequest(BaseModel):
    camera: CameraModel
    refine: bool = False
    revision: int | None = None


class SphereSelect(BaseModel):
    center: list[float] = Field(min_length=3, max_length=3)
    radius: float = Field(ge=0)


class BoxSelect(BaseModel):
    min: list[float] = Field(min_length=3, max_length=3)
    max: list[float] = Field(min_length=3, max_length=3)


class RectSelect(BaseModel):
    x0: float
    y0: float
    x1: float
    y1: float
    camera: CameraModel


class SelectRequest(BaseModel):
    sphere: SphereSelect | None = None
    box: BoxSelect | None = None
    rect: RectSelect | None = None


class SelectResponse(BaseModel):
    selection_id: int
    count: int


class EditRequest(BaseModel):
    selection_id: int
    kind: str
    params: dict = Field(default_factory=dict)


class RevisionResponse(BaseModel):
    revision: int


class SceneInfo(BaseModel):
    id: str
    name: str
    point_count: int
    has_checkpoint: bool


class ComposeEntryModel(BaseModel):
    scene_id: str
    placement: list[float] = Field(min_length=16, max_length=16)


class ComposeRequest(BaseModel):
    entries: list[ComposeEntryModel] = Field(min_length=1)


class ComposeResponse(BaseModel):
    composition_id: int


class PointsResponse(BaseModel):
    stride: int
    count: int
    positions: list[list[float]]


# -- session state ------------------------------------------------------------


class _SceneSlot:
    def __init__(self, scene_id: str, root: Path):
        self.id = scene_id
        self.root = root
        self.dataset = load_scene(root)
        self.state = EditedScene.fresh(self.dataset.cloud)
        ckpt = root / CHECKPOINT_NAME
        self.model = RenderModel.load(ckpt) if ckpt.exists() else None

    @property
    def has_checkpoint(self) -> bool:
        return self.model is not None

    def default_depth_range(self):
        frames = self.dataset.train_frames or self.dataset.test_frames
        if frames:
            cam = frames[0].camera
            return cam.z_near, cam.z_far
        return 0.1, 100.0

    def rebuild(self, edits):
        self.state = EditedScene.fresh(self.dataset.cloud)
        for e in edits:
            apply_edit(self.state, e)


class Session:
    def __init__(self, data_dir: Path):
        self.data_dir = Path(data_dir)
        self.scenes: dict[str, _SceneSlot] = {}
        self.selections: dict[int, tuple[str, np.ndarray]] = {}
        self.compositions: dict[int, list[tuple[str, np.ndarray]]] = {}
        self.revision = 0
        self._next_id = 1
        if self.data_dir.is_dir():
            for child in sorted(self.data_dir.iterdir()):
                if (child / "points.ply").exists():
                    self.scenes[child.name] = _SceneSlot(child.name, child)

    def scene(self, scene_id: str) -> _SceneSlot:
        if scene_id not in self.scenes:
            raise HTTPException(status_code=404, detail=f"unknown scene {scene_id!r}")
        return self.scenes[scene_id]

    def fresh_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i


def _camera_from_model(m: CameraModel, slot: _SceneSlot) -> Camera:
    z_near, z_far = slot.default_depth_range()
    pose = np.asarray(m.pose, dtype=np.float64).reshape(4, 4)
    try:
        return Camera(m.width, m.height, m.focal, pose,
                      m.z_near if m.z_near is not None else z_near,
                      m.z_far if m.z_far is not None else z_far)
    except DataError as e:
        raise HTTPException(status_code=400, detail=str(e))


def _png_response(image: np.ndarray, revision: int) -> Response:
    buf = io.BytesIO()
    save_png(buf, image)
    return Response(content=buf.getvalue(), media_type="image/png",
                    headers={"X-Revision": str(revision)})


def create_app(data_dir=None) -> FastAPI:
    data_dir = Path(data_dir or os.environ.get("FPCR_DATA_DIR", "."))
    session = Session(data_dir)
    app = FastAPI(title="fpcr", version="0.1.0")
    app.state.session = session

    @app.exception_handler(FpcrError)
    async def _fpcr_error(request, exc: FpcrError):
        from fastapi.responses import JSONResponse

        code = 400 if isinstance(exc, ConfigError) else 404 if isinstance(exc, DataError) else 500
        return JSONResponse(status_code=code, content={"detail": str(exc)})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/scenes", response_model=list[SceneInfo])
    def list_scenes():
        return [SceneInfo(id=s.id, name=s.dataset.name, point_count=len(s.dataset.cloud),
                          has_checkpoint=s.has_checkpoint)
                for s in session.scenes.values()]

    @app.post("/scenes/{scene_id}/render")
    def render_scene(scene_id: str, req: RenderRequest):
        slot = session.scene(scene_id)
        if slot.model is None:
            raise HTTPException(status_code=404, detail=f"scene {scene_id!r} has no checkpoint")
        if req.revision is not None and req.revision != session.revision:
            raise HTTPException(status_code=409,
                                detail=f"stale revision {req.revision}, current {session.revision}")
        if req.refine and slot.model.unet is None:
            raise HTTPException(status_code=400, detail="checkpoint has no refiner parameters")
        cam = _camera_from_model(req.camera, slot)
        img = render_edited(slot.state, cam, slot.model, req.refine, slot.dataset.background)
        return _png_response(img, session.revision)

    @app.get("/scenes/{scene_id}/points", response_model=PointsResponse)
    def scene_points(scene_id: str, stride: int = Query(default=1, ge=1)):
        slot = session.scene(scene_id)
        pos = slot.state.working.positions[::stride]
        return PointsResponse(stride=stride, count=len(pos), positions=pos.tolist())

    @app.post("/scenes/{scene_id}/select", response_model=SelectResponse)
    def select_points(scene_id: str, req: SelectRequest):
        slot = session.scene(scene_id)
        given = [k for k in ("sphere", "box", "rect") if getattr(req, k) is not None]
        if len(given) != 1:
            raise HTTPException(status_code=400, detail="exactly one selection primitive required")
        kind = given[0]
        camera = None
        if kind == "rect":
            camera = _camera_from_model(req.rect.camera, slot)
            primitive = {"rect": req.rect.model_dump(exclude={"camera"})}
        else:
            primitive = {kind: getattr(req, kind).model_dump()}
        sel = select(slot.state.working, primitive, camera=camera, scene_id=scene_id)
        sid = session.fresh_id()
        session.selections[sid] = (scene_id, sel.indices)
        return SelectResponse(selection_id=sid, count=len(sel))

    @app.post("/scenes/{scene_id}/edit", response_model=RevisionResponse)
    def edit_scene(scene_id: str, req: EditRequest):
        slot = session.scene(scene_id)
        if req.selection_id not in session.selections:
            raise HTTPException(status_code=404, detail=f"unknown selection {req.selection_id}")
        sel_scene, indices = session.selections[req.selection_id]
        if sel_scene != scene_id:
            raise HTTPException(status_code=400, detail="selection belongs to another scene")
        from .editor import Selection

        try:
            edit = RigidEdit(kind=req.kind, target=Selection(scene_id=scene_id, indices=indices),
                             params=req.params)
            apply_edit(slot.state, edit)
        except ConfigError as e:
            raise HTTPException(status_code=400, detail=str(e))
        session.revision += 1
        return RevisionResponse(revision=session.revision)

    @app.post("/scenes/{scene_id}/undo", response_model=RevisionResponse)
    def undo_edit(scene_id: str):
        slot = session.scene(scene_id)
        if slot.state.edits:
            slot.rebuild(slot.state.edits[:-1])
        session.revision += 1
        return RevisionResponse(revision=session.revision)

    @app.post("/compose", response_model=ComposeResponse)
    def make_composition(req: ComposeRequest):
        entries = []
        for e in req.entries:
            session.scene(e.scene_id)  # 404 on unknown
            entries.append((e.scene_id, np.asarray(e.placement, dtype=np.float64).reshape(4, 4)))
        cid = session.fresh_id()
        session.compositions[cid] = entries
        session.revision += 1
        return ComposeResponse(composition_id=cid)

    @app.post("/compositions/{comp_id}/render")
    def render_composition(comp_id: int, req: RenderRequest):
        if comp_id not in session.compositions:
            raise HTTPException(status_code=404, detail=f"unknown composition {comp_id}")
        if req.revision is not None and req.revision != session.revision:
            raise HTTPException(status_code=409,
                                detail=f"stale revision {req.revision}, current {session.revision}")
        entries = []
        background = None
        for scene_id, placement in session.compositions[comp_id]:
            slot = session.scene(scene_id)
            if slot.model is None:
                raise HTTPException(status_code=404, detail=f"scene {scene_id!r} has no checkpoint")
            entries.append(CompositionEntry(state=slot.state, model=slot.model,
                                            placement=placement, refine=req.refine))
            background = slot.dataset.background if background is None else background
        first_slot = session.scene(session.compositions[comp_id][0][0])
        cam = _camera_from_model(req.camera, first_slot)
        img, _ = compose(entries, cam, background=background)
        return _png_response(img, session.revision)

    return app
