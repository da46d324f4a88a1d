"""Batch entry points for the whole pipeline.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Failures print a machine-readable JSON object on stderr.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import Config, dump_defaults, load_config
from .errors import ConfigError, DataError, FpcrError, NumericError
from .scene import Camera, load_scene, load_transforms, save_ply, save_png, save_scene
from .service import CHECKPOINT_NAME

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _fail(err: Exception):
    code = EXIT_CONFIG if isinstance(err, ConfigError) else \
        EXIT_NUMERIC if isinstance(err, NumericError) else \
        EXIT_DATA if isinstance(err, DataError) else 1
    print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
    sys.exit(code)


def _load(config_path) -> Config:
    return load_config(config_path)


def _resolve_camera(scene_dir: Path, spec: str, dataset=None) -> Camera:
    """--camera {test:i | train:i | file.json}"""
    if spec.startswith(("test:", "train:")):
        split, _, idx = spec.partition(":")
        path = Path(scene_dir) / f"transforms_{split}.json"
        cams = load_transforms(path)
        i = int(idx)
        if not (0 <= i < len(cams)):
            raise DataError(f"camera index {i} out of range for {len(cams)} {split} frames")
        return cams[i]
    cams = load_transforms(spec)
    if not cams:
        raise DataError(f"{spec}: no frames")
    return cams[0]


@click.group()
def main():
    """Frequency-modulated point cloud rendering pipeline."""


@main.command()
@click.option("--kind", type=click.Choice(["checker-plane", "textured-cube", "two-object"]), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--points", "num_points", type=int, default=None, help="override point count")
@click.option("--size", "image_size", type=int, default=64, show_default=True)
def toy(kind, out_dir, seed, num_points, image_size):
    """Generate a procedural scene with analytic ground truth."""
    try:
        from .afnet import AdaptiveFrequencyNet
        from .toy import generate_toy_scene
        from .trainer import RenderModel, SceneNorm

        ds = generate_toy_scene(kind, seed, num_points=num_points, image_size=image_size)
        save_scene(ds, out_dir)
        # seed an untrained checkpoint so the editor can render immediately
        afnet = AdaptiveFrequencyNet()
        afnet.init_params(np.random.default_rng(seed))
        model = RenderModel(afnet=afnet, norm=SceneNorm.fit(ds.cloud))
        model.save(Path(out_dir) / CHECKPOINT_NAME)
        click.echo(json.dumps({"scene": kind, "seed": seed, "points": len(ds.cloud),
                               "train_frames": len(ds.train_frames), "test_frames": len(ds.test_frames),
                               "out": str(out_dir)}))
    except FpcrError as e:
        _fail(e)


@main.command()
@click.option("--scene", "scene_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", default=0, show_default=True)
def preprocess(scene_dir, config_path, seed):
    """Optimize point cloud geometry; writes points_opt.ply and a loop report."""
    try:
        from .geomopt import optimize_geometry

        cfg = _load(config_path)
        ds = load_scene(scene_dir)
        cloud, report = optimize_geometry(ds.cloud, ds, cfg.geomopt, seed=seed,
                                          log_fn=lambda e: click.echo(json.dumps(e)))
        out = Path(scene_dir) / "points_opt.ply"
        save_ply(cloud, out)
        (Path(scene_dir) / "geomopt_report.json").write_text(json.dumps(report, indent=1))
        click.echo(json.dumps({"seed": seed, "points_in": len(ds.cloud), "points_out": len(cloud),
                               "loops": len(report), "out": str(out)}))
    except FpcrError as e:
        _fail(e)


@main.command()
@click.option("--scene", "scene_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--refine", is_flag=True, default=None, help="train the refiner U-Net as well")
@click.option("--steps", type=int, default=None, help="override train.steps")
@click.option("--seed", type=int, default=None, help="override train.seed")
@click.option("--use-preprocessed", is_flag=True, help="train on points_opt.ply")
def train(scene_dir, config_path, refine, steps, seed, use_preprocessed):
    """Train the radiance network (and optional refiner); writes checkpoint.fpcr."""
    try:
        from .scene import load_ply
        from .trainer import train as run_train

        cfg = _load(config_path)
        tc = cfg.train
        if refine is not None:
            tc.refine = bool(refine)
        if steps is not None:
            tc.steps = steps
        if seed is not None:
            tc.seed = seed
        ds = load_scene(scene_dir)
        if use_preprocessed:
            opt = Path(scene_dir) / "points_opt.ply"
            if not opt.exists():
                raise DataError(f"{opt} not found; run preprocess first")
            ds.cloud = load_ply(opt)
        ckpt = Path(scene_dir) / CHECKPOINT_NAME
        click.echo(json.dumps({"scene": ds.name, "seed": tc.seed, "steps": tc.steps,
                               "refine": tc.refine}))
        result = run_train(ds, tc, cfg.encoding, checkpoint_path=ckpt,
                           log_fn=lambda e: click.echo(json.dumps(e)))
        click.echo(json.dumps({"checkpoint": str(ckpt), "final_loss": result.losses[-1] if result.losses else None}))
    except FpcrError as e:
        _fail(e)


@main.command()
@click.option("--scene", "scene_dir", type=click.Path(exists=True), required=True)
@click.option("--camera", "camera_spec", required=True, help="test:i, train:i, or a transforms JSON file")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--refine/--no-refine", default=None)
@click.option("--freqmap", type=int, default=None, help="also export |frequency| of AF layer N")
def render(scene_dir, camera_spec, out_path, config_path, refine, freqmap):
    """Render one view from the trained checkpoint."""
    try:
        from .trainer import RenderModel, frequency_map, export_frequency_map, render_view

        cfg = _load(config_path)
        ds = load_scene(scene_dir)
        cam = _resolve_camera(Path(scene_dir), camera_spec)
        model = RenderModel.load(Path(scene_dir) / CHECKPOINT_NAME, cfg.encoding)
        use_refine = cfg.render.refine if refine is None else refine
        img = render_view(ds.cloud, cam, model, use_refine, ds.background)
        save_png(out_path, img)
        out = {"out": str(out_path), "width": cam.width, "height": cam.height}
        if freqmap is not None:
            fm = frequency_map(ds.cloud, cam, model, freqmap)
            fm_path = Path(out_path).with_suffix(f".freq{freqmap}.png")
            save_png(fm_path, export_frequency_map(fm))
            out["freqmap"] = str(fm_path)
        click.echo(json.dumps(out))
    except FpcrError as e:
        _fail(e)


@main.command("eval")
@click.option("--scene", "scene_dir", type=click.Path(exists=True), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--split", type=click.Choice(["test", "train"]), default="test", show_default=True)
def eval_cmd(scene_dir, config_path, split):
    """PSNR/SSIM over the held-out frames; prints a JSON report."""
    try:
        from .trainer import RenderModel, evaluate

        cfg = _load(config_path)
        ds = load_scene(scene_dir)
        model = RenderModel.load(Path(scene_dir) / CHECKPOINT_NAME, cfg.encoding)
        report = evaluate(ds, model, cfg.render.refine, split=split)
        click.echo(json.dumps(report, indent=1))
    except FpcrError as e:
        _fail(e)


@main.command()
@click.option("--scene", "scene_dir", type=click.Path(exists=True), required=True)
@click.option("--script", "script_path", type=click.Path(exists=True), required=True)
@click.option("--camera", "camera_spec", required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def edit(scene_dir, script_path, camera_spec, out_path, config_path):
    """Apply a JSON edit script and render the result."""
    try:
        from .editor import EditedScene, apply_script, render_edited
        from .trainer import RenderModel

        cfg = _load(config_path)
        ds = load_scene(scene_dir)
        cam = _resolve_camera(Path(scene_dir), camera_spec)
        model = RenderModel.load(Path(scene_dir) / CHECKPOINT_NAME, cfg.encoding)
        try:
            script = json.loads(Path(script_path).read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"{script_path}: invalid JSON: {e}")
        state = EditedScene.fresh(ds.cloud)
        apply_script(state, script, camera=cam)
        img = render_edited(state, cam, model, cfg.render.refine, ds.background)
        save_png(out_path, img)
        click.echo(json.dumps({"out": str(out_path), "edits": len(script),
                               "points": len(state.working)}))
    except FpcrError as e:
        _fail(e)


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True), required=True,
              help='JSON: {"entries": [{"scene_dir": ..., "placement": 16 floats}]}')
@click.option("--camera", "camera_spec", required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def compose(spec_path, camera_spec, out_path, config_path):
    """Compose several trained scenes into one image."""
    try:
        from .editor import CompositionEntry, EditedScene
        from .editor import compose as compose_scenes
        from .trainer import RenderModel

        cfg = _load(config_path)
        try:
            spec = json.loads(Path(spec_path).read_text())
        except json.JSONDecodeError as e:
            raise DataError(f"{spec_path}: invalid JSON: {e}")
        if "entries" not in spec or not spec["entries"]:
            raise DataError("composition spec needs a non-empty 'entries' list")
        entries = []
        background = None
        first_dir = None
        for e in spec["entries"]:
            sdir = Path(e["scene_dir"])
            first_dir = first_dir or sdir
            ds = load_scene(sdir)
            model = RenderModel.load(sdir / CHECKPOINT_NAME, cfg.encoding)
            placement = np.asarray(e.get("placement", np.eye(4).ravel().tolist()),
                                   dtype=np.float64).reshape(4, 4)
            entries.append(CompositionEntry(state=EditedScene.fresh(ds.cloud), model=model,
                                            placement=placement, refine=cfg.render.refine))
            background = ds.background if background is None else background
        cam = _resolve_camera(first_dir, camera_spec)
        img, _ = compose_scenes(entries, cam, background=background,
                                erode_radius=cfg.render.erode_radius)
        save_png(out_path, img)
        click.echo(json.dumps({"out": str(out_path), "scenes": len(entries)}))
    except FpcrError as e:
        _fail(e)


@main.command()
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--data-dir", type=click.Path(exists=True), default=None,
              help="scene root (default: FPCR_DATA_DIR or cwd)")
def serve(port, host, data_dir):
    """Run the HTTP service."""
    try:
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(data_dir), host=host, port=port, log_level="info")
    except FpcrError as e:
        _fail(e)


@main.command("config")
@click.option("--dump", is_flag=True, help="print every option at its default")
@click.option("--check", "config_path", type=click.Path(exists=True), default=None,
              help="validate a config file")
def config_cmd(dump, config_path):
    """Inspect configuration defaults or validate a file."""
    try:
        if dump:
            click.echo(dump_defaults(), nl=False)
            return
        if config_path:
            load_config(config_path)
            click.echo(json.dumps({"ok": True, "path": str(config_path)}))
            return
        click.echo(dump_defaults(), nl=False)
    except FpcrError as e:
        _fail(e)


if __name__ == "__main__":
    main()
