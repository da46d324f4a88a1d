"""Rendering path, augmentation, and the training loop."""

import numpy as np
import pytest

from fpcr.afnet import AdaptiveFrequencyNet, EncodingConfig
from fpcr.errors import ConfigError, DataError
from fpcr.scene import Camera, Frame, PointCloud, SceneDataset
from fpcr.trainer import (RenderModel, SceneNorm, TrainConfig, augment,
                          bilinear_resize, config_hash, evaluate,
                          frequency_map, render_view, train)
from fpcr.unet import RefinerUNet


def _tiny_scene(rng, n_points=3000, size=32, n_train=4, n_test=2):
    from fpcr.toy import _Cube, _sphere_cameras, render_analytic

    cube = _Cube(np.zeros(3), 1.0, lambda p: np.tile([[0.8, 0.3, 0.2]], (len(p), 1)))
    pts = cube.sample(rng, n_points)
    focal = 1.1 * size
    spacing = np.sqrt(6.0 / n_points)
    radius = 1.5 * spacing * focal / 2.8 * 2 / size
    cloud = PointCloud.from_positions(pts, radius=radius)
    cams = _sphere_cameras(n_train + n_test, 2.8, size, size, focal, 0.2, 12.0, rng, 0.2, 1.2)
    frames = []
    for cam in cams:
        img, alpha = render_analytic([cube], cam, np.ones(3))
        frames.append(Frame(camera=cam, image=img, alpha=alpha))
    return SceneDataset(name="tiny-cube", cloud=cloud, train_frames=frames[:n_train],
                        test_frames=frames[n_train:], background=np.ones(3, np.float32))


def _fresh_model(rng_seed=0, refine=False):
    afnet = AdaptiveFrequencyNet()
    afnet.init_params(np.random.default_rng(rng_seed))
    unet = None
    if refine:
        unet = RefinerUNet()
        unet.init_params(np.random.default_rng(rng_seed + 1), zero=True)
    return afnet, unet


class TestRenderView:
    def test_empty_cloud_renders_background(self):
        cloud = PointCloud(positions=np.zeros((0, 3)), radii=np.zeros(0), opacity_logit=np.zeros(0))
        cam = Camera(32, 32, 32.0, np.eye(4), 0.5, 10.0)
        afnet, _ = _fresh_model()
        model = RenderModel(afnet=afnet, norm=SceneNorm(np.zeros(3), 1.0))
        img = render_view(cloud, cam, model, False, (0.2, 0.4, 0.6))
        np.testing.assert_allclose(img, np.tile([0.2, 0.4, 0.6], (32, 32, 1)), atol=1e-7)

    def test_zero_unet_refine_matches_raw_path(self):
        rng = np.random.default_rng(1)
        ds = _tiny_scene(rng)
        afnet, unet = _fresh_model(refine=True)
        norm = SceneNorm.fit(ds.cloud)
        m_raw = RenderModel(afnet=afnet, norm=norm)
        m_ref = RenderModel(afnet=afnet, norm=norm, unet=unet)
        cam = ds.train_frames[0].camera
        img_raw = render_view(ds.cloud, cam, m_raw, False, ds.background)
        img_ref = render_view(ds.cloud, cam, m_ref, True, ds.background)
        np.testing.assert_array_equal(img_raw, img_ref)

    def test_pure_function_of_inputs(self):
        rng = np.random.default_rng(2)
        ds = _tiny_scene(rng)
        afnet, _ = _fresh_model()
        model = RenderModel(afnet=afnet, norm=SceneNorm.fit(ds.cloud))
        cam = ds.train_frames[0].camera
        a = render_view(ds.cloud, cam, model, False, ds.background)
        b = render_view(ds.cloud, cam, model, False, ds.background)
        np.testing.assert_array_equal(a, b)

    def test_refine_without_unet_rejected(self):
        rng = np.random.default_rng(3)
        ds = _tiny_scene(rng, n_points=500)
        afnet, _ = _fresh_model()
        model = RenderModel(afnet=afnet, norm=SceneNorm.fit(ds.cloud))
        with pytest.raises(DataError, match="refiner"):
            render_view(ds.cloud, ds.train_frames[0].camera, model, True, ds.background)


class TestFrequencyMap:
    def test_untrained_hypernetwork_all_zero(self):
        rng = np.random.default_rng(4)
        ds = _tiny_scene(rng, n_points=800)
        afnet, _ = _fresh_model()
        model = RenderModel(afnet=afnet, norm=SceneNorm.fit(ds.cloud))
        cam = ds.train_frames[0].camera
        fm = frequency_map(ds.cloud, cam, model, 4)
        assert fm.shape == (cam.height, cam.width)
        np.testing.assert_array_equal(fm, 0.0)

    def test_layer_bounds_checked(self):
        rng = np.random.default_rng(5)
        ds = _tiny_scene(rng, n_points=200)
        afnet, _ = _fresh_model()
        model = RenderModel(afnet=afnet, norm=SceneNorm.fit(ds.cloud))
        with pytest.raises(ConfigError):
            frequency_map(ds.cloud, ds.train_frames[0].camera, model, 5)


class TestAugment:
    def test_identity_when_scale_one_full_crop(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        cam = Camera(32, 32, 40.0, np.eye(4), 0.5, 10.0)
        frame = Frame(camera=cam, image=img)
        out = augment(frame, 32, 1.0, 1.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out.image, img)
        np.testing.assert_array_equal(out.camera.pose, cam.pose)
        assert out.camera.focal == cam.focal

    def test_crop_preserves_rays(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        cam = Camera(64, 64, 80.0, np.eye(4), 0.5, 10.0)
        frame = Frame(camera=cam, image=img)
        out = augment(frame, 32, 1.0, 1.0, np.random.default_rng(3))
        # locate the crop origin by matching pixel data
        offs = None
        for oy in range(33):
            for ox in range(33):
                if np.array_equal(img[oy : oy + 32, ox : ox + 32], out.image):
                    offs = (ox, oy)
                    break
            if offs:
                break
        assert offs is not None
        ox, oy = offs
        iy, ix = np.mgrid[0:32, 0:32]
        d_crop, _ = out.camera.pixel_rays(ix.ravel(), iy.ravel())
        d_orig, _ = cam.pixel_rays((ix + ox).ravel(), (iy + oy).ravel())
        assert np.max(np.abs(d_crop - d_orig)) < 1e-6

    def test_scaled_camera_ray_consistency(self):
        # sampling position in the source equals the scaled camera's ray
        cam = Camera(64, 64, 80.0, np.eye(4), 0.5, 10.0)
        cam_s = cam.scaled(0.75)
        assert (cam_s.width, cam_s.height) == (48, 48)
        d_s, _ = cam_s.pixel_rays(np.array([10]), np.array([20]))
        # the corresponding source position for target pixel center (i+.5):
        sx = cam_s.width / cam.width
        u = (10 + 0.5) / sx - 0.5
        v = (20 + 0.5) / sx - 0.5
        d_o, _ = cam.pixel_rays(np.array([u - 0.5 + 0.5]), np.array([v]))
        np.testing.assert_allclose(d_s, d_o, atol=1e-9)

    def test_seeded_stream_reproducible(self):
        rng = np.random.default_rng(8)
        img = rng.uniform(0, 1, (64, 64, 3)).astype(np.float32)
        frame = Frame(camera=Camera(64, 64, 80.0, np.eye(4), 0.5, 10.0), image=img)
        outs1 = [augment(frame, 32, 0.5, 1.5, np.random.default_rng(42)) for _ in range(1)]
        outs2 = [augment(frame, 32, 0.5, 1.5, np.random.default_rng(42)) for _ in range(1)]
        np.testing.assert_array_equal(outs1[0].image, outs2[0].image)
        assert outs1[0].camera.focal == outs2[0].camera.focal

    def test_impossible_crop_rejected(self):
        img = np.zeros((32, 32, 3), dtype=np.float32)
        frame = Frame(camera=Camera(32, 32, 40.0, np.eye(4), 0.5, 10.0), image=img)
        with pytest.raises(DataError):
            augment(frame, 64, 0.5, 1.0, np.random.default_rng(0))

    def test_bilinear_resize_identity(self):
        rng = np.random.default_rng(9)
        img = rng.uniform(0, 1, (16, 16, 3))
        np.testing.assert_allclose(bilinear_resize(img, 16, 16), img, atol=1e-12)


class TestTrain:
    def test_loss_decreases_and_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(10)
        ds = _tiny_scene(rng, n_points=4000, size=32)
        cfg = TrainConfig(steps=60, crop=16, seed=0, scale_min=1.0, scale_max=1.0,
                          log_every=0, checkpoint_every=0)
        r1 = train(ds, cfg, checkpoint_path=tmp_path / "a.fpcr")
        r2 = train(ds, cfg, checkpoint_path=tmp_path / "b.fpcr")
        assert np.mean(r1.losses[:10]) > np.mean(r1.losses[-10:])
        assert (tmp_path / "a.fpcr").read_bytes() == (tmp_path / "b.fpcr").read_bytes()

    def test_crop_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            TrainConfig(crop=30)

    def test_refine_off_touches_no_unet(self):
        rng = np.random.default_rng(11)
        ds = _tiny_scene(rng, n_points=1500)
        cfg = TrainConfig(steps=3, crop=16, seed=0, scale_min=1.0, scale_max=1.0, log_every=0)
        res = train(ds, cfg)
        assert res.model.unet is None

    def test_augmented_path_also_trains(self):
        rng = np.random.default_rng(12)
        ds = _tiny_scene(rng, n_points=1500)
        cfg = TrainConfig(steps=3, crop=16, seed=0, scale_min=0.8, scale_max=1.2, log_every=0)
        res = train(ds, cfg)
        assert len(res.losses) == 3
        assert all(np.isfinite(v) for v in res.losses)

    def test_checkpoint_roundtrip_preserves_renders(self, tmp_path):
        rng = np.random.default_rng(13)
        ds = _tiny_scene(rng, n_points=1500)
        cfg = TrainConfig(steps=4, crop=16, seed=0, scale_min=1.0, scale_max=1.0, log_every=0)
        res = train(ds, cfg, checkpoint_path=tmp_path / "m.fpcr")
        back = RenderModel.load(tmp_path / "m.fpcr")
        cam = ds.test_frames[0].camera
        a = render_view(ds.cloud, cam, res.model, False, ds.background)
        b = render_view(ds.cloud, cam, back, False, ds.background)
        np.testing.assert_array_equal(a, b)
        assert back.step == 4

    def test_evaluate_report_shape(self):
        rng = np.random.default_rng(14)
        ds = _tiny_scene(rng, n_points=1500)
        afnet, _ = _fresh_model()
        model = RenderModel(afnet=afnet, norm=SceneNorm.fit(ds.cloud))
        rep = evaluate(ds, model, split="test")
        assert rep["scene"] == "tiny-cube"
        assert len(rep["views"]) == 2
        assert set(rep["views"][0]) == {"view", "psnr", "ssim"}
        assert "psnr_mean" in rep and "ssim_mean" in rep

    def test_config_hash_stable(self):
        assert config_hash(TrainConfig()) == config_hash(TrainConfig())
        assert config_hash(TrainConfig()) != config_hash(TrainConfig(steps=1))
