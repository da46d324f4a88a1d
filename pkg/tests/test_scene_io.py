"""Scene data model and file format round trips."""

import json

import numpy as np
import pytest

from fpcr.errors import DataError
from fpcr.scene import (Camera, Frame, PointCloud, SceneDataset, load_ply,
                        load_png, load_scene, load_transforms, save_ply,
                        save_png, save_scene, save_transforms)


def _cloud(rng, n=50):
    return PointCloud(
        positions=rng.normal(0, 1, (n, 3)),
        radii=rng.uniform(1e-3, 1e-2, n),
        opacity_logit=rng.normal(0, 1, n),
        color_seed=rng.uniform(0, 1, (n, 3)),
    )


class TestPly:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        cloud = _cloud(rng)
        path = tmp_path / "pts.ply"
        save_ply(cloud, path)
        back = load_ply(path)
        assert np.array_equal(back.positions, cloud.positions)
        assert np.array_equal(back.radii, cloud.radii)
        assert np.array_equal(back.opacity_logit, cloud.opacity_logit)

    def test_empty_cloud(self, tmp_path):
        cloud = PointCloud(positions=np.zeros((0, 3)), radii=np.zeros(0), opacity_logit=np.zeros(0))
        path = tmp_path / "empty.ply"
        save_ply(cloud, path)
        back = load_ply(path)
        assert len(back) == 0

    def test_missing_optionals_take_defaults(self, tmp_path):
        # minimal float32 x/y/z PLY written by hand
        pts = np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]], dtype="<f4")
        header = (b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
                  b"property float x\nproperty float y\nproperty float z\nend_header\n")
        path = tmp_path / "min.ply"
        path.write_bytes(header + pts.tobytes())
        cloud = load_ply(path)
        np.testing.assert_allclose(cloud.positions, pts)
        np.testing.assert_allclose(cloud.radii, 5e-3)
        np.testing.assert_allclose(cloud.alpha, 0.5)  # logit 0 -> sigmoid 0.5

    def test_non_float_coordinates_rejected(self, tmp_path):
        header = (b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n"
                  b"property int x\nproperty float y\nproperty float z\nend_header\n")
        path = tmp_path / "bad.ply"
        path.write_bytes(header + b"\x00" * 12)
        with pytest.raises(DataError, match="must be float"):
            load_ply(path)

    def test_malformed_header_rejected(self, tmp_path):
        path = tmp_path / "notply.ply"
        path.write_bytes(b"hello world")
        with pytest.raises(DataError):
            load_ply(path)


class TestCameraConventions:
    def test_identity_pose_looks_down_negative_z(self):
        cam = Camera(64, 64, 64.0, np.eye(4), 0.1, 10.0)
        np.testing.assert_allclose(cam.forward, [0, 0, -1])
        np.testing.assert_allclose(cam.origin, [0, 0, 0])

    def test_principal_ray_equals_forward(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            # random orthonormal pose
            q = np.linalg.qr(rng.normal(0, 1, (3, 3)))[0]
            if np.linalg.det(q) < 0:
                q[:, 0] *= -1
            pose = np.eye(4)
            pose[:3, :3] = q
            pose[:3, 3] = rng.normal(0, 2, 3)
            cam = Camera(65, 65, 80.0, pose, 0.1, 10.0)
            # principal pixel is the center one for odd extents
            d, cos = cam.pixel_rays(np.array([32]), np.array([32]))
            np.testing.assert_allclose(np.linalg.norm(d[0]), 1.0, atol=1e-9)
            np.testing.assert_allclose(d[0], cam.forward, atol=1e-6)
            np.testing.assert_allclose(cos[0], 1.0, atol=1e-9)

    def test_depth_range_validated(self):
        with pytest.raises(DataError):
            Camera(8, 8, 8.0, np.eye(4), 1.0, 0.5)

    def test_non_orthonormal_rejected(self):
        pose = np.eye(4)
        pose[0, 0] = 2.0
        with pytest.raises(DataError, match="orthonormal"):
            Camera(8, 8, 8.0, pose, 0.1, 1.0)


class TestTransformsJson:
    def test_focal_from_camera_angle(self, tmp_path):
        meta = {"camera_angle_x": float(np.pi / 2), "width": 800, "height": 800,
                "frames": [{"file_path": "a", "transform_matrix": np.eye(4).tolist()}]}
        path = tmp_path / "transforms.json"
        path.write_text(json.dumps(meta))
        cams = load_transforms(path)
        assert len(cams) == 1
        np.testing.assert_allclose(cams[0].focal, 400.0)  # tan(pi/4) = 1

    def test_frame_order_preserved(self, tmp_path):
        m1 = np.eye(4)
        m2 = np.eye(4)
        m2[0, 3] = 5.0
        meta = {"camera_angle_x": 0.8, "width": 64,
                "frames": [{"file_path": "a", "transform_matrix": m1.tolist()},
                           {"file_path": "b", "transform_matrix": m2.tolist()}]}
        path = tmp_path / "t.json"
        path.write_text(json.dumps(meta))
        cams = load_transforms(path)
        assert len(cams) == 2
        np.testing.assert_allclose(cams[1].pose[0, 3], 5.0)

    def test_missing_fields_rejected(self, tmp_path):
        path = tmp_path / "t.json"
        path.write_text(json.dumps({"frames": []}))
        with pytest.raises(DataError):
            load_transforms(path)

    def test_singular_matrix_rejected(self, tmp_path):
        meta = {"camera_angle_x": 0.8,
                "frames": [{"file_path": "a", "transform_matrix": np.zeros((4, 4)).tolist()}]}
        path = tmp_path / "t.json"
        path.write_text(json.dumps(meta))
        with pytest.raises(DataError, match="invertible"):
            load_transforms(path)

    def test_save_load_roundtrip(self, tmp_path):
        cam = Camera(32, 32, 40.0, np.eye(4), 0.5, 9.0)
        save_transforms(tmp_path / "t.json", [cam])
        back = load_transforms(tmp_path / "t.json")
        np.testing.assert_allclose(back[0].focal, cam.focal, rtol=1e-12)
        np.testing.assert_allclose(back[0].pose, cam.pose)
        assert (back[0].z_near, back[0].z_far) == (cam.z_near, cam.z_far)


class TestPng:
    def test_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        path = tmp_path / "img.png"
        save_png(path, img)
        back, alpha = load_png(path)
        assert alpha is None
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-6

    def test_alpha_channel(self, tmp_path):
        img = np.zeros((8, 8, 3), dtype=np.float32)
        a = np.ones((8, 8), dtype=np.float32) * 0.5
        path = tmp_path / "rgba.png"
        save_png(path, img, a)
        back, alpha = load_png(path)
        assert alpha is not None
        assert abs(alpha[0, 0] - 0.5) < 1 / 255


class TestSceneDirectory:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        cloud = _cloud(rng, 20)
        cam = Camera(32, 32, 40.0, np.eye(4), 0.5, 9.0)
        img = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        ds = SceneDataset(name="tiny", cloud=cloud,
                          train_frames=[Frame(camera=cam, image=img)],
                          test_frames=[Frame(camera=cam, image=img)],
                          background=np.array([0, 0, 0], dtype=np.float32))
        save_scene(ds, tmp_path / "scene")
        back = load_scene(tmp_path / "scene")
        assert back.name == "tiny"
        assert len(back.cloud) == 20
        assert len(back.train_frames) == 1 and len(back.test_frames) == 1
        np.testing.assert_array_equal(back.cloud.positions, cloud.positions)
        np.testing.assert_allclose(back.background, [0, 0, 0])

    def test_frames_must_share_extents(self):
        cam1 = Camera(16, 16, 20.0, np.eye(4), 0.5, 9.0)
        cam2 = Camera(32, 32, 20.0, np.eye(4), 0.5, 9.0)
        f1 = Frame(camera=cam1, image=np.zeros((16, 16, 3), dtype=np.float32))
        f2 = Frame(camera=cam2, image=np.zeros((32, 32, 3), dtype=np.float32))
        with pytest.raises(DataError, match="extents"):
            SceneDataset(name="x", cloud=_cloud(np.random.default_rng(0), 5),
                         train_frames=[f1, f2])

    def test_image_extent_mismatch_rejected(self):
        cam = Camera(16, 16, 20.0, np.eye(4), 0.5, 9.0)
        with pytest.raises(DataError):
            Frame(camera=cam, image=np.zeros((8, 8, 3), dtype=np.float32))
