import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from scenesplat.core import (
    Camera,
    GaussianPrimitive,
    GaussianScene,
    ImageFrame,
    InvalidParameterError,
    PipelineConfig,
    Trajectory,
    VideoClip,
    covariance_matrix,
    validate_scene,
)

from conftest import make_random_scene


class TestCovarianceMatrix:
    def test_identity_case(self):
        cov = covariance_matrix(np.ones(3), np.array([1.0, 0, 0, 0]))
        assert np.allclose(cov, np.eye(3))

    def test_diagonal_case(self):
        cov = covariance_matrix(np.array([2.0, 1.0, 1.0]), np.array([1.0, 0, 0, 0]))
        assert np.allclose(cov, np.diag([4.0, 1.0, 1.0]))

    def test_rotated_case_against_dense_product(self):
        # Independent route: scipy builds R, then the dense R S S^T R^T product.
        quat_wxyz = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])  # 90 deg about z
        scale = np.array([2.0, 1.0, 1.0])
        rot = Rotation.from_quat([quat_wxyz[1], quat_wxyz[2], quat_wxyz[3], quat_wxyz[0]]).as_matrix()
        s_mat = np.diag(scale)
        expected = rot @ s_mat @ s_mat.T @ rot.T
        cov = covariance_matrix(scale, quat_wxyz)
        assert np.allclose(cov, expected, atol=1e-12)
        assert np.allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_eigenvalues_are_squared_scales(self, rng):
        for _ in range(50):
            scale = rng.uniform(0.1, 3.0, 3)
            quat = rng.normal(size=4)
            quat /= np.linalg.norm(quat)
            eig = np.linalg.eigvalsh(covariance_matrix(scale, quat))
            expected = np.sort(scale**2)
            assert np.allclose(eig, expected, rtol=1e-9)

    def test_rotation_equivariance(self, rng):
        for _ in range(25):
            scale = rng.uniform(0.1, 2.0, 3)
            q1 = rng.normal(size=4)
            q1 /= np.linalg.norm(q1)
            q2 = rng.normal(size=4)
            q2 /= np.linalg.norm(q2)
            # Hamilton product q2 * q1, both (w, x, y, z).
            w1, x1, y1, z1 = q1
            w2, x2, y2, z2 = q2
            q21 = np.array([
                w2 * w1 - x2 * x1 - y2 * y1 - z2 * z1,
                w2 * x1 + x2 * w1 + y2 * z1 - z2 * y1,
                w2 * y1 - x2 * z1 + y2 * w1 + z2 * x1,
                w2 * z1 + x2 * y1 - y2 * x1 + z2 * w1,
            ])
            r2 = Rotation.from_quat([x2, y2, z2, w2]).as_matrix()
            lhs = covariance_matrix(scale, q21)
            rhs = r2 @ covariance_matrix(scale, q1) @ r2.T
            assert np.allclose(lhs, rhs, atol=1e-9)

    def test_invalid_scale_rejected(self):
        with pytest.raises(InvalidParameterError):
            covariance_matrix(np.array([1.0, -1.0, 1.0]), np.array([1.0, 0, 0, 0]))
        with pytest.raises(InvalidParameterError):
            covariance_matrix(np.array([1.0, np.nan, 1.0]), np.array([1.0, 0, 0, 0]))


class TestPrimitiveAndScene:
    def test_quaternion_normalized_on_construction(self):
        p = GaussianPrimitive(np.zeros(3), np.ones(3), np.array([2.0, 0, 0, 0]), 0.5,
                              np.array([[1.0, 0, 0]]))
        assert abs(np.linalg.norm(p.rotation) - 1.0) < 1e-6

    def test_opacity_range_enforced(self):
        with pytest.raises(InvalidParameterError):
            GaussianPrimitive(np.zeros(3), np.ones(3), np.array([1.0, 0, 0, 0]), 1.0,
                              np.array([[1.0, 0, 0]]))

    def test_scene_roundtrip_through_primitives(self, rng):
        scene = make_random_scene(rng, 5)
        rebuilt = GaussianScene.from_primitives(scene.primitives)
        assert np.allclose(rebuilt.positions, scene.positions)
        assert np.allclose(rebuilt.colors, scene.colors)

    def test_scene_arrays_immutable(self, rng):
        scene = make_random_scene(rng, 3)
        with pytest.raises(ValueError):
            scene.positions[0, 0] = 5.0


class TestValidateScene:
    def test_valid_scene_empty_report(self, rng):
        assert validate_scene(make_random_scene(rng, 4)) == []

    def test_out_of_range_opacity_flagged(self, rng):
        scene = make_random_scene(rng, 3)
        ops = scene.opacities.copy()
        ops[1] = 1.5
        report = validate_scene(scene.with_arrays(opacities=ops))
        assert len(report) == 1
        assert report[0].primitive_index == 1
        assert report[0].field == "opacity"

    def test_nan_position_flagged(self, rng):
        scene = make_random_scene(rng, 3)
        pos = scene.positions.copy()
        pos[2, 0] = np.nan
        report = validate_scene(scene.with_arrays(positions=pos))
        assert len(report) == 1
        assert report[0].field == "position"
        assert report[0].primitive_index == 2


class TestCameraAndFrames:
    def test_camera_requires_orthonormal_rotation(self):
        bad = np.eye(3)
        bad[0, 1] = 0.01
        with pytest.raises(InvalidParameterError):
            Camera(fx=10, fy=10, cx=5, cy=5, width=10, height=10,
                   rotation=bad, translation=np.zeros(3))

    def test_camera_center(self):
        rot = Rotation.from_euler("y", 0.3).as_matrix()
        center = np.array([1.0, 2.0, 3.0])
        cam = Camera(fx=10, fy=10, cx=5, cy=5, width=10, height=10,
                     rotation=rot, translation=-rot @ center)
        assert np.allclose(cam.camera_center, center)

    def test_trajectory_shares_resolution(self):
        a = Camera(fx=10, fy=10, cx=5, cy=5, width=10, height=10,
                   rotation=np.eye(3), translation=np.zeros(3))
        b = Camera(fx=10, fy=10, cx=5, cy=5, width=12, height=10,
                   rotation=np.eye(3), translation=np.zeros(3))
        with pytest.raises(InvalidParameterError):
            Trajectory((a, b))
        assert Trajectory((a, a)).at(2) is a

    def test_image_frame_rejects_out_of_range(self):
        with pytest.raises(InvalidParameterError):
            ImageFrame(np.full((4, 4, 3), 1.5))

    def test_clip_requires_increasing_indices(self, rng):
        frames = tuple(ImageFrame(rng.uniform(0, 1, (4, 4, 3))) for _ in range(2))
        with pytest.raises(InvalidParameterError):
            VideoClip(frames, (3, 3))


class TestPipelineConfig:
    def test_defaults_valid(self):
        cfg = PipelineConfig()
        assert cfg.window_length == 25 and cfg.overlap == 10

    @pytest.mark.parametrize("kwargs", [
        {"overlap": 25},
        {"lambda0": 1.5},
        {"tau": 1.0},
        {"gamma": -0.1},
        {"diffusion_steps": 0},
        {"momentum_noise_convention": "nonsense"},
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(InvalidParameterError):
            PipelineConfig(**kwargs)
