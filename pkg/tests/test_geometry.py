import numpy as np
import pytest

from haircap.errors import BehindCameraError, ContractViolation, DegenerateDirectionError
from haircap.geometry import (
    Camera,
    HairBBox,
    camera_ray,
    camera_rays,
    look_at_camera,
    project_direction,
    project_point,
    project_points,
    ray_box_clip,
    read_cameras,
    write_cameras,
)


def identity_camera(focal=100.0, pp=(50.0, 50.0), size=(100, 100)):
    K = np.array([[focal, 0.0, pp[0]], [0.0, focal, pp[1]], [0.0, 0.0, 1.0]])
    E = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
    return Camera(K, E, size[0], size[1])


class TestProjectPoint:
    def test_principal_axis(self):
        cam = identity_camera()
        np.testing.assert_allclose(project_point(cam, [0, 0, 1]), [50.0, 50.0])

    def test_similar_triangles(self):
        cam = identity_camera()
        np.testing.assert_allclose(project_point(cam, [0.5, 0, 1]), [100.0, 50.0])

    def test_behind_camera(self):
        cam = identity_camera()
        with pytest.raises(BehindCameraError):
            project_point(cam, [0, 0, -1.0])

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(0)
        cam = look_at_camera([0.5, 0.2, -1.0], [0, 0, 0], [0, 1, 0], 200.0, 256, 256)
        pts = rng.normal(scale=0.2, size=(50, 3))
        pix, z = project_points(cam, pts)
        for k in range(50):
            if z[k] > 1e-9:
                np.testing.assert_allclose(pix[k], project_point(cam, pts[k]), atol=1e-12)


class TestProjectDirection:
    def test_horizontal_folds_to_pi(self):
        cam = identity_camera()
        assert project_direction(cam, [1, 0, 0]) == pytest.approx(np.pi)

    def test_vertical(self):
        cam = identity_camera()
        assert project_direction(cam, [0, 1, 0]) == pytest.approx(np.pi / 2)

    def test_optical_axis_degenerate(self):
        cam = identity_camera()
        with pytest.raises(DegenerateDirectionError):
            project_direction(cam, [0, 0, 1])

    def test_undirectional_fold(self):
        cam = look_at_camera([0, 0.3, -1.2], [0, 0, 0], [0, 1, 0], 150.0, 128, 128)
        rng = np.random.default_rng(3)
        for _ in range(100):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            try:
                eta = project_direction(cam, d)
            except DegenerateDirectionError:
                continue
            assert 0 < eta <= np.pi
            assert project_direction(cam, -d) == pytest.approx(eta)


class TestCameraValidation:
    def test_non_orthonormal_rotation_rejected(self):
        K = np.eye(3) * 100.0
        K[2, 2] = 1.0
        E = np.concatenate([np.eye(3) * 1.5, np.zeros((3, 1))], axis=1)
        with pytest.raises(ContractViolation):
            Camera(K, E, 10, 10)

    def test_camera_center(self):
        cam = look_at_camera([1.0, 2.0, 3.0], [0, 0, 0], [0, 1, 0], 100.0, 64, 64)
        np.testing.assert_allclose(cam.center, [1.0, 2.0, 3.0], atol=1e-12)

    def test_look_at_points_toward_target(self):
        cam = look_at_camera([0, 0, -2.0], [0, 0, 0], [0, 1, 0], 100.0, 64, 64)
        np.testing.assert_allclose(cam.optical_axis, [0, 0, 1.0], atol=1e-12)
        # world up maps to image up (decreasing pixel y)
        px_high = project_point(cam, [0, 0.1, 0])
        px_low = project_point(cam, [0, -0.1, 0])
        assert px_high[1] < px_low[1]


class TestCameraRays:
    def test_ray_hits_projected_pixel(self):
        cam = look_at_camera([0.3, -0.4, -1.5], [0, 0, 0.1], [0, 1, 0], 180.0, 200, 150)
        p = np.array([0.05, 0.02, 0.3])
        pix = project_point(cam, p)
        origin, d = camera_ray(cam, pix[0], pix[1])
        # the world point must lie on the ray
        t = np.dot(p - origin, d)
        np.testing.assert_allclose(origin + t * d, p, atol=1e-9)

    def test_vectorized_rays(self):
        cam = look_at_camera([0, 0, -1.0], [0, 0, 0], [0, 1, 0], 120.0, 64, 64)
        pix = np.array([[10.0, 20.0], [32.0, 32.0], [5.0, 60.0]])
        origins, dirs = camera_rays(cam, pix)
        for k in range(3):
            o, d = camera_ray(cam, pix[k, 0], pix[k, 1])
            np.testing.assert_allclose(origins[k], o, atol=1e-12)
            np.testing.assert_allclose(dirs[k], d, atol=1e-12)


class TestRayBoxClip:
    def setup_method(self):
        self.box = HairBBox([-0.5, -0.5, -0.5], [0.5, 0.5, 0.5])

    def test_axis_aligned_hit(self):
        t = ray_box_clip([-2.0, 0, 0], [1.0, 0, 0], self.box)
        assert t == (1.5, 2.5)

    def test_parallel_miss(self):
        assert ray_box_clip([-2.0, 1.0, 0], [1.0, 0, 0], self.box) is None

    def test_origin_inside_clamps(self):
        t = ray_box_clip([0.0, 0, 0], [1.0, 0, 0], self.box)
        assert t[0] == 0.0
        assert t[1] == pytest.approx(0.5)

    def test_behind_origin_misses(self):
        assert ray_box_clip([2.0, 0, 0], [1.0, 0, 0], self.box) is None

    def test_interval_ordering_random(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            o = rng.normal(scale=2.0, size=3)
            d = rng.normal(size=3)
            res = ray_box_clip(o, d, self.box)
            if res is not None:
                assert res[0] <= res[1]
                mid = o + 0.5 * (res[0] + res[1]) * d
                assert self.box.contains(mid)

    def test_box_validation(self):
        with pytest.raises(ContractViolation):
            HairBBox([0, 0, 0], [1.0, -1.0, 1.0])


class TestCameraFile:
    def test_round_trip(self, tmp_path):
        cams = [
            look_at_camera([0, 0.2, -1.0], [0, 0, 0], [0, 1, 0], 150.0, 256, 192),
            look_at_camera([0.8, -0.1, 0.6], [0, 0.05, 0], [0, 1, 0], 310.0, 128, 128),
        ]
        path = tmp_path / "cameras.txt"
        write_cameras(path, cams)
        back = read_cameras(path)
        assert len(back) == 2
        for a, b in zip(cams, back):
            np.testing.assert_array_equal(a.intrinsics, b.intrinsics)
            np.testing.assert_array_equal(a.extrinsics, b.extrinsics)
            assert (a.width, a.height) == (b.width, b.height)

    def test_token_count_validation(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3 4 5")
        from haircap.errors import SpecParseError
        with pytest.raises(SpecParseError):
            read_cameras(path)
