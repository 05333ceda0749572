import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgs.gaussians import (
    COV2D_DILATION,
    Camera,
    InvalidInputError,
    alpha_blend,
    covariance_from_rs,
    cov_pack6,
    cov_unpack6,
    dexp_map_so3,
    exp_map_so3,
    project_batch,
    project_gaussian,
    quat_normalize,
    quat_to_rotmat,
    rotmat_to_quat,
)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def make_camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, w=64, h=64, near=0.01):
    return Camera(rotation=np.eye(3), translation=np.zeros(3),
                  fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h, near=near)


class TestCovarianceFromRS:
    def test_identity(self):
        cov = covariance_from_rs(IDENTITY_Q, np.ones(3))
        np.testing.assert_allclose(cov, np.eye(3), atol=1e-12)

    def test_axis_aligned(self):
        cov = covariance_from_rs(IDENTITY_Q, np.array([2.0, 1.0, 1.0]))
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_rotated_90deg_about_z(self):
        # hand multiplication of R diag(4,1,1) R^T with R the 90-degree z-rotation
        q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
        cov = covariance_from_rs(q, np.array([2.0, 1.0, 1.0]))
        np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidInputError):
            covariance_from_rs(IDENTITY_Q, np.array([1.0, np.nan, 1.0]))
        with pytest.raises(InvalidInputError):
            covariance_from_rs(IDENTITY_Q, np.array([1.0, -1.0, 1.0]))

    def test_symmetric_and_positive_definite(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(200, 4))
        s = rng.uniform(1e-6, 3.0, (200, 3))
        cov = covariance_from_rs(q, s)
        np.testing.assert_allclose(cov, np.swapaxes(cov, -1, -2), atol=0)
        assert np.linalg.eigvalsh(cov).min() > 0


class TestExpMap:
    def test_zero(self):
        np.testing.assert_allclose(exp_map_so3(np.zeros(3)), np.eye(3), atol=0)

    def test_quarter_turn_about_z(self):
        R = exp_map_so3(np.array([0.0, 0.0, np.pi / 2]))
        np.testing.assert_allclose(R @ np.array([1.0, 0, 0]), [0, 1, 0], atol=1e-12)

    def test_orthogonality_sweep(self):
        rng = np.random.default_rng(1)
        w = rng.normal(0, 2.0, (1000, 3))
        R = exp_map_so3(w)
        err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max()
        assert err < 1e-9

    def test_small_angle_series(self):
        R = exp_map_so3(np.array([1e-13, 0, 0]))
        assert np.abs(R - np.eye(3)).max() < 1e-12

    def test_derivative_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for w in [rng.normal(0, 1.5, 3) for _ in range(5)] + [np.zeros(3), np.array([1e-6, 0, 0])]:
            D = dexp_map_so3(w)
            h = 1e-6
            for m in range(3):
                e = np.zeros(3)
                e[m] = h
                fd = (exp_map_so3(w + e) - exp_map_so3(w - e)) / (2 * h)
                np.testing.assert_allclose(D[m], fd, atol=1e-6)


class TestQuaternions:
    def test_round_trip(self):
        rng = np.random.default_rng(3)
        q = quat_normalize(rng.normal(size=(500, 4)))
        R = quat_to_rotmat(q)
        q2 = rotmat_to_quat(R)
        R2 = quat_to_rotmat(q2)
        assert np.abs(R - R2).max() < 1e-9
        assert (q2[:, 0] >= 0).all()


class TestProjection:
    def test_on_axis_mean(self):
        cam = make_camera()
        out = project_gaussian(np.eye(3) * 0.01, np.array([0.0, 0.0, 2.0]), cam)
        assert out is not None
        mean2d, _ = out
        np.testing.assert_allclose(mean2d, [32.0, 32.0], atol=1e-12)

    def test_on_axis_isotropic_cov(self):
        # symbolic Jacobian on the optical axis: J = diag(f/d, f/d)
        f, d, sigma = 120.0, 3.0, 0.2
        cam = make_camera(fx=f, fy=f)
        out = project_gaussian(np.eye(3) * sigma**2, np.array([0.0, 0.0, d]), cam)
        mean2d, cov2d = out
        expected = (f * sigma / d) ** 2 * np.eye(2) + COV2D_DILATION * np.eye(2)
        np.testing.assert_allclose(cov2d, expected, atol=1e-12)

    def test_behind_near_plane_culled(self):
        cam = make_camera()
        assert project_gaussian(np.eye(3), np.array([0.0, 0.0, -1.0]), cam) is None
        assert project_gaussian(np.eye(3), np.array([0.0, 0.0, 0.005]), cam) is None

    def test_roll_equivariance(self):
        # rolling the camera about the optical axis rotates the projection
        rng = np.random.default_rng(4)
        theta = 0.7
        c, s = np.cos(theta), np.sin(theta)
        roll = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        cam = make_camera()
        cam_rolled = Camera(rotation=roll @ cam.rotation,
                            translation=roll @ cam.translation,
                            fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                            width=cam.width, height=cam.height, near=cam.near)
        rot2d = roll[:2, :2]
        pp = np.array([cam.cx, cam.cy])
        for _ in range(20):
            pos = rng.normal(0, 0.5, 3) + np.array([0, 0, 4.0])
            cov = covariance_from_rs(quat_normalize(rng.normal(size=4)),
                                     rng.uniform(0.05, 0.3, 3))
            m1, c1 = project_gaussian(cov, pos, cam)
            m2, c2 = project_gaussian(cov, pos, cam_rolled)
            np.testing.assert_allclose(m2 - pp, rot2d @ (m1 - pp), atol=1e-6)
            np.testing.assert_allclose(c2, rot2d @ c1 @ rot2d.T, atol=1e-6)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        cam = make_camera()
        pos = rng.normal(0, 1.0, (50, 3)) + np.array([0, 0, 5.0])
        cov = covariance_from_rs(quat_normalize(rng.normal(size=(50, 4))),
                                 rng.uniform(0.05, 0.5, (50, 3)))
        mean2d, cov2d, depth, valid = project_batch(cov, pos, cam)
        for i in range(50):
            single = project_gaussian(cov[i], pos[i], cam)
            if single is None:
                assert not valid[i]
            else:
                np.testing.assert_allclose(mean2d[i], single[0], atol=0)
                np.testing.assert_allclose(cov2d[i], single[1], atol=0)


class TestAlphaBlend:
    def test_single_nearly_opaque(self):
        c = np.array([0.2, 0.4, 0.8])
        out = alpha_blend([(c, 1.0 - 1e-9)])
        np.testing.assert_allclose(out, c, atol=1e-8)

    def test_two_half_splats(self):
        c1, c2 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
        out = alpha_blend([(c1, 0.5), (c2, 0.5)])
        np.testing.assert_allclose(out, 0.5 * c1 + 0.25 * c2, atol=0)

    def test_empty_gives_background(self):
        bg = np.array([0.1, 0.2, 0.3])
        np.testing.assert_allclose(alpha_blend([], bg), bg, atol=0)

    def test_equal_alpha_equal_color_permutation_invariant(self):
        c = np.array([0.3, 0.3, 0.3])
        splats = [(c, 0.4)] * 5
        a = alpha_blend(splats)
        b = alpha_blend(list(reversed(splats)))
        np.testing.assert_allclose(a, b, atol=0)

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 0.999)), max_size=12),
           st.floats(0, 1))
    @settings(max_examples=200, deadline=None)
    def test_output_in_range(self, pairs, bg):
        splats = [(np.full(3, c), a) for c, a in pairs]
        out = alpha_blend(splats, np.full(3, bg))
        assert np.all(out >= 0) and np.all(out <= 1 + 1e-9)


class TestPack6:
    def test_round_trip(self):
        rng = np.random.default_rng(6)
        cov = covariance_from_rs(quat_normalize(rng.normal(size=(10, 4))),
                                 rng.uniform(0.1, 2.0, (10, 3)))
        np.testing.assert_allclose(cov_unpack6(cov_pack6(cov)), cov, atol=0)
