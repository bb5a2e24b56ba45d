import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from sqabstract.superquadric import (EPS_MIN, InvalidPrimitive, Superquadric, approx_sdf,
                                     contains, euler_zyx_to_matrix, implicit_value,
                                     load_primitives, matrix_to_euler_zyx, sample_surface,
                                     save_primitives, sdf_and_jacobian, truncated_sdf)

from helpers import exact_distance, random_superquadric

UNIT_SPHERE = Superquadric(1.0, 1.0, (1.0, 1.0, 1.0))

eps_st = st.floats(0.1, 1.9)
scale_st = st.floats(0.05, 2.0)
angle_st = st.floats(-np.pi, np.pi)
coord_st = st.floats(-2.0, 2.0)


@st.composite
def superquadrics(draw):
    return Superquadric(draw(eps_st), draw(eps_st),
                        (draw(scale_st), draw(scale_st), draw(scale_st)),
                        (draw(angle_st), draw(angle_st), draw(angle_st)),
                        (draw(coord_st), draw(coord_st), draw(coord_st)))


class TestImplicit:
    @pytest.mark.parametrize("x, f", [((1, 0, 0), 1.0), ((2, 0, 0), 4.0), ((0, 0, 0.5), 0.25)])
    def test_unit_sphere_values(self, x, f):
        assert implicit_value(UNIT_SPHERE, np.array(x, float)) == pytest.approx(f, rel=1e-14)

    def test_contains(self):
        assert contains(UNIT_SPHERE, np.zeros(3))
        assert not contains(UNIT_SPHERE, np.array([2.0, 0, 0]))
        assert contains(UNIT_SPHERE, np.array([1.0, 0, 0]))

    def test_coordinate_planes_are_finite(self):
        prim = Superquadric(0.3, 1.7, (0.5, 0.4, 0.2))
        pts = np.array([[0.0, 0.0, 0.3], [0.7, 0.0, 0.0], [0.0, -0.2, 0.0]])
        assert np.all(np.isfinite(implicit_value(prim, pts)))


class TestApproxSdf:
    @pytest.mark.parametrize("x, d", [((2, 0, 0), 1.0), ((0, 0, 0.5), -0.5)])
    def test_sphere_closed_form(self, x, d):
        assert approx_sdf(UNIT_SPHERE, np.array(x, float)) == pytest.approx(d, abs=1e-15)

    def test_cuboid_along_axis_is_exact(self):
        cube = Superquadric(0.1, 0.1, (1.0, 1.0, 1.0))
        assert approx_sdf(cube, np.array([2.0, 0, 0])) == pytest.approx(1.0, abs=1e-12)

    def test_center_returns_inscribed_bound(self):
        prim = Superquadric(0.5, 0.8, (0.3, 0.2, 0.4), (0.1, 0.2, 0.3), (1.0, 2.0, 3.0))
        assert approx_sdf(prim, np.array([1.0, 2.0, 3.0])) == -0.2

    @pytest.mark.parametrize("d, t, expected", [(2.3, 0.013, 0.013), (-0.004, 0.013, -0.004),
                                                (-1.0, 0.013, -0.013)])
    def test_truncation(self, d, t, expected):
        x = np.array([1.0 + d, 0.0, 0.0])
        assert truncated_sdf(UNIT_SPHERE, x, t) == pytest.approx(expected, abs=1e-15)

    def test_truncation_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            truncated_sdf(UNIT_SPHERE, np.zeros(3), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(r=st.floats(0.01, 3.0), angles=st.tuples(angle_st, angle_st, angle_st),
           c=st.tuples(coord_st, coord_st, coord_st), seed=st.integers(0, 2**31))
    def test_sphere_exact_any_pose(self, r, angles, c, seed):
        prim = Superquadric(1.0, 1.0, (r, r, r), angles, c)
        x = np.random.default_rng(seed).uniform(-4, 4, size=(64, 3))
        exact = np.linalg.norm(x - np.array(c), axis=1) - r
        assert np.max(np.abs(approx_sdf(prim, x) - exact)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(prim=superquadrics(), seed=st.integers(0, 2**31))
    def test_sign_agrees_with_implicit(self, prim, seed):
        x = np.random.default_rng(seed).uniform(-4, 4, size=(64, 3))
        f = implicit_value(prim, x)
        d = approx_sdf(prim, x)
        clear = np.abs(f - 1.0) > 1e-9
        assert np.all(np.sign(d[clear]) == np.sign(f[clear] - 1.0))

    @settings(max_examples=50, deadline=None)
    @given(prim=superquadrics(), angles=st.tuples(angle_st, angle_st, angle_st),
           shift=st.tuples(coord_st, coord_st, coord_st), seed=st.integers(0, 2**31))
    def test_rigid_invariance(self, prim, angles, shift, seed):
        g = euler_zyx_to_matrix(angles)
        moved = Superquadric.from_rotation(prim.eps1, prim.eps2, prim.scale, g @ prim.rotation,
                                           g @ np.asarray(prim.translation) + shift)
        x = np.random.default_rng(seed).uniform(-3, 3, size=(32, 3))
        gx = x @ g.T + shift
        assert np.allclose(approx_sdf(moved, gx), approx_sdf(prim, x), atol=1e-10, rtol=0)

    @settings(max_examples=50, deadline=None)
    @given(prim=superquadrics(), axis=st.integers(0, 2), s=st.floats(0.01, 5.0),
           sign=st.sampled_from([-1.0, 1.0]))
    def test_principal_axis_distance(self, prim, axis, s, sign):
        x = prim.to_world(sign * s * np.eye(3)[axis])
        assert approx_sdf(prim, x) == pytest.approx(s - prim.scale[axis], abs=1e-10)

    def test_radial_distance_bounds_true_distance(self):
        rng = np.random.default_rng(5)
        prim = random_superquadric(rng, eps=(0.2, 1.8), scale=(0.3, 1.0), shift=0.0)
        u = rng.normal(size=(200, 3))
        x = prim.to_world(0.9 * u / np.linalg.norm(u, axis=1, keepdims=True) * min(prim.scale))
        x = x[np.abs(approx_sdf(prim, x)) < 0.05]
        assert np.all(np.abs(approx_sdf(prim, x)) >= exact_distance(prim, x) - 1e-9)


class TestJacobian:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            prim = random_superquadric(rng, eps=(0.3, 1.7), scale=(0.2, 0.8), shift=0.3)
            theta = prim.params
            x = rng.uniform(-1, 1, size=(40, 3))
            _, jac = sdf_and_jacobian(theta, x)
            num = np.empty_like(jac)
            for k in range(11):
                h = 1e-6 * max(1.0, abs(theta[k]))
                tp, tm = theta.copy(), theta.copy()
                tp[k] += h
                tm[k] -= h
                num[:, k] = (sdf_and_jacobian(tp, x)[0] - sdf_and_jacobian(tm, x)[0]) / (2 * h)
            scale = np.maximum(np.abs(num), 1e-3)
            assert np.max(np.abs(jac - num) / scale) < 1e-5

    def test_value_matches_approx_sdf(self):
        prim = Superquadric(0.4, 1.3, (0.3, 0.5, 0.2), (0.3, -0.2, 1.0), (0.1, 0.0, -0.1))
        x = np.random.default_rng(1).uniform(-1, 1, size=(50, 3))
        d, _ = sdf_and_jacobian(prim.params, x)
        assert np.allclose(d, approx_sdf(prim, x), atol=1e-14)


class TestPose:
    @settings(max_examples=100, deadline=None)
    @given(angles=st.tuples(angle_st, st.floats(-1.5, 1.5), angle_st))
    def test_rotation_matches_scipy_intrinsic_zyx(self, angles):
        ref = Rotation.from_euler("ZYX", angles).as_matrix()
        assert np.allclose(euler_zyx_to_matrix(angles), ref, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(angles=st.tuples(angle_st, angle_st, angle_st))
    def test_orthonormal_and_round_trip(self, angles):
        rot = euler_zyx_to_matrix(angles)
        assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(euler_zyx_to_matrix(matrix_to_euler_zyx(rot)), rot, atol=1e-9)

    def test_params_round_trip(self):
        prim = Superquadric(0.4, 1.3, (0.3, 0.5, 0.2), (0.3, -0.2, 1.0), (0.1, 0.0, -0.1))
        assert Superquadric.from_params(prim.params) == prim
        assert prim.params.shape == (11,)


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(eps1=0.01, eps2=1.0, scale=(1, 1, 1)),
        dict(eps1=1.0, eps2=2.5, scale=(1, 1, 1)),
        dict(eps1=1.0, eps2=1.0, scale=(1, 0, 1)),
        dict(eps1=1.0, eps2=1.0, scale=(1, 1, 1), translation=(np.nan, 0, 0)),
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(InvalidPrimitive):
            Superquadric(**kwargs)

    def test_accepts_bounds(self):
        Superquadric(EPS_MIN, 2.0, (1e-6, 1, 1))


class TestJson:
    def test_record_layout(self):
        prim = Superquadric(0.5, 1.5, (0.3, 0.2, 0.1), (0.1, 0.2, 0.3), (1, 2, 3))
        assert prim.to_dict() == {"eps": [0.5, 1.5], "scale": [0.3, 0.2, 0.1],
                                  "euler_zyx": [0.1, 0.2, 0.3], "translation": [1.0, 2.0, 3.0]}

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        prims = [random_superquadric(rng) for _ in range(4)]
        save_primitives(prims, tmp_path / "p.json")
        assert load_primitives(tmp_path / "p.json") == prims
        assert isinstance(json.loads((tmp_path / "p.json").read_text()), list)

    @pytest.mark.parametrize("text", ["{", '[{"eps": [1, 1]}]', '[{"eps": [1], "scale": [1, 1, 1]}]',
                                      '"sphere"'])
    def test_bad_records(self, tmp_path, text):
        (tmp_path / "p.json").write_text(text)
        with pytest.raises(InvalidPrimitive):
            load_primitives(tmp_path / "p.json")


class TestSampling:
    def test_points_lie_on_surface(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            prim = random_superquadric(rng, eps=(0.1, 1.9))
            pts = sample_surface(prim, 0.01)
            assert np.max(np.abs(approx_sdf(prim, pts))) < 1e-6

    def test_unit_sphere_count(self):
        n = len(sample_surface(UNIT_SPHERE, 0.1))
        assert 3000 <= n <= 6000

    def test_halving_spacing_triples_count(self):
        for prim in (UNIT_SPHERE, Superquadric(0.2, 1.5, (0.5, 1.0, 0.3))):
            assert len(sample_surface(prim, 0.05)) >= 3 * len(sample_surface(prim, 0.1))

    def test_neighbour_spacing_bounded(self):
        from scipy.spatial import cKDTree
        prim = Superquadric(0.3, 0.6, (0.4, 0.3, 0.2), (0.5, 0.1, 0.0))
        pts = sample_surface(prim, 0.02)
        d, _ = cKDTree(pts).query(pts, k=2)
        assert np.max(d[:, 1]) <= 0.02 + 1e-12

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(ValueError):
            sample_surface(UNIT_SPHERE, 0.0)
