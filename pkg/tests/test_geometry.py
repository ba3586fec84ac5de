import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from postureplan import geometry as geo
from postureplan.geometry import PHI, S, Z


def coupled_world(cfg, pt, model, axis, delta):
    """World position after moving one configuration axis along the coupling line."""
    cfg = np.array(cfg, dtype=float)
    if axis == Z:
        cfg[Z] += delta
        cfg[S] += model.ds_dz * delta
    elif axis == S:
        cfg[S] += delta
        cfg[Z] += model.dz_ds * delta
    else:
        cfg[axis] += delta
    return geo.collision_point_world(cfg, pt, model)


def random_cfg(rng, model):
    return np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(model.z_min, model.z_max),
                     rng.uniform(-math.pi, math.pi), rng.uniform(model.s_min, model.s_max)])


class TestCollisionPoints:
    def test_default_box_gives_84(self, model):
        assert len(geo.generate_collision_points(model)) == 84

    def test_vertices_present(self, model):
        c = geo.coefficient_array(geo.generate_collision_points(model))
        for cx in (-1, 1):
            for cy in (-1, 1):
                for cz in (0, 1):
                    assert np.any(np.all(np.isclose(c, [cx, cy, cz]), axis=1))

    def test_no_duplicates(self, coeffs):
        assert len({tuple(r) for r in np.round(coeffs, 12)}) == len(coeffs)

    def test_edge_spacing_within_two_radii(self, model, coeffs):
        # neighbouring points on every edge, measured at nominal span
        pts = geo.body_offsets(coeffs, model.s_nom, model)
        for i, p in enumerate(pts):
            d = np.linalg.norm(pts - p, axis=1)
            d[i] = np.inf
            assert d.min() <= 2 * model.collision_radius + 1e-12

    def test_symmetry(self, coeffs):
        keys = {tuple(r) for r in np.round(coeffs, 12)}
        for cx, cy, cz in keys:
            assert (round(-cx, 12) + 0.0, cy, cz) in keys
            assert (cx, round(-cy, 12) + 0.0, cz) in keys

    def test_oversized_radius_rejected(self, model):
        with pytest.raises(geo.InvalidModelError):
            geo.generate_collision_points(model.with_updates(collision_radius=model.l0 / 2))

    def test_deterministic(self, model):
        a = geo.coefficient_array(geo.generate_collision_points(model))
        b = geo.coefficient_array(geo.generate_collision_points(model))
        assert np.array_equal(a, b)


class TestCoupling:
    def test_nominal_fixed_point(self, model):
        assert geo.span_of_z(model, model.z_nom) == pytest.approx(model.s_nom)

    def test_raised_body_reaches_min_span(self, model):
        # k = -(s_nom - s_min) / (z_max - z_nom) = -0.159 / 0.113
        assert model.coupling_gain == pytest.approx(-0.159 / 0.113)
        assert geo.span_of_z(model, 0.299) == pytest.approx(0.251, abs=1e-12)

    def test_decoupled(self, model):
        flat = model.with_updates(coupling_gain=0.0)
        assert np.all(geo.span_of_z(flat, np.linspace(0, 0.299, 7)) == flat.s_nom)

    def test_monotone(self, model):
        z = np.linspace(model.z_min, model.z_max, 50)
        assert np.all(np.diff(geo.span_of_z(model, z)) <= 0)

    @given(st.floats(0.0, 1.0))
    def test_inverse_on_unclamped_segment(self, u):
        model = geo.RobotModel()
        lo = max(model.s_min, geo.span_of_z(model, model.z_max))
        hi = min(model.s_max, geo.span_of_z(model, model.z_min))
        s = lo + u * (hi - lo)
        assert geo.span_of_z(model, geo.z_of_s(model, s)) == pytest.approx(s, abs=1e-12)


class TestWorldTransform:
    def test_bottom_centre_is_origin(self, model):
        p = geo.collision_point_world([0, 0, 0, 0, 0.3], geo.CollisionPoint(0, 0, 0, 0.05), model)
        assert np.allclose(p, 0)

    def test_rotated_corner(self):
        m = geo.RobotModel(l0=0.6, h0=0.3, span_offset=0.0)
        p = geo.collision_point_world([1, 2, 0.5, math.pi / 2, 0.4], geo.CollisionPoint(1, -1, 1, 0.05), m)
        # (0.3, -0.4) turned by 90 degrees is (0.4, 0.3)
        assert np.allclose(p, [1.4, 2.3, 0.8])

    def test_half_length_point(self, model):
        s = 0.35
        p = geo.collision_point_world([0, 0, 0, 0, s], geo.CollisionPoint(0.5, -1, 1, 0.05), model)
        assert np.allclose(p, [model.l0 / 4, -s, model.h0])

    def test_batched_matches_single(self, model, coeffs, rng):
        pts = geo.generate_collision_points(model)
        samples = np.array([random_cfg(rng, model) for _ in range(5)])
        P = geo.world_points(samples, coeffs, model, 0.04)
        for i, cfg in enumerate(samples):
            for j, pt in enumerate(pts):
                assert np.allclose(P[i, j], geo.collision_point_world(cfg, pt, model, 0.04), atol=1e-14)

    def test_rigid_distances(self, model, coeffs, rng):
        for _ in range(20):
            a = random_cfg(rng, model)
            b = random_cfg(rng, model)
            b[S] = a[S]
            Pa = geo.world_points(a, coeffs, model)[0]
            Pb = geo.world_points(b, coeffs, model)[0]
            da = np.linalg.norm(Pa[:, None] - Pa[None], axis=2)
            db = np.linalg.norm(Pb[:, None] - Pb[None], axis=2)
            assert np.max(np.abs(da - db)) < 1e-12


class TestJacobian:
    def test_translation_columns(self, model, rng):
        pt = geo.CollisionPoint(1, -1, 1, 0.05)
        for _ in range(10):
            J = geo.collision_point_jacobian(random_cfg(rng, model), pt, model)
            assert np.array_equal(J[:, :2], np.eye(3)[:, :2])

    def test_yaw_column_hand_value(self):
        m = geo.RobotModel(l0=0.6, h0=0.3, coupling_gain=0.0, span_offset=0.0)
        J = geo.collision_point_jacobian([1, 2, 0.5, math.pi / 2, 0.4], geo.CollisionPoint(1, -1, 1, 0.05), m)
        assert np.allclose(J[:, PHI], [-0.3, 0.4, 0.0])

    def test_decoupled_has_no_cross_terms(self, rng):
        m = geo.RobotModel(coupling_gain=0.0)
        pt = geo.CollisionPoint(0.5, 1, 1, 0.05)
        J = geo.collision_point_jacobian(random_cfg(rng, m), pt, m)
        assert np.allclose(J[:, Z], [0, 0, 1])
        assert J[2, S] == 0

    def test_finite_differences_1000_samples(self, model, rng):
        pts = geo.generate_collision_points(model)
        h = 1e-6
        worst = 0.0
        for _ in range(1000):
            cfg = random_cfg(rng, model)
            pt = pts[rng.integers(len(pts))]
            J = geo.collision_point_jacobian(cfg, pt, model)
            for axis in range(5):
                fd = (coupled_world(cfg, pt, model, axis, h) - coupled_world(cfg, pt, model, axis, -h)) / (2 * h)
                scale = max(np.linalg.norm(J[:, axis]), 1e-3)
                worst = max(worst, np.linalg.norm(fd - J[:, axis]) / scale)
        assert worst < 1e-5

    def test_batched_matches_single(self, model, coeffs, rng):
        pts = geo.generate_collision_points(model)
        samples = np.array([random_cfg(rng, model) for _ in range(4)])
        J = geo.jacobians(samples, coeffs, model, 0.04)
        for i, cfg in enumerate(samples):
            for j in range(0, len(pts), 7):
                assert np.allclose(J[i, j], geo.collision_point_jacobian(cfg, pts[j], model, 0.04))


class TestTypes:
    def test_wrap_angle_range(self):
        a = geo.wrap_angle(np.array([-math.pi, math.pi, 3 * math.pi, -3 * math.pi, 0.1]))
        assert np.all(a > -math.pi) and np.all(a <= math.pi)
        assert a[0] == pytest.approx(math.pi)

    def test_model_validation(self):
        with pytest.raises(geo.InvalidModelError):
            geo.RobotModel(z_nom=0.5)
        with pytest.raises(geo.InvalidModelError):
            geo.RobotModel(coupling_gain=0.5)

    def test_trajectory_needs_three_samples(self):
        with pytest.raises(ValueError):
            geo.Trajectory(np.zeros((2, 5)), 0.1)

    def test_clamp(self, model):
        c = model.clamp([0, 0, 5.0, 0, 0.0])
        assert c[Z] == model.z_max and c[S] == model.s_min

    @settings(max_examples=50)
    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
    def test_nominal_configuration(self, x, y, phi):
        cfg = geo.RobotModel().nominal_configuration(x, y, phi)
        assert -math.pi < cfg[PHI] <= math.pi
