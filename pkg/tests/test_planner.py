import numpy as np
import pytest

from postureplan import geometry as geo
from postureplan import planner
from postureplan.distance_field import SignedDistanceField
from postureplan.geometry import PHI, S, Z, Trajectory

from conftest import exact_sdf


def halfspace_sdf(normal, offset, res=0.05):
    """Analytic field d = n.X - offset sampled on a voxel grid around the origin."""
    n = np.asarray(normal, dtype=float)
    n /= np.linalg.norm(n)
    origin = np.array([-3.0, -3.0, -1.0])
    dims = (120, 120, 60)
    c = [origin[a] + (np.arange(dims[a]) + 0.5) * res for a in range(3)]
    X, Y, Zg = np.meshgrid(*c, indexing="ij")
    return SignedDistanceField(origin, res, n[0] * X + n[1] * Y + n[2] * Zg - offset, 10.0)


def wavy(n, rng, pinned=None, dt=None):
    t = np.linspace(0.0, 1.0, n)[:, None]
    xi = np.array([-1.0, -0.5, 0.15, 0.2, 0.35]) + t * np.array([2.0, 1.0, 0.0, 0.3, 0.0])
    for k in range(1, 4):
        xi += np.sin(np.pi * k * t) * rng.normal(0, [0.05, 0.05, 0.03, 0.1, 0.02]) / k
    return Trajectory(xi, dt or 10.0 / n, np.ones((2, 5), bool) if pinned is None else pinned)


# -- init_trajectory ----------------------------------------------------------

def test_init_straight_line(model):
    p = planner.PlannerParams(n_waypoints=5)
    start = model.nominal_configuration()
    goal = model.nominal_configuration(3.0)
    tr = planner.init_trajectory(start, goal, p)
    np.testing.assert_allclose(tr.samples[:, 0], [0, 0.75, 1.5, 2.25, 3.0])
    for d in (1, 2, 3, 4):
        np.testing.assert_allclose(tr.samples[:, d], start[d])
    assert tr.dt == p.dt
    assert tr.pinned.tolist() == planner.DEFAULT_PINNED.tolist()


def test_init_first_sample_is_start(model, rng):
    p = planner.PlannerParams(n_waypoints=17)
    for _ in range(20):
        start = np.array([*rng.uniform(-2, 2, 2), 0.2, rng.uniform(-3, 3), 0.3])
        goal = np.array([*rng.uniform(-2, 2, 2), 0.1, rng.uniform(-3, 3), 0.4])
        tr = planner.init_trajectory(start, goal, p)
        assert np.array_equal(tr.samples[0, [0, 1, 2, 4]], start[[0, 1, 2, 4]])
        assert tr.samples[0, PHI] == geo.wrap_angle(start[PHI])


def test_init_yaw_pi_equivalence(model):
    p = planner.PlannerParams(n_waypoints=11)
    start = model.nominal_configuration(0.0, 0.0, 0.5)
    a = planner.init_trajectory(start, np.array([2.0, 0, 0.186, np.pi, 0.41]), p)
    b = planner.init_trajectory(start, np.array([2.0, 0, 0.186, -np.pi, 0.41]), p)
    np.testing.assert_allclose(a.samples, b.samples, atol=1e-12)
    # the short way round from 0.5 to pi is +2.64 rad
    assert np.all(np.diff(a.samples[:, PHI]) > 0)


def test_init_zero_length(model):
    start = model.nominal_configuration(1.0, 1.0)
    goal = start.copy()
    goal[PHI] = 1.0
    with pytest.raises(planner.ZeroLengthError):
        planner.init_trajectory(start, goal, planner.PlannerParams())


def test_params_validation():
    for kw in ({"n_waypoints": 2}, {"eta": 0}, {"eps": -1}, {"obstacle_weight": -1}, {"objective_tol": -1}):
        with pytest.raises(ValueError):
            planner.PlannerParams(**kw)


# -- smoothness ----------------------------------------------------------------

def test_smoothness_gradient_line_and_constant(rng):
    t = np.linspace(0, 1, 30)[:, None]
    line = Trajectory(rng.normal(size=5) + t * rng.normal(size=5), 0.1)
    np.testing.assert_allclose(planner.smoothness_gradient(line), 0.0, atol=1e-9)
    const = Trajectory(np.tile(rng.normal(size=5), (30, 1)), 0.1)
    assert np.all(planner.smoothness_gradient(const) == 0.0)


def test_smoothness_gradient_bump():
    xi = np.zeros((3, 5))
    xi[1, 2] = 1.0
    g = planner.smoothness_gradient(Trajectory(xi, 1.0))
    assert g[1, 2] == 2.0
    assert np.count_nonzero(g) == 1


def test_smoothness_gradient_free_end():
    xi = np.zeros((4, 5))
    xi[-1, Z] = 0.5
    g = planner.smoothness_gradient(Trajectory(xi, 0.5, planner.DEFAULT_PINNED))
    # one-sided term (x_N - x_{N-1}) / dt^2 at the free goal height
    assert g[-1, Z] == pytest.approx(2.0)
    assert g[-1, 0] == 0.0 and np.all(g[0] == 0.0)


def test_smoothness_gradient_is_scaled_derivative(rng):
    tr = wavy(12, rng, planner.DEFAULT_PINNED, dt=0.1)
    g = planner.smoothness_gradient(tr)
    h = 1e-6
    free = tr.free_mask()
    for i, d in zip(*np.nonzero(free)):
        a, b = tr.copy(), tr.copy()
        a.samples[i, d] += h
        b.samples[i, d] -= h
        fd = (planner.smoothness_functional(a) - planner.smoothness_functional(b)) / (2 * h)
        assert g[i, d] * tr.dt == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_smooth_norm_positive_definite():
    norm = planner.SmoothNorm(20, planner.DEFAULT_PINNED)
    for d in range(5):
        A = norm.matrix(d)
        np.testing.assert_array_equal(A, A.T)
        assert np.min(np.linalg.eigvalsh(A)) > 0
        g = np.random.default_rng(d).normal(size=(20, 5))
        lo, hi = norm.ranges[d]
        np.testing.assert_allclose(A @ norm.solve(g)[lo:hi, d], g[lo:hi, d], atol=1e-10)


def test_smooth_norm_needs_a_pinned_end():
    pinned = planner.DEFAULT_PINNED.copy()
    pinned[0, Z] = False
    with pytest.raises(ValueError):
        planner.SmoothNorm(10, pinned)


# -- obstacle terms ------------------------------------------------------------

def test_obstacle_gradient_zero_in_free_space(model, coeffs, empty_sdf):
    p = planner.PlannerParams(n_waypoints=40)
    tr = planner.init_trajectory(model.nominal_configuration(-1.0), model.nominal_configuration(1.0), p)
    assert np.all(planner.obstacle_gradient(tr, empty_sdf, model, p, coeffs) == 0.0)
    assert planner.obstacle_functional(tr, empty_sdf, model, p, coeffs) == 0.0


def test_obstacle_gradient_pushes_away_from_wall(model, coeffs):
    # solid for y < -0.52; the right body edge sits at -(s_nom + 0.04) = -0.45
    sdf = halfspace_sdf([0.0, 1.0, 0.0], -0.52)
    p = planner.PlannerParams(n_waypoints=30)
    tr = planner.init_trajectory(model.nominal_configuration(-1.0), model.nominal_configuration(1.0), p)
    g = planner.obstacle_gradient(tr, sdf, model, p, coeffs)
    inner = g[1:-1]
    assert np.all(inner[:, 1] < 0)  # descent -g moves toward +y
    assert np.all(inner[:, S] > 0)  # and -g narrows the stance
    np.testing.assert_allclose(inner[:, 0], 0.0, atol=1e-9)  # no along-track push


def test_obstacle_gradient_matches_finite_differences(model, coeffs):
    """The workspace form is (1/dt) of the functional's gradient.

    Perturbations follow the coupled (z, s) directions the Jacobian encodes;
    rows next to an endpoint see the one-sided end velocity and are excluded.
    """
    rng = np.random.default_rng(0)
    sdf = halfspace_sdf([0.2, 0.5, -1.0], -0.45)
    n = 100
    p = planner.PlannerParams(n_waypoints=n, dt=10.0 / n)
    for _ in range(2):
        tr = wavy(n, rng)
        an = planner.obstacle_gradient(tr, sdf, model, p, coeffs) * p.dt

        def F(xi):
            return planner.obstacle_functional(Trajectory(xi, p.dt, tr.pinned), sdf, model, p, coeffs)

        fd = np.zeros_like(an)
        h = 1e-6
        for d in range(5):
            e = np.zeros(5)
            e[d] = 1.0
            if d == Z:
                e[S] = model.ds_dz
            if d == S:
                e[Z] = model.dz_ds
            for i in range(2, n - 2):
                a = tr.samples.copy()
                b = tr.samples.copy()
                a[i] += h * e
                b[i] -= h * e
                fd[i, d] = (F(a) - F(b)) / (2 * h)
        assert np.count_nonzero(fd) > 100
        err = np.linalg.norm(an[2:-2] - fd[2:-2]) / np.linalg.norm(fd[2:-2])
        assert err < 1e-3


def test_kernel_matches_reference(model, coeffs, overhang_sdf, rng):
    p = planner.PlannerParams(n_waypoints=60)
    tr = planner.init_trajectory(model.nominal_configuration(0.3), model.nominal_configuration(2.6), p)
    tr.samples[1:-1] += rng.normal(0, [0.01, 0.01, 0.02, 0.05, 0.01], (58, 5))
    tr.samples = model.clamp(tr.samples)
    v1, g1 = planner._obstacle_terms(tr, overhang_sdf, model, p, coeffs)
    v2, g2 = planner._obstacle_terms_reference(tr, overhang_sdf, model, p, coeffs)
    assert v1 > 0
    assert v1 == pytest.approx(v2, rel=1e-10)
    np.testing.assert_allclose(g1, g2, rtol=1e-9, atol=1e-9)


def test_out_of_bounds_names_waypoint(model, coeffs, empty_sdf):
    p = planner.PlannerParams(n_waypoints=10)
    tr = planner.init_trajectory(model.nominal_configuration(0.0), model.nominal_configuration(5.0), p)
    with pytest.raises(planner.PlanningError, match="waypoint"):
        planner.obstacle_gradient(tr, empty_sdf, model, p, coeffs)


def test_functional_decreases_after_step(model, coeffs, overhang_sdf):
    p = planner.PlannerParams()
    tr = planner.init_trajectory(model.nominal_configuration(0.3), model.nominal_configuration(2.6), p)
    norm = planner.SmoothNorm(len(tr), tr.pinned)
    before = planner.obstacle_functional(tr, overhang_sdf, model, p, coeffs)
    g = p.smooth_weight * planner.smoothness_gradient(tr) + \
        p.obstacle_weight * planner.obstacle_gradient(tr, overhang_sdf, model, p, coeffs)
    new = planner.step(tr, g, norm, p, model)
    after = planner.obstacle_functional(new, overhang_sdf, model, p, coeffs)
    assert before > 0
    assert after < before


# -- step ----------------------------------------------------------------------

def test_step_zero_gradient(model, rng):
    tr = wavy(20, rng, planner.DEFAULT_PINNED)
    tr.samples = model.clamp(tr.samples)
    norm = planner.SmoothNorm(20, tr.pinned)
    out = planner.step(tr, np.zeros_like(tr.samples), norm, planner.PlannerParams(), model)
    assert np.array_equal(out.samples, tr.samples)


def test_step_scales_with_inverse_eta(rng):
    tr = wavy(25, rng, planner.DEFAULT_PINNED)
    norm = planner.SmoothNorm(25, tr.pinned)
    g = rng.normal(size=tr.samples.shape)
    d1 = planner.step(tr, g, norm, planner.PlannerParams(eta=100.0, max_step=0.0)).samples - tr.samples
    d2 = planner.step(tr, g, norm, planner.PlannerParams(eta=200.0, max_step=0.0)).samples - tr.samples
    np.testing.assert_allclose(d2, d1 / 2, rtol=1e-9, atol=1e-15)


def test_step_trust_region(rng):
    tr = wavy(25, rng, planner.DEFAULT_PINNED)
    norm = planner.SmoothNorm(25, tr.pinned)
    g = 1e4 * rng.normal(size=tr.samples.shape)
    out = planner.step(tr, g, norm, planner.PlannerParams(max_step=0.02))
    assert np.max(np.abs(out.samples - tr.samples)) == pytest.approx(0.02)


def test_step_rejects_non_finite(rng):
    tr = wavy(10, rng)
    g = np.zeros_like(tr.samples)
    g[3, 1] = np.nan
    with pytest.raises(planner.DivergedError):
        planner.step(tr, g, planner.SmoothNorm(10, tr.pinned), planner.PlannerParams())


def test_smoothness_only_converges_to_line(rng):
    p = planner.PlannerParams(n_waypoints=40, eta=300.0, max_step=0.0)
    tr = wavy(40, rng, dt=p.dt)
    tr.samples[1:-1] += rng.normal(0, 0.1, (38, 5))
    first, last = tr.samples[0].copy(), tr.samples[-1].copy()
    norm = planner.SmoothNorm(40, tr.pinned)
    for _ in range(200):
        tr = planner.step(tr, planner.smoothness_gradient(tr), norm, p)
    t = np.linspace(0, 1, 40)[:, None]
    line = (1 - t) * first + t * last
    assert np.max(np.abs(tr.samples - line)) < 1e-6


def test_smoothness_only_free_end_goes_flat(rng):
    # with the goal height free the minimiser holds the start posture
    p = planner.PlannerParams(n_waypoints=30, eta=300.0, max_step=0.0)
    tr = wavy(30, rng, planner.DEFAULT_PINNED, dt=p.dt)
    norm = planner.SmoothNorm(30, tr.pinned)
    for _ in range(3000):
        tr = planner.step(tr, planner.smoothness_gradient(tr), norm, p)
    np.testing.assert_allclose(tr.samples[:, Z], tr.samples[0, Z], atol=1e-6)


def test_endpoint_pinning_bit_exact(model, coeffs, overhang_sdf):
    p = planner.PlannerParams(max_iters=80)
    start = model.nominal_configuration(0.3, 0.05, 0.1)
    goal = model.nominal_configuration(2.6, -0.05, -0.1)
    init = planner.init_trajectory(start, goal, p)
    out, *_ = planner.optimize(init, overhang_sdf, model, p, coeffs)
    assert np.array_equal(out.samples[0], init.samples[0])
    pin = planner.DEFAULT_PINNED[1]
    assert np.array_equal(out.samples[-1, pin], init.samples[-1, pin])
    assert not np.array_equal(out.samples[1:-1], init.samples[1:-1])


def test_clamp_safety(model, coeffs, overhang_sdf, rng):
    p = planner.PlannerParams(max_iters=60, max_step=0.0, eta=5.0)
    tr = planner.init_trajectory(model.nominal_configuration(0.3), model.nominal_configuration(2.6), p)
    norm = planner.SmoothNorm(len(tr), tr.pinned)
    for _ in range(10):
        g = rng.normal(0, 50, tr.samples.shape)
        tr = planner.step(tr, g, norm, p, model)
        assert np.all((tr.samples[:, Z] >= model.z_min) & (tr.samples[:, Z] <= model.z_max))
        assert np.all((tr.samples[:, S] >= model.s_min) & (tr.samples[:, S] <= model.s_max))


# -- plan ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def ahead_sdf():
    return exact_sdf("high-clearance", 0.0, center=(1.5, 0.0))


def test_plan_empty_world(model, ahead_sdf):
    res = planner.plan(model.nominal_configuration(), model.nominal_configuration(3.0), ahead_sdf, model)
    assert res.collision_free and res.converged
    assert res.iterations <= 10
    init = planner.init_trajectory(model.nominal_configuration(), model.nominal_configuration(3.0),
                                   planner.PlannerParams())
    np.testing.assert_allclose(res.trajectory.samples, init.samples, atol=1e-12)
    assert res.min_clearance >= 0


def test_plan_thin_gap(model):
    sdf = exact_sdf("thin-gap", 0.70)
    res = planner.plan(model.nominal_configuration(), model.nominal_configuration(2.6), sdf, model)
    assert res.collision_free
    # the body edge at y = s + 0.04 plus the radius must fit in 0.35 m
    in_gap = (res.trajectory.samples[:, 0] > 1.7) & (res.trajectory.samples[:, 0] < 2.1)
    assert np.all(res.trajectory.samples[in_gap, S] <= 0.35 - 0.04 - model.collision_radius + 1e-9)


def test_plan_low_overhang(model, overhang_sdf):
    res = planner.plan(model.nominal_configuration(), model.nominal_configuration(2.6), overhang_sdf, model)
    assert res.collision_free
    tops = res.trajectory.samples[:, Z] + model.h0
    assert np.min(tops) <= 0.225 - model.collision_radius + 1e-9
    assert res.min_clearance == pytest.approx(np.min(res.clearance_per_sample))


def test_plan_deterministic(model, overhang_sdf):
    a = planner.plan(model.nominal_configuration(), model.nominal_configuration(2.6), overhang_sdf, model)
    b = planner.plan(model.nominal_configuration(), model.nominal_configuration(2.6), overhang_sdf, model)
    assert a.trajectory_hash() == b.trajectory_hash()


def test_plan_infeasible_reports_collision(model):
    sdf = exact_sdf("thin-gap", 0.40)
    res = planner.plan(model.nominal_configuration(), model.nominal_configuration(2.6), sdf, model)
    assert not res.collision_free
    assert res.min_clearance < 0


def test_posture_seeds_distinct(model):
    seeds = planner.posture_seeds(model.nominal_configuration(), model)
    # with the default coupling the narrowest stance is reached at full height,
    # so "narrow" coincides with "high" and is dropped
    assert [s[0] for s in seeds] == ["high", "low"]
    assert len({(z, s) for _, z, s in seeds}) == len(seeds)
    for _, z, s in seeds:
        assert model.z_min <= z <= model.z_max and model.s_min <= s <= model.s_max


# -- reporting -----------------------------------------------------------------

def test_posture_percentage():
    assert planner.posture_percentage(0.30, 0.327, 0.141) == pytest.approx(14.516, abs=1e-3)
    assert planner.posture_percentage(0.327, 0.327, 0.141) == 0.0
    assert planner.posture_percentage(0.141, 0.327, 0.141) == pytest.approx(100.0)
    # raising toward an upper limit is positive too
    assert planner.posture_percentage(0.25, 0.186, 0.299) > 0
    with pytest.raises(ValueError):
        planner.posture_percentage(0.2, 0.3, 0.3)


def test_plan_result_csv_and_summary(model, ahead_sdf, tmp_path):
    res = planner.plan(model.nominal_configuration(), model.nominal_configuration(3.0), ahead_sdf, model)
    res.write_csv(tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0] == "t,x,y,z,phi,s,min_clearance"
    assert len(rows) == len(res.trajectory) + 1
    data = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    np.testing.assert_allclose(data[:, 1:6], res.trajectory.samples, atol=1e-6)
    res.write_summary(tmp_path / "s.json", {"task": "x"})
    import json
    s = json.loads((tmp_path / "s.json").read_text())
    assert s["collision_free"] is True and s["task"] == "x"
    assert s["collision_free"] == (s["min_clearance"] >= 0)
