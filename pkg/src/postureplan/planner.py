"""Covariant functional-gradient trajectory optimization over [x, y, z, phi, s].

Gradients are functional gradients per unit time: the smoothness term is
``-xi''`` and the obstacle term is the workspace form
``J^T |X'| [(I - X'X'^T) grad c - c kappa]`` summed over collision points.
Both are ``(1/dt) dU/dxi`` of the discretised objective

    U = w_s * sum_i |xi_{i+1} - xi_i|^2 / (2 dt)  +  w_o * sum_i sum_j c(d_ij) |X'_ij| dt

so the update ``xi <- xi - (1/eta) A^{-1} g`` is preconditioned by the
first-difference metric ``A = K^T K``.
"""

from __future__ import annotations

import hashlib
import math
import json
import time
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from . import geometry as geo
from .distance_field import SignedDistanceField, _trilinear, obstacle_cost
from .geometry import DIM, PHI, S, Z, RobotModel, Trajectory

# start fully pinned; at the goal only x, y, phi
DEFAULT_PINNED = np.array([[True] * 5, [True, True, False, True, False]])


class PlanningError(RuntimeError):
    pass


class ZeroLengthError(PlanningError):
    pass


class DivergedError(PlanningError):
    pass


@dataclass(frozen=True)
class PlannerParams:
    n_waypoints: int = 100
    dt: float = 0.1
    eta: float = 100.0
    max_iters: int = 500
    smooth_weight: float = 1.0
    obstacle_weight: float = 15.0
    eps: float = 0.05
    converge_tol: float = 1e-4
    velocity_floor: float = 1e-6
    max_step: float = 0.02  # trust region on the largest per-iteration change
    objective_tol: float = 1e-5  # also stop when an accepted step lowers U by less than this fraction
    posture_restarts: bool = True

    def __post_init__(self):
        if self.n_waypoints < 3:
            raise ValueError("n_waypoints must be >= 3")
        if self.dt <= 0 or self.eta <= 0 or self.eps <= 0:
            raise ValueError("dt, eta and eps must be positive")
        if self.smooth_weight < 0 or self.obstacle_weight < 0 or self.max_step < 0:
            raise ValueError("weights and max_step must be >= 0")
        if self.objective_tol < 0:
            raise ValueError("objective_tol must be >= 0")
        if self.max_iters < 1 or self.converge_tol <= 0:
            raise ValueError("max_iters must be >= 1 and converge_tol > 0")


class SmoothNorm:
    """Per-dimension banded Cholesky factors of ``A = K^T K`` on the free samples."""

    def __init__(self, n: int, pinned: np.ndarray):
        self.n = n
        self.pinned = np.asarray(pinned, dtype=bool)
        self.ranges = []
        self.factors = []
        for d in range(DIM):
            lo = 1 if self.pinned[0, d] else 0
            hi = n - 2 if self.pinned[1, d] else n - 1
            if not (self.pinned[0, d] or self.pinned[1, d]):
                raise ValueError(f"dimension {d} needs at least one pinned endpoint")
            m = hi - lo + 1
            diag = np.full(m, 2.0)
            if not self.pinned[0, d]:
                diag[0] = 1.0
            if not self.pinned[1, d]:
                diag[-1] = 1.0
            ab = np.zeros((2, m))
            ab[0, 1:] = -1.0
            ab[1] = diag
            self.ranges.append((lo, hi + 1))
            self.factors.append(cholesky_banded(ab))

    def matrix(self, d: int) -> np.ndarray:
        """Dense A for dimension ``d`` (tests and diagnostics)."""
        lo, hi = self.ranges[d]
        m = hi - lo
        A = np.diag(np.full(m, 2.0)) - np.eye(m, k=1) - np.eye(m, k=-1)
        if not self.pinned[0, d]:
            A[0, 0] = 1.0
        if not self.pinned[1, d]:
            A[-1, -1] = 1.0
        return A

    def solve(self, g: np.ndarray) -> np.ndarray:
        """A^{-1} g per dimension on free rows; pinned rows come back zero."""
        out = np.zeros_like(g)
        for d, ((lo, hi), cb) in enumerate(zip(self.ranges, self.factors)):
            out[lo:hi, d] = cho_solve_banded((cb, False), g[lo:hi, d])
        return out


def init_trajectory(start, goal, params: PlannerParams, pinned=DEFAULT_PINNED) -> Trajectory:
    """Straight-line interpolation of all five dimensions, yaw along the short arc."""
    start = np.asarray(start, dtype=float).copy()
    goal = np.asarray(goal, dtype=float).copy()
    if np.hypot(goal[0] - start[0], goal[1] - start[1]) < 1e-9:
        raise ZeroLengthError("start and goal coincide in (x, y)")
    start[PHI] = geo.wrap_angle(start[PHI])
    goal[PHI] = start[PHI] + geo.wrap_angle(goal[PHI] - start[PHI])
    t = np.linspace(0.0, 1.0, params.n_waypoints)[:, None]
    samples = (1.0 - t) * start[None, :] + t * goal[None, :]
    samples[0] = start
    samples[-1, np.asarray(pinned)[1]] = goal[np.asarray(pinned)[1]]
    return Trajectory(samples, params.dt, np.array(pinned, dtype=bool))


def smoothness_gradient(traj: Trajectory) -> np.ndarray:
    """-xi'' at interior samples, the natural one-sided term at free endpoints."""
    xi = traj.samples
    g = np.zeros_like(xi)
    g[1:-1] = (2.0 * xi[1:-1] - xi[:-2] - xi[2:]) / traj.dt ** 2
    g[0] = (xi[0] - xi[1]) / traj.dt ** 2
    g[-1] = (xi[-1] - xi[-2]) / traj.dt ** 2
    g[~traj.free_mask()] = 0.0
    return g


def _workspace_derivatives(P: np.ndarray, dt: float):
    """Central-difference velocity and acceleration of point paths (N, M, 3)."""
    V = np.empty_like(P)
    V[1:-1] = (P[2:] - P[:-2]) / (2.0 * dt)
    V[0] = (P[1] - P[0]) / dt
    V[-1] = (P[-1] - P[-2]) / dt
    Acc = np.zeros_like(P)
    Acc[1:-1] = (P[2:] - 2.0 * P[1:-1] + P[:-2]) / dt ** 2
    return V, Acc


def _point_distances(P: np.ndarray, sdf, with_gradient=True):
    n, m, _ = P.shape
    flat = P.reshape(-1, 3)
    inside = sdf.contains(flat).reshape(n, m)
    if not np.all(inside):
        i = int(np.flatnonzero(~np.all(inside, axis=1))[0])
        raise PlanningError(f"waypoint {i}: collision point outside the distance field")
    d, g = sdf.query_many(flat, with_gradient)
    return d.reshape(n, m), g.reshape(n, m, 3)


def _obstacle_terms_reference(traj: Trajectory, sdf: SignedDistanceField, model: RobotModel,
                              params: PlannerParams, coeffs, with_gradient=True):
    """Plain numpy form of the obstacle value and functional gradient.

    The cost is taken on the sphere surface distance d - radius.  Kept as
    the readable twin of the compiled kernel below.
    """
    xi = traj.samples
    P = geo.world_points(xi, coeffs, model, model.span_offset)
    d, grad_d = _point_distances(P, sdf, with_gradient)
    c, dc = obstacle_cost(d - model.collision_radius, params.eps)
    V, Acc = _workspace_derivatives(P, traj.dt)
    speed = np.linalg.norm(V, axis=-1)
    value = float(np.sum(c * speed) * traj.dt)
    g = np.zeros_like(xi)
    active = c > 0
    if not with_gradient or not np.any(active):
        return value, g
    grad_c = dc[..., None] * grad_d
    moving = speed >= params.velocity_floor
    safe = np.where(moving, speed, 1.0)
    vhat = V / safe[..., None]
    proj = grad_c - vhat * np.sum(vhat * grad_c, axis=-1, keepdims=True)
    kappa = (Acc - vhat * np.sum(vhat * Acc, axis=-1, keepdims=True)) / safe[..., None] ** 2
    w = speed[..., None] * (proj - c[..., None] * kappa)
    w = np.where(moving[..., None], w, grad_c)
    w[~active] = 0.0
    rows = np.flatnonzero(np.any(active, axis=1))
    J = geo.jacobians(xi[rows], coeffs, model, model.span_offset)
    g[rows] = np.einsum("nmkd,nmk->nd", J, w[rows])
    g[~traj.free_mask()] = 0.0
    return value, g


@numba.njit(cache=True)
def _obstacle_kernel(xi, coeffs, half_l, h0, span_off, ds_dz, dz_ds, field, origin, res,
                     radius, eps, vfloor, dt, free, with_grad, g, bad):
    n = xi.shape[0]
    m = coeffs.shape[0]
    upper0 = origin[0] + field.shape[0] * res
    upper1 = origin[1] + field.shape[1] * res
    upper2 = origin[2] + field.shape[2] * res
    P = np.empty((n, m, 3))
    for i in range(n):
        c, sn = math.cos(xi[i, 3]), math.sin(xi[i, 3])
        w = xi[i, 4] + span_off
        for j in range(m):
            ox, oy, oz = coeffs[j, 0] * half_l, coeffs[j, 1] * w, coeffs[j, 2] * h0
            px = xi[i, 0] + c * ox - sn * oy
            py = xi[i, 1] + sn * ox + c * oy
            pz = xi[i, 2] + oz
            if not (origin[0] <= px <= upper0 and origin[1] <= py <= upper1
                    and origin[2] <= pz <= upper2):
                bad[0] = i
                return 0.0
            P[i, j, 0], P[i, j, 1], P[i, j, 2] = px, py, pz
    value = 0.0
    h = 0.5 * res
    for i in range(n):
        c, sn = math.cos(xi[i, 3]), math.sin(xi[i, 3])
        w = xi[i, 4] + span_off
        for j in range(m):
            px, py, pz = P[i, j, 0], P[i, j, 1], P[i, j, 2]
            dd = _trilinear(field, origin, res, px, py, pz) - radius
            if dd >= eps:
                continue
            if dd < 0:
                cost, dcost = -dd + 0.5 * eps, -1.0
            else:
                cost, dcost = (dd - eps) ** 2 / (2 * eps), (dd - eps) / eps
            if i == 0:
                a0, b0 = 0, 1
                scale = 1.0 / dt
            elif i == n - 1:
                a0, b0 = n - 2, n - 1
                scale = 1.0 / dt
            else:
                a0, b0 = i - 1, i + 1
                scale = 0.5 / dt
            vx = (P[b0, j, 0] - P[a0, j, 0]) * scale
            vy = (P[b0, j, 1] - P[a0, j, 1]) * scale
            vz = (P[b0, j, 2] - P[a0, j, 2]) * scale
            speed = math.sqrt(vx * vx + vy * vy + vz * vz)
            value += cost * speed * dt
            if not with_grad:
                continue
            gx = (_trilinear(field, origin, res, px + h, py, pz)
                  - _trilinear(field, origin, res, px - h, py, pz)) / (2 * h) * dcost
            gy = (_trilinear(field, origin, res, px, py + h, pz)
                  - _trilinear(field, origin, res, px, py - h, pz)) / (2 * h) * dcost
            gz = (_trilinear(field, origin, res, px, py, pz + h)
                  - _trilinear(field, origin, res, px, py, pz - h)) / (2 * h) * dcost
            if speed >= vfloor:
                ux, uy, uz = vx / speed, vy / speed, vz / speed
                if 0 < i < n - 1:
                    ax = (P[i + 1, j, 0] - 2 * px + P[i - 1, j, 0]) / (dt * dt)
                    ay = (P[i + 1, j, 1] - 2 * py + P[i - 1, j, 1]) / (dt * dt)
                    az = (P[i + 1, j, 2] - 2 * pz + P[i - 1, j, 2]) / (dt * dt)
                else:
                    ax = ay = az = 0.0
                pg = ux * gx + uy * gy + uz * gz
                pa = ux * ax + uy * ay + uz * az
                s2 = speed * speed
                wx = speed * ((gx - ux * pg) - cost * (ax - ux * pa) / s2)
                wy = speed * ((gy - uy * pg) - cost * (ay - uy * pa) / s2)
                wz = speed * ((gz - uz * pg) - cost * (az - uz * pa) / s2)
            else:
                wx, wy, wz = gx, gy, gz
            ox, oy = coeffs[j, 0] * half_l, coeffs[j, 1] * w
            cy = coeffs[j, 1]
            # J^T w with J as in geometry.jacobians
            g[i, 0] += wx
            g[i, 1] += wy
            g[i, 2] += -sn * cy * ds_dz * wx + c * cy * ds_dz * wy + wz
            g[i, 3] += (-sn * ox - c * oy) * wx + (c * ox - sn * oy) * wy
            g[i, 4] += -sn * cy * wx + c * cy * wy + dz_ds * wz
    for i in range(n):
        for d in range(5):
            if not free[i, d]:
                g[i, d] = 0.0
    return value


def _obstacle_terms(traj: Trajectory, sdf: SignedDistanceField, model: RobotModel,
                    params: PlannerParams, coeffs, with_gradient=True):
    """Obstacle functional value and (optionally) its functional gradient."""
    xi = np.ascontiguousarray(traj.samples, dtype=float)
    g = np.zeros_like(xi)
    bad = np.full(1, -1, dtype=np.int64)
    value = _obstacle_kernel(xi, np.ascontiguousarray(coeffs, dtype=float), model.l0 / 2, model.h0,
                             model.span_offset, model.ds_dz, model.dz_ds, sdf.distance,
                             np.asarray(sdf.origin, dtype=float), float(sdf.resolution),
                             model.collision_radius, params.eps, params.velocity_floor, traj.dt,
                             traj.free_mask(), with_gradient, g, bad)
    if bad[0] >= 0:
        raise PlanningError(f"waypoint {bad[0]}: collision point outside the distance field")
    return value, g


def _coeffs(model, coeffs):
    if coeffs is None:
        return geo.coefficient_array(geo.generate_collision_points(model))
    return coeffs


def obstacle_gradient(traj: Trajectory, sdf: SignedDistanceField, model: RobotModel,
                      params: PlannerParams, coeffs=None) -> np.ndarray:
    return _obstacle_terms(traj, sdf, model, params, _coeffs(model, coeffs))[1]


def obstacle_functional(traj: Trajectory, sdf, model: RobotModel, params: PlannerParams,
                        coeffs=None) -> float:
    """sum_i sum_j c(d_ij - r) |X'_ij| dt over all samples."""
    return _obstacle_terms(traj, sdf, model, params, _coeffs(model, coeffs), False)[0]


def smoothness_functional(traj: Trajectory) -> float:
    diff = np.diff(traj.samples, axis=0)
    return float(np.sum(diff ** 2) / (2.0 * traj.dt))


def step(traj: Trajectory, grads: np.ndarray, norm: SmoothNorm, params: PlannerParams,
         model: RobotModel | None = None, max_step: float | None = None) -> Trajectory:
    """xi <- xi - (1/eta) A^{-1} g, shrunk to the trust radius, then clamp z and s."""
    if not np.all(np.isfinite(grads)):
        raise DivergedError("non-finite gradient")
    limit = params.max_step if max_step is None else max_step
    delta = -norm.solve(grads) / params.eta
    peak = float(np.max(np.abs(delta))) if delta.size else 0.0
    if limit > 0 and peak > limit:
        delta *= limit / peak
    out = traj.copy()
    out.samples += delta
    if model is not None:
        free = out.free_mask()
        clamped = model.clamp(out.samples)
        out.samples = np.where(free, clamped, out.samples)
    if not np.all(np.isfinite(out.samples)):
        raise DivergedError("trajectory became non-finite")
    return out


@dataclass
class PlanResult:
    trajectory: Trajectory
    iterations: int
    converged: bool
    min_clearance: float
    collision_free: bool
    plan_time: float
    sdf_build_time: float = 0.0
    clearance_per_sample: np.ndarray = field(default=None, repr=False)
    cost_history: list = field(default_factory=list, repr=False)
    seed: str = "straight"

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "min_clearance": self.min_clearance,
            "collision_free": self.collision_free,
            "plan_time": self.plan_time,
            "sdf_build_time": self.sdf_build_time,
            "seed": self.seed,
        }

    def trajectory_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.trajectory.samples).tobytes()).hexdigest()

    def write_csv(self, path) -> None:
        write_trajectory_csv(path, self.trajectory, self.clearance_per_sample)

    def write_summary(self, path, extra: dict | None = None) -> None:
        data = self.summary()
        if extra:
            data.update(extra)
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)


def write_trajectory_csv(path, traj: Trajectory, clearance=None) -> None:
    xi = traj.samples
    if clearance is None:
        clearance = np.full(len(xi), np.nan)
    with open(path, "w") as fh:
        fh.write("t,x,y,z,phi,s,min_clearance\n")
        for t, row, cl in zip(traj.times, xi, clearance):
            fh.write(f"{t:.4f},{row[0]:.6f},{row[1]:.6f},{row[2]:.6f},"
                     f"{geo.wrap_angle(row[3]):.6f},{row[4]:.6f},{cl:.6f}\n")


def clearance_profile(traj: Trajectory, sdf, model: RobotModel, coeffs=None) -> np.ndarray:
    """Per-sample minimum of (distance - radius) over all collision points."""
    if coeffs is None:
        coeffs = geo.coefficient_array(geo.generate_collision_points(model))
    P = geo.world_points(traj.samples, coeffs, model, model.span_offset)
    d, _ = _point_distances(P, sdf, with_gradient=False)
    return np.min(d, axis=1) - model.collision_radius


def posture_seeds(start, model: RobotModel) -> list[tuple[str, float, float]]:
    """Held (z, s) postures used to re-seed the optimizer: high, low, narrow."""
    seeds = [("high", model.z_max, geo.span_of_z(model, model.z_max)),
             ("low", model.z_min, geo.span_of_z(model, model.z_min)),
             ("narrow", geo.z_of_s(model, model.s_min), model.s_min)]
    out = []
    for name, z, s in seeds:
        if all(abs(z - oz) > 1e-9 or abs(s - os_) > 1e-9 for _, oz, os_ in out):
            out.append((name, float(z), float(s)))
    return out


def seeded_trajectory(base: Trajectory, z: float, s: float, ramp: float = 0.25) -> Trajectory:
    """Blend free z and s samples into a held posture after a smooth ramp."""
    out = base.copy()
    n = len(out)
    t = np.linspace(0.0, 1.0, n)
    b = np.clip(t / ramp, 0.0, 1.0)
    b = b * b * (3.0 - 2.0 * b)
    z0, s0 = out.samples[0, Z], out.samples[0, S]
    out.samples[:, Z] = (1 - b) * z0 + b * z
    out.samples[:, S] = (1 - b) * s0 + b * s
    fixed = ~out.free_mask()
    out.samples[fixed] = base.samples[fixed]
    return out


def optimize(traj: Trajectory, sdf: SignedDistanceField, model: RobotModel,
             params: PlannerParams = PlannerParams(), coeffs=None):
    """Trust-region descent from ``traj``; returns (trajectory, iterations, converged, history)."""
    coeffs = _coeffs(model, coeffs)
    norm = SmoothNorm(len(traj), traj.pinned)
    ws, wo = params.smooth_weight, params.obstacle_weight

    def objective(tr):
        if wo == 0:
            return ws * smoothness_functional(tr), np.zeros_like(tr.samples)
        val, g = _obstacle_terms(tr, sdf, model, params, coeffs)
        return ws * smoothness_functional(tr) + wo * val, wo * g

    converged = False
    it = 0
    history = []
    radius = params.max_step if params.max_step > 0 else np.inf
    u, g_obs = objective(traj)
    for it in range(1, params.max_iters + 1):
        g = ws * smoothness_gradient(traj) + g_obs
        new = step(traj, g, norm, params, model, radius)
        u_new, g_new = objective(new)
        if u_new > u + 1e-12 * max(1.0, abs(u)):
            # reject and shrink; give up once the region is below the tolerance
            radius = min(radius, float(np.max(np.abs(new.samples - traj.samples)))) / 2
            history.append(0.0)
            if radius < params.converge_tol:
                converged = True
                break
            continue
        change = float(np.max(np.abs(new.samples - traj.samples)))
        gain = u - u_new
        traj, u, g_obs = new, u_new, g_new
        history.append(change)
        radius = min(radius * 1.5, params.max_step) if params.max_step > 0 else np.inf
        if change < params.converge_tol or gain < params.objective_tol * max(1.0, abs(u)):
            converged = True
            break
    return traj, it, converged, history


def plan(start, goal, sdf: SignedDistanceField, model: RobotModel,
         params: PlannerParams = PlannerParams(), sdf_build_time: float = 0.0,
         pinned=DEFAULT_PINNED) -> PlanResult:
    """Optimize from the straight line; if that ends in collision and restarts
    are enabled, retry from held-posture seeds and keep the first clear result
    (or the one with the most clearance)."""
    t0 = time.perf_counter()
    coeffs = _coeffs(model, None)
    base = init_trajectory(start, goal, params, pinned)
    base.samples = model.clamp(base.samples)
    inits = [("straight", base)]
    if params.posture_restarts and params.obstacle_weight > 0:
        inits += [(name, seeded_trajectory(base, z, s)) for name, z, s in posture_seeds(start, model)]
    best = None
    total_iters = 0
    for name, init in inits:
        traj, it, converged, history = optimize(init, sdf, model, params, coeffs)
        total_iters += it
        clearance = clearance_profile(traj, sdf, model, coeffs)
        min_cl = float(np.min(clearance))
        if best is None or min_cl > best[3]:
            best = (name, traj, converged, min_cl, clearance, history)
        if min_cl >= 0.0:
            break
    name, traj, converged, min_cl, clearance, history = best
    traj.samples[:, PHI] = geo.wrap_angle(traj.samples[:, PHI])
    return PlanResult(traj, total_iters, converged, min_cl, bool(min_cl >= 0.0),
                      time.perf_counter() - t0, sdf_build_time, clearance, history, name)


def posture_percentage(value, nominal, limit):
    """Share of the possible posture change used, 0 at nominal and 100 at the limit."""
    if limit == nominal:
        raise ValueError("limit must differ from nominal")
    return 100.0 * (nominal - value) / (nominal - limit)
