"""Synthetic box worlds, a raycasting depth camera, a proportional trajectory
follower and the sense -> map -> plan -> execute trial loop."""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry as geo
from .distance_field import build_sdf, extrude_occupancy
from .geometry import PHI, S, Z, RobotModel, Trajectory
from .mapping import MappingParams, MapSnapshot, MultiElevationMap, measurement_variance
from .planner import PlannerParams, PlanningError, plan, posture_percentage


class Task(str, enum.Enum):
    THIN_GAP = "thin-gap"
    LOW_OVERHANG = "low-overhang"
    HIGH_CLEARANCE = "high-clearance"
    CLEARANCE_BLOCK = "clearance-block"
    COURSE = "course"
    CORRIDOR = "corridor"


# generator parameter ranges (m)
PARAM_RANGES = {
    Task.THIN_GAP: (0.2, 2.0),
    Task.LOW_OVERHANG: (0.05, 1.0),
    Task.HIGH_CLEARANCE: (0.0, 0.6),
    Task.CLEARANCE_BLOCK: (0.0, 0.8),
    Task.COURSE: (0.05, 1.0),
    Task.CORRIDOR: (0.2, 1.2),
}


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"box needs positive extent on all axes: {self}")


@dataclass(frozen=True)
class World:
    boxes: tuple[Box, ...]
    task: Task | None = None
    param: float | None = None
    waypoints: tuple[tuple[float, float, float], ...] = ((3.0, 0.0, 0.0),)

    def translated(self, dx: float, dy: float) -> "World":
        boxes = tuple(Box((b.lo[0] + dx, b.lo[1] + dy, b.lo[2]), (b.hi[0] + dx, b.hi[1] + dy, b.hi[2]))
                      for b in self.boxes)
        wps = tuple((x + dx, y + dy, phi) for x, y, phi in self.waypoints)
        return World(boxes, self.task, self.param, wps)

    def lo_hi(self):
        lo = np.array([b.lo for b in self.boxes]).reshape(-1, 3)
        hi = np.array([b.hi for b in self.boxes]).reshape(-1, 3)
        return lo, hi


def make_world(task, param: float) -> World:
    task = Task(task)
    lo, hi = PARAM_RANGES[task]
    if not lo <= param <= hi:
        raise ValueError(f"{task.value} parameter {param} outside [{lo}, {hi}]")
    p = float(param)
    if task is Task.THIN_GAP:
        boxes = (Box((1.4, p / 2, 0.0), (2.4, p / 2 + 1.0, 1.0)),
                 Box((1.4, -p / 2 - 1.0, 0.0), (2.4, -p / 2, 1.0)))
    elif task is Task.LOW_OVERHANG:
        boxes = (Box((1.4, -1.5, p), (2.4, 1.5, max(p + 0.4, 0.9))),)
    elif task is Task.HIGH_CLEARANCE:
        if p <= 0:
            boxes = ()
        else:
            boxes = (Box((1.6, -0.15, 0.0), (1.9, 0.15, p)),)
    elif task is Task.CLEARANCE_BLOCK:
        boxes = (Box((1.4, -1.5, p), (1.7, 1.5, p + 0.15)),)
    elif task is Task.COURSE:
        boxes = (Box((1.4, 0.4, 0.0), (2.4, 1.4, 1.0)),
                 Box((1.4, -1.4, 0.0), (2.4, -0.4, 1.0)),
                 Box((3.6, -1.5, p), (4.6, 1.5, max(p + 0.4, 0.9))),
                 Box((5.8, -0.15, 0.0), (6.1, 0.15, 0.2)))
        return World(boxes, task, p, ((2.8, 0.0, 0.0), (5.0, 0.0, 0.0), (7.5, 0.0, 0.0)))
    else:  # corridor narrowing in 0.25 m steps from 1.2 m to p
        boxes = []
        n = 6
        for i in range(n + 4):
            w = 1.2 + (p - 1.2) * min(i, n) / n
            x0 = 0.8 + 0.25 * i
            boxes.append(Box((x0, w / 2, 0.0), (x0 + 0.25, w / 2 + 0.5, 1.0)))
            boxes.append(Box((x0, -w / 2 - 0.5, 0.0), (x0 + 0.25, -w / 2, 1.0)))
        boxes = tuple(boxes)
    return World(boxes, task, p)


def required_adaptation(task, param: float, model: RobotModel) -> float:
    """Posture-adaptation percentage implied by a task's confinement."""
    task = Task(task)
    if task in (Task.THIN_GAP, Task.CORRIDOR):
        return posture_percentage(param, model.nominal_width, 2.0 * model.s_min)
    if task in (Task.LOW_OVERHANG, Task.COURSE):
        return posture_percentage(param, model.nominal_height, model.h0)
    if task is Task.HIGH_CLEARANCE:
        return posture_percentage(param, model.z_nom, model.z_max)
    # clearance block: whichever way round is cheaper
    over = posture_percentage(param + 0.15, model.z_nom, model.z_max)
    under = posture_percentage(param, model.nominal_height, model.h0)
    return max(0.0, min(over, under))


def achieved_adaptation(samples: np.ndarray, model: RobotModel) -> dict:
    """Largest posture changes along a path, as percentages."""
    s = samples[:, S]
    z = samples[:, Z]
    return {
        "span": max(0.0, float(np.max(posture_percentage(s, model.s_nom, model.s_min)))),
        "raise": max(0.0, float(np.max(posture_percentage(z, model.z_nom, model.z_max)))),
        "lower": max(0.0, float(np.max(posture_percentage(z + model.h0, model.nominal_height, model.h0)))),
    }


# -- sensing ----------------------------------------------------------------

@dataclass(frozen=True)
class SensorModel:
    h_fov: float = math.radians(87.0)
    v_fov: float = math.radians(58.0)
    width: int = 128
    height: int = 96
    max_range: float = 4.0
    min_range: float = 0.1
    noise_coeff: float = 0.0
    mount_xyz: tuple[float, float, float] = (0.3, 0.0, 0.07)  # body frame
    mount_pitch: float = math.radians(20.0)  # positive looks down

    def __post_init__(self):
        if not 0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")
        if self.width < 1 or self.height < 1:
            raise ValueError("image needs at least one ray")
        if self.noise_coeff < 0:
            raise ValueError("noise_coeff must be >= 0")

    def ray_directions(self, yaw: float) -> np.ndarray:
        """Unit ray directions (K, 3) in the map frame for a body yaw."""
        az = np.linspace(-self.h_fov / 2, self.h_fov / 2, self.width)
        el = np.linspace(-self.v_fov / 2, self.v_fov / 2, self.height) - self.mount_pitch
        A, E = np.meshgrid(az, el, indexing="ij")
        A = A.ravel() + yaw
        E = E.ravel()
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)

    def origin(self, cfg) -> np.ndarray:
        x, y, z, phi, _ = cfg
        mx, my, mz = self.mount_xyz
        c, s = math.cos(phi), math.sin(phi)
        return np.array([x + c * mx - s * my, y + s * mx + c * my, z + mz])


def raycast(world: World, origin, dirs: np.ndarray) -> np.ndarray:
    """Distance along each unit ray to the first box or ground hit (inf if none)."""
    origin = np.asarray(origin, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    t_ground = np.where(t_ground >= 0, t_ground, np.inf)
    best = t_ground
    lo, hi = world.lo_hi()
    if len(lo):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs[:, None, :]
            t1 = (lo[None] - origin[None, None, :]) * inv
            t2 = (hi[None] - origin[None, None, :]) * inv
        # rays parallel to a slab: inside -> unbounded, outside -> miss
        par = dirs[:, None, :] == 0
        inside = (origin[None, None, :] >= lo[None]) & (origin[None, None, :] <= hi[None])
        tmin_ax = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        tmax_ax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        tn = np.max(tmin_ax, axis=2)
        tf = np.min(tmax_ax, axis=2)
        hit = (tn <= tf) & (tf >= 0)
        t = np.where(hit, np.maximum(tn, 0.0), np.inf)
        best = np.minimum(best, np.min(t, axis=1))
    return best


@dataclass
class DepthScan:
    points: np.ndarray  # (K, 3) map frame
    ranges: np.ndarray  # (K,)
    origin: np.ndarray  # (3,)


def render_depth(world: World, sensor: SensorModel, cfg, rng=None) -> DepthScan:
    """Noisy range image turned into map-frame points; rays without a hit in
    [min_range, max_range] are dropped.  Range noise is N(0, (a d^2)^2)."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    origin = sensor.origin(cfg)
    dirs = sensor.ray_directions(cfg[PHI])
    t = raycast(world, origin, dirs)
    ok = np.isfinite(t) & (t >= sensor.min_range) & (t <= sensor.max_range)
    t, dirs = t[ok], dirs[ok]
    noise = rng.standard_normal(len(t)) * sensor.noise_coeff * t ** 2
    r = t + noise
    # a hair past the surface so hits on cell-aligned faces bin with the solid
    pts = origin[None, :] + (r + 1e-6)[:, None] * dirs
    return DepthScan(pts, r, origin)


# -- ground truth -------------------------------------------------------------

def box_collides(cfg, model: RobotModel, world: World, margin: float = 0.0) -> bool:
    """Exact test of the yaw-rotated body box (grown by ``margin``) against the world boxes.

    The ground plane is the support surface and is not checked.
    """
    x, y, z, phi, s = cfg
    hx = model.l0 / 2 + margin
    hy = s + model.span_offset + margin
    z0, z1 = z - margin, z + model.h0 + margin
    c, sn = math.cos(phi), math.sin(phi)
    ax = np.array([[c, sn], [-sn, c]])  # box axes as rows
    ext_xy = abs(c) * hx + abs(sn) * hy, abs(sn) * hx + abs(c) * hy
    for b in world.boxes:
        if z1 <= b.lo[2] or z0 >= b.hi[2]:
            continue
        bc = np.array([(b.lo[0] + b.hi[0]) / 2, (b.lo[1] + b.hi[1]) / 2])
        bh = np.array([(b.hi[0] - b.lo[0]) / 2, (b.hi[1] - b.lo[1]) / 2])
        d = bc - np.array([x, y])
        if abs(d[0]) >= ext_xy[0] + bh[0] or abs(d[1]) >= ext_xy[1] + bh[1]:
            continue
        sep = False
        for k, h in enumerate((hx, hy)):
            a = ax[k]
            r_b = abs(a[0]) * bh[0] + abs(a[1]) * bh[1]
            if abs(a @ d) >= h + r_b:
                sep = True
                break
        if not sep:
            return True
    return False


def point_clearance(points: np.ndarray, world: World) -> np.ndarray:
    """Euclidean distance of points (K, 3) to the nearest world box (inf if none)."""
    lo, hi = world.lo_hi()
    if len(lo) == 0:
        return np.full(len(points), np.inf)
    p = points[:, None, :]
    delta = np.maximum(np.maximum(lo[None] - p, p - hi[None]), 0.0)
    return np.min(np.linalg.norm(delta, axis=2), axis=1)


# -- execution ---------------------------------------------------------------

@dataclass(frozen=True)
class FollowerGains:
    kp: float = 4.0
    dt: float = 0.05
    v_max: tuple[float, float, float, float, float] = (0.6, 0.6, 0.3, 1.5, 0.3)
    settle_time: float = 1.0
    contact_margin: float = 0.0
    goal_tolerance: float = 0.05


@dataclass
class ExecutionResult:
    path: np.ndarray  # (K, 5)
    times: np.ndarray
    collisions: list  # (time, configuration) pairs


def _reference(traj: Trajectory, t: float) -> np.ndarray:
    times = traj.times
    if t >= times[-1]:
        return traj.samples[-1].copy()
    i = int(np.searchsorted(times, t, side="right") - 1)
    a = (t - times[i]) / traj.dt
    return (1 - a) * traj.samples[i] + a * traj.samples[i + 1]


def execute(traj: Trajectory, world: World, gains: FollowerGains = FollowerGains(),
            model: RobotModel = RobotModel(), start=None, horizon: float | None = None,
            on_step=None) -> ExecutionResult:
    """Track ``traj`` with a saturated proportional controller.

    Stops after travelling ``horizon`` metres in (x, y), or when the reference
    has ended and the settle time has elapsed.  ``on_step(t, state)`` is
    called after every integration step.
    """
    samples = traj.samples.copy()
    samples[:, PHI] = np.unwrap(samples[:, PHI])
    ref_traj = Trajectory(samples, traj.dt, traj.pinned)
    state = np.array(samples[0] if start is None else start, dtype=float)
    vmax = np.array(gains.v_max)
    t_end = ref_traj.times[-1] + gains.settle_time
    path = [state.copy()]
    times = [0.0]
    collisions = []
    travelled = 0.0
    t = 0.0
    while t < t_end - 1e-12:
        t += gains.dt
        err = _reference(ref_traj, t) - state
        v = np.clip(gains.kp * err, -vmax, vmax)
        new = model.clamp(state + v * gains.dt)
        travelled += math.hypot(new[0] - state[0], new[1] - state[1])
        state = new
        path.append(state.copy())
        times.append(t)
        if box_collides(state, model, world, gains.contact_margin):
            collisions.append((t, state.copy()))
        if on_step is not None:
            on_step(t, state)
        if horizon is not None and travelled >= horizon:
            break
        if t > ref_traj.times[-1] and np.hypot(*(samples[-1, :2] - state[:2])) < gains.goal_tolerance / 5:
            break
    path = np.array(path)
    path[:, PHI] = geo.wrap_angle(path[:, PHI])
    return ExecutionResult(path, np.array(times), collisions)


# -- trials ------------------------------------------------------------------

@dataclass(frozen=True)
class TrialSpec:
    task: Task
    param: float
    seed: int = 0
    waypoints: tuple | None = None  # defaults to the world's
    gains: FollowerGains = FollowerGains()
    model: RobotModel = RobotModel()
    mapping: MappingParams = MappingParams()
    planner: PlannerParams = PlannerParams()
    sensor: SensorModel = SensorModel()
    replan_distance: float = 1.0
    scan_interval: float = 0.5
    sdf_z_range: tuple[float, float] = (0.0, 1.0)
    max_replans: int = 30
    reach_margin: float = 0.3
    placement_jitter: float = 0.0  # world shifted by U(-j/2, j/2) in x and y per seed
    start_jitter: tuple[float, float, float] = (0.02, 0.02, 0.03)  # +- x, y, yaw of the start pose


@dataclass
class TrialReport:
    success: bool
    reason: str
    required_adaptation: float
    achieved: dict
    path: np.ndarray
    times: np.ndarray
    plans: list = field(default_factory=list)  # per-plan summary dicts
    collisions: int = 0
    wall_time: float = 0.0
    final_map: MapSnapshot | None = field(default=None, repr=False)
    last_sdf: object = field(default=None, repr=False)

    def summary(self) -> dict:
        pt = [p["plan_time"] for p in self.plans]
        st = [p["sdf_build_time"] for p in self.plans]
        return {
            "success": self.success,
            "reason": self.reason,
            "required_adaptation": self.required_adaptation,
            "achieved_adaptation": self.achieved,
            "collisions": self.collisions,
            "plans": len(self.plans),
            "max_plan_time": max(pt) if pt else 0.0,
            "mean_plan_time": float(np.mean(pt)) if pt else 0.0,
            "mean_sdf_time": float(np.mean(st)) if st else 0.0,
            "min_planned_clearance": min((p["min_clearance"] for p in self.plans), default=None),
        }

    def write_path_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,x,y,z,phi,s\n")
            for t, row in zip(self.times, self.path):
                fh.write(f"{t:.3f}," + ",".join(f"{v:.6f}" for v in row) + "\n")


def _clip_goal(state, waypoint, reach: float) -> tuple[np.ndarray, bool]:
    d = np.array(waypoint[:2]) - state[:2]
    dist = float(np.hypot(*d))
    goal = np.array([waypoint[0], waypoint[1], state[Z], waypoint[2], state[S]])
    if dist <= reach:
        return goal, True
    goal[:2] = state[:2] + d * (reach / dist)
    return goal, False


def build_field(m: MultiElevationMap, spec: TrialSpec):
    t0 = time.perf_counter()
    sdf = build_sdf(extrude_occupancy(m.snapshot(), spec.sdf_z_range))
    return sdf, time.perf_counter() - t0


def run_trial(spec: TrialSpec, world: World | None = None) -> TrialReport:
    t_wall = time.perf_counter()
    rng = np.random.default_rng(spec.seed)
    if world is None:
        world = make_world(spec.task, spec.param)
        if spec.placement_jitter > 0:
            dx, dy = rng.uniform(-0.5, 0.5, 2) * spec.placement_jitter
            world = world.translated(float(dx), float(dy))
    model = spec.model
    waypoints = list(spec.waypoints or world.waypoints)
    jx, jy, jphi = rng.uniform(-1.0, 1.0, 3) * np.asarray(spec.start_jitter, dtype=float)
    state = model.nominal_configuration(float(jx), float(jy), float(jphi))
    emap = MultiElevationMap(spec.mapping, center=state[:2])
    req = required_adaptation(spec.task, spec.param, model)
    reach = spec.mapping.side_length / 2 - model.l0 / 2 - spec.reach_margin

    def sense(cfg):
        scan = render_depth(world, spec.sensor, cfg, rng)
        var = np.maximum(measurement_variance(scan.ranges, spec.mapping.noise_coeff), 1e-8)
        emap.ingest_scan(scan.points, var, body_z=cfg[Z], sensor_origin=scan.origin)

    path = [state.copy()]
    times = [0.0]
    plans = []
    collisions = 0
    clock = 0.0
    reason = "ok"
    success = False
    sdf = None
    wp = 0
    for _ in range(spec.max_replans):
        sense(state)
        sdf, sdf_time = build_field(emap, spec)
        goal, final = _clip_goal(state, waypoints[wp], reach)
        try:
            res = plan(state, goal, sdf, model, spec.planner, sdf_time)
        except PlanningError as exc:
            reason = f"planner failed: {exc}"
            break
        plans.append(res.summary())
        if not res.collision_free:
            reason = f"planner failed: min clearance {res.min_clearance:.4f} m"
            break
        last_scan = [0.0]

        def on_step(t, cfg):
            if t - last_scan[0] >= spec.scan_interval - 1e-9:
                last_scan[0] = t
                sense(cfg)

        ex = execute(res.trajectory, world, spec.gains, model, start=state,
                     horizon=None if final else spec.replan_distance, on_step=on_step)
        moved = float(np.sum(np.hypot(*np.diff(ex.path[:, :2], axis=0).T)))
        path.extend(ex.path[1:])
        times.extend(clock + ex.times[1:])
        clock += ex.times[-1]
        state = ex.path[-1].copy()
        emap.recenter(state[:2])
        emap.inflate_motion(moved)
        if ex.collisions:
            collisions += len(ex.collisions)
            reason = f"collision at t={clock - ex.times[-1] + ex.collisions[0][0]:.2f}s"
            break
        if np.hypot(*(np.array(waypoints[wp][:2]) - state[:2])) <= spec.gains.goal_tolerance:
            wp += 1
            if wp == len(waypoints):
                success = True
                break
    else:
        reason = "replan budget exhausted"
    path = np.array(path)
    return TrialReport(success, reason, req, achieved_adaptation(path, model), path,
                       np.array(times), plans, collisions, time.perf_counter() - t_wall,
                       emap.snapshot(), sdf)


def snapshot_from_world(world: World, center=(0.0, 0.0), params: MappingParams = MappingParams(),
                        ground: float = 0.0) -> MapSnapshot:
    """Exact map of a world: per-cell floor = highest floor-connected surface under
    the cell centre, ceiling = underside of any box hanging more than
    ``cluster_gap`` above the ground.  Narrower gaps are impassable and the box
    is treated as standing on the ground, as the scan ingest does."""
    m = MultiElevationMap(params, center)
    xs = m.origin[0] + (np.arange(m.n) + 0.5) * m.resolution
    ys = m.origin[1] + (np.arange(m.n) + 0.5) * m.resolution
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    floor = np.full(X.shape, ground)
    ceiling = np.full(X.shape, np.nan)
    for b in world.boxes:
        inside = (X >= b.lo[0]) & (X < b.hi[0]) & (Y >= b.lo[1]) & (Y < b.hi[1])
        if b.lo[2] <= ground + params.cluster_gap:
            floor = np.where(inside, np.maximum(floor, b.hi[2]), floor)
        else:
            ceiling = np.where(inside, np.fmin(ceiling, b.lo[2]), ceiling)
    var = np.full(X.shape, 1e-6)
    return MapSnapshot(m.origin, m.resolution, floor, var,
                       ceiling, np.where(np.isnan(ceiling), np.nan, 1e-6))


def with_overrides(spec: TrialSpec, **kw) -> TrialSpec:
    return replace(spec, **kw)
