"""Deformable bounding box, 5-D configurations and collision-point kinematics.

A configuration is ``[x, y, z, phi, s]``: body-frame position in the map frame,
yaw, and span (half the box width).  The body frame sits at the centre of the
box's bottom face, so the box occupies ``z .. z + h0`` vertically.  Point
coefficients put the box vertices at ``|cx| = |cy| = 1``, ``cz in {0, 1}``, i.e.
the body-frame offset is ``[cx * l0 / 2, cy * s, cz * h0]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

X, Y, Z, PHI, S = range(5)
DIM = 5

# Consecutive points along an edge stay strictly closer than this many radii.
EDGE_SPACING_FACTOR = 1.5


class InvalidModelError(ValueError):
    pass


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class RobotModel:
    l0: float = 0.6
    h0: float = 0.141
    s_nom: float = 0.41
    s_min: float = 0.251
    s_max: float = 0.47
    z_nom: float = 0.186
    z_min: float = 0.0
    z_max: float = 0.299
    coupling_gain: float = -0.159 / 0.113
    collision_radius: float = 0.05
    span_offset: float = 0.04

    def __post_init__(self):
        if self.l0 <= 0 or self.h0 <= 0 or self.collision_radius <= 0:
            raise InvalidModelError("l0, h0 and collision_radius must be positive")
        if not self.z_min <= self.z_nom <= self.z_max:
            raise InvalidModelError("need z_min <= z_nom <= z_max")
        if not 0 < self.s_min <= self.s_nom <= self.s_max:
            raise InvalidModelError("need 0 < s_min <= s_nom <= s_max")
        if self.coupling_gain > 0:
            raise InvalidModelError("coupling_gain must be <= 0 (raising the body narrows it)")
        if self.span_offset < 0:
            raise InvalidModelError("span_offset must be >= 0")

    @property
    def ds_dz(self) -> float:
        return self.coupling_gain

    @property
    def dz_ds(self) -> float:
        return 0.0 if self.coupling_gain == 0 else 1.0 / self.coupling_gain

    @property
    def nominal_height(self) -> float:
        return self.z_nom + self.h0

    @property
    def nominal_width(self) -> float:
        return 2.0 * self.s_nom

    def clamp(self, cfg):
        """Clamp z and s of one configuration or an (N, 5) array to the model limits."""
        cfg = np.array(cfg, dtype=float)
        cfg[..., Z] = np.clip(cfg[..., Z], self.z_min, self.z_max)
        cfg[..., S] = np.clip(cfg[..., S], self.s_min, self.s_max)
        return cfg

    def nominal_configuration(self, x=0.0, y=0.0, phi=0.0) -> np.ndarray:
        return np.array([x, y, self.z_nom, wrap_angle(phi), self.s_nom])

    def with_updates(self, **kw) -> "RobotModel":
        return replace(self, **kw)


@dataclass(frozen=True)
class CollisionPoint:
    cx: float
    cy: float
    cz: float
    radius: float

    def __post_init__(self):
        if not (-1 <= self.cx <= 1 and -1 <= self.cy <= 1 and 0 <= self.cz <= 1):
            raise ValueError(f"coefficients out of range: {self}")

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])


@dataclass
class Trajectory:
    samples: np.ndarray  # (N, 5)
    dt: float
    pinned: np.ndarray = field(default=None)  # (2, 5) bool: rows = start, end

    def __post_init__(self):
        self.samples = np.array(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[1] != DIM or len(self.samples) < 3:
            raise ValueError("trajectory needs an (N>=3, 5) sample array")
        if self.pinned is None:
            self.pinned = np.ones((2, DIM), dtype=bool)
        self.pinned = np.asarray(self.pinned, dtype=bool)

    def __len__(self):
        return len(self.samples)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.samples)) * self.dt

    def free_mask(self) -> np.ndarray:
        """(N, 5) mask of entries the optimizer may move."""
        mask = np.ones(self.samples.shape, dtype=bool)
        mask[0] = ~self.pinned[0]
        mask[-1] = ~self.pinned[1]
        return mask

    def copy(self) -> "Trajectory":
        return Trajectory(self.samples.copy(), self.dt, self.pinned.copy())


def _edge_counts(length: float, radius: float) -> int:
    # number of segments so that spacing < EDGE_SPACING_FACTOR * radius
    return int(math.floor(length / (EDGE_SPACING_FACTOR * radius) + 1e-9)) + 1


def generate_collision_points(model: RobotModel) -> list[CollisionPoint]:
    """Lines of points along all 12 box edges, vertices shared.

    Edge resolution is fixed at the nominal width; the coefficients then scale
    with the span.  Order: vertices first, then x-, y- and z-parallel edges.
    """
    r = model.collision_radius
    dims = (model.l0, 2.0 * model.s_nom, model.h0)
    if r >= min(model.l0, 2.0 * model.s_min) / 2.0 or r >= model.h0:
        raise InvalidModelError(f"collision radius {r} does not fit the box {dims}")
    lo = (-1.0, -1.0, 0.0)
    hi = (1.0, 1.0, 1.0)
    ticks = []
    for L, a, b in zip(dims, lo, hi):
        n = _edge_counts(L, r)
        ticks.append(np.linspace(a, b, n + 1))

    seen = set()
    out = []

    def add(c):
        key = tuple(round(v, 12) for v in c)
        if key not in seen:
            seen.add(key)
            out.append(CollisionPoint(key[0], key[1], key[2], r))

    for cx in (lo[0], hi[0]):
        for cy in (lo[1], hi[1]):
            for cz in (lo[2], hi[2]):
                add((cx, cy, cz))
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for va in (lo[others[0]], hi[others[0]]):
            for vb in (lo[others[1]], hi[others[1]]):
                for t in ticks[axis][1:-1]:
                    c = [0.0, 0.0, 0.0]
                    c[axis] = t
                    c[others[0]] = va
                    c[others[1]] = vb
                    add(tuple(c))
    return out


def coefficient_array(points) -> np.ndarray:
    return np.array([p.coeffs for p in points], dtype=float)


def span_of_z(model: RobotModel, z):
    s = model.s_nom + model.coupling_gain * (np.asarray(z, dtype=float) - model.z_nom)
    s = np.clip(s, model.s_min, model.s_max)
    return float(s) if np.ndim(s) == 0 else s


def z_of_s(model: RobotModel, s):
    """Inverse of span_of_z on its unclamped segment; z_nom when decoupled."""
    s = np.asarray(s, dtype=float)
    if model.coupling_gain == 0:
        z = np.full_like(s, model.z_nom)
    else:
        z = model.z_nom + (s - model.s_nom) / model.coupling_gain
    z = np.clip(z, model.z_min, model.z_max)
    return float(z) if np.ndim(z) == 0 else z


def rot_z(phi):
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def body_offsets(coeffs: np.ndarray, span, model: RobotModel, span_offset=0.0) -> np.ndarray:
    """Body-frame translations of points ``coeffs`` (M, 3) for span(s).

    ``span`` may be a scalar or an (N,) array; returns (M, 3) or (N, M, 3).
    """
    coeffs = np.asarray(coeffs, dtype=float)
    span = np.asarray(span, dtype=float) + span_offset
    scale_x = coeffs[:, 0] * model.l0 / 2
    scale_z = coeffs[:, 2] * model.h0
    if span.ndim == 0:
        return np.stack([scale_x, coeffs[:, 1] * span, scale_z], axis=-1)
    n, m = span.shape[0], coeffs.shape[0]
    out = np.empty((n, m, 3))
    out[..., 0] = scale_x
    out[..., 1] = coeffs[None, :, 1] * span[:, None]
    out[..., 2] = scale_z
    return out


def collision_point_world(cfg, pt: CollisionPoint, model: RobotModel, span_offset: float = 0.0) -> np.ndarray:
    x, y, z, phi, s = np.asarray(cfg, dtype=float)
    t_b = np.array([pt.cx * model.l0 / 2, pt.cy * (s + span_offset), pt.cz * model.h0])
    return np.array([x, y, z]) + rot_z(phi) @ t_b


def collision_point_jacobian(cfg, pt: CollisionPoint, model: RobotModel, span_offset: float = 0.0) -> np.ndarray:
    """3x5 position Jacobian with the linear span/height coupling cross terms."""
    _, _, _, phi, s = np.asarray(cfg, dtype=float)
    c, sn = math.cos(phi), math.sin(phi)
    R = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
    dR = np.array([[-sn, -c, 0.0], [c, -sn, 0.0], [0.0, 0.0, 0.0]])
    t_b = np.array([pt.cx * model.l0 / 2, pt.cy * (s + span_offset), pt.cz * model.h0])
    J = np.zeros((3, 5))
    J[0, X] = 1.0
    J[1, Y] = 1.0
    J[:, Z] = np.array([0.0, 0.0, 1.0]) + R @ np.array([0.0, pt.cy * model.ds_dz, 0.0])
    J[:, PHI] = dR @ t_b
    J[:, S] = R @ np.array([0.0, pt.cy, 0.0]) + np.array([0.0, 0.0, model.dz_ds])
    return J


def world_points(samples: np.ndarray, coeffs: np.ndarray, model: RobotModel, span_offset: float = 0.0) -> np.ndarray:
    """World positions (N, M, 3) of all points for all samples (N, 5)."""
    samples = np.atleast_2d(samples)
    off = body_offsets(coeffs, samples[:, S], model, span_offset)
    c = np.cos(samples[:, PHI])[:, None]
    s = np.sin(samples[:, PHI])[:, None]
    out = np.empty_like(off)
    out[..., 0] = samples[:, None, X] + c * off[..., 0] - s * off[..., 1]
    out[..., 1] = samples[:, None, Y] + s * off[..., 0] + c * off[..., 1]
    out[..., 2] = samples[:, None, Z] + off[..., 2]
    return out


def jacobians(samples: np.ndarray, coeffs: np.ndarray, model: RobotModel, span_offset: float = 0.0) -> np.ndarray:
    """Batched version of collision_point_jacobian: (N, M, 3, 5)."""
    samples = np.atleast_2d(samples)
    n, m = samples.shape[0], coeffs.shape[0]
    off = body_offsets(coeffs, samples[:, S], model, span_offset)
    c = np.cos(samples[:, PHI])[:, None]
    s = np.sin(samples[:, PHI])[:, None]
    cy = coeffs[None, :, 1]
    J = np.zeros((n, m, 3, 5))
    J[..., 0, X] = 1.0
    J[..., 1, Y] = 1.0
    k = model.ds_dz
    J[..., 0, Z] = -s * cy * k
    J[..., 1, Z] = c * cy * k
    J[..., 2, Z] = 1.0
    J[..., 0, PHI] = -s * off[..., 0] - c * off[..., 1]
    J[..., 1, PHI] = c * off[..., 0] - s * off[..., 1]
    J[..., 0, S] = -s * cy
    J[..., 1, S] = c * cy
    J[..., 2, S] = model.dz_ds
    return J


def box_corners(cfg, model: RobotModel, span_offset: float = 0.0) -> np.ndarray:
    """The 8 world-frame vertices of the (un-inflated) box."""
    x, y, z, phi, s = np.asarray(cfg, dtype=float)
    hw = s + span_offset
    local = np.array([[sx * model.l0 / 2, sy * hw, sz * model.h0]
                      for sx in (-1, 1) for sy in (-1, 1) for sz in (0, 1)])
    return np.array([x, y, z]) + local @ rot_z(phi).T
