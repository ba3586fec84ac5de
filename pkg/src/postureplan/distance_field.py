"""Occupancy extrusion from a multi-elevation map, signed distance fields and
the piecewise obstacle cost used by the optimizer."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numba
import numpy as np

from .mapping import MapSnapshot

_INF = 1e20


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class OccupancyGrid:
    origin: np.ndarray  # (3,) lower corner of voxel [0, 0, 0]
    resolution: float
    occupied: np.ndarray  # (nx, ny, nz) bool

    def __post_init__(self):
        if self.occupied.ndim != 3 or min(self.occupied.shape) < 1:
            raise ValueError("occupancy needs three positive dimensions")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupied.shape

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.resolution


def extrude_occupancy(snapshot: MapSnapshot, z_range=(0.0, 1.0)) -> OccupancyGrid:
    """Voxelise each map column: solid at or below the floor mean, solid at or
    above the ceiling mean, free in between.  Invalid layers contribute nothing
    (unknown space is free)."""
    res = snapshot.resolution
    nz = int(round((z_range[1] - z_range[0]) / res))
    if nz < 1:
        raise ValueError(f"empty z range {z_range}")
    origin = np.array([snapshot.origin[0], snapshot.origin[1], z_range[0]], dtype=float)
    zc = z_range[0] + (np.arange(nz) + 0.5) * res
    with np.errstate(invalid="ignore"):
        below = zc[None, None, :] <= snapshot.floor_mean[:, :, None]
        above = zc[None, None, :] >= snapshot.ceiling_mean[:, :, None]
    return OccupancyGrid(origin, res, below | above)


@numba.njit(cache=True)
def _edt_1d(f, n, d, v, z):
    # Felzenszwalb-Huttenlocher lower envelope of parabolas, unit spacing.
    k = 0
    v[0] = 0
    z[0] = -_INF
    z[1] = _INF
    for q in range(1, n):
        if f[q] >= _INF:
            continue
        if f[v[0]] >= _INF:
            v[0] = q
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p)
            if s <= z[k]:
                k -= 1
                if k < 0:
                    k = 0
                    v[0] = q
                    z[0] = -_INF
                    z[1] = _INF
                    break
            else:
                k += 1
                v[k] = q
                z[k] = s
                z[k + 1] = _INF
                break
    if f[v[0]] >= _INF:
        for q in range(n):
            d[q] = _INF
        return
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]


@numba.njit(cache=True)
def _edt_axis(grid, axis):
    nx, ny, nz = grid.shape
    out = np.empty_like(grid)
    n = grid.shape[axis]
    f = np.empty(n)
    d = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    if axis == 0:
        for j in range(ny):
            for k in range(nz):
                for i in range(nx):
                    f[i] = grid[i, j, k]
                _edt_1d(f, n, d, v, z)
                for i in range(nx):
                    out[i, j, k] = d[i]
    elif axis == 1:
        for i in range(nx):
            for k in range(nz):
                for j in range(ny):
                    f[j] = grid[i, j, k]
                _edt_1d(f, n, d, v, z)
                for j in range(ny):
                    out[i, j, k] = d[j]
    else:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    f[k] = grid[i, j, k]
                _edt_1d(f, n, d, v, z)
                for k in range(nz):
                    out[i, j, k] = d[k]
    return out


def squared_edt(sites: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (in voxels) from every voxel centre to
    the nearest ``True`` voxel centre; ``inf`` when there are no sites."""
    g = np.where(np.asarray(sites, dtype=bool), 0.0, _INF)
    if g.ndim != 3:
        raise ValueError("squared_edt expects a 3-D grid")
    for axis in range(3):
        g = _edt_axis(g, axis)
    g[g >= _INF / 2] = np.inf
    return g


@dataclass(frozen=True)
class SignedDistanceField:
    origin: np.ndarray
    resolution: float
    distance: np.ndarray  # (nx, ny, nz), metres; positive in free space
    max_distance: float = 2.0

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.distance.shape

    @property
    def upper(self) -> np.ndarray:
        return self.origin + np.array(self.dims) * self.resolution

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.origin) & (p <= self.upper), axis=-1)

    def query(self, p):
        """Distance and gradient at one point."""
        d, g = self.query_many(np.asarray(p, dtype=float).reshape(1, 3))
        return float(d[0]), g[0]

    def query_many(self, points, with_gradient: bool = True):
        pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        inside = self.contains(pts)
        if not np.all(inside):
            bad = pts[np.flatnonzero(~inside)[0]]
            raise OutOfBoundsError(f"point {bad.tolist()} outside field "
                                   f"{self.origin.tolist()}..{self.upper.tolist()}")
        d = np.empty(len(pts))
        g = np.zeros((len(pts), 3))
        _query_kernel(self.distance, self.origin, self.resolution, pts, d, g, with_gradient)
        return d, g


@numba.njit(cache=True)
def _trilinear(field, origin, res, x, y, z):
    nx, ny, nz = field.shape
    # continuous index in voxel-centre coordinates, clamped to the outer centres
    fx = min(max((x - origin[0]) / res - 0.5, 0.0), nx - 1.0)
    fy = min(max((y - origin[1]) / res - 0.5, 0.0), ny - 1.0)
    fz = min(max((z - origin[2]) / res - 0.5, 0.0), nz - 1.0)
    i0 = min(int(fx), nx - 2) if nx > 1 else 0
    j0 = min(int(fy), ny - 2) if ny > 1 else 0
    k0 = min(int(fz), nz - 2) if nz > 1 else 0
    i1 = min(i0 + 1, nx - 1)
    j1 = min(j0 + 1, ny - 1)
    k1 = min(k0 + 1, nz - 1)
    tx = fx - i0
    ty = fy - j0
    tz = fz - k0
    c00 = field[i0, j0, k0] * (1 - tx) + field[i1, j0, k0] * tx
    c10 = field[i0, j1, k0] * (1 - tx) + field[i1, j1, k0] * tx
    c01 = field[i0, j0, k1] * (1 - tx) + field[i1, j0, k1] * tx
    c11 = field[i0, j1, k1] * (1 - tx) + field[i1, j1, k1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    return c0 * (1 - tz) + c1 * tz


@numba.njit(cache=True)
def _query_kernel(field, origin, res, pts, d, g, with_gradient):
    h = 0.5 * res
    for n in range(pts.shape[0]):
        x, y, z = pts[n, 0], pts[n, 1], pts[n, 2]
        d[n] = _trilinear(field, origin, res, x, y, z)
        if with_gradient:
            g[n, 0] = (_trilinear(field, origin, res, x + h, y, z)
                       - _trilinear(field, origin, res, x - h, y, z)) / (2 * h)
            g[n, 1] = (_trilinear(field, origin, res, x, y + h, z)
                       - _trilinear(field, origin, res, x, y - h, z)) / (2 * h)
            g[n, 2] = (_trilinear(field, origin, res, x, y, z + h)
                       - _trilinear(field, origin, res, x, y, z - h)) / (2 * h)


def build_sdf(occ: OccupancyGrid, max_distance: float = 2.0) -> SignedDistanceField:
    """Signed distance between voxel centres: outside minus inside EDT."""
    occupied = occ.occupied
    outside = np.sqrt(squared_edt(occupied)) * occ.resolution
    inside = np.sqrt(squared_edt(~occupied)) * occ.resolution
    d = np.where(occupied, -inside, outside)
    d = np.clip(d, -max_distance, max_distance)
    return SignedDistanceField(np.asarray(occ.origin, dtype=float), occ.resolution, d, max_distance)


def obstacle_cost(d, eps: float):
    """Piecewise obstacle cost and its derivative w.r.t. the distance."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = np.asarray(d, dtype=float)
    c = np.where(d < 0, -d + 0.5 * eps, np.where(d <= eps, (d - eps) ** 2 / (2 * eps), 0.0))
    dc = np.where(d < 0, -1.0, np.where(d <= eps, (d - eps) / eps, 0.0))
    if c.ndim == 0:
        return float(c), float(dc)
    return c, dc


SDF_MAGIC = b"POSTUREPLAN-SDF 1\n"


def save_sdf(sdf: SignedDistanceField, path) -> None:
    header = {"origin": sdf.origin.tolist(), "dims": list(sdf.dims),
              "resolution": sdf.resolution, "max_distance": sdf.max_distance,
              "dtype": "<f8", "order": "row-major [ix, iy, iz]"}
    with open(path, "wb") as fh:
        fh.write(SDF_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(sdf.distance, dtype="<f8").tobytes())


def load_sdf(path) -> SignedDistanceField:
    with open(path, "rb") as fh:
        if fh.readline() != SDF_MAGIC:
            raise ValueError(f"{path}: not an SDF dump")
        header = json.loads(fh.readline())
        dims = tuple(header["dims"])
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(dims).copy()
    return SignedDistanceField(np.array(header["origin"]), header["resolution"], data,
                               header["max_distance"])


def write_slice_csv(sdf: SignedDistanceField, path, axis: str = "y", value: float = 0.0) -> None:
    """Write the voxel slice nearest ``axis = value`` as CSV rows u, v, d."""
    ax = "xyz".index(axis)
    idx = int(np.clip(np.floor((value - sdf.origin[ax]) / sdf.resolution), 0, sdf.dims[ax] - 1))
    plane = np.take(sdf.distance, idx, axis=ax)
    others = [a for a in range(3) if a != ax]
    cu = sdf.origin[others[0]] + (np.arange(sdf.dims[others[0]]) + 0.5) * sdf.resolution
    cv = sdf.origin[others[1]] + (np.arange(sdf.dims[others[1]]) + 0.5) * sdf.resolution
    names = ["xyz"[a] for a in others]
    with open(path, "w") as fh:
        fh.write(f"{names[0]},{names[1]},distance\n")
        for i, u in enumerate(cu):
            for j, v in enumerate(cv):
                fh.write(f"{u:.6f},{v:.6f},{plane[i, j]:.6f}\n")
