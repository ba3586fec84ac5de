"""Robot-centric multi-elevation map: per-cell floor and ceiling Gaussians.

Cells are indexed ``[ix, iy]`` on a global lattice of pitch ``resolution``;
the map keeps the integer index of its lower-left cell so that recentring is
a whole-cell shift and retained cells are untouched.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numba
import numpy as np

SQRT_2PI = math.sqrt(2.0 * math.pi)


class InvalidMeasurementError(ValueError):
    pass


class Elevation(enum.Enum):
    FLOOR = "floor"
    CEILING = "ceiling"
    NEW_FLOOR = "new_floor"
    NEW_CEILING = "new_ceiling"

    @property
    def is_floor(self) -> bool:
        return self in (Elevation.FLOOR, Elevation.NEW_FLOOR)


@dataclass(frozen=True)
class ElevationEstimate:
    mean: float = math.nan
    var: float = math.nan
    valid: bool = False

    @classmethod
    def invalid(cls) -> "ElevationEstimate":
        return cls()


@dataclass(frozen=True)
class MappingParams:
    side_length: float = 6.0
    resolution: float = 0.05
    prior_floor: float = 0.5
    outlier_gate: float = 3.0
    noise_coeff: float = 0.0285
    drift_var: float = 1e-4
    cluster_gap: float = 0.2
    min_cluster_points: int = 1
    min_range: float = 0.0

    def __post_init__(self):
        if self.resolution <= 0 or self.side_length < self.resolution:
            raise ValueError("need 0 < resolution <= side_length")
        if not 0.0 < self.prior_floor < 1.0:
            raise ValueError("prior_floor must lie in (0, 1)")
        if self.outlier_gate <= 0 or self.cluster_gap <= 0:
            raise ValueError("outlier_gate and cluster_gap must be positive")
        if self.noise_coeff < 0 or self.drift_var < 0 or self.min_range < 0:
            raise ValueError("noise_coeff, drift_var and min_range must be >= 0")
        if self.min_cluster_points < 1:
            raise ValueError("min_cluster_points must be >= 1")

    @property
    def prior(self) -> tuple[float, float]:
        return self.prior_floor, 1.0 - self.prior_floor


def measurement_variance(distance, noise_coeff: float):
    """Quadratic range-noise model: sigma = a * d**2, variance sigma**2."""
    sigma = noise_coeff * np.asarray(distance, dtype=float) ** 2
    return sigma * sigma


def likelihood(h: float, mean: float, var: float) -> float:
    return math.exp(-0.5 * (h - mean) ** 2 / var) / (SQRT_2PI * math.sqrt(var))


def classify(h_p: float, floor: ElevationEstimate, ceiling: ElevationEstimate,
             body_z: float, prior=(0.5, 0.5), meas_var: float = 0.0) -> Elevation:
    """MAP floor/ceiling assignment of one height observation.

    With both layers present the posterior is the Gaussian likelihood times
    ``prior``; otherwise the body height decides whether the point starts a
    new layer.  ``meas_var`` widens both layer likelihoods by the observation
    noise.
    """
    if floor.valid and ceiling.valid:
        # log-space: far observations underflow the plain densities
        lf = -0.5 * (h_p - floor.mean) ** 2 / (floor.var + meas_var) \
            - 0.5 * math.log(floor.var + meas_var) + math.log(prior[0])
        lc = -0.5 * (h_p - ceiling.mean) ** 2 / (ceiling.var + meas_var) \
            - 0.5 * math.log(ceiling.var + meas_var) + math.log(prior[1])
        return Elevation.FLOOR if lf >= lc else Elevation.CEILING
    if floor.valid:
        return Elevation.NEW_CEILING if h_p > body_z else Elevation.FLOOR
    if ceiling.valid:
        return Elevation.NEW_FLOOR if h_p < body_z else Elevation.CEILING
    return Elevation.NEW_CEILING if h_p > body_z else Elevation.NEW_FLOOR


def fuse(est: ElevationEstimate, h: float, var: float) -> ElevationEstimate:
    """One scalar Kalman update; an invalid estimate is initialised."""
    if not var > 0:
        raise InvalidMeasurementError(f"measurement variance must be positive, got {var}")
    if not est.valid:
        return ElevationEstimate(float(h), float(var), True)
    if not est.var > 0:
        raise InvalidMeasurementError(f"estimate variance must be positive, got {est.var}")
    denom = var + est.var
    mean = (var * est.mean + est.var * h) / denom
    return ElevationEstimate(mean, est.var * var / denom, True)


@dataclass
class ScanStats:
    floor: int = 0
    ceiling: int = 0
    new_floor: int = 0
    new_ceiling: int = 0
    reinitialized: int = 0
    ignored: int = 0
    dropped: int = 0

    def count(self, label: Elevation):
        name = label.value
        setattr(self, name, getattr(self, name) + 1)


@dataclass(frozen=True)
class MapSnapshot:
    """Immutable copy of the map layers; NaN marks invalid cells."""
    origin: tuple[float, float]
    resolution: float
    floor_mean: np.ndarray
    floor_var: np.ndarray
    ceiling_mean: np.ndarray
    ceiling_var: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.floor_mean.shape

    @property
    def side_length(self) -> float:
        return self.shape[0] * self.resolution

    @property
    def center(self) -> tuple[float, float]:
        half = self.side_length / 2.0
        return self.origin[0] + half, self.origin[1] + half

    def cell_centers(self):
        nx, ny = self.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.resolution
        return xs, ys

    def layers(self) -> dict[str, np.ndarray]:
        return {"floor_mean": self.floor_mean, "floor_var": self.floor_var,
                "ceiling_mean": self.ceiling_mean, "ceiling_var": self.ceiling_var}


MAP_MAGIC = b"POSTUREPLAN-MAP 1\n"
LAYER_NAMES = ("floor_mean", "floor_var", "ceiling_mean", "ceiling_var")


def save_snapshot(snap: MapSnapshot, path) -> None:
    """Header line (JSON) followed by four row-major little-endian float64 layers."""
    header = {
        "origin": list(snap.origin),
        "center": list(snap.center),
        "side_length": snap.side_length,
        "resolution": snap.resolution,
        "shape": list(snap.shape),
        "layers": list(LAYER_NAMES),
        "dtype": "<f8",
        "order": "row-major [ix, iy]",
        "invalid": "nan",
    }
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name in LAYER_NAMES:
            fh.write(np.ascontiguousarray(getattr(snap, name), dtype="<f8").tobytes())


def load_snapshot(path) -> MapSnapshot:
    with open(path, "rb") as fh:
        if fh.readline() != MAP_MAGIC:
            raise ValueError(f"{path}: not a map dump")
        header = json.loads(fh.readline())
        shape = tuple(header["shape"])
        arrays = {}
        for name in header["layers"]:
            buf = fh.read(8 * shape[0] * shape[1])
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return MapSnapshot(tuple(header["origin"]), header["resolution"], **arrays)


@numba.njit(cache=True)
def _classify_code(h, fm, fv, cm, cv, ref, log_pf, log_pc, var):
    # 0 floor, 1 ceiling, 2 new floor, 3 new ceiling; mirrors classify()
    f_ok = not math.isnan(fm)
    c_ok = not math.isnan(cm)
    if f_ok and c_ok:
        lf = -0.5 * (h - fm) ** 2 / (fv + var) - 0.5 * math.log(fv + var) + log_pf
        lc = -0.5 * (h - cm) ** 2 / (cv + var) - 0.5 * math.log(cv + var) + log_pc
        return 0 if lf >= lc else 1
    if f_ok:
        return 3 if h > ref else 0
    if c_ok:
        return 2 if h < ref else 1
    return 3 if h > ref else 2


@numba.njit(cache=True)
def _update_cell(ix, iy, h, var, ref, fm, fv, cm, cv, gate, log_pf, log_pc, counts):
    code = _classify_code(h, fm[ix, iy], fv[ix, iy], cm[ix, iy], cv[ix, iy], ref, log_pf, log_pc, var)
    counts[code] += 1
    is_floor = code == 0 or code == 2
    if is_floor:
        mean, evar, toward = fm[ix, iy], fv[ix, iy], 1.0
    else:
        mean, evar, toward = cm[ix, iy], cv[ix, iy], -1.0
    if math.isnan(mean):
        new_m, new_v = h, var
    else:
        # signed excursion toward the body, in combined standard deviations
        zs = toward * (h - mean) / math.sqrt(evar + var)
        if zs > gate:
            new_m, new_v = h, var
            counts[4] += 1
        elif zs < -gate:
            counts[5] += 1
            return
        else:
            d = var + evar
            new_m, new_v = (var * mean + evar * h) / d, evar * var / d
    if is_floor:
        fm[ix, iy], fv[ix, iy] = new_m, new_v
    else:
        cm[ix, iy], cv[ix, iy] = new_m, new_v
    if not (math.isnan(fm[ix, iy]) or math.isnan(cm[ix, iy])) and cm[ix, iy] <= fm[ix, iy]:
        if is_floor:
            cm[ix, iy], cv[ix, iy] = np.nan, np.nan
        else:
            fm[ix, iy], fv[ix, iy] = np.nan, np.nan


@numba.njit(cache=True)
def _ingest_kernel(flat, h_all, v_all, starts, ends, n, fm, fv, cm, cv, body_z, sensor_z,
                   gap, gate, min_pts, res, log_pf, log_pc, counts):
    for c in range(starts.shape[0]):
        a, b = starts[c], ends[c]
        cx, cy = flat[a] // n, flat[a] % n
        known_floor = fm[cx, cy]
        below = False  # a lower run exists in this cell
        r0 = a
        while r0 < b:
            r1 = r0 + 1
            while r1 < b and h_all[r1] - h_all[r1 - 1] <= gap:
                r1 += 1
            if r1 - r0 < min_pts:
                counts[5] += r1 - r0
                r0 = r1
                continue
            lo, hi = h_all[r0], h_all[r1 - 1]
            vmax = 0.0
            for k in range(r0, r1):
                vmax = max(vmax, v_all[k])
            supported = below or (not math.isnan(known_floor) and known_floor < lo - gap)
            face = hi - lo > gate * math.sqrt(vmax)
            underside = hi > sensor_z  # hit by a ray going up
            top = not face and hi < sensor_z < math.inf  # hit by rays coming down
            hanging_face = face and supported  # lower edge of a slab with a gap beneath
            rising = (lo <= body_z and not hanging_face) or top or not (supported or face or underside)
            below = True
            k0, k1 = r0, r1
            if face:
                k0 = r1 - 1 if rising else r0
                k1 = k0 + 1
            if rising:
                ref = max(body_z, hi + 1e-9)
                for k in range(k0, k1):
                    _update_cell(cx, cy, h_all[k], v_all[k], ref, fm, fv, cm, cv, gate,
                                 log_pf, log_pc, counts)
            else:
                ref = min(body_z, lo - 1e-9)
                for k in range(k1 - 1, k0 - 1, -1):
                    _update_cell(cx, cy, h_all[k], v_all[k], ref, fm, fv, cm, cv, gate,
                                 log_pf, log_pc, counts)
            r0 = r1


class MultiElevationMap:
    """Square grid that follows the robot.  Single writer; use snapshot() to share."""

    def __init__(self, params: MappingParams = MappingParams(), center=(0.0, 0.0)):
        self.params = params
        self.n = int(round(params.side_length / params.resolution))
        shape = (self.n, self.n)
        self.floor_mean = np.full(shape, np.nan)
        self.floor_var = np.full(shape, np.nan)
        self.ceiling_mean = np.full(shape, np.nan)
        self.ceiling_var = np.full(shape, np.nan)
        self.origin_index = self._origin_index_for(center)

    @property
    def resolution(self) -> float:
        return self.params.resolution

    @property
    def origin(self) -> tuple[float, float]:
        return (self.origin_index[0] * self.resolution, self.origin_index[1] * self.resolution)

    @property
    def center(self) -> tuple[float, float]:
        half = self.n * self.resolution / 2.0
        return self.origin[0] + half, self.origin[1] + half

    def _origin_index_for(self, center) -> tuple[int, int]:
        half = self.n // 2
        return (int(math.floor(center[0] / self.resolution + 0.5)) - half,
                int(math.floor(center[1] / self.resolution + 0.5)) - half)

    def cell_of(self, x, y):
        """Integer cell indices (may fall outside the grid)."""
        ix = np.floor(np.asarray(x) / self.resolution + 1e-9).astype(int) - self.origin_index[0]
        iy = np.floor(np.asarray(y) / self.resolution + 1e-9).astype(int) - self.origin_index[1]
        return ix, iy

    def floor_at(self, ix, iy) -> ElevationEstimate:
        m = self.floor_mean[ix, iy]
        if math.isnan(m):
            return ElevationEstimate.invalid()
        return ElevationEstimate(float(m), float(self.floor_var[ix, iy]), True)

    def ceiling_at(self, ix, iy) -> ElevationEstimate:
        m = self.ceiling_mean[ix, iy]
        if math.isnan(m):
            return ElevationEstimate.invalid()
        return ElevationEstimate(float(m), float(self.ceiling_var[ix, iy]), True)

    def valid_cells(self) -> np.ndarray:
        return ~np.isnan(self.floor_mean) | ~np.isnan(self.ceiling_mean)

    # -- updates ---------------------------------------------------------

    def ingest_scan(self, points, variances, body_z: float, sensor_origin=None) -> ScanStats:
        """Bin, classify and fuse one scan of map-frame points (K, 3).

        Within a cell the scan's heights are grouped into runs separated by
        more than ``cluster_gap``.  A run whose spread exceeds what the noise
        explains is a vertical face.  A run is "supported" when free space lies
        under it: a lower run in the same scan, or a known floor more than
        ``cluster_gap`` beneath.

        A run hangs from the ceiling when it is a supported face (the lower
        edge of a slab), or when it starts above ``body_z`` and is a face, was
        seen from below (above ``sensor_origin``) or is supported.  Anything
        else rises from the floor: wall faces, block tops whose base is hidden.
        With a known ``sensor_origin``, a flat run below the sensor was reached
        by rays descending through free space and always rises.

        The reference handed to the classifier is moved past the run, and a
        face is reduced to its extreme point: the top of a rising run, the
        bottom of a hanging one.
        """
        p = self.params
        stats = ScanStats()
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        variances = np.broadcast_to(np.asarray(variances, dtype=float), (len(points),))
        if len(points) == 0:
            return stats
        if np.any(~(variances > 0)):
            raise InvalidMeasurementError("all point variances must be positive")
        keep = np.ones(len(points), dtype=bool)
        if sensor_origin is not None and p.min_range > 0:
            rng = np.linalg.norm(points - np.asarray(sensor_origin)[None, :], axis=1)
            keep &= rng >= p.min_range
        ix, iy = self.cell_of(points[:, 0], points[:, 1])
        inside = (ix >= 0) & (ix < self.n) & (iy >= 0) & (iy < self.n)
        stats.dropped += int(np.sum(keep & ~inside))
        keep &= inside
        if not np.any(keep):
            return stats
        points, variances, ix, iy = points[keep], variances[keep], ix[keep], iy[keep]
        flat = ix * self.n + iy
        order = np.lexsort((points[:, 2], flat))
        flat = flat[order].astype(np.int64)
        h_all = np.ascontiguousarray(points[order, 2])
        v_all = np.ascontiguousarray(variances[order])
        bounds = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate([[0], bounds]).astype(np.int64)
        ends = np.concatenate([bounds, [len(flat)]]).astype(np.int64)
        sensor_z = np.inf if sensor_origin is None else float(np.asarray(sensor_origin)[2])
        counts = np.zeros(6, dtype=np.int64)
        _ingest_kernel(flat, h_all, v_all, starts, ends, self.n, self.floor_mean, self.floor_var,
                       self.ceiling_mean, self.ceiling_var, float(body_z), sensor_z,
                       p.cluster_gap, p.outlier_gate, p.min_cluster_points, self.resolution,
                       math.log(p.prior[0]), math.log(p.prior[1]), counts)
        for name, c in zip(("floor", "ceiling", "new_floor", "new_ceiling", "reinitialized", "ignored"),
                           counts):
            setattr(stats, name, getattr(stats, name) + int(c))
        return stats

    def recenter(self, new_center) -> int:
        """Shift the grid by whole cells so it stays centred on ``new_center``.

        Returns the number of cells shifted along the larger axis.
        """
        new_origin = self._origin_index_for(new_center)
        dx = new_origin[0] - self.origin_index[0]
        dy = new_origin[1] - self.origin_index[1]
        if dx == 0 and dy == 0:
            return 0
        for name in LAYER_NAMES:
            arr = getattr(self, name)
            out = np.full_like(arr, np.nan)
            sx = slice(max(dx, 0), self.n + min(dx, 0))
            tx = slice(max(-dx, 0), self.n + min(-dx, 0))
            sy = slice(max(dy, 0), self.n + min(dy, 0))
            ty = slice(max(-dy, 0), self.n + min(-dy, 0))
            if abs(dx) < self.n and abs(dy) < self.n:
                out[tx, ty] = arr[sx, sy]
            setattr(self, name, out)
        self.origin_index = new_origin
        return max(abs(dx), abs(dy))

    def inflate_motion(self, distance: float) -> None:
        """Grow every valid variance by drift_var per metre travelled."""
        add = self.params.drift_var * abs(distance)
        if add > 0:
            self.floor_var += add
            self.ceiling_var += add

    def snapshot(self) -> MapSnapshot:
        return MapSnapshot(self.origin, self.resolution, self.floor_mean.copy(),
                           self.floor_var.copy(), self.ceiling_mean.copy(),
                           self.ceiling_var.copy())
