"""Time partitions, spatial grids and storage for one- and two-time fields."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

_TOL = 1e-12

THETA_MAGIC = b"THF1"
THETA_VERSION = 1


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Partition:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise DomainError("a partition needs at least two points")
        if np.any(np.diff(pts) <= 0):
            raise DomainError("partition points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def n_intervals(self):
        return self.points.size - 1

    @property
    def mesh(self):
        return float(np.max(np.diff(self.points)))

    @property
    def start(self):
        return float(self.points[0])

    @property
    def end(self):
        return float(self.points[-1])


def build_partition(tau: float, T: float, N: int, kind: str = "uniform",
                    ratio: float = 2.0) -> Partition:
    """Partition of [tau, T] into N pieces; geometric gaps grow by ``ratio``."""
    if not tau < T:
        raise DomainError(f"need tau < T, got tau={tau}, T={T}")
    if int(N) < 1:
        raise DomainError("need at least one interval")
    N = int(N)
    if kind == "uniform":
        pts = tau + (T - tau) * np.arange(N + 1) / N
    elif kind == "geometric":
        if ratio <= 0:
            raise DomainError("geometric ratio must be positive")
        gaps = ratio ** np.arange(N, dtype=float)
        pts = tau + (T - tau) * np.concatenate([[0.0], np.cumsum(gaps)]) / gaps.sum()
    else:
        raise DomainError(f"unknown partition kind {kind!r}")
    pts[0], pts[-1] = tau, T
    return Partition(pts)


def _check_in(partition, t):
    if t < partition.start - _TOL or t > partition.end + _TOL:
        raise DomainError(f"time {t} outside [{partition.start}, {partition.end}]")


def pi_floor(partition: Partition, t: float) -> float:
    """Left end t_k of the half-open piece [t_k, t_{k+1}) holding t (last piece closed)."""
    _check_in(partition, t)
    pts = partition.points
    k = int(np.searchsorted(pts, t + _TOL, side="right")) - 1
    k = min(max(k, 0), pts.size - 2)
    return float(pts[k])


def pi_ceil(partition: Partition, t: float) -> float:
    """Right end t_{k+1} of the piece (t_k, t_{k+1}] holding t (first piece closed)."""
    _check_in(partition, t)
    pts = partition.points
    k = int(np.searchsorted(pts, t - _TOL, side="left"))
    k = min(max(k, 1), pts.size - 1)
    return float(pts[k])


# ---------------------------------------------------------------------------
# spatial grid and derivatives
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpatialGrid:
    x_lo: float
    x_hi: float
    n_nodes: int
    dim: int = 1

    def __post_init__(self):
        if not self.x_lo < self.x_hi:
            raise DomainError("spatial grid needs x_lo < x_hi")
        if int(self.n_nodes) < 3:
            raise DomainError("spatial grid needs at least 3 nodes")
        if self.dim != 1:
            raise DomainError("only one spatial dimension is implemented")
        object.__setattr__(self, "n_nodes", int(self.n_nodes))

    @property
    def dx(self):
        return (self.x_hi - self.x_lo) / (self.n_nodes - 1)

    @property
    def nodes(self):
        return self.x_lo + self.dx * np.arange(self.n_nodes)

    def same_as(self, other):
        return (self.x_lo == other.x_lo and self.x_hi == other.x_hi
                and self.n_nodes == other.n_nodes)

    def nearest_index(self, x):
        k = np.rint((np.asarray(x, dtype=float) - self.x_lo) / self.dx).astype(int)
        return np.clip(k, 0, self.n_nodes - 1)

    def interpolate(self, values, x):
        """Piecewise-linear interpolation along the last axis, extrapolating linearly."""
        x = np.asarray(x, dtype=float)
        pos = (x - self.x_lo) / self.dx
        k = np.clip(np.floor(pos).astype(int), 0, self.n_nodes - 2)
        w = pos - k
        values = np.asarray(values)
        return (1.0 - w) * values[..., k] + w * values[..., k + 1]


def spatial_derivatives(values, k: int, dx: float):
    """First and second difference of a 1-D slice at node k.

    Central in the interior, first-order one-sided at the ends where the second
    difference is set to zero (linear-extrapolation closure).
    """
    v = np.asarray(values, dtype=float)
    if v.shape[-1] < 3:
        raise DomainError("differences need at least 3 nodes")
    n = v.shape[-1]
    if k < 0 or k >= n:
        raise DomainError(f"node index {k} out of range")
    if k == 0:
        return (v[1] - v[0]) / dx, 0.0
    if k == n - 1:
        return (v[-1] - v[-2]) / dx, 0.0
    return (v[k + 1] - v[k - 1]) / (2 * dx), (v[k + 1] - 2 * v[k] + v[k - 1]) / (dx * dx)


def derivatives(values, dx: float):
    """Vectorized :func:`spatial_derivatives` over the last axis."""
    v = np.asarray(values, dtype=float)
    if v.shape[-1] < 3:
        raise DomainError("differences need at least 3 nodes")
    d1 = np.empty_like(v)
    d2 = np.zeros_like(v)
    d1[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2 * dx)
    d1[..., 0] = (v[..., 1] - v[..., 0]) / dx
    d1[..., -1] = (v[..., -1] - v[..., -2]) / dx
    d2[..., 1:-1] = (v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]) / (dx * dx)
    return d1, d2


def uniform_times(start: float, end: float, n_steps: int) -> np.ndarray:
    if int(n_steps) < 1 or not end > start:
        raise DomainError("time grid needs end > start and at least one step")
    n_steps = int(n_steps)
    times = start + (end - start) * np.arange(n_steps + 1) / n_steps
    times[-1] = end
    return times


def time_index(times, t, what="time"):
    """Index of a grid time, raising when t is not (numerically) a grid point."""
    times = np.asarray(times)
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(1.0, abs(t)):
        raise DomainError(f"{what} {t} is not on the time grid")
    return k


def loglog_slope(h, gaps):
    """Least-squares slope of log(gap) against log(h), skipping non-positive gaps."""
    h = np.asarray(h, dtype=float)
    g = np.asarray(gaps, dtype=float)
    ok = (g > 0) & np.isfinite(g) & (h > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(h[ok]), np.log(g[ok]), 1)[0])


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

class ScalarField:
    """Values on a time grid x spatial grid (one row per time)."""

    def __init__(self, times, space: SpatialGrid, values):
        self.times = np.asarray(times, dtype=float)
        self.space = space
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (self.times.size, space.n_nodes):
            raise DomainError("field shape does not match its grids")

    def at(self, j):
        return self.values[j]

    def __len__(self):
        return self.times.size


class ThetaField:
    """Two-time field Theta(t_i, s_j, x_k) stored on the triangle i <= j.

    Entries below the diagonal are held as NaN and every accessor refuses
    i > j.
    """

    def __init__(self, times, space: SpatialGrid, data=None):
        self.times = np.asarray(times, dtype=float)
        self.space = space
        n = self.times.size
        if data is None:
            data = np.full((n, n, space.n_nodes), np.nan)
        self.data = np.asarray(data, dtype=float)
        if self.data.shape != (n, n, space.n_nodes):
            raise DomainError("field shape does not match its grids")

    @property
    def n_times(self):
        return self.times.size

    def _check(self, i, j):
        n = self.n_times
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"index ({i}, {j}) outside the time grid")
        if i > j:
            raise IndexError(f"index ({i}, {j}) below the diagonal: outer time after inner time")

    def __getitem__(self, ij):
        i, j = ij
        self._check(i, j)
        return self.data[i, j]

    def __setitem__(self, ij, value):
        i, j = ij
        self._check(i, j)
        self.data[i, j] = value

    def rows_at_layer(self, j, lo=0, hi=None):
        """Rows i in [lo, hi) (hi <= j + 1) at inner index j, shape (rows, K)."""
        hi = j + 1 if hi is None else hi
        if hi > j + 1:
            raise IndexError("rows below the diagonal requested")
        return self.data[lo:hi, j]

    def set_rows_at_layer(self, j, values, lo=0, hi=None):
        hi = j + 1 if hi is None else hi
        if hi > j + 1:
            raise IndexError("rows below the diagonal requested")
        self.data[lo:hi, j] = values

    def diagonal(self, j):
        return self.data[j, j]

    def triangle_mask(self):
        i, j = np.indices((self.n_times, self.n_times))
        return i <= j

    def copy(self):
        return ThetaField(self.times, self.space, self.data.copy())

    def max_abs_diff(self, other):
        m = self.triangle_mask()
        return float(np.max(np.abs(self.data[m] - other.data[m])))


def diagonal_trace(theta: ThetaField) -> ScalarField:
    n = theta.n_times
    idx = np.arange(n)
    return ScalarField(theta.times, theta.space, theta.data[idx, idx].copy())


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def fmt(value) -> str:
    """Shortest round-trip decimal form of a float (ints pass through)."""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def theta_to_csv(theta: ThetaField, path):
    t = theta.times
    x = theta.space.nodes
    K = x.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_index", "s_index", "x_index", "t", "s", "x", "theta"])
        xs = [repr(float(v)) for v in x]
        for i in range(theta.n_times):
            ti = repr(float(t[i]))
            for j in range(i, theta.n_times):
                sj = repr(float(t[j]))
                vals = theta.data[i, j]
                w.writerows([i, j, k, ti, sj, xs[k], repr(float(vals[k]))] for k in range(K))


def field_to_csv(field: ScalarField, path, name="value", index_name="s"):
    t = field.times
    x = field.space.nodes
    rows = ((j, k, t[j], x[k], field.values[j, k])
            for j in range(t.size) for k in range(x.size))
    write_rows(path, [f"{index_name}_index", "x_index", index_name, "x", name], rows)


def write_theta_binary(theta: ThetaField, path):
    """Compact cache: 16-byte header (magic, version, n_times, n_nodes) then data."""
    n, K = theta.n_times, theta.space.n_nodes
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", THETA_MAGIC, THETA_VERSION, n, K))
        fh.write(np.asarray([theta.space.x_lo, theta.space.x_hi], dtype="<f8").tobytes())
        fh.write(theta.times.astype("<f8").tobytes())
        iu = np.triu_indices(n)
        fh.write(theta.data[iu].astype("<f8").tobytes())


def read_theta_binary(path) -> ThetaField:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16:
            raise DomainError("truncated theta cache header")
        magic, version, n, K = struct.unpack("<4sIII", head)
        if magic != THETA_MAGIC:
            raise DomainError("not a theta cache (bad magic)")
        if version != THETA_VERSION:
            raise DomainError(f"unsupported theta cache version {version}")
        lo, hi = np.frombuffer(fh.read(16), dtype="<f8")
        times = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(float)
        iu = np.triu_indices(n)
        flat = np.frombuffer(fh.read(8 * K * iu[0].size), dtype="<f8")
    space = SpatialGrid(float(lo), float(hi), K)
    theta = ThetaField(times, space)
    theta.data[iu] = flat.reshape(iu[0].size, K)
    return theta
