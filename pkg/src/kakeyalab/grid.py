"""Voxel grids, immutable set masks and measures at grid resolution.

Membership is decided by voxel centers: voxel ``i`` has center
``origin + (i + 1/2) h`` and belongs to a set when its center does.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .errors import ConfigurationError, ParameterError
from .geometry import Line, Tube

MAGIC = b"KKYM"
DEFAULT_FACTOR = 8
MIN_FACTOR = 4
HALF_WIDTH = 1.5


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned grid of ``extents`` voxels of side ``h`` starting at ``origin``."""

    d: int
    origin: tuple
    h: float
    extents: tuple

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ParameterError(f"dimension must be 2 or 3, got {self.d}")
        if not self.h > 0:
            raise ParameterError("spacing must be positive")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        if len(self.origin) != self.d or len(self.extents) != self.d:
            raise ParameterError("origin/extents length must equal d")
        if any(e <= 0 or e >= 2**31 for e in self.extents):
            raise ParameterError("extents must lie in [1, 2^31)")

    @classmethod
    def for_delta(cls, d: int, delta: float, factor: float = DEFAULT_FACTOR,
                  half_width: float = HALF_WIDTH) -> "VoxelGrid":
        """Centered grid covering ``[-half_width, half_width]^d`` with ``h = delta / factor``."""
        if factor < MIN_FACTOR:
            raise ConfigurationError(f"h = delta/{factor} is coarser than delta/{MIN_FACTOR}")
        h = delta / factor
        n = int(math.ceil(2.0 * half_width / h - 1e-9))
        return cls(d, (-0.5 * n * h,) * d, h, (n,) * d)

    @property
    def shape(self) -> tuple:
        return self.extents

    @property
    def size(self) -> int:
        return int(np.prod(self.extents))

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    def axis_centers(self, k: int) -> np.ndarray:
        return self.origin[k] + (np.arange(self.extents[k]) + 0.5) * self.h

    def centers_of(self, flat: np.ndarray) -> np.ndarray:
        """Voxel centers for flat (row-major) indices, shape (n, d)."""
        idx = np.unravel_index(np.asarray(flat, dtype=np.int64), self.extents)
        return np.column_stack([self.origin[k] + (idx[k] + 0.5) * self.h for k in range(self.d)])

    def check_resolution(self, delta: float) -> None:
        if self.h > delta / MIN_FACTOR * (1 + 1e-12):
            raise ConfigurationError(
                f"grid spacing {self.h:g} exceeds delta/{MIN_FACTOR} = {delta / MIN_FACTOR:g}")


class SetMask:
    """Immutable voxel set on a :class:`VoxelGrid`.

    Parameters
    ----------
    grid : VoxelGrid
    bits : array_like of bool, shape ``grid.extents``
    """

    __slots__ = ("grid", "bits", "_points")

    def __init__(self, grid: VoxelGrid, bits):
        bits = np.array(bits, dtype=bool, copy=True)
        if bits.shape != grid.extents:
            raise ParameterError(f"bits shape {bits.shape} does not match grid {grid.extents}")
        bits.setflags(write=False)
        self.grid = grid
        self.bits = bits
        self._points = None

    # construction helpers
    @classmethod
    def empty(cls, grid: VoxelGrid) -> "SetMask":
        return cls(grid, np.zeros(grid.extents, dtype=bool))

    @classmethod
    def from_flat(cls, grid: VoxelGrid, flat) -> "SetMask":
        bits = np.zeros(grid.size, dtype=bool)
        bits[np.asarray(flat, dtype=np.int64)] = True
        return cls(grid, bits.reshape(grid.extents))

    @classmethod
    def from_predicate(cls, grid: VoxelGrid, pred) -> "SetMask":
        """Evaluate ``pred(points) -> bool array`` on all voxel centers, one slab at a time."""
        bits = np.zeros(grid.extents, dtype=bool)
        axes = [grid.axis_centers(k) for k in range(grid.d)]
        for i, x0 in enumerate(axes[0]):
            rest = np.meshgrid(*axes[1:], indexing="ij")
            pts = np.column_stack([np.full(rest[0].size, x0)] + [r.ravel() for r in rest])
            bits[i] = np.asarray(pred(pts), dtype=bool).reshape(bits.shape[1:])
        return cls(grid, bits)

    # queries
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def measure(self) -> float:
        return self.count() * self.grid.cell_volume

    def flat_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def points(self) -> np.ndarray:
        """Centers of set voxels in row-major order, shape (n, d); cached."""
        if self._points is None:
            pts = self.grid.centers_of(self.flat_indices())
            pts.setflags(write=False)
            self._points = pts
        return self._points

    def max_radius(self) -> float:
        pts = self.points()
        return float(np.sqrt((pts * pts).sum(axis=1).max())) if len(pts) else 0.0

    def _same_grid(self, other: "SetMask") -> None:
        if other.grid != self.grid:
            raise ParameterError("masks live on different grids")

    def union(self, other: "SetMask") -> "SetMask":
        self._same_grid(other)
        return SetMask(self.grid, self.bits | other.bits)

    def intersection(self, other: "SetMask") -> "SetMask":
        self._same_grid(other)
        return SetMask(self.grid, self.bits & other.bits)

    def difference(self, other: "SetMask") -> "SetMask":
        self._same_grid(other)
        return SetMask(self.grid, self.bits & ~other.bits)

    def issubset(self, other: "SetMask") -> bool:
        self._same_grid(other)
        return not np.any(self.bits & ~other.bits)

    def __eq__(self, other) -> bool:
        return (isinstance(other, SetMask) and other.grid == self.grid
                and np.array_equal(self.bits, other.bits))

    def __hash__(self):
        return hash((self.grid, self.count()))

    def __repr__(self) -> str:
        return f"SetMask(d={self.grid.d}, h={self.grid.h:g}, count={self.count()})"


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Real-valued function sampled at voxel centers; the nonzero part is its support."""

    grid: VoxelGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != self.grid.extents:
            raise ParameterError("values shape does not match grid")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_mask(cls, m: SetMask, scale: float = 1.0) -> "GridFunction":
        return cls(m.grid, scale * m.bits.astype(np.float64))

    def support_points(self) -> tuple[np.ndarray, np.ndarray]:
        flat = np.flatnonzero(self.values)
        return self.grid.centers_of(flat), np.abs(self.values.ravel()[flat])

    def sup(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0


# ----------------------------------------------------------------------------
# tube rasterization


@njit(cache=True)
def _inside(x, a, xi, r2):
    s = 0.0
    for k in range(x.shape[0]):
        s += (x[k] - a[k]) * xi[k]
    q = 0.0
    for k in range(x.shape[0]):
        p = (x[k] - a[k]) - s * xi[k]
        q += p * p
    return abs(s) <= 0.5 and q <= r2


@njit(cache=True)
def _raster_kernel(origin, h, ext, a, xi, rad, lo, hi):
    # lo/hi: inclusive index box.  Columns run along the last (contiguous) axis,
    # so the output is in row-major order without sorting.
    d = origin.shape[0]
    r2 = rad * rad
    last = d - 1
    strides = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        strides[k] = strides[k + 1] * ext[k + 1]
    cap = 1024
    out = np.empty(cap, dtype=np.int64)
    n = 0
    x = np.empty(d)
    aa = 1.0 - xi[last] * xi[last]
    ncol = 1
    for k in range(last):
        ncol *= hi[k] - lo[k] + 1
    idx = np.empty(d, dtype=np.int64)
    for c in range(ncol):
        rem = c
        for k in range(last - 1, -1, -1):
            span = hi[k] - lo[k] + 1
            idx[k] = lo[k] + rem % span
            rem //= span
        # w = P - a with the last coordinate at 0
        wx = 0.0
        ww = 0.0
        for k in range(last):
            x[k] = origin[k] + (idx[k] + 0.5) * h
            wk = x[k] - a[k]
            wx += wk * xi[k]
            ww += wk * wk
        wl = -a[last]
        wx += wl * xi[last]
        ww += wl * wl
        # axial: |wx + s xi_last| <= 1/2 ; radial: aa s^2 + bb s + cc <= r2
        smin = -1e300
        smax = 1e300
        if abs(xi[last]) > 1e-15:
            s1 = (-0.5 - wx) / xi[last]
            s2 = (0.5 - wx) / xi[last]
            smin = min(s1, s2)
            smax = max(s1, s2)
        elif abs(wx) > 0.5 + 1e-12:
            continue
        bb = 2.0 * (wl - wx * xi[last])
        cc = ww - wx * wx - r2
        if aa > 1e-15:
            disc = bb * bb - 4.0 * aa * cc
            if disc < 0.0:
                if disc < -1e-12 * (bb * bb + abs(aa * cc) + 1e-300):
                    continue
                disc = 0.0
            sq = np.sqrt(disc)
            smin = max(smin, (-bb - sq) / (2.0 * aa))
            smax = min(smax, (-bb + sq) / (2.0 * aa))
        elif cc > 1e-12:
            continue
        if smin > smax + 2 * h:
            continue
        k0 = int(np.floor((smin - origin[last]) / h - 0.5)) - 1
        k1 = int(np.ceil((smax - origin[last]) / h - 0.5)) + 1
        k0 = max(k0, lo[last])
        k1 = min(k1, hi[last])
        base = 0
        for k in range(last):
            base += idx[k] * strides[k]
        for kk in range(k0, k1 + 1):
            x[last] = origin[last] + (kk + 0.5) * h
            if _inside(x, a, xi, r2):
                if n == cap:
                    cap *= 2
                    tmp = np.empty(cap, dtype=np.int64)
                    tmp[:n] = out[:n]
                    out = tmp
                out[n] = base + kk
                n += 1
    return out[:n].copy()


def _tube_index_box(grid: VoxelGrid, t: Tube):
    p, q = t.endpoints()
    lo_pt = np.minimum(p, q) - t.radius
    hi_pt = np.maximum(p, q) + t.radius
    org = np.asarray(grid.origin)
    ext = np.asarray(grid.extents)
    lo = np.floor((lo_pt - org) / grid.h - 0.5).astype(np.int64) - 1
    hi = np.ceil((hi_pt - org) / grid.h - 0.5).astype(np.int64) + 1
    return np.maximum(lo, 0), np.minimum(hi, ext - 1)


def rasterize_tube(grid: VoxelGrid, t: Tube) -> np.ndarray:
    """Flat row-major indices of voxels whose centers lie in ``t`` (sorted ascending)."""
    if t.d != grid.d:
        raise ParameterError("tube and grid dimensions differ")
    lo, hi = _tube_index_box(grid, t)
    if np.any(lo > hi):
        return np.empty(0, dtype=np.int64)
    return _raster_kernel(np.asarray(grid.origin), grid.h, np.asarray(grid.extents, dtype=np.int64),
                          np.asarray(t.center), np.asarray(t.dir), t.radius, lo, hi)


def tube_mask(grid: VoxelGrid, t: Tube) -> SetMask:
    return SetMask.from_flat(grid, rasterize_tube(grid, t))


def union_of_tubes(grid: VoxelGrid, tubes) -> SetMask:
    bits = np.zeros(grid.size, dtype=bool)
    for t in tubes:
        bits[rasterize_tube(grid, t)] = True
    return SetMask(grid, bits.reshape(grid.extents))


# ----------------------------------------------------------------------------
# measures and restrictions


def measure(m: SetMask) -> float:
    """Voxel count times ``h^d``."""
    return m.measure()


def intersection_measure(m: SetMask, t: Tube) -> float:
    idx = rasterize_tube(m.grid, t)
    return int(np.count_nonzero(m.bits.ravel()[idx])) * m.grid.cell_volume


def _restrict(m: SetMask, keep_fn) -> SetMask:
    flat = m.flat_indices()
    if flat.size == 0:
        return m
    keep = keep_fn(m.points())
    return SetMask.from_flat(m.grid, flat[keep])


def annulus_restrict(m: SetMask, g: Line, lo: float, hi: float) -> SetMask:
    """Voxels of ``m`` whose centers satisfy ``lo <= dist(center, g) < hi``."""
    if not (0 <= lo < hi):
        raise ParameterError("annulus requires 0 <= lo < hi")
    from .geometry import dist_point_line

    def keep(pts):
        r = dist_point_line(pts, g)
        return (r >= lo) & (r < hi)

    return _restrict(m, keep)


def ball_complement_restrict(m: SetMask, a, r: float) -> SetMask:
    """Voxels of ``m`` whose centers satisfy ``|center - a| >= r``."""
    if r < 0:
        raise ParameterError("radius must be nonnegative")
    a = np.asarray(a, dtype=np.float64)
    return _restrict(m, lambda pts: np.linalg.norm(pts - a, axis=1) >= r)


def ball_restrict(m: SetMask, a, r: float) -> SetMask:
    """Voxels of ``m`` whose centers satisfy ``|center - a| < r``."""
    a = np.asarray(a, dtype=np.float64)
    return _restrict(m, lambda pts: np.linalg.norm(pts - a, axis=1) < r)


# ----------------------------------------------------------------------------
# mask file format


def save_mask(m: SetMask, path) -> None:
    """Write ``m`` in the KKYM format (little-endian header, MSB-first packed bits)."""
    g = m.grid
    head = MAGIC + struct.pack(f"<I{g.d}I{g.d}dd", g.d, *g.extents, *g.origin, g.h)
    Path(path).write_bytes(head + np.packbits(m.bits.ravel()).tobytes())


def load_mask(path) -> SetMask:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ParameterError("not a KKYM mask file")
    (d,) = struct.unpack_from("<I", raw, 4)
    off = 8
    ext = struct.unpack_from(f"<{d}I", raw, off)
    off += 4 * d
    origin = struct.unpack_from(f"<{d}d", raw, off)
    off += 8 * d
    (h,) = struct.unpack_from("<d", raw, off)
    off += 8
    grid = VoxelGrid(d, origin, h, ext)
    n = grid.size
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=off), count=n)
    return SetMask(grid, bits.astype(bool).reshape(ext))
