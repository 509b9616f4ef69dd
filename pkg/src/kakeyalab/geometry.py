"""Grid-free primitives: directions, nets, lines, tubes, angles and the wedge point.

A tube ``T(xi, a, delta)`` is the closed set of points ``x`` with
``|(x - a) . xi| <= 1/2`` and ``|(x - a) - ((x - a) . xi) xi| <= delta``.
Everything here is exact floating-point geometry; measures on voxels live in
:mod:`kakeyalab.grid`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import ConvexHull

from .errors import DegenerateGeometryError, ParameterError

UNIT_TOL = 1e-12
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def unit(v) -> np.ndarray:
    """Normalize ``v`` to a read-only unit vector in dimension 2 or 3."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] not in (2, 3):
        raise ParameterError(f"direction must be a 2- or 3-vector, got shape {v.shape}")
    n = float(np.linalg.norm(v))
    if not np.isfinite(n) or n == 0.0:
        raise ParameterError("direction must be finite and nonzero")
    return _frozen(v / n)


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Representative of ``{v, -v}`` whose first non-negligible coordinate is positive."""
    for c in v:
        if abs(c) > 1e-12:
            return v if c > 0 else -v
    return v


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in R^d."""
    if d == 2:
        return 2.0 * math.pi
    if d == 3:
        return 4.0 * math.pi
    raise ParameterError(f"dimension {d} not supported")


def angle(a, b) -> float:
    """Angle in [0, pi] between two unit vectors."""
    c = float(np.dot(a, b))
    return math.acos(min(1.0, max(-1.0, c)))


def line_angle(a, b) -> float:
    """Angle in [0, pi/2] between the lines spanned by two unit vectors.

    Tubes are unoriented, so this is the angle used between tubes.
    """
    c = abs(float(np.dot(a, b)))
    return math.acos(min(1.0, c))


def orthonormal_frame(xi: np.ndarray) -> np.ndarray:
    """Rows spanning the orthogonal complement of ``xi``, chosen deterministically.

    Returns shape ``(d-1, d)``.  The frame depends on ``xi`` only through its
    canonical sign, so ``xi`` and ``-xi`` share one frame.
    """
    xi = canonical_sign(np.asarray(xi, dtype=np.float64))
    d = xi.shape[0]
    if d == 2:
        return np.array([[-xi[1], xi[0]]])
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(xi)))] = 1.0
    e1 = np.cross(xi, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(xi, e1)
    return np.vstack([e1, e2])


# ----------------------------------------------------------------------------
# direction nets


@njit(cache=True)
def _greedy_select(cands, cos_sep, symmetric):
    n, d = cands.shape
    keep = np.empty((2 * n, d))
    m = 0
    for i in range(n):
        ok = True
        for j in range(m):
            c = 0.0
            for k in range(d):
                c += cands[i, k] * keep[j, k]
            if c > cos_sep or (symmetric and -c > cos_sep):
                ok = False
                break
        if ok:
            for k in range(d):
                keep[m, k] = cands[i, k]
            m += 1
            if symmetric:
                for k in range(d):
                    keep[m, k] = -cands[i, k]
                m += 1
    return keep[:m].copy()


def _candidates(d: int, sep: float) -> np.ndarray:
    if d == 2:
        k = 64 * int(math.ceil(2.0 * math.pi / sep))
        phi = 2.0 * math.pi * np.arange(k) / k
        return np.column_stack([np.cos(phi), np.sin(phi)])
    n = int(math.ceil(400.0 / sep**2))
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * GOLDEN_ANGLE
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


@dataclass(frozen=True, eq=False)
class DirectionNet:
    """Ordered sep-separated directions with equal quadrature weights.

    Attributes
    ----------
    dirs : ndarray, shape (M, d)
        Unit vectors.
    sep : float
        Guaranteed pairwise angular separation.
    weights : ndarray, shape (M,)
        Quadrature weights summing to the sphere area.
    """

    dirs: np.ndarray
    sep: float
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        dirs = _frozen(self.dirs)
        if dirs.ndim != 2 or dirs.shape[1] not in (2, 3):
            raise ParameterError("net directions must have shape (M, 2) or (M, 3)")
        object.__setattr__(self, "dirs", dirs)
        w = self.weights
        if w is None:
            w = np.full(dirs.shape[0], sphere_area(dirs.shape[1]) / max(dirs.shape[0], 1))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def d(self) -> int:
        return int(self.dirs.shape[1])

    def __len__(self) -> int:
        return int(self.dirs.shape[0])


def make_direction_net(d: int, sep: float, symmetric: bool = True) -> DirectionNet:
    """Greedy maximal ``sep``-separated subset of the unit sphere.

    Candidates are visited in a fixed order (uniform angles on the circle, a
    Fibonacci lattice on the 2-sphere).  With ``symmetric`` the net is closed
    under ``xi -> -xi``; a candidate is kept only if it and its antipode are
    both ``sep``-far from everything kept, which preserves maximality.
    """
    if d not in (2, 3):
        raise ParameterError(f"dimension must be 2 or 3, got {d}")
    if not (0.0 < sep < math.pi / 2):
        raise ParameterError(f"sep must lie in (0, pi/2), got {sep}")
    # tiny slack so that exact ties from the candidate lattice are accepted
    cos_sep = math.cos(sep) + 1e-13
    dirs = _greedy_select(_candidates(d, sep), cos_sep, symmetric)
    if d == 3:
        dirs = _fill_holes(dirs, sep, symmetric)
    return DirectionNet(dirs, sep)


def _fill_holes(dirs: np.ndarray, sep: float, symmetric: bool) -> np.ndarray:
    # The covering radius of a point set on S^2 is attained at a Voronoi vertex,
    # i.e. at the spherical circumcenter of a hull facet.  Any vertex farther
    # than sep from its facet is farther than sep from every point, so adding
    # it keeps the separation.  Repeat until no facet is too wide.
    cos_sep = math.cos(sep)
    pts = [row for row in dirs]
    while True:
        hull = ConvexHull(np.asarray(pts))
        normals = hull.equations[:, :3]
        offs = -hull.equations[:, 3]
        wide = np.nonzero(offs < cos_sep - 1e-13)[0]
        if wide.size == 0:
            return np.asarray(pts)
        arr = np.asarray(pts)
        added = False
        for f in wide[np.argsort(offs[wide], kind="stable")]:
            c = normals[f] / np.linalg.norm(normals[f])
            new = [c, -c] if symmetric else [c]
            if arr.size and np.max(np.abs(arr @ c) if symmetric else arr @ c) > cos_sep:
                continue
            pts.extend(new)
            arr = np.asarray(pts)
            added = True
        if not added:
            return np.asarray(pts)


# ----------------------------------------------------------------------------
# lines and tubes


@dataclass(frozen=True, eq=False)
class Line:
    """Infinite line through ``point`` with unit direction ``dir``."""

    point: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", _frozen(self.point))
        object.__setattr__(self, "dir", unit(self.dir))


@dataclass(frozen=True, eq=False)
class Tube:
    """Closed cylinder of unit length and radius ``radius`` centered at ``center``."""

    dir: np.ndarray
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "dir", unit(self.dir))
        c = _frozen(self.center)
        if c.shape != self.dir.shape:
            raise ParameterError("center and direction dimensions differ")
        object.__setattr__(self, "center", c)
        if not self.radius > 0:
            raise ParameterError("tube radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def d(self) -> int:
        return int(self.dir.shape[0])

    @property
    def axis(self) -> Line:
        return Line(self.center, self.dir)

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - 0.5 * self.dir, self.center + 0.5 * self.dir

    def to_dict(self) -> dict:
        return {"dir": self.dir.tolist(), "center": self.center.tolist(), "radius": self.radius}

    @classmethod
    def from_dict(cls, rec: dict) -> "Tube":
        return cls(np.asarray(rec["dir"]), np.asarray(rec["center"]), rec["radius"])


def tube_contains(t: Tube, x) -> bool | np.ndarray:
    """Membership test; ``x`` may be a point or an array of points, shape (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    y = x - t.center
    s = y @ t.dir
    perp = y - np.multiply.outer(s, t.dir)
    r2 = np.sum(perp * perp, axis=-1)
    out = (np.abs(s) <= 0.5) & (r2 <= t.radius * t.radius)
    return bool(out) if out.ndim == 0 else out


def tube_volume(t: Tube | None = None, *, d: int | None = None, delta: float | None = None) -> float:
    """Lebesgue measure: ``2 delta`` in the plane, ``pi delta^2`` in space."""
    if t is not None:
        d, delta = t.d, t.radius
    if d == 2:
        return 2.0 * delta
    if d == 3:
        return math.pi * delta * delta
    raise ParameterError(f"dimension {d} not supported")


def dist_point_line(y, g: Line):
    """Distance from ``y`` (point or array of points) to the infinite line ``g``."""
    y = np.asarray(y, dtype=np.float64) - g.point
    s = y @ g.dir
    perp = y - np.multiply.outer(s, g.dir)
    out = np.sqrt(np.sum(perp * perp, axis=-1))
    return float(out) if out.ndim == 0 else out


def closest_points(g1: Line, g2: Line) -> tuple[np.ndarray, np.ndarray]:
    """Closest pair of points on two non-parallel lines."""
    u, v = g1.dir, g2.dir
    w0 = g1.point - g2.point
    b = float(u @ v)
    denom = 1.0 - b * b
    if denom <= 1e-18:
        raise DegenerateGeometryError("lines are parallel")
    dd, e = float(u @ w0), float(v @ w0)
    s = (b * e - dd) / denom
    t = (e - b * dd) / denom
    return g1.point + s * u, g2.point + t * v


def wedge_point(g1: Line, g2: Line) -> np.ndarray:
    """Point minimizing ``dist(x, g1) + dist(x, g2)``.

    For intersecting lines this is the intersection.  For skew lines every
    point of the common perpendicular is a minimizer; the midpoint is returned.
    """
    if line_angle(g1.dir, g2.dir) <= 1e-9:
        raise DegenerateGeometryError("wedge point undefined for parallel axes")
    p, q = closest_points(g1, g2)
    return 0.5 * (p + q)


def weight(y, gj: Line, gxi: Line):
    """Square root of the distance from ``y`` to the wedge point of the two axes."""
    q = wedge_point(gj, gxi)
    y = np.asarray(y, dtype=np.float64)
    return np.sqrt(np.linalg.norm(y - q, axis=-1))


@njit(cache=True)
def _segment_distance(p1, q1, p2, q2):
    # closest points of segments [p1,q1] and [p2,q2]; clamped parametric solve
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.dot(d1, d1)
    e = np.dot(d2, d2)
    f = np.dot(d2, r)
    c = np.dot(d1, r)
    b = np.dot(d1, d2)
    denom = a * e - b * b
    if denom > 1e-15 * a * e:
        s = min(1.0, max(0.0, (b * f - c * e) / denom))
    else:
        s = 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = min(1.0, max(0.0, -c / a))
    elif t > 1.0:
        t = 1.0
        s = min(1.0, max(0.0, (b - c) / a))
    diff = (p1 + s * d1) - (p2 + t * d2)
    return np.sqrt(np.dot(diff, diff))


def segment_distance(p1, q1, p2, q2) -> float:
    """Euclidean distance between the closed segments ``[p1, q1]`` and ``[p2, q2]``."""
    f = lambda z: np.asarray(z, dtype=np.float64)
    return float(_segment_distance(f(p1), f(q1), f(p2), f(q2)))


def tubes_intersect(t1: Tube, t2: Tube) -> bool:
    """True when the axis segments come within the sum of the radii."""
    a1, b1 = t1.endpoints()
    a2, b2 = t2.endpoints()
    return segment_distance(a1, b1, a2, b2) <= t1.radius + t2.radius
