"""Seeded generators for test sets: balls, slabs, hollow cylinders, tube families and a 2D Perron tree.

Tube families use ``E = union of the central lam-portions of the tubes``: each
tube ``T_j`` contributes the sub-tube ``|s| <= lam/2`` along its axis, so
``|E cap T_j| >= lam |T_j|`` up to rasterization.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from numba import njit
from shapely import affinity

from .errors import ParameterError, UnsupportedError
from .geometry import Tube, _segment_distance, make_direction_net
from .grid import SetMask, VoxelGrid, rasterize_tube
from .multiplicity import TubeFamily

NAMES = ("ball", "slab", "hollow_cylinder", "disjoint_tubes", "bush", "brush", "random_family",
         "perron_tree")
# tube centers stay within this radius so that tubes end inside |x| <= 1.45
PLACE_RADIUS = 0.9


def rng(seed: int) -> np.random.Generator:
    """Counter-based generator; identical streams across platforms."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


@dataclass(frozen=True)
class ConstructionSpec:
    """Named construction with its parameters and a 64-bit seed."""

    name: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.name not in NAMES:
            raise ParameterError(f"unknown construction {self.name!r}; expected one of {NAMES}")
        if not (0 <= int(self.seed) < 2**64):
            raise ParameterError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "params", dict(self.params))

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "params": self.params, "seed": int(self.seed)},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConstructionSpec":
        rec = json.loads(text)
        return cls(rec["name"], rec.get("params", {}), int(rec.get("seed", 0)))


def build(spec: ConstructionSpec, grid: VoxelGrid, delta: float):
    """Realize ``spec`` on ``grid``; returns ``(mask, family)`` with ``family`` None for plain sets."""
    p = spec.params
    d = grid.d
    if spec.name == "ball":
        return ball(grid, p.get("r", 1.0)), None
    if spec.name == "slab":
        return slab(grid, p.get("width", 2 * delta), p.get("r", 1.2)), None
    if spec.name == "hollow_cylinder":
        return hollow_cylinder(grid, p.get("sigma", 0.2)), None
    if spec.name == "perron_tree":
        if d != 2:
            raise UnsupportedError("the Perron tree is a planar construction")
        return perron_tree_2d(grid, delta, p.get("levels")), None
    lam = float(p.get("lambda", 1.0))
    M = int(p.get("M", 10))
    if spec.name == "disjoint_tubes":
        tubes = disjoint_tubes(d, delta, M)
    elif spec.name == "bush":
        tubes = bush(d, delta, M, p.get("cap", 0.5))
    elif spec.name == "brush":
        tubes = brush(d, delta, M, p.get("cap", 0.5))
    else:
        tubes = random_family(d, delta, M, spec.seed, p.get("radius", 0.4))
    return family_from_tubes(grid, tubes, lam)


def family_from_tubes(grid: VoxelGrid, tubes, lam: float):
    """``E`` = union of central ``lam``-portions; validates the density condition."""
    if not (0.0 < lam <= 1.0):
        raise ParameterError("lambda must lie in (0, 1]")
    delta = tubes[0].radius
    if lam < delta:
        raise ParameterError("lambda must be at least delta")
    flat = np.concatenate([_core_voxels(grid, t, lam) for t in tubes])
    mask = SetMask.from_flat(grid, flat)
    return mask, TubeFamily(tubes, lam, mask, validate=True)


def _core_voxels(grid: VoxelGrid, t: Tube, lam: float) -> np.ndarray:
    """Voxels of ``t`` with axial coordinate ``|s| <= lam/2``."""
    flat = rasterize_tube(grid, t)
    s = (grid.centers_of(flat) - t.center) @ t.dir
    return flat[np.abs(s) <= 0.5 * lam]


def ball(grid: VoxelGrid, r: float = 1.0) -> SetMask:
    return SetMask.from_predicate(grid, lambda x: np.einsum("ij,ij->i", x, x) <= r * r)


def slab(grid: VoxelGrid, width: float, r: float = 1.2) -> SetMask:
    """``{|x_d| <= width/2, |x| <= r}``."""
    return SetMask.from_predicate(
        grid, lambda x: (np.abs(x[:, -1]) <= 0.5 * width) & (np.einsum("ij,ij->i", x, x) <= r * r))


def hollow_cylinder(grid: VoxelGrid, sigma: float) -> SetMask:
    """``{|y_1| <= 1, sigma/2 <= |y'| <= sigma}``."""
    def pred(x):
        rp = np.sqrt(np.einsum("ij,ij->i", x[:, 1:], x[:, 1:]))
        return (np.abs(x[:, 0]) <= 1.0) & (rp >= 0.5 * sigma) & (rp <= sigma)
    return SetMask.from_predicate(grid, pred)


def _canonical_net(d: int, delta: float) -> np.ndarray:
    dirs = make_direction_net(d, delta).dirs
    # one representative per line: last coordinate positive (ties broken on the others)
    keep = []
    for v in dirs:
        nz = np.nonzero(np.abs(v[::-1]) > 1e-12)[0][0]
        if v[::-1][nz] > 0:
            keep.append(v)
    return np.array(keep)


def _nearest_pole(d: int, delta: float, M: int, cap: float) -> np.ndarray:
    dirs = _canonical_net(d, delta)
    pole = np.zeros(d)
    pole[-1] = 1.0
    ang = np.arccos(np.clip(np.abs(dirs @ pole), 0.0, 1.0))
    order = np.argsort(ang, kind="stable")
    chosen = order[:M]
    if len(chosen) < M or ang[chosen[-1]] > cap:
        avail = int(np.count_nonzero(ang <= cap))
        raise ParameterError(f"only {avail} net directions within angle {cap} of the pole; asked for {M}")
    return dirs[chosen]


def bush(d: int, delta: float, M: int, cap: float = 0.5) -> list[Tube]:
    """``M`` tubes centered at the origin along the net directions nearest the last axis."""
    return [Tube(v, np.zeros(d), delta) for v in _nearest_pole(d, delta, M, cap)]


def brush(d: int, delta: float, M: int, cap: float = 0.5) -> list[Tube]:
    """Tubes through evenly spaced points of the first coordinate axis (the stem)."""
    dirs = _nearest_pole(d, delta, M, cap)
    xs = np.linspace(-0.4, 0.4, M) if M > 1 else np.zeros(1)
    return [Tube(v, np.eye(d)[0] * x, delta) for v, x in zip(dirs, xs)]


def disjoint_tubes(d: int, delta: float, M: int) -> list[Tube]:
    """``M`` pairwise disjoint tubes with separated directions, placed greedily on a lattice."""
    dirs = _nearest_pole(d, delta, M, math.pi / 2)
    step = delta
    n = int(2 * PLACE_RADIUS / step) + 1
    axis = (np.arange(n) - (n - 1) / 2) * step
    # lattice centers in the ball of PLACE_RADIUS
    cands = np.array(np.meshgrid(*([axis] * d), indexing="ij")).reshape(d, -1).T
    cands = cands[np.einsum("ij,ij->i", cands, cands) <= PLACE_RADIUS ** 2]
    # rows orthogonal to the pole, those at height +-0.55 first (two stacked rows of
    # unit tubes fit there), each scanned in lexicographic order
    row = np.round(np.abs(np.abs(cands[:, -1]) - 0.55) / step)
    keys = [cands[:, k] for k in range(d - 2, -1, -1)] + [row]
    cands = cands[np.lexsort(keys)]
    # signed angle order keeps neighbours nearly parallel, which packs far better
    dirs = dirs[np.argsort(np.arctan2(dirs[:, 0], dirs[:, -1]), kind="stable")]
    ends = np.zeros((M, 2, d))
    used = np.zeros(len(cands), dtype=np.bool_)
    tubes: list[Tube] = []
    for k, v in enumerate(dirs):
        ci = _first_free(cands, used, np.asarray(v, dtype=float), ends, k, 2 * delta * (1 + 1e-9))
        if ci < 0:
            raise ParameterError(f"could not place {M} disjoint tubes at delta={delta}")
        used[ci] = True
        t = Tube(v, cands[ci], delta)
        ends[k] = t.endpoints()
        tubes.append(t)
    return tubes


@njit(cache=True)
def _first_free(cands, used, v, ends, k, thr):
    for ci in range(cands.shape[0]):
        if used[ci]:
            continue
        a = cands[ci] - 0.5 * v
        b = cands[ci] + 0.5 * v
        ok = True
        for q in range(k):
            if _segment_distance(a, b, ends[q, 0], ends[q, 1]) <= thr:
                ok = False
                break
        if ok:
            return ci
    return -1


def random_family(d: int, delta: float, M: int, seed: int, radius: float = 0.4) -> list[Tube]:
    """Random sub-net of directions with random centers in the ball of ``radius``."""
    dirs = _canonical_net(d, delta)
    if M > len(dirs):
        raise ParameterError(f"net has only {len(dirs)} lines; asked for {M}")
    g = rng(seed)
    idx = np.sort(g.choice(len(dirs), size=M, replace=False))
    c = g.normal(size=(M, d))
    c *= (radius * g.random(M) ** (1.0 / d) / np.linalg.norm(c, axis=1))[:, None]
    return [Tube(dirs[i], c[k], delta) for k, i in enumerate(idx)]


# ----------------------------------------------------------------------------
# Perron tree


def perron_levels(delta: float) -> int:
    return int(math.ceil(math.log2(1.0 / delta) - 1e-12))


def perron_polygon(levels: int, alpha: float | None = None):
    """Classical Perron tree over the triangle ``(-1, 0), (1, 0), (0, 1)``.

    The base is cut into ``2^levels`` elementary triangles sharing the apex.  At
    stage ``j`` each block of ``2^j`` consecutive triangles is closed up by
    sliding its right half so that the block's two outer edges meet at height
    ``alpha^j``.  Each elementary triangle keeps its full apex-to-base segments.
    """
    if levels < 1:
        raise ParameterError("levels must be at least 1")
    if alpha is None:
        alpha = 1.0 - 1.0 / (levels + 1)
    n = 2 ** levels
    xs = np.linspace(-1.0, 1.0, n + 1)
    shift = np.zeros(n)
    for j in range(1, levels + 1):
        size = 2 ** j
        for start in range(0, n, size):
            a, c = start, start + size
            mid = start + size // 2
            # outer edges of the block: left edge of piece a, right edge of piece c-1
            want = shift[a] - (1.0 - alpha ** j) * (xs[c] - xs[a])
            shift[mid:c] += want - shift[c - 1]
    pieces = [shapely.Polygon([(xs[i] + shift[i], 0.0), (xs[i + 1] + shift[i], 0.0),
                               (shift[i], 1.0)]) for i in range(n)]
    return shapely.union_all(pieces)


def perron_tree_2d(grid: VoxelGrid, delta: float, levels: int | None = None,
                   max_radius: float = 1.45) -> SetMask:
    """Perron tree plus its quarter-turn rotation, centered and rasterized.

    Each copy carries unit segments in a 90 degree fan of directions, so the
    union has one in every direction.
    """
    if grid.d != 2:
        raise UnsupportedError("the Perron tree is a planar construction")
    if levels is None:
        levels = perron_levels(delta)
    tree = perron_polygon(int(levels))
    cx, cy = tree.centroid.x, tree.centroid.y
    both = shapely.union_all([tree, affinity.rotate(tree, 90.0, origin=(cx, cy))])
    both = affinity.translate(both, -cx, -cy)
    x0, y0, x1, y1 = both.bounds
    both = affinity.translate(both, -0.5 * (x0 + x1), -0.5 * (y0 + y1))
    r = max(math.hypot(x, y) for poly in getattr(both, "geoms", [both]) for x, y in poly.exterior.coords)
    if r > max_radius:
        raise ParameterError(f"Perron tree extends to radius {r:.3f} > {max_radius}")
    shapely.prepare(both)
    return SetMask.from_predicate(grid, lambda p: shapely.contains_xy(both, p[:, 0], p[:, 1]))
