"""Sphere norms, distribution functions, Lorentz norms and instance checks of the tube inequalities.

Every check returns both sides of its inequality together with the ratio
``measured / bound`` computed with all unspecified constants set to 1.  Such a
ratio is a *fitted constant*: the inequalities only assert that some positive
constant exists, so positivity and stability of these ratios are what can be
tested on finite instances.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .constructions import ConstructionSpec, build, rng
from .errors import ParameterError, PreconditionError, UnsupportedError
from .geometry import Tube, line_angle, make_direction_net, tube_contains, tube_volume, tubes_intersect
from .grid import GridFunction, SetMask, VoxelGrid, rasterize_tube
from .maximal import (MaximalField, auxiliary_maximal_at, kakeya_maximal, kakeya_maximal_at,
                      weighted_tube_average)
from .multiplicity import TubeFamily, find_high_pair, log2_inv, minimal_low_N, scenario_low

# ----------------------------------------------------------------------------
# exponents, distribution profiles and norms


@dataclass(frozen=True)
class ExponentPair:
    """Lebesgue exponents ``p`` (space side) and ``q`` (sphere side)."""

    p: float
    q: float

    @classmethod
    def for_dimension(cls, d: int) -> "ExponentPair":
        p = (d + 2) / 2
        return cls(p, (d - 1) * p / (p - 1))


@dataclass(frozen=True)
class DistributionProfile:
    """Step distribution function: ``nu_i = sigma{g >= lam_i}`` at ascending levels ``lam_i > 0``."""

    levels: np.ndarray
    measures: np.ndarray
    total: float

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=float)
        ms = np.asarray(self.measures, dtype=float)
        if lv.shape != ms.shape or lv.ndim != 1:
            raise ParameterError("levels and measures must be 1-d arrays of equal length")
        if np.any(np.diff(lv) <= 0) or (lv.size and lv[0] <= 0):
            raise ParameterError("levels must be positive and strictly increasing")
        if np.any(np.diff(ms) > 0):
            raise ParameterError("measures must be non-increasing")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "measures", ms)

    @classmethod
    def from_values(cls, values, weights) -> "DistributionProfile":
        """Exact profile of the step function taking ``|values[i]|`` on a cell of mass ``weights[i]``."""
        v = np.abs(np.asarray(values, dtype=float))
        w = np.asarray(weights, dtype=float)
        lv = np.unique(v[v > 0])
        # nu(lam_i) = mass of {v >= lam_i}: suffix sums over the sorted values
        order = np.argsort(v)
        vs, ws = v[order], w[order]
        suffix = np.concatenate([np.cumsum(ws[::-1])[::-1], [0.0]])
        ms = suffix[np.searchsorted(vs, lv, side="left")]
        return cls(lv, ms, float(w.sum()))

    @classmethod
    def from_field(cls, f: MaximalField) -> "DistributionProfile":
        return cls.from_values(f.values, f.net.weights)

    def measure_at(self, lam: float) -> float:
        """``nu(lam)``; ``nu(0)`` is the total mass."""
        if lam <= 0:
            return self.total
        i = np.searchsorted(self.levels, lam, side="left")
        return float(self.measures[i]) if i < len(self.levels) else 0.0

    def to_dict(self) -> dict:
        return {"levels": self.levels.tolist(), "measures": self.measures.tolist(), "total": self.total}


def superlevel_measure(f: MaximalField, lam: float) -> float:
    """Quadrature measure of ``{xi : f(xi) >= lam}``."""
    if lam < 0:
        raise ParameterError("level must be nonnegative")
    return float(f.net.weights[f.values >= lam].sum())


def lp_norm_sphere(f: MaximalField, p: float) -> float:
    if p < 1:
        raise ParameterError("p must be at least 1")
    return float(np.sum(f.net.weights * np.abs(f.values) ** p) ** (1.0 / p))


def layer_cake_lp(profile: DistributionProfile, p: float) -> float:
    """``(p int lam^(p-1) nu(lam) dlam)^(1/p)``, integrated exactly over the steps."""
    if p < 1:
        raise ParameterError("p must be at least 1")
    lv = profile.levels
    prev = np.concatenate([[0.0], lv[:-1]])
    return float(np.sum(profile.measures * (lv ** p - prev ** p)) ** (1.0 / p))


def lorentz_norms(f, p: float, q: float, weights=None) -> tuple[float, float]:
    """``(||f||_{L^{p,inf}}, ||f||_{L^{q,1}})`` with ``sup lam nu^(1/p)`` and ``int nu^(1/q) dlam``.

    ``f`` is a :class:`DistributionProfile`, a :class:`MaximalField`, or sampled
    values with cell masses ``weights``.
    """
    if p <= 1 or q <= 1:
        raise ParameterError("Lorentz exponents must exceed 1")
    if isinstance(f, MaximalField):
        prof = DistributionProfile.from_field(f)
    elif isinstance(f, DistributionProfile):
        prof = f
    else:
        if weights is None:
            raise ParameterError("sampled values need weights")
        prof = DistributionProfile.from_values(f, weights)
    lv, ms = prof.levels, prof.measures
    if lv.size == 0:
        return 0.0, 0.0
    weak = float(np.max(lv * ms ** (1.0 / p)))
    prev = np.concatenate([[0.0], lv[:-1]])
    strong = float(np.sum(ms ** (1.0 / q) * (lv - prev)))
    return weak, strong


def lp_norm_space(m, p: float) -> float:
    """``||f||_{L^p(R^d)}`` of a mask or grid function by voxel quadrature."""
    if isinstance(m, SetMask):
        return m.measure() ** (1.0 / p)
    return float((np.sum(np.abs(m.values) ** p) * m.grid.cell_volume) ** (1.0 / p))


# ----------------------------------------------------------------------------
# discrete distributional inequality


@dataclass
class DiscreteCheck:
    lam: float
    M: int
    lhs: float
    rhs: float
    ratio: float


def check_discrete_inequality(m: SetMask, delta: float, lam: float, eps: float,
                              field_: MaximalField | None = None,
                              exponents: ExponentPair | None = None) -> DiscreteCheck:
    """``M delta^(d-1)`` against ``(delta^-eps |E| lam^-p / delta^(d-p))^(q/p)``.

    ``M`` counts net directions in ``{(chi_E)*_delta >= lam}``; net directions are
    delta-separated, so they form a separated subset of that superlevel set.
    """
    if not (delta - 1e-12 <= lam <= 1.0 + 1e-12):
        raise ParameterError("lam must lie in [delta, 1]")
    d = m.grid.d
    ex = exponents or ExponentPair.for_dimension(d)
    E = m.measure()
    if E == 0:
        return DiscreteCheck(lam, 0, 0.0, 0.0, 0.0)
    if field_ is None:
        field_ = kakeya_maximal(m, delta)
    M = int(np.count_nonzero(field_.values >= lam))
    lhs = M * delta ** (d - 1)
    rhs = (delta ** (-eps) * E * lam ** (-ex.p) / delta ** (d - ex.p)) ** (ex.q / ex.p)
    return DiscreteCheck(lam, M, lhs, rhs, lhs / rhs)


def discrete_sup_ratio(m: SetMask, delta: float, eps: float, field_: MaximalField | None = None):
    """Sup of the discrete ratio over ``lam in {delta, 2 delta, ..., 1}``; returns (sup, checks)."""
    if field_ is None:
        field_ = kakeya_maximal(m, delta)
    n = int(round(1.0 / delta))
    lams = [min(1.0, k * delta) for k in range(1, n + 1)]
    checks = [check_discrete_inequality(m, delta, lam, eps, field_) for lam in lams]
    return max(c.ratio for c in checks), checks


# ----------------------------------------------------------------------------
# low multiplicity bound


@dataclass
class InequalityCheck:
    lhs: float
    rhs: float
    holds: bool
    details: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs > 0 else math.inf

    def __bool__(self) -> bool:
        return self.holds


def check_lemma_4_1(fam: TubeFamily, N: int) -> InequalityCheck:
    """``|E| >= lam M delta^(d-1) / (16 max(N, 1))`` under the low multiplicity scenario."""
    ok, wit = scenario_low(fam, N)
    if not ok:
        raise PreconditionError(f"low multiplicity scenario fails at N = {N}")
    lhs = fam.mask.measure()
    rhs = fam.lam * fam.M * fam.delta ** (fam.d - 1) / (16 * max(N, 1))
    return InequalityCheck(lhs, rhs, lhs >= rhs, {"N": N, "witnesses": len(wit)})


# ----------------------------------------------------------------------------
# large tubes through a common point


@dataclass
class OrthogonalityReport:
    """Extent of pairwise intersections of tubes crossing at a common axis point."""

    sigma: float
    gamma: float
    angles: np.ndarray
    extents: np.ndarray
    radius: float
    failures: int

    @property
    def pass_rate(self) -> float:
        return 1.0 - self.failures / len(self.angles)

    @property
    def max_excess(self) -> float:
        return float(np.max(self.extents / self.radius))


def pair_intersection_extent(t1: Tube, t2: Tube, x0, n_samples: int = 4000, seed: int = 0) -> float:
    """``max |y - x0|`` over ``y`` in both tubes.

    Combines the two bisector points of the axes (where the farthest point of
    two crossing infinite cylinders lies) with uniform samples of the
    intersection; returns 0 for disjoint tubes.
    """
    x0 = np.asarray(x0, dtype=float)
    cands = []
    u, v = t1.dir, t2.dir
    cphi = float(np.clip(u @ v, -1, 1))
    for s in (1.0, -1.0):
        b = u + s * v
        nb = np.linalg.norm(b)
        if nb < 1e-12:
            continue
        b /= nb
        half = 0.5 * math.acos(np.clip(s * cphi, -1, 1))
        if half > 1e-12:
            # the extreme point lies on both boundaries; step inside so rounding keeps it
            r = t1.radius / math.sin(half) * (1 - 1e-9)
            cands += [x0 + r * b, x0 - r * b]
    # bounded samples: points of t1, kept if inside t2
    g = rng(seed)
    d = t1.d
    s = g.uniform(-0.5, 0.5, n_samples)
    perp = g.normal(size=(n_samples, d))
    perp -= np.outer(perp @ u, u)
    perp /= np.linalg.norm(perp, axis=1)[:, None]
    rad = t1.radius * g.random(n_samples) ** (1.0 / (d - 1))
    pts = t1.center + np.outer(s, u) + perp * rad[:, None]
    allp = np.vstack([np.array(cands).reshape(-1, d), pts])
    inside = tube_contains(t1, allp) & tube_contains(t2, allp)
    if not np.any(inside):
        return 0.0
    return float(np.max(np.linalg.norm(allp[inside] - x0, axis=1)))


def orthogonality_check(sigma: float, gamma: float, n_pairs: int = 1000, d: int = 3,
                        seed: int = 0) -> OrthogonalityReport:
    """Sample tube pairs of radius ``sigma`` through ``x0`` at angle in ``[gamma, pi/2)`` and
    test whether their intersection lies in ``B(x0, sigma/gamma)``.

    ``x0`` lies on both axes, at a random position along each unit segment
    within the middle half.
    """
    if not (0 < gamma < math.pi / 2):
        raise ParameterError("gamma must lie in (0, pi/2)")
    g = rng(seed)
    R = sigma / gamma
    angles, ext = np.empty(n_pairs), np.empty(n_pairs)
    for k in range(n_pairs):
        u = g.normal(size=d)
        u /= np.linalg.norm(u)
        w = g.normal(size=d)
        w -= (w @ u) * u
        w /= np.linalg.norm(w)
        phi = g.uniform(gamma, math.pi / 2)
        v = math.cos(phi) * u + math.sin(phi) * w
        x0 = g.uniform(-0.2, 0.2, size=d)
        t1 = Tube(u, x0 - g.uniform(-0.25, 0.25) * u, sigma)
        t2 = Tube(v, x0 - g.uniform(-0.25, 0.25) * v, sigma)
        angles[k] = phi
        ext[k] = pair_intersection_extent(t1, t2, x0, seed=k)
    fails = int(np.count_nonzero(ext > R * (1 + 1e-12)))
    return OrthogonalityReport(sigma, gamma, angles, ext, R, fails)


def _lattice_near(points: np.ndarray, grid: VoxelGrid, spacing: float, reach: float) -> np.ndarray:
    lo = points.min(axis=0) - reach
    hi = points.max(axis=0) + reach
    axes = [np.arange(lo[k], hi[k] + spacing, spacing) for k in range(grid.d)]
    lat = np.array(np.meshgrid(*axes, indexing="ij")).reshape(grid.d, -1).T
    # keep lattice points whose ball can touch the set
    tree = cKDTree(points)
    dist, _ = tree.query(lat, distance_upper_bound=reach)
    return lat[np.isfinite(dist)]


def check_lemma_4_2(tubes, m: SetMask, gamma: float, rho: float, M0: int | None = None,
                    spacing: float | None = None) -> InequalityCheck:
    """``|E| >= rho sigma^(d-1) sqrt(M0) / 2`` for radius-``sigma`` tubes.

    Hypotheses: intersecting tubes make line angle ``>= gamma``; for every
    ``a`` of a lattice of ``spacing`` (default ``2h``) near the set, plus the
    centroid of ``E``, at least ``M0`` tubes satisfy
    ``rho |T| <= |T cap E cap B(a, sigma/gamma)^c|``.  With ``M0`` omitted the
    largest admissible value (the minimum count over the lattice) is used.
    Hypothesis failures raise :class:`PreconditionError` with the failing data.
    """
    tubes = list(tubes)
    sigma = tubes[0].radius
    d = m.grid.d
    R = sigma / gamma
    bad = [(i, j) for i in range(len(tubes)) for j in range(i + 1, len(tubes))
           if tubes_intersect(tubes[i], tubes[j]) and line_angle(tubes[i].dir, tubes[j].dir) < gamma]
    if bad:
        raise PreconditionError(f"intersecting tubes closer than gamma in angle: {bad[:5]}")
    vol = tube_volume(d=d, delta=sigma)
    cell = m.grid.cell_volume
    bits = m.bits.ravel()
    e_pts = [m.grid.centers_of(idx[bits[idx]]) for idx in (rasterize_tube(m.grid, t) for t in tubes)]
    mass = np.array([len(p) for p in e_pts]) * cell
    allp = np.vstack([p for p in e_pts if len(p)]) if any(len(p) for p in e_pts) else np.zeros((0, d))
    if len(allp) == 0:
        raise PreconditionError("E does not meet the tubes")
    h = spacing or 2 * m.grid.h
    lattice = np.vstack([_lattice_near(allp, m.grid, h, R), m.points().mean(axis=0)[None, :]])
    counts = np.zeros(len(lattice), dtype=np.int64)
    for p, ms in zip(e_pts, mass):
        if len(p) == 0:
            continue
        inside = cKDTree(p).query_ball_point(lattice, R, return_length=True) * cell
        counts += (ms - inside >= rho * vol * (1 - 1e-12))
    # points far from every tube leave all masses intact
    far_count = int(np.count_nonzero(mass >= rho * vol * (1 - 1e-12)))
    min_count = min(int(counts.min()), far_count)
    if M0 is None:
        M0 = min_count
    elif min_count < M0:
        worst = int(np.argmin(counts))
        raise PreconditionError(f"only {min_count} tubes satisfy the mass condition at a = "
                                f"{lattice[worst].tolist()}; need {M0}")
    lhs = m.measure()
    rhs = rho * sigma ** (d - 1) * math.sqrt(M0) / 2
    return InequalityCheck(lhs, rhs, lhs >= rhs,
                           {"M0": int(M0), "lattice_points": len(lattice), "lattice_spacing": h,
                            "ball_radius": R})


# ----------------------------------------------------------------------------
# mass of E in the sigma-neighbourhoods of the tubes


def fat_tube(t: Tube, sigma: float) -> Tube:
    return Tube(t.dir, t.center, sigma)


def _fat_mass(m: SetMask, t: Tube, a=None, r: float = 0.0) -> float:
    idx = rasterize_tube(m.grid, t)
    idx = idx[m.bits.ravel()[idx]]
    if a is not None and r > 0:
        c = m.grid.centers_of(idx)
        idx = idx[np.linalg.norm(c - np.asarray(a, dtype=float), axis=1) >= r]
    return len(idx) * m.grid.cell_volume


@dataclass
class Condition47Report:
    measured: dict
    bound: float
    ratios: dict
    radius: float

    @property
    def min_ratio(self) -> float:
        return min(self.ratios.values()) if self.ratios else math.nan


def check_condition_4_7(fam: TubeFamily, sigma: float, a, eps: float, N: int,
                        js=None) -> Condition47Report:
    """``|E cap B(a, delta^eps lam^(d-2))^c cap T^sigma_j|`` against ``lam^3 sigma delta^(d-2+eps) N``."""
    d, delta, lam = fam.d, fam.delta, fam.lam
    r = delta ** eps * lam ** (d - 2)
    bound = lam ** 3 * sigma * delta ** (d - 2 + eps) * max(N, 0)
    js = range(fam.M) if js is None else js
    measured = {int(j): _fat_mass(fam.mask, fat_tube(fam.tubes[j], sigma), a, r) for j in js}
    ratios = {j: (v / bound if bound > 0 else math.inf) for j, v in measured.items()}
    return Condition47Report(measured, bound, ratios, r)


# ----------------------------------------------------------------------------
# sigma-tube mass chain in three dimensions


@dataclass
class Lemma51Report:
    """Four stages of the sigma-tube mass chain for one reference tube ``j``."""

    j: int
    theta: float
    sigma: float
    N: int
    subcollection: list
    M0: int
    M0_bound: float
    weighted_averages: dict
    weighted_bound: float
    l2_sum: float
    l2_lower: float
    l2_rhs: float
    fat_mass: float
    final_bound: float
    pair_volumes: dict
    pair_bound: float

    @property
    def stage_ratios(self) -> dict:
        wmin = min(self.weighted_averages.values()) if self.weighted_averages else 0.0
        return {
            "subcollection": self.M0 / self.M0_bound if self.M0_bound > 0 else math.inf,
            "weighted_average": wmin / self.weighted_bound,
            "l2_chain": self.l2_sum / self.l2_rhs if self.l2_rhs > 0 else 0.0,
            "final": self.fat_mass / self.final_bound if self.final_bound > 0 else math.inf,
        }

    @property
    def all_positive(self) -> bool:
        return all(v > 0 for v in self.stage_ratios.values())

    @property
    def pair_ok(self) -> bool:
        return all(v <= self.pair_bound * (1 + 1e-12) for v in self.pair_volumes.values())

    def to_dict(self) -> dict:
        rec = asdict(self)
        rec["stage_ratios"] = self.stage_ratios
        rec["weighted_averages"] = {str(k): v for k, v in self.weighted_averages.items()}
        rec["pair_volumes"] = {str(k): v for k, v in self.pair_volumes.items()}
        return rec


def subcollection(fam: TubeFamily, j: int, theta: float, sigma: float, N: int) -> list[int]:
    """Union over ``x in S_j`` of the sets ``I_{theta,sigma}(x, j)``, where ``S_j`` is the part of
    ``T_j cap E`` with ``Card I >= card_I N / L^2``."""
    c = fam.constants
    nu = int(round(math.log2(theta / fam.delta)))
    nup = int(round(math.log2(sigma / fam.delta)))
    L = log2_inv(fam.delta)
    thr = c.card_I * N / L ** 2
    members = [i for i in range(fam.M) if i != j and fam.angle_shells[i, j] == nu
               and fam.e_pairs[i, j] and fam.annulus_pass(i, j)[nup]]
    if not members:
        return []
    inc = fam._incidence
    ms = set(members)
    out: set[int] = set()
    for u in fam.e_voxels(j):
        here = [i for i in inc["by_voxel"][inc["offs"][u]:inc["offs"][u + 1]] if i in ms]
        if len(here) >= thr:
            out.update(int(i) for i in here)
    return sorted(out)


def check_lemma_5_1(fam: TubeFamily, theta: float, sigma: float, N: int, eps: float = 0.1,
                    j: int = 0, threads: int | None = None) -> Lemma51Report:
    """Stages of the lower bound ``|E cap T^sigma_j| >= C lam^3 sigma delta^(1+eps) N`` for tube ``j``.

    (i) subcollection size ``M0`` against ``2^-10 theta N lam / (delta L^4)``;
    (ii) weighted averages over ``T_{i_k}`` of ``chi_{E cap T^sigma_j}`` against
    ``(sigma/theta)^(1/2) lam / (2^4 L)``; (iii) ``sum_k A(xi_{i_k})^2 delta^2``
    against its lower bound ``M0 delta^2 lam^2 sigma / (theta (2L)^2)`` and the
    upper bound ``log(1/delta) |E cap T^sigma_j|``; (iv) the final bound.  Also
    records rasterized ``|T_{i_k} cap T_j|`` against ``8 delta^3 / theta``.
    """
    if fam.d != 3:
        raise UnsupportedError("the sigma-tube mass chain is three-dimensional")
    delta, lam = fam.delta, fam.lam
    L = log2_inv(delta)
    sub = subcollection(fam, j, theta, sigma, N)
    M0 = len(sub)
    M0_bound = 2.0 ** -10 * theta / delta * N * lam / L ** 4
    tj = fam.tubes[j]
    fat = fat_tube(tj, sigma)
    idx = rasterize_tube(fam.grid, fat)
    idx = idx[fam.mask.bits.ravel()[idx]]
    g = SetMask.from_flat(fam.grid, idx)
    fat_mass = g.measure()
    wavg = {i: weighted_tube_average(g, fam.tubes[i], tj.axis) for i in sub}
    w_bound = (sigma / theta) ** 0.5 * lam / (2 ** 4 * L)
    if sub:
        A, _ = auxiliary_maximal_at(g, delta, theta, tj, fam.dirs[sub], threads=threads)
        l2 = float(np.sum(A ** 2) * delta ** 2)
    else:
        l2 = 0.0
    l2_lower = M0 * delta ** 2 * lam ** 2 * sigma / (theta * (2 * L) ** 2)
    l2_rhs = math.log(1 / delta) * fat_mass
    final_bound = lam ** 3 * sigma * delta ** (1 + eps) * N
    rj = rasterize_tube(fam.grid, tj)
    pv = {i: len(np.intersect1d(rj, rasterize_tube(fam.grid, fam.tubes[i]), assume_unique=True))
          * fam.grid.cell_volume for i in sub}
    return Lemma51Report(j, theta, sigma, N, sub, M0, M0_bound, wavg, w_bound, l2, l2_lower, l2_rhs,
                         fat_mass, final_bound, pv, 8 * delta ** 3 / theta)


# ----------------------------------------------------------------------------
# layer-cake interpolation


def layer_cake_alpha(q: float, d: int) -> float:
    return 2 * q / (d + 1) - 1


def layer_cake_split(f, lam: float, A: float, q: float, d: int = 3):
    """``f = f1 + f2 + f3`` with ``f1 = f [|f| < lam/3]``, ``f2 = f [|f| > A^alpha lam]``, ``f3`` the rest."""
    if not A > 1:
        raise ParameterError("A must exceed 1")
    if not q > (d + 1) / 2:
        raise ParameterError("q must exceed (d+1)/2")
    f = np.asarray(f, dtype=float)
    a = np.abs(f)
    lo = a < lam / 3
    hi = a > A ** layer_cake_alpha(q, d) * lam
    f1 = np.where(lo, f, 0.0)
    f2 = np.where(hi & ~lo, f, 0.0)
    f3 = np.where(~lo & ~hi, f, 0.0)
    return f1, f2, f3


def interpolation_I1_check(m: SetMask, delta: float, lam: float, scales=(1 / 6, 1 / 4, 1.0),
                           A: float = 2.0, q: float | None = None, net=None,
                           threads: int | None = None) -> bool:
    """For ``f = s lam chi_E`` the low band ``f1`` has ``(f1)*_delta < lam/3`` everywhere."""
    d = m.grid.d
    q = q if q is not None else ExponentPair.for_dimension(d).p
    dirs = (net if net is not None else make_direction_net(d, delta)).dirs
    for s in scales:
        vals = m.bits.astype(float) * s * lam
        f1, _, _ = layer_cake_split(vals, lam, A, q, d)
        if not np.any(f1):
            continue
        v, _, _ = kakeya_maximal_at(GridFunction(m.grid, f1), delta, dirs, threads=threads)
        if not np.all(v < lam / 3):
            return False
    return True


# ----------------------------------------------------------------------------
# delta sweeps


def fit_exponent(deltas, values) -> dict:
    """OLS fit ``log value = exponent log delta + intercept``; ``residual`` is the RMS misfit."""
    x = np.log(np.asarray(deltas, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    if len(x) < 3:
        raise ParameterError("an exponent fit needs at least 3 scales")
    coef = np.polyfit(x, y, 1)
    res = y - np.polyval(coef, x)
    return {"exponent": float(coef[0]), "intercept": float(coef[1]),
            "residual": float(np.sqrt(np.mean(res ** 2)))}


SWEEP_COLUMNS = ("delta", "measure_E", "M_lambda", "lp_norm", "lq_norm", "ratio", "lemma41_ratio",
                 "lemma51_min_ratio", "discrete_ratio")


@dataclass
class SweepResult:
    records: list
    fit: dict
    exponents: ExponentPair
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def to_csv(self, path, header_lines: list[str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(SWEEP_COLUMNS)
            for r in self.records:
                wr.writerow([repr(float(r[c])) if c != "M_lambda" else int(r[c]) for c in SWEEP_COLUMNS])

    def to_dict(self) -> dict:
        return {"records": self.records, "fit": self.fit, "exponents": asdict(self.exponents),
                "meta": self.meta}

    def to_json(self, path=None, extra: dict | None = None) -> str:
        rec = self.to_dict()
        if extra:
            rec = {**extra, **rec}
        text = json.dumps(rec, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def delta_sweep(spec: ConstructionSpec, deltas, d: int, exponents: ExponentPair | None = None,
                factor: float = 8, eps: float = 0.1, lam: float = 0.5,
                threads: int | None = None) -> SweepResult:
    """Build ``spec`` at each scale, evaluate ``(chi_E)*_delta`` and fit ``||f*||_q / ||chi_E||_p``.

    Records per scale: ``|E|``, ``M(lam)`` (net directions with value ``>= lam``),
    both norms and their ratio, the discrete-inequality sup ratio, and for tube
    families the low-multiplicity ratio at the minimal ``N`` and, in three
    dimensions, the smallest stage ratio of the sigma-tube chain.
    """
    deltas = [float(x) for x in deltas]
    if len(deltas) < 3:
        raise ParameterError("a sweep needs at least 3 scales")
    if len(set(deltas)) != len(deltas):
        raise ParameterError("duplicate delta in sweep")
    if any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise ParameterError("deltas must be strictly decreasing")
    ex = exponents or ExponentPair.for_dimension(d)
    records = []
    for delta in deltas:
        grid = VoxelGrid.for_delta(d, delta, factor)
        m, fam = build(spec, grid, delta)
        F = kakeya_maximal(m, delta, threads=threads)
        lp = lp_norm_space(m, ex.p)
        lq = lp_norm_sphere(F, ex.q)
        sup, _ = discrete_sup_ratio(m, delta, eps, F)
        rec = {"delta": delta, "measure_E": m.measure(), "M_lambda": int(np.count_nonzero(F.values >= lam)),
               "lp_norm": lp, "lq_norm": lq, "ratio": lq / lp if lp > 0 else math.nan,
               "lemma41_ratio": math.nan, "lemma51_min_ratio": math.nan, "discrete_ratio": sup}
        if fam is not None:
            N = minimal_low_N(fam)
            rec["lemma41_ratio"] = check_lemma_4_1(fam, N).ratio
            if d == 3:
                rep = find_high_pair(fam)
                if rep.found and rep.scenarioII_witnesses:
                    r51 = check_lemma_5_1(fam, rep.theta, rep.sigma, rep.N_min, eps,
                                          rep.scenarioII_witnesses[0], threads)
                    rec["lemma51_min_ratio"] = min(r51.stage_ratios.values())
        records.append(rec)
    fit = fit_exponent([r["delta"] for r in records], [r["ratio"] for r in records])
    return SweepResult(records, fit, ex, {"construction": json.loads(spec.to_json()), "d": d,
                                          "factor": factor, "eps": eps, "lambda": lam})
