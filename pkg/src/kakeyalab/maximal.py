"""Kakeya maximal function, the weighted auxiliary maximal function and sector geometry.

Evaluation strategy
-------------------
For a direction ``xi`` with orthonormal complement ``(e1, e2)`` the candidate
tube centers are ``a = k s xi + i s e1 + j s e2`` with ``s = delta / 2`` and
``|a| <= 2``.  Each support point ``p`` is projected to ``t = p . xi`` and
``q = (p . e1, p . e2)``; it lies in the tube at ``a`` exactly when ``q`` is
within ``delta`` of the column ``(i s, j s)`` and ``|t - k s| <= 1/2``.  Points
are scattered into per-column histograms of ``t`` and each axial window is a
difference of prefix sums.  When ``1 / delta`` is an integer the window ends
fall on bin edges and the bins have width ``s``; otherwise the per-column
``t`` values are sorted and windows are found by binary search.

Averages are normalized by the analytic tube volume and capped at the sup of
``|f|``: center sampling can place slightly more than ``|T| / h^d`` voxel
centers inside a tube, and the cap keeps the contraction
``sup f* <= sup |f|`` exact.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numba import njit

from .errors import ParameterError, PreconditionError, UnsupportedError
from .geometry import (DirectionNet, Line, Tube, canonical_sign, line_angle, make_direction_net,
                       orthonormal_frame, tube_volume, unit, wedge_point)
from .grid import GridFunction, SetMask, VoxelGrid, rasterize_tube

CANDIDATE_RADIUS = 2.0


def default_threads() -> int:
    env = os.environ.get("KKY_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


# ----------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def _project(pts, xi, frame, nperp):
    n, d = pts.shape
    t = np.empty(n)
    q = np.zeros((n, 2))
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += pts[i, k] * xi[k]
        t[i] = s
        for m in range(nperp):
            s = 0.0
            for k in range(d):
                s += pts[i, k] * frame[m, k]
            q[i, m] = s
    return t, q


@njit(cache=True, nogil=True)
def _column_ranges(q, nperp, delta, sp):
    n = q.shape[0]
    u0 = 1 << 30
    u1 = -(1 << 30)
    v0 = 0
    v1 = 0
    if nperp == 2:
        v0 = 1 << 30
        v1 = -(1 << 30)
    for i in range(n):
        a = int(np.ceil((q[i, 0] - delta) / sp))
        b = int(np.floor((q[i, 0] + delta) / sp))
        u0 = min(u0, a)
        u1 = max(u1, b)
        if nperp == 2:
            a = int(np.ceil((q[i, 1] - delta) / sp))
            b = int(np.floor((q[i, 1] + delta) / sp))
            v0 = min(v0, a)
            v1 = max(v1, b)
    return u0, u1, v0, v1


@njit(cache=True, nogil=True)
def _columns_of(qa, qb, nperp, delta, sp, u0, v0, nv, out):
    # writes column ids whose disk of radius delta contains (qa, qb); returns count
    r2 = delta * delta
    n = 0
    ia = int(np.ceil((qa - delta) / sp))
    ib = int(np.floor((qa + delta) / sp))
    for iu in range(ia, ib + 1):
        du = qa - iu * sp
        du2 = du * du
        if du2 > r2:
            continue
        if nperp == 1:
            out[n] = iu - u0
            n += 1
        else:
            ja = int(np.ceil((qb - delta) / sp))
            jb = int(np.floor((qb + delta) / sp))
            for iv in range(ja, jb + 1):
                dv = qb - iv * sp
                if du2 + dv * dv <= r2:
                    out[n] = (iu - u0) * nv + (iv - v0)
                    n += 1
    return n


@njit(cache=True, nogil=True)
def _column_geometry(xi, frame, nperp, sp, u0, v0, nu, nv, ref_p, ref_d, use_wedge):
    # per-column wedge point of the column axis with the reference axis
    d = xi.shape[0]
    ncol = nu * nv
    wq = np.zeros((ncol, d))
    if not use_wedge:
        return wq
    b = 0.0
    for k in range(d):
        b += xi[k] * ref_d[k]
    den = 1.0 - b * b
    for c in range(ncol):
        iu = c // nv + u0
        iv = c % nv + v0
        p = np.empty(d)
        for k in range(d):
            p[k] = iu * sp * frame[0, k]
            if nperp == 2:
                p[k] += iv * sp * frame[1, k]
        dd = 0.0
        e = 0.0
        for k in range(d):
            w0 = p[k] - ref_p[k]
            dd += xi[k] * w0
            e += ref_d[k] * w0
        s = (b * e - dd) / den
        t = (e - b * dd) / den
        for k in range(d):
            wq[c, k] = 0.5 * ((p[k] + s * xi[k]) + (ref_p[k] + t * ref_d[k]))
    return wq


@njit(cache=True, nogil=True)
def _seg_dist(p1, q1, p2, q2):
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


@njit(cache=True, nogil=True)
def _best_tube(pts, w, xi, frame, nperp, delta, K, rmax, binned,
               use_wedge, admissible_only, ref_p, ref_d, ref_reach):
    """Best axial window over all candidate columns for one direction.

    Returns ``(best_sum, iu, iv, k)``; the candidate center is
    ``k s xi + iu s e1 + iv s e2`` with ``s = delta / 2``.  With ``use_wedge``
    each point's contribution is multiplied by the square root of its distance
    to the column's wedge point.  With ``admissible_only`` only candidates whose
    axis segment comes within ``ref_reach`` of the reference segment count.
    """
    n = pts.shape[0]
    d = pts.shape[1]
    sp = 0.5 * delta
    if n == 0:
        return 0.0, 0, 0, 0
    t, q = _project(pts, xi, frame, nperp)
    u0, u1, v0, v1 = _column_ranges(q, nperp, delta, sp)
    nu = u1 - u0 + 1
    nv = v1 - v0 + 1
    ncol = nu * nv
    wq = _column_geometry(xi, frame, nperp, sp, u0, v0, nu, nv, ref_p, ref_d, use_wedge)
    cols = np.empty(64, dtype=np.int64)
    rmax2 = rmax * rmax
    best = -1.0
    bu = 0
    bv = 0
    bk = 0
    refa = ref_p - 0.5 * ref_d
    refb = ref_p + 0.5 * ref_d
    a0 = np.empty(d)
    a1 = np.empty(d)

    tmin = t.min()
    tmax = t.max()
    b0 = int(np.floor(tmin / sp))
    b1 = int(np.floor(tmax / sp))
    if binned:
        nb = b1 - b0 + 1
        hist = np.zeros((ncol, nb))
        for i in range(n):
            m = _columns_of(q[i, 0], q[i, 1], nperp, delta, sp, u0, v0, nv, cols)
            bi = int(np.floor(t[i] / sp)) - b0
            for r in range(m):
                c = cols[r]
                if use_wedge:
                    dist2 = 0.0
                    for k in range(d):
                        z = pts[i, k] - wq[c, k]
                        dist2 += z * z
                    hist[c, bi] += w[i] * np.sqrt(np.sqrt(dist2))
                else:
                    hist[c, bi] += w[i]
        pref = np.zeros(nb + 1)
        for c in range(ncol):
            iu = c // nv + u0
            iv = c % nv + v0
            acc = 0.0
            nz = False
            for b in range(nb):
                acc += hist[c, b]
                pref[b + 1] = acc
                if hist[c, b] != 0.0:
                    nz = True
            if not nz:
                continue
            for kk in range(b0 - K + 1, b1 + K + 1):
                if (iu * iu + iv * iv + kk * kk) * sp * sp > rmax2:
                    continue
                lo = max(kk - K - b0, 0)
                hi = min(kk + K - b0, nb)
                if hi <= lo:
                    continue
                val = pref[hi] - pref[lo]
                if val > best:
                    if admissible_only:
                        for k in range(d):
                            ctr = kk * sp * xi[k] + iu * sp * frame[0, k]
                            if nperp == 2:
                                ctr += iv * sp * frame[1, k]
                            a0[k] = ctr - 0.5 * xi[k]
                            a1[k] = ctr + 0.5 * xi[k]
                        if _seg_dist(a0, a1, refa, refb) > ref_reach:
                            continue
                    best = val
                    bu = iu
                    bv = iv
                    bk = kk
    else:
        # sorted path: exact windows for any delta
        cnt = np.zeros(ncol + 1, dtype=np.int64)
        for i in range(n):
            m = _columns_of(q[i, 0], q[i, 1], nperp, delta, sp, u0, v0, nv, cols)
            for r in range(m):
                cnt[cols[r] + 1] += 1
        for c in range(ncol):
            cnt[c + 1] += cnt[c]
        tot = cnt[ncol]
        tv = np.empty(tot)
        wv = np.empty(tot)
        fill = cnt[:ncol].copy()
        for i in range(n):
            m = _columns_of(q[i, 0], q[i, 1], nperp, delta, sp, u0, v0, nv, cols)
            for r in range(m):
                c = cols[r]
                tv[fill[c]] = t[i]
                ww = w[i]
                if use_wedge:
                    dist2 = 0.0
                    for k in range(d):
                        z = pts[i, k] - wq[c, k]
                        dist2 += z * z
                    ww *= np.sqrt(np.sqrt(dist2))
                wv[fill[c]] = ww
                fill[c] += 1
        for c in range(ncol):
            s0 = cnt[c]
            s1 = cnt[c + 1]
            if s1 == s0:
                continue
            iu = c // nv + u0
            iv = c % nv + v0
            order = np.argsort(tv[s0:s1], kind="mergesort")
            ts = tv[s0:s1][order]
            pw = np.zeros(s1 - s0 + 1)
            acc = 0.0
            for r in range(s1 - s0):
                acc += wv[s0 + order[r]]
                pw[r + 1] = acc
            k_lo = int(np.ceil((ts[0] - 0.5) / sp)) - 1
            k_hi = int(np.floor((ts[-1] + 0.5) / sp)) + 1
            for kk in range(k_lo, k_hi + 1):
                if (iu * iu + iv * iv + kk * kk) * sp * sp > rmax2:
                    continue
                sc = kk * sp
                lo = np.searchsorted(ts, sc - 0.5, side="left")
                hi = np.searchsorted(ts, sc + 0.5, side="right")
                if hi <= lo:
                    continue
                val = pw[hi] - pw[lo]
                if val > best:
                    if admissible_only:
                        for k in range(d):
                            ctr = kk * sp * xi[k] + iu * sp * frame[0, k]
                            if nperp == 2:
                                ctr += iv * sp * frame[1, k]
                            a0[k] = ctr - 0.5 * xi[k]
                            a1[k] = ctr + 0.5 * xi[k]
                        if _seg_dist(a0, a1, refa, refb) > ref_reach:
                            continue
                    best = val
                    bu = iu
                    bv = iv
                    bk = kk
    if best < 0.0:
        best = 0.0
    return best, bu, bv, bk


# ----------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class MaximalField:
    """Values of a maximal function on a direction net with witness tube centers.

    Attributes
    ----------
    net : DirectionNet
    values : ndarray, shape (M,)
    witness : ndarray, shape (M, d)
        Center of a best candidate tube per direction.
    delta : float
    cap : float
        Sup of ``|f|`` used to cap the averages (``inf`` for weighted averages).
    """

    net: DirectionNet
    values: np.ndarray
    witness: np.ndarray
    delta: float
    cap: float = math.inf
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("values", "witness"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def witness_tube(self, nu: int) -> Tube:
        return Tube(self.net.dirs[nu], self.witness[nu], self.delta)

    def to_csv(self, path, header_lines: list[str] | None = None) -> None:
        d = self.net.d
        with open(path, "w", newline="") as fh:
            for line in header_lines or []:
                fh.write(f"# {line}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["nu"] + [f"xi_{k + 1}" for k in range(d)] + ["value"]
                        + [f"witness_a_{k + 1}" for k in range(d)])
            for nu in range(len(self.net)):
                wr.writerow([nu] + [repr(float(x)) for x in self.net.dirs[nu]]
                            + [repr(float(self.values[nu]))]
                            + [repr(float(x)) for x in self.witness[nu]])


def _support(f) -> tuple[VoxelGrid, np.ndarray, np.ndarray, float]:
    if isinstance(f, SetMask):
        pts = f.points()
        return f.grid, pts, np.ones(len(pts)), (1.0 if len(pts) else 0.0)
    if isinstance(f, GridFunction):
        pts, w = f.support_points()
        return f.grid, pts, w, f.sup()
    raise ParameterError("expected a SetMask or GridFunction")


def _binned(delta: float) -> tuple[bool, int]:
    inv = 1.0 / delta
    k = int(round(inv))
    return abs(inv - k) < 1e-9 * inv, k


def _check_support(pts: np.ndarray, delta: float, rmax: float) -> None:
    if len(pts) == 0:
        return
    r = float(np.sqrt((pts * pts).sum(axis=1).max()))
    limit = rmax - math.sqrt(0.25 + delta * delta)
    if r > limit + 1e-12:
        raise PreconditionError(
            f"support reaches radius {r:.4f}; candidates with |a| <= {rmax} only see radius {limit:.4f}")


def _run_directions(job, dirs: np.ndarray, threads: int | None):
    # evaluate each canonical direction once; antipodes share the result
    keys = {}
    reps = []
    owner = np.empty(len(dirs), dtype=np.int64)
    for i, v in enumerate(dirs):
        c = canonical_sign(np.asarray(v))
        key = tuple(np.round(c, 12))
        if key not in keys:
            keys[key] = len(reps)
            reps.append(c)
        owner[i] = keys[key]
    threads = threads or default_threads()
    if threads > 1 and len(reps) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            res = list(ex.map(job, reps))
    else:
        res = [job(r) for r in reps]
    return [res[o] for o in owner], [reps[o] for o in owner]


def _flat_values(f) -> np.ndarray:
    if isinstance(f, SetMask):
        return f.bits.ravel()
    return np.abs(f.values.ravel())


_PROBE_OFFSETS = sorted(
    ((i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)),
    key=lambda o: (o[0] ** 2 + o[1] ** 2 + o[2] ** 2, o))


def _probe_candidates(c, xi, frame, sp, rmax):
    # lattice candidates around the support centroid, nearest first
    base = [round(float(c @ xi) / sp)] + [round(float(c @ e) / sp) for e in frame]
    for off in _PROBE_OFFSETS:
        if len(frame) == 1 and off[2] != 0:
            continue
        coords = [base[0] + off[0]] + [b + o for b, o in zip(base[1:], off[1:])]
        if sum(x * x for x in coords) * sp * sp > rmax * rmax:
            continue
        a = coords[0] * sp * xi
        for x, e in zip(coords[1:], frame):
            a = a + x * sp * e
        yield a


def _center(xi, frame, iu, iv, k, sp):
    a = k * sp * xi + iu * sp * frame[0]
    if frame.shape[0] > 1:
        a = a + iv * sp * frame[1]
    return a


def kakeya_maximal_at(f, delta: float, dirs, *, rmax: float = CANDIDATE_RADIUS,
                      threads: int | None = None, check_resolution: bool = True):
    """Maximal averages of ``|f|`` over candidate tubes for each row of ``dirs``.

    Returns ``(values, witnesses, cap)``.
    """
    grid, pts, w, cap = _support(f)
    if check_resolution:
        grid.check_resolution(delta)
    _check_support(pts, delta, rmax)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if dirs.shape[1] != grid.d:
        raise ParameterError("direction dimension differs from grid")
    binned, K = _binned(delta)
    vol = tube_volume(d=grid.d, delta=delta)
    cell = grid.cell_volume
    sp = 0.5 * delta
    dummy = np.zeros(grid.d)
    pts_c = np.ascontiguousarray(pts)

    centroid = pts_c.mean(axis=0) if len(pts_c) else np.zeros(grid.d)
    flat_vals = _flat_values(f)

    def job(xi):
        frame = orthonormal_frame(xi)
        if len(pts_c):
            # the value is capped at sup|f|, so a candidate reaching the cap is exact
            for a in _probe_candidates(centroid, xi, frame, sp, rmax):
                s = float(flat_vals[rasterize_tube(grid, Tube(xi, a, delta))].sum())
                if s * cell / vol >= cap:
                    return cap, a
        fr = np.zeros((2, grid.d))
        fr[: frame.shape[0]] = frame
        best, iu, iv, k = _best_tube(pts_c, w, xi, fr, grid.d - 1, delta, K, rmax, binned,
                                     False, False, dummy, dummy, 0.0)
        return min(cap, best * cell / vol), _center(xi, frame, iu, iv, k, sp)

    res, _ = _run_directions(job, dirs, threads)
    values = np.array([r[0] for r in res])
    wit = np.array([r[1] for r in res]).reshape(len(dirs), grid.d)
    return values, wit, cap


def kakeya_maximal(f, delta: float, net: DirectionNet | None = None, *,
                   rmax: float = CANDIDATE_RADIUS, threads: int | None = None) -> MaximalField:
    """Discretized Kakeya maximal function of a mask or sampled function on a net.

    Parameters
    ----------
    f : SetMask or GridFunction
        Support must lie within ``rmax - sqrt(1/4 + delta^2)`` of the origin.
    delta : float
        Tube radius; the net separation must equal ``delta``.
    net : DirectionNet, optional
        Defaults to ``make_direction_net(d, delta)``.
    rmax : float
        Candidate centers satisfy ``|a| <= rmax``.
    """
    d = f.grid.d
    if net is None:
        net = make_direction_net(d, delta)
    if abs(net.sep - delta) > 1e-12 * delta:
        raise ParameterError(f"net separation {net.sep} differs from delta {delta}")
    vals, wit, cap = kakeya_maximal_at(f, delta, net.dirs, rmax=rmax, threads=threads)
    return MaximalField(net, vals, wit, delta, cap)


def exact_average(v: float, cell: float, vol: float, cap: float = math.inf,
                  quantum: float = 1.0) -> Fraction:
    """Exact rational value of a computed average whose tube sum is a multiple of ``quantum``.

    Averages are ``min(cap, n * quantum * cell / vol)`` with an integer ``n``;
    recovering ``n`` lets invariants such as sublinearity be compared without
    floating point slack.
    """
    if v == cap:
        return Fraction(cap)
    n = round(v * vol / (cell * quantum))
    out = n * Fraction(quantum) * Fraction(cell) / Fraction(vol)
    if abs(float(out) - v) > 1e-12 * max(abs(v), 1e-300):
        raise ParameterError(f"value {v!r} is not a multiple of the voxel quantum")
    return out


def witness_average(f, field_: MaximalField, nu: int) -> float:
    """Capped average of ``|f|`` over the recorded witness tube, by direct rasterization."""
    t = field_.witness_tube(nu)
    grid = f.grid
    idx = rasterize_tube(grid, t)
    if isinstance(f, SetMask):
        s = float(np.count_nonzero(f.bits.ravel()[idx]))
    else:
        s = float(np.abs(f.values.ravel()[idx]).sum())
    return min(field_.cap, s * grid.cell_volume / tube_volume(t))


# ----------------------------------------------------------------------------
# auxiliary maximal function


def auxiliary_maximal_at(f, delta: float, theta: float, ref_tube: Tube, dirs, *,
                         weighted: bool = True, rmax: float = CANDIDATE_RADIUS,
                         threads: int | None = None):
    """Angle- and intersection-constrained maximal averages.

    For each direction whose line angle to ``ref_tube`` lies in
    ``[theta/2, theta]``, the sup over candidate tubes meeting ``ref_tube`` of
    ``(1/|T|) sum_{T} |f| w h^d`` where ``w`` is the square root of the distance
    to the wedge point of the two axes (``w = 1`` when ``weighted`` is false).
    Other directions get 0.  Returns ``(values, witnesses)``.
    """
    grid, pts, w, _ = _support(f)
    grid.check_resolution(delta)
    if abs(ref_tube.radius - delta) > 1e-12:
        raise ParameterError("reference tube radius must equal delta")
    _check_support(pts, delta, rmax)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    binned, K = _binned(delta)
    vol = tube_volume(d=grid.d, delta=delta)
    cell = grid.cell_volume
    sp = 0.5 * delta
    pts_c = np.ascontiguousarray(pts)
    ref_p = np.asarray(ref_tube.center, dtype=np.float64)
    ref_d = np.asarray(ref_tube.dir, dtype=np.float64)
    reach = ref_tube.radius + delta

    def job(xi):
        ang = line_angle(xi, ref_d)
        if not (0.5 * theta <= ang <= theta):
            return 0.0, np.full(grid.d, np.nan)
        assert ang > 1e-9, "angle window excludes parallel axes"
        frame = orthonormal_frame(xi)
        fr = np.zeros((2, grid.d))
        fr[: frame.shape[0]] = frame
        best, iu, iv, k = _best_tube(pts_c, w, xi, fr, grid.d - 1, delta, K, rmax, binned,
                                     weighted, True, ref_p, ref_d, reach)
        if best <= 0.0:
            return 0.0, np.full(grid.d, np.nan)
        return best * cell / vol, _center(xi, frame, iu, iv, k, sp)

    res, _ = _run_directions(job, dirs, threads)
    values = np.array([r[0] for r in res])
    wit = np.array([r[1] for r in res]).reshape(len(dirs), grid.d)
    return values, wit


def auxiliary_maximal(f, delta: float, theta: float, ref_tube: Tube,
                      net: DirectionNet | None = None, *, weighted: bool = True,
                      rmax: float = CANDIDATE_RADIUS, threads: int | None = None) -> MaximalField:
    """Auxiliary maximal function on a net; see :func:`auxiliary_maximal_at`."""
    if net is None:
        net = make_direction_net(f.grid.d, delta)
    vals, wit = auxiliary_maximal_at(f, delta, theta, ref_tube, net.dirs, weighted=weighted,
                                     rmax=rmax, threads=threads)
    return MaximalField(net, vals, wit, delta, math.inf, {"theta": theta, "weighted": weighted})


def weighted_tube_average(f, t: Tube, ref_axis: Line) -> float:
    """``(1/|t|) sum_{voxels in t} |f| sqrt(dist(center, wedge)) h^d`` by direct summation."""
    grid = f.grid
    idx = rasterize_tube(grid, t)
    vals = (f.bits.ravel()[idx].astype(float) if isinstance(f, SetMask)
            else np.abs(f.values.ravel()[idx]))
    q = wedge_point(ref_axis, t.axis)
    c = grid.centers_of(idx)
    wts = np.sqrt(np.linalg.norm(c - q, axis=1))
    return float((vals * wts).sum() * grid.cell_volume / tube_volume(t))


# ----------------------------------------------------------------------------
# angular sectors


@dataclass(frozen=True, eq=False)
class SectorDecomposition:
    """Normals ``v_k`` and the disjointified sectors of the annulus ``C_theta``.

    The annulus is ``{xi : sin(theta/2) <= |xi'| <= sin(theta)}`` with
    ``xi' = (xi_2, ..., xi_d)``.  Sector ``k`` collects the annulus directions
    whose normalized ``xi'`` makes ``|<xi'/|xi'|, v_k>| <= band`` and that were
    not claimed by an earlier sector.  ``cylinder_width`` is the half-width of
    the slabs ``V_k = {|y_1| <= 1, |<y', v_k>| < cylinder_width}``.
    """

    delta: float
    theta: float
    d: int
    normals: np.ndarray
    band: float
    cylinder_width: float

    def __len__(self) -> int:
        return int(self.normals.shape[0])

    def in_annulus(self, xi) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        r = np.linalg.norm(xi[:, 1:], axis=1)
        return (r >= math.sin(0.5 * self.theta) - 1e-15) & (r <= math.sin(self.theta) + 1e-15)

    def assign(self, xi) -> np.ndarray:
        """Sector index per direction (first matching normal), ``-1`` outside the annulus."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        out = np.full(xi.shape[0], -1, dtype=np.int64)
        inside = self.in_annulus(xi)
        if self.d == 2:
            out[inside] = 0
            return out
        xp = xi[:, 1:]
        u = xp / np.maximum(np.linalg.norm(xp, axis=1, keepdims=True), 1e-300)
        hit = np.abs(u @ self.normals.T) <= self.band
        first = np.where(hit.any(axis=1), hit.argmax(axis=1), -1)
        out[inside] = first[inside]
        return out

    def sectors(self, net: DirectionNet) -> list[np.ndarray]:
        """Index sets over ``net`` directions, one per normal."""
        lab = self.assign(net.dirs)
        return [np.nonzero(lab == k)[0] for k in range(len(self))]


def sector_decomposition(delta: float, theta: float, d: int) -> SectorDecomposition:
    """Maximal ``delta/theta``-separated normals (modulo sign) and their sector bands.

    In three dimensions the normals live on the circle of ``xi'`` directions.
    They are taken modulo sign, since a band ``|<u, v>| <= c`` does not see the
    sign of ``v``.  A maximal ``rho``-separated set covers every line within
    angle ``rho``, so a band half-width of ``sin(rho)`` with ``rho = delta/theta``
    makes the sectors cover the annulus.
    """
    if not (delta <= theta <= 1.0):
        raise ParameterError("sector decomposition needs delta <= theta <= 1")
    if d == 2:
        return SectorDecomposition(delta, theta, 2, np.ones((1, 1)), 1.0, 50.0 * delta)
    if d != 3:
        raise UnsupportedError("only d in {2, 3}")
    rho = delta / theta
    # greedy over a uniform candidate order on [0, pi): angles rho apart, plus
    # the wrap-around check against the first normal
    m = int(math.floor(math.pi / rho + 1e-12))
    ang = np.arange(m) * rho
    if m > 1 and math.pi - ang[-1] < rho - 1e-12:
        ang = ang[:-1]
    normals = np.column_stack([np.cos(ang), np.sin(ang)])
    band = math.sin(min(rho, 0.5 * math.pi))
    return SectorDecomposition(delta, theta, 3, normals, band, 50.0 * delta)


def cylinder_overlap_count(y, dec: SectorDecomposition, sigma: float) -> int:
    """Number of slabs ``V_k`` containing ``y``; ``y`` must lie in the hollow cylinder."""
    y = np.asarray(y, dtype=float)
    yp = y[1:]
    r = float(np.linalg.norm(yp))
    if abs(y[0]) > 1.0 or not (0.5 * sigma - 1e-12 <= r <= sigma + 1e-12):
        raise PreconditionError("point outside the hollow cylinder |y1|<=1, sigma/2<=|y'|<=sigma")
    if dec.d == 2:
        return int(abs(yp[0]) < dec.cylinder_width)
    return int(np.count_nonzero(np.abs(dec.normals @ yp) < dec.cylinder_width))


def overlap_bound(dec: SectorDecomposition, sigma: float, C: float = 400.0) -> float:
    """``C theta^(d-2) / (delta^(d-3) sigma)``."""
    return C * dec.theta ** (dec.d - 2) / (dec.delta ** (dec.d - 3) * sigma)


# ----------------------------------------------------------------------------
# slice domination


def slice_domination_check(m: SetMask, delta: float, theta: float, ref_tube: Tube, xi,
                           *, sigma: float | None = None, slab: float = 50.0) -> tuple[float, float]:
    """Unweighted auxiliary average versus integrated planar maximal functions.

    ``lhs`` is the unweighted auxiliary maximal value at ``xi``.  ``rhs`` is
    ``delta^-1`` times the Riemann sum over grid planes ``|y_3| <= slab*delta``
    of the planar Kakeya maximal function of the slice, evaluated at the
    normalized projection ``(xi_1, xi_2)``.
    """
    grid = m.grid
    if grid.d != 3:
        raise UnsupportedError("slice domination is defined for d = 3")
    if sigma is not None and m.count():
        pts = m.points()
        r = np.linalg.norm(pts[:, 1:], axis=1)
        if np.any(np.abs(pts[:, 0]) > 1.0) or np.any(r < 0.5 * sigma - grid.h) or np.any(r > sigma + grid.h):
            raise PreconditionError("mask is not supported in the hollow cylinder")
    xi = unit(xi)
    if m.count() == 0:
        return 0.0, 0.0
    lhs_v, _ = auxiliary_maximal_at(m, delta, theta, ref_tube, xi[None, :], weighted=False)
    lhs = float(lhs_v[0])
    proj = np.array([xi[0], xi[1]])
    if np.linalg.norm(proj) < 1e-12:
        return lhs, math.inf
    proj = proj / np.linalg.norm(proj)
    g2 = VoxelGrid(2, grid.origin[:2], grid.h, grid.extents[:2])
    zc = grid.axis_centers(2)
    total = 0.0
    for kz in np.nonzero(np.abs(zc) <= slab * delta)[0]:
        sl = m.bits[:, :, kz]
        if not sl.any():
            continue
        v, _, _ = kakeya_maximal_at(SetMask(g2, sl), delta, proj[None, :])
        total += float(v[0]) * grid.h
    return lhs, total / delta
