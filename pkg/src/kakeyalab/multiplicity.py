"""Tube multiplicity: low/high multiplicity scenarios and the dyadic pigeonhole search.

Notation: ``L = log2(1/delta)``; angle shells ``[2^(nu-1) delta, 2^nu delta)``;
distance shells ``[2^(nu'-1) delta, 2^nu' delta)`` around a tube axis.  All
tube volumes ``|T|`` are analytic; set measures are voxel counts times ``h^d``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property

import numpy as np
from numba import njit
from scipy import sparse

from .errors import InvariantViolation, ParameterError
from .geometry import dist_point_line, tube_contains, tube_volume
from .grid import SetMask, rasterize_tube


@dataclass(frozen=True)
class ScenarioConstants:
    """Numerical constants of the two scenarios; defaults are the printed values.

    Thresholds, with ``L = log2(1/delta)``:

    * low multiplicity: mass ``>= low_mass * lam * |T_j|`` on at least
      ``low_count * M`` tubes;
    * annulus filter of ``I``: mass ``>= annulus_mass * lam * |T_i| / L``;
    * high multiplicity: ``Card I >= card_I * N / L^2`` on mass
      ``>= high_mass * lam * |T_j| / (2L)^2`` for at least ``high_count * M / L^2`` tubes;
    * family validation: ``|E cap T_j| >= density * lam * |T_j|``.
    """

    low_mass: float = 1 / 4
    low_count: float = 1 / 2
    annulus_mass: float = 2.0 ** -4
    card_I: float = 2.0 ** -3
    high_mass: float = 2.0 ** -3
    high_count: float = 2.0 ** -4
    density: float = 1 / 2
    angle_c: float = 1.0
    name: str = "printed"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, rec: dict) -> "ScenarioConstants":
        unknown = set(rec) - {f.name for f in fields(cls)}
        if unknown:
            raise ParameterError(f"unknown scenario constants: {sorted(unknown)}")
        return cls(**rec)


PRINTED = ScenarioConstants()
# relaxed set for desk-scale delta; tried only when the printed set finds no pair
FALLBACK = ScenarioConstants(annulus_mass=2.0 ** -6, card_I=2.0 ** -5, high_mass=2.0 ** -5,
                             high_count=2.0 ** -6, name="fallback")


def log2_inv(delta: float) -> float:
    return math.log2(1.0 / delta)


def angle_shell_count(delta: float) -> int:
    return int(math.ceil(log2_inv(delta) - 1e-12)) + 1


def distance_shell_count(delta: float) -> int:
    return int(math.ceil(math.log2(2.0 / delta) - 1e-12))


def dyadic_shell(x: float, delta: float) -> int:
    """``nu >= 1`` with ``2^(nu-1) delta <= x < 2^nu delta``; 0 when ``x < delta``."""
    if x < delta:
        return 0
    nu = int(math.floor(math.log2(x / delta))) + 1
    while x < 2.0 ** (nu - 1) * delta:
        nu -= 1
    while x >= 2.0 ** nu * delta:
        nu += 1
    return nu


class TubeFamily:
    """Indexed tubes of a common radius together with the set ``E``.

    Parameters
    ----------
    tubes : sequence of Tube
    lam : float
        Density level in ``[delta, 1]``.
    mask : SetMask
        The set ``E``.
    validate : bool
        Check equal radii, pairwise line angles ``>= delta`` and the density
        ``|E cap T_j| >= (lam/2)|T_j|``.  Disable only to build counterexamples.
    """

    def __init__(self, tubes, lam: float, mask: SetMask, validate: bool = True,
                 constants: ScenarioConstants = PRINTED):
        self.tubes = list(tubes)
        if not self.tubes:
            raise ParameterError("a family needs at least one tube")
        self.lam = float(lam)
        self.mask = mask
        self.constants = constants
        self.delta = self.tubes[0].radius
        if validate:
            self.validate()

    @property
    def M(self) -> int:
        return len(self.tubes)

    @property
    def d(self) -> int:
        return self.mask.grid.d

    @property
    def grid(self):
        return self.mask.grid

    @property
    def tube_volume(self) -> float:
        return tube_volume(d=self.d, delta=self.delta)

    @cached_property
    def dirs(self) -> np.ndarray:
        return np.array([t.dir for t in self.tubes])

    @cached_property
    def centers(self) -> np.ndarray:
        return np.array([t.center for t in self.tubes])

    def validate(self) -> None:
        if any(abs(t.radius - self.delta) > 1e-12 for t in self.tubes):
            raise ParameterError("tube radii differ")
        if not (self.delta - 1e-12 <= self.lam <= 1.0 + 1e-12):
            raise ParameterError(f"lam = {self.lam} outside [delta, 1]")
        G = np.abs(self.dirs @ self.dirs.T)
        np.fill_diagonal(G, 0.0)
        if self.M > 1 and np.arccos(np.clip(G.max(), -1, 1)) < self.delta * (1 - 1e-9):
            raise ParameterError("tube directions are not delta-separated")
        need = self.constants.density * self.lam * self.tube_volume
        bad = np.nonzero(self.e_mass < need * (1 - 1e-12))[0]
        if bad.size:
            raise ParameterError(f"density condition fails for tubes {bad[:10].tolist()}")

    # -- incidence structure ---------------------------------------------------

    @cached_property
    def _raster(self) -> list[np.ndarray]:
        return [rasterize_tube(self.grid, t) for t in self.tubes]

    @cached_property
    def _incidence(self):
        lists = self._raster
        lengths = np.array([len(x) for x in lists], dtype=np.int64)
        allv = np.concatenate(lists) if lengths.sum() else np.empty(0, dtype=np.int64)
        tube_of = np.repeat(np.arange(self.M), lengths)
        uniq, inv, cover = np.unique(allv, return_inverse=True, return_counts=True)
        inE = self.mask.bits.ravel()[uniq]
        order = np.argsort(inv, kind="stable")
        by_voxel = tube_of[order].astype(np.int64)
        offs = np.zeros(len(uniq) + 1, dtype=np.int64)
        np.cumsum(cover, out=offs[1:])
        starts = np.zeros(self.M + 1, dtype=np.int64)
        np.cumsum(lengths, out=starts[1:])
        return dict(uniq=uniq, inv=inv.astype(np.int64), cover=cover.astype(np.int64), inE=inE,
                    by_voxel=by_voxel, offs=offs, starts=starts)

    def _tube_slice(self, j: int) -> np.ndarray:
        inc = self._incidence
        return inc["inv"][inc["starts"][j]:inc["starts"][j + 1]]

    def e_voxels(self, j: int) -> np.ndarray:
        """Unique-voxel ids of ``T_j cap E``."""
        u = self._tube_slice(j)
        return u[self._incidence["inE"][u]]

    @cached_property
    def e_mass(self) -> np.ndarray:
        """``|E cap T_j|`` per tube."""
        cell = self.grid.cell_volume
        return np.array([len(self.e_voxels(j)) * cell for j in range(self.M)])

    @cached_property
    def _e_points(self) -> list[np.ndarray]:
        inc = self._incidence
        return [self.grid.centers_of(inc["uniq"][self.e_voxels(j)]) for j in range(self.M)]

    @cached_property
    def line_angles(self) -> np.ndarray:
        G = np.clip(np.abs(self.dirs @ self.dirs.T), 0.0, 1.0)
        A = np.arccos(G)
        np.fill_diagonal(A, 0.0)
        return A

    @cached_property
    def angle_shells(self) -> np.ndarray:
        A = self.line_angles
        S = np.zeros(A.shape, dtype=np.int64)
        for i in range(self.M):
            for j in range(self.M):
                if i != j:
                    S[i, j] = dyadic_shell(A[i, j], self.delta)
        return S

    @cached_property
    def e_pairs(self) -> np.ndarray:
        """Boolean matrix: tubes ``i, j`` share a voxel of ``E``."""
        inc = self._incidence
        rows, cols = [], []
        for j in range(self.M):
            u = self.e_voxels(j)
            rows.append(np.full(len(u), j))
            cols.append(u)
        A = sparse.csr_matrix((np.ones(sum(len(c) for c in cols)), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(self.M, len(inc["uniq"])))
        P = (A @ A.T).toarray() > 0
        np.fill_diagonal(P, False)
        return P

    def shell_masses(self, i: int, j: int) -> np.ndarray:
        """``|T_i cap E cap {dist(., gamma_j) in shell nu'}|`` for ``nu' = 1..nsigma`` (index 0 = core)."""
        ns = distance_shell_count(self.delta)
        pts = self._e_points[i]
        out = np.zeros(ns + 1)
        if len(pts) == 0:
            return out
        t = self.tubes[j]
        out[:] = _shell_hist(pts, t.center, t.dir, self.delta, ns)
        return out * self.grid.cell_volume

    def annulus_pass(self, i: int, j: int, constants: ScenarioConstants | None = None) -> np.ndarray:
        """Boolean per distance shell (index 0 unused): the annulus filter of ``I``."""
        c = constants or self.constants
        need = c.annulus_mass * self.lam * self.tube_volume / log2_inv(self.delta)
        ok = self.shell_masses(i, j) >= need
        ok[0] = False
        return ok

    def to_dict(self) -> dict:
        return {"lam": self.lam, "delta": self.delta, "tubes": [t.to_dict() for t in self.tubes]}


@njit(cache=True)
def _shell_hist(pts, c, u, delta, ns):
    out = np.zeros(ns + 1)
    d = pts.shape[1]
    for p in range(pts.shape[0]):
        s = 0.0
        for k in range(d):
            s += (pts[p, k] - c[k]) * u[k]
        r2 = 0.0
        for k in range(d):
            y = pts[p, k] - c[k] - s * u[k]
            r2 += y * y
        x = np.sqrt(r2)
        if x < delta:
            out[0] += 1
            continue
        nu = int(np.floor(np.log2(x / delta))) + 1
        while nu > 1 and x < 2.0 ** (nu - 1) * delta:
            nu -= 1
        while x >= 2.0 ** nu * delta:
            nu += 1
        if nu <= ns:
            out[nu] += 1
    return out


# ----------------------------------------------------------------------------
# pointwise multiplicity and the low multiplicity scenario


def pointwise_multiplicity(x, fam: TubeFamily, exclude: int | None = None) -> int:
    """Number of tubes containing ``x``, not counting tube ``exclude``."""
    x = np.asarray(x, dtype=float)
    y = x - fam.centers
    s = np.einsum("ij,ij->i", y, fam.dirs)
    perp = y - s[:, None] * fam.dirs
    inside = (np.abs(s) <= 0.5) & (np.einsum("ij,ij->i", perp, perp) <= fam.delta ** 2)
    if exclude is not None:
        inside[exclude] = False
    return int(np.count_nonzero(inside))


def _low_counts(fam: TubeFamily) -> np.ndarray:
    """``C[j, N]`` = voxels of ``T_j cap E`` where at most ``N`` other tubes meet, N = 0..M."""
    cover = fam._incidence["cover"]
    C = np.zeros((fam.M, fam.M + 1), dtype=np.int64)
    for j in range(fam.M):
        others = cover[fam.e_voxels(j)] - 1
        C[j] = np.cumsum(np.bincount(others, minlength=fam.M + 1)[: fam.M + 1])
    return C


def scenario_low(fam: TubeFamily, N: int) -> tuple[bool, list[int]]:
    """Low multiplicity scenario at threshold ``N``: (holds, witness indices)."""
    if N < 0:
        raise ParameterError("N must be nonnegative")
    c = fam.constants
    C = _low_counts_cached(fam)
    col = C[:, min(int(N), fam.M)]
    need = c.low_mass * fam.lam * fam.tube_volume
    wit = np.nonzero(col * fam.grid.cell_volume >= need * (1 - 1e-12))[0]
    return len(wit) >= c.low_count * fam.M, wit.tolist()


def _low_counts_cached(fam: TubeFamily) -> np.ndarray:
    if not hasattr(fam, "_low_C"):
        fam._low_C = _low_counts(fam)
    return fam._low_C


def minimal_low_N(fam: TubeFamily) -> int:
    """Least ``N`` for which the low multiplicity scenario holds (binary search)."""
    lo, hi = 0, fam.M
    if not scenario_low(fam, hi)[0]:
        raise InvariantViolation("low multiplicity scenario fails at N = M")
    while lo < hi:
        mid = (lo + hi) // 2
        if scenario_low(fam, mid)[0]:
            hi = mid
        else:
            lo = mid + 1
    return lo


# ----------------------------------------------------------------------------
# high multiplicity


def I_set(x, j: int, theta: float, sigma: float, fam: TubeFamily,
          constants: ScenarioConstants | None = None) -> set[int]:
    """Tubes ``i`` with ``x in T_i``, line angle to ``T_j`` in ``[theta/2, theta)`` and
    enough ``E``-mass at distance ``[sigma/2, sigma)`` from the axis of ``T_j``."""
    c = constants or fam.constants
    x = np.asarray(x, dtype=float)
    need = c.annulus_mass * fam.lam * fam.tube_volume / log2_inv(fam.delta)
    out = set()
    lo, hi = 0.5 * sigma, sigma
    gj = fam.tubes[j].axis
    for i, t in enumerate(fam.tubes):
        if not tube_contains(t, x):
            continue
        a = fam.line_angles[i, j] if i != j else 0.0
        if not (0.5 * theta <= a < theta):
            continue
        pts = fam._e_points[i]
        if len(pts) == 0:
            continue
        r = np.atleast_1d(dist_point_line(pts, gj))
        mass = np.count_nonzero((r >= lo) & (r < hi)) * fam.grid.cell_volume
        if mass >= need:
            out.add(i)
    return out


@njit(cache=True)
def _high_kernel(M, ev_starts, ev_ids, offs, by_voxel, shells, passes, n_nu, n_sig, thr):
    meas = np.zeros((M, n_nu + 1, n_sig + 1), dtype=np.int64)
    local = np.zeros((n_nu + 1, n_sig + 1), dtype=np.int64)
    for j in range(M):
        for r in range(ev_starts[j], ev_starts[j + 1]):
            u = ev_ids[r]
            local[:, :] = 0
            for q in range(offs[u], offs[u + 1]):
                i = by_voxel[q]
                if i == j:
                    continue
                nu = shells[i, j]
                if nu <= 0 or nu > n_nu:
                    continue
                for s in range(1, n_sig + 1):
                    if passes[i, j, s]:
                        local[nu, s] += 1
            for nu in range(1, n_nu + 1):
                for s in range(1, n_sig + 1):
                    if local[nu, s] >= thr:
                        meas[j, nu, s] += 1
    return meas


def _pass_tensor(fam: TubeFamily, c: ScenarioConstants) -> np.ndarray:
    ns = distance_shell_count(fam.delta)
    P = np.zeros((fam.M, fam.M, ns + 1), dtype=np.bool_)
    ii, jj = np.nonzero(fam.e_pairs)
    for i, j in zip(ii, jj):
        P[i, j] = fam.annulus_pass(i, j, c)
    return P


def high_measures(fam: TubeFamily, N: float, constants: ScenarioConstants | None = None) -> np.ndarray:
    """Voxel counts ``meas[j, nu, nu']`` of ``T_j cap E cap {Card I >= card_I N / L^2}``."""
    c = constants or fam.constants
    key = ("_pass", c)
    cache = fam.__dict__.setdefault("_pass_cache", {})
    if key not in cache:
        cache[key] = _pass_tensor(fam, c)
    P = cache[key]
    inc = fam._incidence
    ev = [fam.e_voxels(j) for j in range(fam.M)]
    starts = np.zeros(fam.M + 1, dtype=np.int64)
    np.cumsum([len(e) for e in ev], out=starts[1:])
    ids = np.concatenate(ev) if starts[-1] else np.empty(0, dtype=np.int64)
    L = log2_inv(fam.delta)
    thr = c.card_I * N / L ** 2
    # integer counts compared with a real threshold: Card >= thr  <=>  Card >= ceil(thr)
    thr_int = int(math.ceil(thr - 1e-12)) if thr > 0 else 0
    return _high_kernel(fam.M, starts, ids.astype(np.int64), inc["offs"], inc["by_voxel"],
                        fam.angle_shells, P, angle_shell_count(fam.delta),
                        distance_shell_count(fam.delta), thr_int)


def _high_witness_matrix(fam: TubeFamily, meas: np.ndarray, c: ScenarioConstants) -> np.ndarray:
    L = log2_inv(fam.delta)
    need = c.high_mass * fam.lam * fam.tube_volume / (2 * L) ** 2
    return meas * fam.grid.cell_volume >= need * (1 - 1e-12)


def _pair_index(theta: float, sigma: float, delta: float) -> tuple[int, int]:
    nu = int(round(math.log2(theta / delta)))
    nup = int(round(math.log2(sigma / delta)))
    if abs(2.0 ** nu * delta - theta) > 1e-9 * theta or abs(2.0 ** nup * delta - sigma) > 1e-9 * sigma:
        raise ParameterError("theta and sigma must be dyadic multiples of delta")
    return nu, nup


def scenario_high(fam: TubeFamily, theta: float, sigma: float, N: float,
                  constants: ScenarioConstants | None = None) -> tuple[bool, list[int]]:
    """High multiplicity scenario at angle ``theta`` and distance ``sigma``."""
    c = constants or fam.constants
    nu, nup = _pair_index(theta, sigma, fam.delta)
    W = _high_witness_matrix(fam, high_measures(fam, N, c), c)
    if not (1 <= nu < W.shape[1] and 1 <= nup < W.shape[2]):
        return False, []
    wit = np.nonzero(W[:, nu, nup])[0]
    L = log2_inv(fam.delta)
    return len(wit) >= c.high_count * fam.M / L ** 2, wit.tolist()


@dataclass
class MultiplicityReport:
    """Outcome of the dyadic pigeonhole search."""

    N_min: int
    theta: float | None
    sigma: float | None
    nu: int | None
    nu_prime: int | None
    scenarioI_witnesses: list
    scenarioII_witnesses: list
    per_j: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    delta: float = 0.0
    found: bool = True
    passing_pairs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        rec = asdict(self)
        rec["per_j"] = {str(k): list(v) for k, v in self.per_j.items()}
        return rec

    def to_json(self, path=None, extra: dict | None = None) -> str:
        rec = self.to_dict()
        if extra:
            rec = {**extra, **rec}
        text = json.dumps(rec, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _search(fam: TubeFamily, N: int, c: ScenarioConstants):
    meas = high_measures(fam, N, c)
    W = _high_witness_matrix(fam, meas, c)
    L = log2_inv(fam.delta)
    need = c.high_count * fam.M / L ** 2
    passing = []
    for nu in range(1, W.shape[1]):
        for nup in range(1, W.shape[2]):
            if np.count_nonzero(W[:, nu, nup]) >= need:
                passing.append((nu, nup))
    return W, passing


def find_high_pair(fam: TubeFamily, constant_sets=(PRINTED, FALLBACK)) -> MultiplicityReport:
    """Minimal ``N`` for the low scenario, then the first dyadic pair passing the high one.

    Pairs are scanned in lexicographic ``(nu, nu')`` order.  Each constant set is
    tried in turn; the report records which one succeeded.  If none does, the
    report has ``found = False`` and callers should treat it as an invariant
    violation.
    """
    N = minimal_low_N(fam)
    _, wI = scenario_low(fam, N)
    # tubes carrying a quarter of their mass at multiplicity >= N
    C = _low_counts_cached(fam)
    cell = fam.grid.cell_volume
    q_mass = fam.e_mass - (C[:, N - 1] * cell if N >= 1 else 0.0)
    for c in constant_sets:
        Q = np.nonzero(q_mass >= c.low_mass * fam.lam * fam.tube_volume * (1 - 1e-12))[0]
        W, passing = _search(fam, N, c)
        per_j = {}
        for j in Q:
            for nu in range(1, W.shape[1]):
                hit = np.nonzero(W[j, nu, 1:])[0]
                if hit.size:
                    per_j[int(j)] = (nu, int(hit[0]) + 1)
                    break
        if passing:
            nu, nup = passing[0]
            wit = np.nonzero(W[:, nu, nup])[0].tolist()
            return MultiplicityReport(N, 2.0 ** nu * fam.delta, 2.0 ** nup * fam.delta, nu, nup,
                                      wI, wit, per_j, c.to_dict(), fam.delta, True, passing)
    return MultiplicityReport(N, None, None, None, None, wI, [], per_j, constant_sets[-1].to_dict(),
                              fam.delta, False, [])


@dataclass
class ClaimResult:
    """Distance-shell covering of the other tubes around one axis."""

    holds: bool
    failing: list
    best_shell: dict

    def __bool__(self) -> bool:
        return self.holds


def verify_claim_2_7(fam: TubeFamily, j: int, constants: ScenarioConstants | None = None) -> ClaimResult:
    """Every ``k != j`` carries ``annulus_mass * lam |T_k| / L`` of ``E`` in some distance shell of ``gamma_j``."""
    c = constants or fam.constants
    need = c.annulus_mass * fam.lam * fam.tube_volume / log2_inv(fam.delta)
    failing, best = [], {}
    for k in range(fam.M):
        if k == j:
            continue
        m = fam.shell_masses(k, j)
        m[0] = -1.0
        nup = int(np.argmax(m))
        best[k] = nup
        if m[nup] < need * (1 - 1e-12):
            failing.append(k)
    return ClaimResult(not failing, failing, best)


def angle_shell_partition(x, j: int, fam: TubeFamily) -> dict[int, list[int]]:
    """Group ``{k != j : x in T_k}`` by the dyadic shell of their angle to ``T_j``."""
    out: dict[int, list[int]] = {}
    for k, t in enumerate(fam.tubes):
        if k != j and tube_contains(t, x):
            out.setdefault(dyadic_shell(fam.line_angles[k, j], fam.delta), []).append(k)
    return out
