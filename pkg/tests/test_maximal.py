import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kakeyalab.constructions import ConstructionSpec, build
from kakeyalab.errors import ConfigurationError, ParameterError, PreconditionError, UnsupportedError
from kakeyalab.geometry import (Tube, line_angle, make_direction_net, orthonormal_frame, tube_volume,
                                unit)
from kakeyalab.grid import SetMask, VoxelGrid, rasterize_tube, tube_mask
from kakeyalab.maximal import (auxiliary_maximal, auxiliary_maximal_at, cylinder_overlap_count,
                               exact_average, kakeya_maximal, kakeya_maximal_at, overlap_bound,
                               sector_decomposition, slice_domination_check, weighted_tube_average,
                               witness_average)


def _flat_index(grid, pts):
    idx = np.floor((np.atleast_2d(pts) - grid.origin) / grid.h).astype(np.int64)
    return np.ravel_multi_index(idx.T, grid.extents)


def _random_mask(grid, seed, n=30, radius=0.8):
    g = np.random.Generator(np.random.Philox(seed))
    pts = g.uniform(-radius, radius, size=(n, grid.d))
    pts = pts[np.linalg.norm(pts, axis=1) <= radius]
    return SetMask.from_flat(grid, _flat_index(grid, pts))


def _brute_max(m, delta, xi, rmax=2.0):
    """Max tube count over the whole candidate lattice, one rasterization per candidate."""
    grid = m.grid
    sp = 0.5 * delta
    frame = orthonormal_frame(xi)
    n = int(rmax / sp)
    flat = m.bits.ravel()
    best = 0
    rng_ = range(-n, n + 1)
    perp = [rng_] * frame.shape[0]
    for k in rng_:
        for idx in np.ndindex(*[len(r) for r in perp]):
            coords = [k] + [i - n for i in idx]
            if sum(c * c for c in coords) * sp * sp > rmax * rmax:
                continue
            a = coords[0] * sp * xi + sum(c * sp * e for c, e in zip(coords[1:], frame))
            best = max(best, int(flat[rasterize_tube(grid, Tube(xi, a, delta))].sum()))
    return min(1.0, best * grid.cell_volume / tube_volume(d=grid.d, delta=delta))


class TestExamples:
    def test_ball(self, ball_fields):
        for delta, (m, f) in ball_fields.items():
            assert len(f.values) == len(make_direction_net(3, delta))
            assert f.values.min() >= 0.98 and f.values.max() <= 1.0

    def test_slab(self):
        delta = 0.1
        grid = VoxelGrid.for_delta(3, delta)
        m, _ = build(ConstructionSpec("slab", {}), grid, delta)
        dirs = np.array([[1, 0, 0], unit([1, 1, 0]), unit([1, 2, 0.0]), [0, 0, 1]])
        v, _, _ = kakeya_maximal_at(m, delta, dirs)
        assert np.all(v[:3] == 1.0)
        assert abs(v[3] / (2 * delta) - 1) < 0.10

    def test_empty(self):
        grid = VoxelGrid.for_delta(3, 0.2, 4)
        f = kakeya_maximal(SetMask.empty(grid), 0.2)
        assert np.all(f.values == 0.0)

    def test_resolution_violation(self):
        grid = VoxelGrid.for_delta(3, 0.2, 4)
        with pytest.raises(ConfigurationError):
            kakeya_maximal(SetMask.empty(grid), 0.1)

    def test_net_mismatch(self):
        grid = VoxelGrid.for_delta(2, 0.1, 4)
        with pytest.raises(ParameterError):
            kakeya_maximal(SetMask.empty(grid), 0.1, make_direction_net(2, 0.2))

    def test_support_outside_reach(self):
        grid = VoxelGrid.for_delta(2, 0.1, 4, half_width=2.0)
        m = SetMask.from_flat(grid, _flat_index(grid, np.array([[1.8, 0.0]])))
        with pytest.raises(PreconditionError):
            kakeya_maximal(m, 0.1)


class TestOracle:
    @pytest.mark.parametrize("delta", [0.25, 0.3])
    def test_brute_force_2d(self, delta):
        # 1/0.25 is an integer (binned path), 1/0.3 is not (sorted path)
        grid = VoxelGrid.for_delta(2, delta, 4)
        for seed in range(3):
            m = _random_mask(grid, seed, n=40)
            f = kakeya_maximal(m, delta)
            for nu, xi in enumerate(f.net.dirs):
                assert f.values[nu] == pytest.approx(_brute_max(m, delta, xi), rel=1e-12, abs=1e-15)

    def test_brute_force_3d(self):
        delta = 0.5
        grid = VoxelGrid.for_delta(3, delta, 4)
        m = _random_mask(grid, 7, n=25)
        dirs = np.array([unit([1, 0, 0]), unit([0.3, -0.2, 1]), unit([1, 1, 1])])
        v, _, _ = kakeya_maximal_at(m, delta, dirs)
        for val, xi in zip(v, dirs):
            assert val == pytest.approx(_brute_max(m, delta, xi), rel=1e-12, abs=1e-15)

    def test_witness_reproduces(self):
        delta = 0.1
        grid = VoxelGrid.for_delta(3, delta, 4)
        m = _random_mask(grid, 3, n=4000)
        f = kakeya_maximal(m, delta, make_direction_net(3, 0.1))
        for nu in range(0, len(f.net), 37):
            assert abs(witness_average(m, f, nu) - f.values[nu]) <= 1e-12

    def test_thread_count_irrelevant(self):
        delta = 0.1
        grid = VoxelGrid.for_delta(2, delta, 8)
        m = _random_mask(grid, 11, n=3000)
        a = kakeya_maximal(m, delta, threads=1)
        b = kakeya_maximal(m, delta, threads=4)
        assert np.array_equal(a.values, b.values) and np.array_equal(a.witness, b.witness)

    def test_antipodes_share_values(self):
        delta = 0.1
        grid = VoxelGrid.for_delta(2, delta, 4)
        m = _random_mask(grid, 5, n=500)
        dirs = np.array([unit([1, 2]), unit([-1, -2])])
        v, _, _ = kakeya_maximal_at(m, delta, dirs)
        assert v[0] == v[1]


def _exact(f, grid):
    vol = tube_volume(d=grid.d, delta=f.delta)
    return [exact_average(v, grid.cell_volume, vol, f.cap) for v in f.values]


class TestInvariants:
    @settings(max_examples=8)
    @given(st.integers(0, 2 ** 32), st.integers(0, 2 ** 32))
    def test_monotone_sublinear(self, s1, s2):
        delta = 0.1
        grid = VoxelGrid.for_delta(2, delta, 4)
        a = _random_mask(grid, s1, n=300)
        b = _random_mask(grid, s2, n=300)
        ab = a.union(b)
        fa, fb, fab = (kakeya_maximal(x, delta) for x in (a, b, ab))
        ea, eb, eab = _exact(fa, grid), _exact(fb, grid), _exact(fab, grid)
        for x, y, z in zip(ea, eb, eab):
            assert x <= z and y <= z
            assert z <= x + y
        assert max(eab) <= 1

    def test_localization(self):
        delta = 0.1
        grid = VoxelGrid.for_delta(2, delta, 4)
        m = _random_mask(grid, 9, n=800, radius=0.95)
        f2 = kakeya_maximal(m, delta)
        f3 = kakeya_maximal(m, delta, rmax=3.0)
        assert np.array_equal(f2.values, f3.values)

    def test_exact_average(self):
        assert exact_average(0.5, 0.01, 0.02) == Fraction(1, 2)
        assert exact_average(1.0, 0.3, 0.7, cap=1.0) == 1
        with pytest.raises(ParameterError):
            exact_average(0.123456, 0.01, 0.02)

    @pytest.mark.parametrize("d,delta,factor", [(2, 0.1, 8), (2, 0.05, 8), (3, 0.1, 4)])
    def test_direction_stability(self, d, delta, factor):
        grid = VoxelGrid.for_delta(d, delta, factor)
        corpus = [ConstructionSpec("bush", {"lambda": 1.0, "M": 6 if d == 2 else 20}),
                  ConstructionSpec("random_family", {"lambda": 1.0, "M": 6 if d == 2 else 20}, seed=4)]
        if d == 2:
            corpus.append(ConstructionSpec("perron_tree", {}))
        g = np.random.Generator(np.random.Philox(2))
        xi = np.array([unit(g.normal(size=d)) for _ in range(12)])
        c2 = 0.0
        for spec in corpus:
            m, _ = build(spec, grid, delta)
            # rotate each sample direction by an angle <= delta
            eta = []
            for v in xi:
                w = g.normal(size=d)
                w -= (w @ v) * v
                w = unit(w)
                t = g.uniform(0, delta)
                eta.append(math.cos(t) * v + math.sin(t) * w)
            eta = np.array(eta)
            assert np.all([line_angle(a, b) <= delta + 1e-12 for a, b in zip(xi, eta)])
            va, _, _ = kakeya_maximal_at(m, delta, xi)
            vb, _, _ = kakeya_maximal_at(m, delta, eta)
            for a, b in zip(va, vb):
                if a > 0:
                    c2 = max(c2, b / a)
                if b > 0:
                    c2 = max(c2, a / b)
        assert c2 <= 10


class TestAuxiliary:
    def test_window_excludes_all(self):
        delta = 0.1
        grid = VoxelGrid.for_delta(3, delta, 4)
        net = make_direction_net(3, delta)
        ref = Tube(net.dirs[0], np.zeros(3), delta)
        m, _ = build(ConstructionSpec("ball", {"r": 0.5}), grid, delta)
        f = auxiliary_maximal(m, delta, 0.6 * delta, ref, net)
        assert np.all(f.values == 0.0)

    def test_support_out_of_reach(self):
        delta = 0.1
        grid = VoxelGrid.for_delta(3, delta, 4)
        ref = Tube([1, 0, 0], np.zeros(3), delta)
        m, _ = build(ConstructionSpec("ball", {"r": 0.05}), grid, delta)
        m = SetMask.from_flat(grid, _flat_index(grid, m.points() + [0, 0.9, 0]))
        f = auxiliary_maximal(m, delta, 0.5, ref)
        assert np.all(f.values == 0.0)

    def test_single_tube_oracle(self):
        delta = 0.1
        grid = VoxelGrid.for_delta(3, delta, 8)
        ref = Tube([1, 0, 0], np.zeros(3), delta)
        xi = unit([math.cos(0.4), math.sin(0.4), 0])
        t = Tube(xi, np.zeros(3), delta)
        m = tube_mask(grid, t)
        v, _ = auxiliary_maximal_at(m, delta, 0.5, ref, xi[None, :])
        oracle = weighted_tube_average(m, t, ref.axis)
        assert abs(v[0] / oracle - 1) < 0.05

    def test_unweighted_is_plain_average(self):
        delta = 0.1
        grid = VoxelGrid.for_delta(3, delta, 4)
        ref = Tube([1, 0, 0], np.zeros(3), delta)
        xi = unit([math.cos(0.4), 0, math.sin(0.4)])
        m = tube_mask(grid, Tube(xi, np.zeros(3), delta))
        v, _ = auxiliary_maximal_at(m, delta, 0.5, ref, xi[None, :], weighted=False)
        assert v[0] == pytest.approx(1.0, abs=0.03)

    def test_ref_radius(self):
        grid = VoxelGrid.for_delta(3, 0.1, 4)
        with pytest.raises(ParameterError):
            auxiliary_maximal(SetMask.empty(grid), 0.1, 0.5, Tube([1, 0, 0], np.zeros(3), 0.2))


class TestSectors:
    def test_count(self):
        dec = sector_decomposition(0.1, 0.5, 3)
        assert 5 / 4 <= len(dec) <= 5 * 4

    @pytest.mark.parametrize("delta,theta", [(0.1, 0.5), (0.05, 0.3), (0.1, 0.1), (0.05, 1.0)])
    def test_partition(self, delta, theta, rng):
        dec = sector_decomposition(delta, theta, 3)
        xi = rng.normal(size=(20000, 3))
        xi /= np.linalg.norm(xi, axis=1, keepdims=True)
        net = make_direction_net(3, delta)
        secs = dec.sectors(net)
        allidx = np.concatenate(secs)
        assert len(allidx) == len(np.unique(allidx))
        assert set(allidx.tolist()) == set(np.nonzero(dec.in_annulus(net.dirs))[0].tolist())
        lab = dec.assign(xi)
        assert np.array_equal(lab >= 0, dec.in_annulus(xi))
        v = dec.normals
        if len(v) > 1:
            ang = np.arccos(np.clip(np.abs(v @ v.T), 0, 1))[np.triu_indices(len(v), 1)]
            assert ang.min() >= delta / theta - 1e-12

    def test_planar(self):
        dec = sector_decomposition(0.1, 0.5, 2)
        assert len(dec) == 1
        net = make_direction_net(2, 0.02)
        secs = dec.sectors(net)
        assert len(secs[0]) == int(dec.in_annulus(net.dirs).sum())

    def test_errors(self):
        with pytest.raises(ParameterError):
            sector_decomposition(0.1, 0.05, 3)
        with pytest.raises(UnsupportedError):
            sector_decomposition(0.1, 0.5, 4)

    def test_overlap_bound(self, rng):
        delta, theta, sigma = 0.05, 0.5, 0.4
        dec = sector_decomposition(delta, theta, 3)
        for _ in range(300):
            r = rng.uniform(sigma / 2, sigma)
            phi = rng.uniform(0, 2 * math.pi)
            y = np.array([rng.uniform(-1, 1), r * math.cos(phi), r * math.sin(phi)])
            c = cylinder_overlap_count(y, dec, sigma)
            assert c <= overlap_bound(dec, sigma) and c <= len(dec)
        assert overlap_bound(dec, sigma) == pytest.approx(400 * theta / sigma)

    def test_overlap_aligned_and_errors(self):
        dec = sector_decomposition(0.05, 0.5, 3)
        v = dec.normals[2]
        y = np.array([0.0, -v[1], v[0]]) * 0.3
        assert cylinder_overlap_count(y, dec, 0.4) >= 1
        # sigma at the lower range: every slab may contain the point, never more
        assert cylinder_overlap_count(np.array([0.0, 0.1, 0.0]), dec, 0.1) <= len(dec)
        with pytest.raises(PreconditionError):
            cylinder_overlap_count(np.array([0.0, 0.05, 0.0]), dec, 0.4)


class TestSliceDomination:
    delta, theta = 0.1, 0.5

    def _setup(self):
        grid = VoxelGrid.for_delta(3, self.delta, 4)
        ref = Tube([1, 0, 0], np.zeros(3), self.delta)
        xi = unit([math.cos(0.35), math.sin(0.35), 0])
        return grid, ref, xi

    def _plank(self, grid, y0):
        kz = int(np.argmin(np.abs(grid.axis_centers(2))))
        z = grid.axis_centers(2)[kz]
        return SetMask.from_predicate(
            grid, lambda x: (np.abs(x[:, 0]) <= 0.5) & (np.abs(x[:, 1] - y0) <= 0.02)
            & (np.abs(x[:, 2] - z) < 0.5 * grid.h))

    def test_empty(self):
        grid, ref, xi = self._setup()
        assert slice_domination_check(SetMask.empty(grid), self.delta, self.theta, ref, xi) == (0, 0)

    def test_plank(self):
        grid, ref, xi = self._setup()
        m = self._plank(grid, 0.1)
        lhs, rhs = slice_domination_check(m, self.delta, self.theta, ref, xi, sigma=0.2)
        assert lhs > 0 and lhs <= 8 * rhs

    def test_doubling(self):
        grid, ref, xi = self._setup()
        a = self._plank(grid, 0.1)
        b = self._plank(grid, -0.15)
        la, ra = slice_domination_check(a, self.delta, self.theta, ref, xi)
        lab, rab = slice_domination_check(a.union(b), self.delta, self.theta, ref, xi)
        assert lab <= 2 * la + 1e-12 and rab <= 2 * ra + 1e-12

    def test_hollow_precondition_and_dim(self):
        grid, ref, xi = self._setup()
        m, _ = build(ConstructionSpec("ball", {"r": 0.3}), grid, self.delta)
        with pytest.raises(PreconditionError):
            slice_domination_check(m, self.delta, self.theta, ref, xi, sigma=0.2)
        g2 = VoxelGrid.for_delta(2, 0.1, 4)
        with pytest.raises(UnsupportedError):
            slice_domination_check(SetMask.empty(g2), 0.1, 0.5, Tube([1, 0], [0, 0], 0.1), [0, 1])


@pytest.mark.slow
def test_auxiliary_l2_growth():
    """Auxiliary L2 ratio on a hollow cylinder grows at most like log2(1/delta)."""
    ratios = []
    sigma = 0.4
    for delta in (0.2, 0.1, 0.05):
        grid = VoxelGrid.for_delta(3, delta, 4)
        m, _ = build(ConstructionSpec("hollow_cylinder", {"sigma": sigma}), grid, delta)
        net = make_direction_net(3, delta)
        ref = Tube([1, 0, 0], np.zeros(3), delta)
        f = auxiliary_maximal(m, delta, 0.5, ref, net)
        l2 = math.sqrt(float((net.weights * f.values ** 2).sum()))
        ratios.append(l2 / math.sqrt(m.measure()) / math.log2(1 / delta))
    assert all(r > 0 for r in ratios)
    assert all(b <= 2 * a for a, b in zip(ratios, ratios[1:]))


def test_csv_export(tmp_path):
    delta = 0.2
    grid = VoxelGrid.for_delta(2, delta, 4)
    m, _ = build(ConstructionSpec("ball", {"r": 0.5}), grid, delta)
    f = kakeya_maximal(m, delta)
    p = tmp_path / "f.csv"
    f.to_csv(p, ["run"])
    lines = p.read_text().splitlines()
    assert lines[0] == "# run"
    assert lines[1] == "nu,xi_1,xi_2,value,witness_a_1,witness_a_2"
    assert len(lines) == 2 + len(f.net)
    row = lines[2].split(",")
    assert float(row[3]) == f.values[0]
