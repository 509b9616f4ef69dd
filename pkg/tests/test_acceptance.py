"""The ten acceptance criteria, one test each; verdicts are listed in the terminal summary."""
import math
import time

import numpy as np
import pytest

from kakeyalab.constructions import ConstructionSpec, build, rng
from kakeyalab.geometry import Tube, make_direction_net, tube_contains, tube_volume, unit
from kakeyalab.grid import GridFunction, VoxelGrid, rasterize_tube, union_of_tubes
from kakeyalab.inequalities import (DistributionProfile, ExponentPair, check_lemma_4_1,
                                    check_lemma_4_2, check_lemma_5_1, delta_sweep, discrete_sup_ratio,
                                    interpolation_I1_check, layer_cake_alpha, layer_cake_lp,
                                    orthogonality_check)
from kakeyalab.maximal import exact_average, kakeya_maximal, kakeya_maximal_at
from kakeyalab.multiplicity import (ScenarioConstants, find_high_pair, minimal_low_N, scenario_high,
                                    scenario_low)


# ----------------------------------------------------------------------------
# 1. rasterized tube measure


def test_01_geometry_oracle(acceptance):
    t0 = time.perf_counter()
    g = rng(1)
    worst = 0.0
    for d in (2, 3):
        for delta in (0.1, 0.05):
            grid = VoxelGrid.for_delta(d, delta, 8)
            for _ in range(50):
                t = Tube(unit(g.normal(size=d)), g.uniform(-0.5, 0.5, d), delta)
                got = len(rasterize_tube(grid, t)) * grid.cell_volume
                worst = max(worst, abs(got / tube_volume(t) - 1))
    dt = time.perf_counter() - t0
    ok = worst < 0.05 and dt < 30
    acceptance(1, ok, f"max relative error {worst:.4f} over 200 tubes, {dt:.1f} s")
    assert ok


# ----------------------------------------------------------------------------
# 2. ball and slab


def test_02_maximal_sanity(acceptance, ball_fields):
    lo = min(float(f.values.min()) for _, f in ball_fields.values())
    hi = max(float(f.values.max()) for _, f in ball_fields.values())
    slab = {}
    for delta in (0.1, 0.05):
        grid = VoxelGrid.for_delta(3, delta, 8)
        m, _ = build(ConstructionSpec("slab", {}), grid, delta)
        v, _, _ = kakeya_maximal_at(m, delta, np.array([[0.0, 0.0, 1.0]]))
        slab[delta] = float(v[0]) / (2 * delta)
    ok = lo >= 0.98 and hi <= 1.0 and all(abs(r - 1) < 0.1 for r in slab.values())
    acceptance(2, ok, f"ball values in [{lo:.4f}, {hi:.4f}]; slab e3 value / 2delta = "
               + ", ".join(f"{r:.4f} (delta={d})" for d, r in slab.items()))
    assert ok


# ----------------------------------------------------------------------------
# 3. exact invariants


def _corpus(d, delta):
    specs = [ConstructionSpec("ball", {"r": 0.7}), ConstructionSpec("slab", {"r": 0.9}),
             ConstructionSpec("hollow_cylinder", {"sigma": 0.4}),
             ConstructionSpec("bush", {"M": 10, "lambda": 0.5}),
             ConstructionSpec("brush", {"M": 10, "lambda": 0.5}),
             ConstructionSpec("random_family", {"M": 10, "lambda": 0.5}, seed=3),
             ConstructionSpec("disjoint_tubes", {"M": 5, "lambda": 0.5})]
    if d == 2:
        specs = [s for s in specs if s.name != "hollow_cylinder"]
        specs.append(ConstructionSpec("perron_tree", {}))
    return specs


def test_03_exact_invariants(acceptance):
    fails = {"linf": 0, "monotone": 0, "sublinear": 0, "localization": 0}
    checked = 0
    for d, delta, factor in ((2, 0.1, 8), (2, 0.05, 8), (3, 0.1, 4)):
        grid = VoxelGrid.for_delta(d, delta, factor)
        net = make_direction_net(d, delta)
        cell, vol = grid.cell_volume, tube_volume(d=d, delta=delta)
        masks = [build(s, grid, delta)[0] for s in _corpus(d, delta)]
        vals = []
        for m in masks:
            v, _, _ = kakeya_maximal_at(m, delta, net.dirs)
            far, _, _ = kakeya_maximal_at(m, delta, net.dirs, rmax=3.0)
            fails["linf"] += int(np.count_nonzero(v > 1.0))
            fails["localization"] += int(np.count_nonzero(far != v))
            vals.append([exact_average(x, cell, vol, 1.0) for x in v])
            checked += len(v)
        for i in range(len(masks)):
            for k in range(i + 1, len(masks)):
                vu, _, _ = kakeya_maximal_at(masks[i].union(masks[k]), delta, net.dirs)
                for n, x in enumerate(vu):
                    xu = exact_average(x, cell, vol, 1.0)
                    fails["monotone"] += int(xu < max(vals[i][n], vals[k][n]))
                    fails["sublinear"] += int(xu > vals[i][n] + vals[k][n])
                checked += len(vu)
        # graded functions obey the sup bound too
        f = GridFunction(grid, 0.3 * masks[0].bits + 0.7 * masks[-1].bits)
        vf, _, _ = kakeya_maximal_at(f, delta, net.dirs)
        fails["linf"] += int(np.count_nonzero(vf > f.sup()))
    ok = not any(fails.values())
    acceptance(3, ok, f"failures {fails} over {checked} direction evaluations")
    assert ok


# ----------------------------------------------------------------------------
# 4-5. multiplicity pipeline and the low multiplicity bound

FAMILY_CORPUS = [
    (2, 0.1, "disjoint_tubes", {"M": 6}), (2, 0.1, "bush", {"M": 10}),
    (2, 0.1, "brush", {"M": 10}), (2, 0.1, "random_family", {"M": 12}),
    (2, 0.05, "disjoint_tubes", {"M": 15}), (2, 0.05, "bush", {"M": 20, "cap": 1.0}),
    (2, 0.05, "brush", {"M": 20, "cap": 1.0}), (2, 0.05, "random_family", {"M": 25}),
    (3, 0.1, "disjoint_tubes", {"M": 40}), (3, 0.1, "bush", {"M": 100, "cap": 1.0}),
    (3, 0.1, "brush", {"M": 100, "cap": 1.0}), (3, 0.1, "random_family", {"M": 200}),
    (3, 0.05, "disjoint_tubes", {"M": 150}), (3, 0.05, "bush", {"M": 200}),
    (3, 0.05, "brush", {"M": 200}), (3, 0.05, "random_family", {"M": 200}),
]


@pytest.fixture(scope="module")
def families():
    out = []
    for d, delta, name, params in FAMILY_CORPUS:
        grid = VoxelGrid.for_delta(d, delta, 4 if d == 3 else 8)
        _, fam = build(ConstructionSpec(name, {**params, "lambda": 0.5}, seed=11), grid, delta)
        out.append((f"{name}(d={d}, delta={delta}, M={fam.M})", fam))
    return out


def _direct_min_N(fam):
    """Scan N = 0, 1, ... evaluating the low multiplicity scenario by point-in-tube tests."""
    counts = []
    for j in range(fam.M):
        flat = rasterize_tube(fam.grid, fam.tubes[j])
        pts = fam.grid.centers_of(flat[fam.mask.bits.ravel()[flat]])
        cover = np.zeros(len(pts), dtype=np.int64)
        for t in fam.tubes:
            cover += tube_contains(t, pts)
        counts.append(cover - 1)
    need = fam.constants.low_mass * fam.lam * fam.tube_volume
    for N in range(fam.M + 1):
        good = sum(np.count_nonzero(c <= N) * fam.grid.cell_volume >= need * (1 - 1e-12) for c in counts)
        if good >= fam.constants.low_count * fam.M:
            return N
    raise AssertionError("low multiplicity scenario fails at N = M")


def test_04_multiplicity_pipeline(acceptance, families):
    bad, used = [], set()
    for label, fam in families:
        N = minimal_low_N(fam)
        if N != _direct_min_N(fam):
            bad.append(f"{label}: N mismatch")
            continue
        rep = find_high_pair(fam)
        if not rep.found:
            bad.append(f"{label}: no pair")
            continue
        consts = ScenarioConstants.from_dict(rep.constants)
        if not scenario_high(fam, rep.theta, rep.sigma, N, consts)[0]:
            bad.append(f"{label}: reported pair fails")
        used.add(consts.name)
    ok = not bad
    acceptance(4, ok, f"{len(families)} families, constant sets used: {sorted(used)}"
               + (f"; failures: {bad}" if bad else ""))
    assert ok


def test_05_lemma_4_1(acceptance, families):
    ratios, fails = [], []
    for label, fam in families:
        N0 = minimal_low_N(fam)
        for N in sorted({N0, (N0 + fam.M) // 2, fam.M}):
            assert scenario_low(fam, N)[0]
            c = check_lemma_4_1(fam, N)
            ratios.append(c.ratio)
            if not c:
                fails.append((label, N))
    ok = not fails
    acceptance(5, ok, f"{len(ratios)} instances, min |E| / bound = {min(ratios):.3f}")
    assert ok


# ----------------------------------------------------------------------------
# 6. large tubes through a common point


def test_06_lemma_4_2(acceptance):
    # conclusion on instances whose hypothesis was verified on the lattice
    concl = []
    for sigma, gamma in ((0.1, 0.5), (0.1, 0.8), (0.05, 0.5)):
        grid = VoxelGrid.for_delta(3, sigma, 4)
        dirs = make_direction_net(3, gamma).dirs
        tubes = [Tube(v, np.zeros(3), sigma) for v in dirs[dirs[:, 2] > 1e-9]]
        concl.append(check_lemma_4_2(tubes, union_of_tubes(grid, tubes), gamma, 0.3))
    grid = VoxelGrid.for_delta(3, 0.1, 4)
    t = Tube([1.0, 0.0, 0.0], np.zeros(3), 0.1)
    concl.append(check_lemma_4_2([t], union_of_tubes(grid, [t]), 0.5, 0.4, M0=1))
    concl_ok = all(concl)
    # orthogonality: pairwise intersections inside B(x0, sigma/gamma)
    rep = orthogonality_check(0.05, 0.3, n_pairs=1000)
    ok = concl_ok and rep.failures == 0
    acceptance(6, ok, f"conclusion holds on {sum(map(bool, concl))}/{len(concl)} instances; "
               f"orthogonality pass rate {rep.pass_rate:.3f} over 1000 pairs "
               f"(max extent {rep.max_excess:.2f} x sigma/gamma)")
    assert concl_ok
    assert rep.failures == 0


# ----------------------------------------------------------------------------
# 7. sigma-tube chain


def test_07_lemma_5_1(acceptance):
    delta = 0.05
    grid = VoxelGrid.for_delta(3, delta, 4)
    n_checked, stage_min, pair_max = 0, math.inf, 0.0
    all_pos = pair_ok = True
    for M in (60, 100, 200):
        _, fam = build(ConstructionSpec("bush", {"M": M, "lambda": 1.0}), grid, delta)
        rep = find_high_pair(fam)
        assert rep.found
        for j in rep.scenarioII_witnesses[:: max(1, len(rep.scenarioII_witnesses) // 4)][:4]:
            r = check_lemma_5_1(fam, rep.theta, rep.sigma, rep.N_min, j=j)
            n_checked += 1
            all_pos &= r.all_positive
            pair_ok &= r.pair_ok
            stage_min = min(stage_min, min(r.stage_ratios.values()))
            if r.pair_volumes:
                pair_max = max(pair_max, max(r.pair_volumes.values()) / r.pair_bound)
    ok = all_pos and pair_ok and n_checked > 0
    acceptance(7, ok, f"{n_checked} reference tubes, min stage ratio {stage_min:.3g}, "
               f"max |T_i cap T_j| / (8 delta^3/theta) = {pair_max:.3f}")
    assert ok


# ----------------------------------------------------------------------------
# 8. discrete distributional inequality


def test_08_discrete_inequality(acceptance, ball_fields):
    sups = {}
    for delta in (0.2, 0.1, 0.05):
        factor = 8 if delta > 0.05 else 4
        grid = VoxelGrid.for_delta(3, delta, factor)
        corpus = []
        if delta in ball_fields:
            corpus.append(ball_fields[delta])
        else:
            m, _ = build(ConstructionSpec("ball", {"r": 1.0}), grid, delta)
            corpus.append((m, kakeya_maximal(m, delta)))
        for M in (10, 40):
            m, _ = build(ConstructionSpec("bush", {"M": M, "cap": 1.0}), grid, delta)
            corpus.append((m, kakeya_maximal(m, delta)))
        sups[delta] = max(discrete_sup_ratio(m, delta, 0.1, F)[0] for m, F in corpus)
    vals = np.array(list(sups.values()))
    spread = float(vals.max() / vals.min())
    ok = bool(np.all(np.isfinite(vals))) and spread < 4
    acceptance(8, ok, "sup ratios " + ", ".join(f"{v:.4f} (delta={d})" for d, v in sups.items())
               + f"; spread {spread:.2f}")
    assert ok


# ----------------------------------------------------------------------------
# 9. interpolation machinery


def test_09_appendix(acceptance):
    g = rng(99)
    worst = 0.0
    for _ in range(100):
        n = int(g.integers(1, 60))
        v = g.uniform(0, 5, n) * (g.random(n) < 0.8)
        w = g.uniform(1e-3, 2, n)
        p = float(g.uniform(1, 6))
        direct = float(np.sum(w * v ** p) ** (1 / p))
        lc = layer_cake_lp(DistributionProfile.from_values(v, w), p)
        if direct > 0:
            worst = max(worst, abs(lc / direct - 1))
    i1 = []
    for d, delta in ((2, 0.1), (3, 0.2)):
        grid = VoxelGrid.for_delta(d, delta, 4)
        for spec in _corpus(d, delta):
            m, _ = build(spec, grid, delta)
            i1.append(interpolation_I1_check(m, delta, 0.5))
    alpha = layer_cake_alpha(5 / 2, 3)
    ok = worst <= 1e-9 and all(i1) and alpha == 0.25
    acceptance(9, ok, f"layer-cake max relative error {worst:.2e}; I1 = 0 on {sum(i1)}/{len(i1)} sets; "
               f"alpha(3, 5/2) = {alpha}")
    assert ok


# ----------------------------------------------------------------------------
# 10. Perron tree sweep


def test_10_perron_sweep(acceptance):
    t0 = time.perf_counter()
    res = delta_sweep(ConstructionSpec("perron_tree", {}), [0.2, 0.1, 0.05], 2,
                      ExponentPair(2.0, 2.0), lam=0.25)
    dt = time.perf_counter() - t0
    meas = res.column("measure_E")
    ratio = res.column("ratio")
    frac = []
    for rec in res.records:
        n = len(make_direction_net(2, rec["delta"]))
        frac.append(rec["M_lambda"] / n)
    ok = (bool(np.all(np.diff(meas) < 0)) and min(frac) >= 0.5 and bool(np.all(np.diff(ratio) >= 0))
          and dt < 120)
    acceptance(10, ok, "measure " + ", ".join(f"{x:.3f}" for x in meas)
               + "; fraction >= 1/4: " + ", ".join(f"{x:.2f}" for x in frac)
               + "; L2 ratio " + ", ".join(f"{x:.3f}" for x in ratio) + f"; {dt:.1f} s")
    assert ok
