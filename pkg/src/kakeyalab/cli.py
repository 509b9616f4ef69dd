"""Command line front-end: ``kakeyalab {maximal, sweep, multiplicity, verify}``.

Exit codes: 0 success, 1 invariant or inequality failure, 2 usage error.
Every output embeds the full run configuration and the package version.
Outputs are written to temporary names and renamed only on success, so a
failed run leaves no partial files.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .constructions import NAMES, ConstructionSpec, build
from .errors import (ConfigurationError, DegenerateGeometryError, InvariantViolation, ParameterError,
                     PreconditionError, UnsupportedError)
from .grid import GridFunction, VoxelGrid, save_mask
from .inequalities import (DistributionProfile, ExponentPair, check_condition_4_7, check_lemma_4_1,
                           check_lemma_5_1, delta_sweep, lorentz_norms,
                           lp_norm_space, lp_norm_sphere)
from .geometry import make_direction_net, tube_volume
from .maximal import exact_average, kakeya_maximal, kakeya_maximal_at
from .multiplicity import PRINTED, ScenarioConstants, find_high_pair

FAMILIES = ("disjoint_tubes", "bush", "brush", "random_family")


@dataclass
class RunConfig:
    """Validated parameters of one command."""

    command: str
    dim: int = 3
    deltas: list = field(default_factory=list)
    construction: dict = field(default_factory=dict)
    p: float | None = None
    q: float | None = None
    lam: float = 0.5
    eps: float = 0.1
    factor: float = 8
    constants: dict = field(default_factory=dict)
    seed: int = 0
    out: str = "."
    threads: int = 1

    def validate(self) -> None:
        if self.dim not in (2, 3):
            raise ConfigurationError("--dim must be 2 or 3")
        if not self.deltas or any(not (0 < x < 0.5) for x in self.deltas):
            raise ConfigurationError("delta values must lie in (0, 0.5)")
        if len(set(self.deltas)) != len(self.deltas):
            raise ConfigurationError("duplicate delta values")
        if self.command == "sweep":
            if len(self.deltas) < 3:
                raise ConfigurationError("a sweep needs at least 3 delta values")
            if any(b >= a for a, b in zip(self.deltas, self.deltas[1:])):
                raise ConfigurationError("sweep deltas must be strictly decreasing")
        if self.factor < 4:
            raise ConfigurationError("--factor must be at least 4")
        if not (0 < self.lam <= 1):
            raise ConfigurationError("--lambda must lie in (0, 1]")
        if self.eps < 0:
            raise ConfigurationError("--eps must be nonnegative")
        if self.threads < 1:
            raise ConfigurationError("--threads must be positive")
        if self.command == "multiplicity" and self.construction.get("name") not in FAMILIES:
            raise ConfigurationError(f"multiplicity needs a tube family: one of {FAMILIES}")
        if self.construction.get("name") == "perron_tree" and self.dim != 2:
            raise ConfigurationError("perron_tree is planar: use --dim 2")
        ConstructionSpec(self.construction["name"], self.construction.get("params", {}),
                         self.construction.get("seed", self.seed))
        if self.constants:
            ScenarioConstants.from_dict({**PRINTED.to_dict(), **self.constants})

    @property
    def spec(self) -> ConstructionSpec:
        c = self.construction
        return ConstructionSpec(c["name"], c.get("params", {}), c.get("seed", self.seed))

    @property
    def exponents(self) -> ExponentPair:
        base = ExponentPair.for_dimension(self.dim)
        return ExponentPair(self.p or base.p, self.q or base.q)

    def header(self) -> dict:
        return {"version": __version__, "config": asdict(self)}


class _Outputs:
    """Collects files under temporary names; commits them by renaming."""

    def __init__(self, root: str):
        self.root = root
        self.pending: list[tuple[str, str]] = []

    def path(self, name: str) -> str:
        final = os.path.join(self.root, name)
        tmp = final + ".partial"
        self.pending.append((tmp, final))
        return tmp

    def commit(self) -> list[str]:
        for tmp, final in self.pending:
            os.replace(tmp, final)
        return [f for _, f in self.pending]

    def discard(self) -> None:
        for tmp, _ in self.pending:
            if os.path.exists(tmp):
                os.remove(tmp)


def _header_lines(cfg: RunConfig) -> list[str]:
    return [json.dumps(cfg.header(), sort_keys=True)]


def _write_json(path: str, cfg: RunConfig, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump({**cfg.header(), **payload}, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x)}")


def _finite(x: float):
    return None if (isinstance(x, float) and not math.isfinite(x)) else x


# ----------------------------------------------------------------------------
# commands


def cmd_maximal(cfg: RunConfig, out: _Outputs) -> int:
    delta = cfg.deltas[0]
    grid = VoxelGrid.for_delta(cfg.dim, delta, cfg.factor)
    m, _ = build(cfg.spec, grid, delta)
    F = kakeya_maximal(m, delta, threads=cfg.threads)
    ex = cfg.exponents
    F.to_csv(out.path("maximal.csv"), _header_lines(cfg))
    save_mask(m, out.path("mask.kkym"))
    prof = DistributionProfile.from_field(F)
    weak = lorentz_norms(prof, ex.q, ex.q)[0]
    summary = {
        "delta": delta, "net_size": len(F.net), "measure_E": m.measure(),
        "min": float(F.values.min()), "max": float(F.values.max()), "mean": float(F.values.mean()),
        "lq_norm": lp_norm_sphere(F, ex.q), "lp_norm_E": lp_norm_space(m, ex.p),
        "weak_lq": weak, "distribution_profile": prof.to_dict(),
        "fraction_at_least_quarter": float(np.mean(F.values >= 0.25)),
    }
    _write_json(out.path("summary.json"), cfg, summary)
    return 0


def cmd_sweep(cfg: RunConfig, out: _Outputs) -> int:
    res = delta_sweep(cfg.spec, cfg.deltas, cfg.dim, cfg.exponents, cfg.factor, cfg.eps, cfg.lam,
                      threads=cfg.threads)
    res.to_csv(out.path("sweep.csv"), _header_lines(cfg))
    measures = res.column("measure_E")
    payload = res.to_dict()
    payload["records"] = [{k: _finite(v) for k, v in r.items()} for r in payload["records"]]
    payload["measure_strictly_decreasing"] = bool(np.all(np.diff(measures) < 0))
    _write_json(out.path("sweep.json"), cfg, payload)
    return 0


def cmd_multiplicity(cfg: RunConfig, out: _Outputs) -> int:
    delta = cfg.deltas[0]
    grid = VoxelGrid.for_delta(cfg.dim, delta, cfg.factor)
    consts = ScenarioConstants.from_dict({**PRINTED.to_dict(), **cfg.constants,
                                          "name": "override" if cfg.constants else "printed"})
    spec = cfg.spec
    m, fam = build(spec, grid, delta)
    fam.constants = consts
    sets = (consts,) if cfg.constants else None
    rep = find_high_pair(fam, sets) if sets else find_high_pair(fam)
    _write_json(out.path("multiplicity.json"), cfg, rep.to_dict())
    with open(out.path("lemmas.csv"), "w", newline="") as fh:
        for line in _header_lines(cfg):
            fh.write(f"# {line}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["check", "j", "lhs", "rhs", "ratio"])
        c41 = check_lemma_4_1(fam, rep.N_min)
        wr.writerow(["lemma41", "", repr(c41.lhs), repr(c41.rhs), repr(c41.ratio)])
        if rep.found:
            far = np.full(cfg.dim, 10.0)
            c47 = check_condition_4_7(fam, rep.sigma, far, cfg.eps, rep.N_min, rep.scenarioII_witnesses)
            for j in sorted(c47.measured):
                wr.writerow(["condition47", j, repr(c47.measured[j]), repr(c47.bound), repr(c47.ratios[j])])
            if cfg.dim == 3:
                for j in rep.scenarioII_witnesses[:5]:
                    r = check_lemma_5_1(fam, rep.theta, rep.sigma, rep.N_min, cfg.eps, j, cfg.threads)
                    for stage, val in r.stage_ratios.items():
                        wr.writerow([f"lemma51_{stage}", j, "", "", repr(val)])
    if not rep.found:
        print("invariant violation: no dyadic pair passes the high multiplicity scenario "
              f"at N = {rep.N_min}", file=sys.stderr)
        return 1
    return 0


def _invariant_corpus(dim: int, delta: float, factor: float, seed: int):
    grid = VoxelGrid.for_delta(dim, delta, factor)
    specs = [ConstructionSpec("ball", {"r": 0.6}), ConstructionSpec("slab", {"r": 0.8}),
             ConstructionSpec("random_family", {"M": 8, "lambda": 0.5}, seed),
             ConstructionSpec("bush", {"M": 6, "lambda": 0.5})]
    return grid, [(s, build(s, grid, delta)[0]) for s in specs]


def run_invariants(dim: int, delta: float, factor: float, seed: int = 0, n_dirs: int = 24,
                   threads: int | None = None) -> dict:
    """Zero-tolerance invariants of the maximal function on a small corpus.

    L-infinity contraction, monotonicity under inclusion, sublinearity, and
    localization (doubling the candidate radius changes nothing).
    """
    grid, corpus = _invariant_corpus(dim, delta, factor, seed)
    net = make_direction_net(dim, delta)
    g = np.random.Generator(np.random.Philox(seed))
    dirs = net.dirs[np.sort(g.choice(len(net), size=min(n_dirs, len(net)), replace=False))]
    fails = {"linf": 0, "monotone": 0, "sublinear": 0, "localization": 0}
    cell, vol = grid.cell_volume, tube_volume(d=dim, delta=delta)
    masks = [m for _, m in corpus]
    vals = [kakeya_maximal_at(m, delta, dirs, threads=threads)[0] for m in masks]
    exact = [[exact_average(x, cell, vol, 1.0) for x in v] for v in vals]
    for m, v in zip(masks, vals):
        fails["linf"] += int(np.count_nonzero(v > 1.0))
        far, _, _ = kakeya_maximal_at(m, delta, dirs, rmax=3.0, threads=threads)
        fails["localization"] += int(np.count_nonzero(far != v))
    for i in range(len(masks)):
        for k in range(i + 1, len(masks)):
            vu, _, _ = kakeya_maximal_at(masks[i].union(masks[k]), delta, dirs, threads=threads)
            for n, x in enumerate(vu):
                xu = exact_average(x, cell, vol, 1.0)
                fails["monotone"] += int(xu < max(exact[i][n], exact[k][n]))
                fails["sublinear"] += int(xu > exact[i][n] + exact[k][n])
    # a graded function obeys the same sup bound
    f = GridFunction(grid, masks[0].bits + 0.5 * masks[2].bits)
    vf, _, _ = kakeya_maximal_at(f, delta, dirs, threads=threads)
    fails["linf"] += int(np.count_nonzero(vf > f.sup()))
    return {"delta": delta, "dim": dim, "directions": len(dirs), "sets": len(masks),
            "failures": fails, "ok": not any(fails.values())}


def cmd_verify(cfg: RunConfig, out: _Outputs) -> int:
    results = []
    for delta in cfg.deltas:
        results.append(run_invariants(cfg.dim, delta, cfg.factor, cfg.seed, threads=cfg.threads))
        grid = VoxelGrid.for_delta(cfg.dim, delta, cfg.factor)
        m, fam = build(ConstructionSpec("bush", {"M": 6, "lambda": 0.5}), grid, delta)
        rep = find_high_pair(fam)
        c41 = check_lemma_4_1(fam, rep.N_min)
        results[-1]["lemma41"] = {"lhs": c41.lhs, "rhs": c41.rhs, "holds": c41.holds}
        results[-1]["high_pair_found"] = rep.found
        results[-1]["ok"] = results[-1]["ok"] and c41.holds and rep.found
    ok = all(r["ok"] for r in results)
    _write_json(out.path("verify.json"), cfg, {"results": results, "ok": ok})
    return 0 if ok else 1


COMMANDS = {"maximal": cmd_maximal, "sweep": cmd_sweep, "multiplicity": cmd_multiplicity,
            "verify": cmd_verify}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kakeyalab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, set_required=True):
        p.add_argument("--dim", type=int, default=3, choices=(2, 3))
        p.add_argument("--factor", type=float, default=8, help="grid resolution h = delta/factor")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (falls back to KKY_THREADS, then 1)")
        p.add_argument("--params", default="{}", help="construction parameters as JSON")
        p.add_argument("--eps", type=float, default=0.1)
        p.add_argument("--lambda", dest="lam", type=float, default=0.5)
        p.add_argument("-p", type=float, default=None)
        p.add_argument("-q", type=float, default=None)
        if set_required:
            p.add_argument("--set", required=True, choices=NAMES)

    p = sub.add_parser("maximal", help="evaluate the maximal function of a construction")
    common(p)
    p.add_argument("--delta", type=float, required=True)
    p = sub.add_parser("sweep", help="delta sweep with exponent fit")
    common(p)
    p.add_argument("--deltas", type=float, nargs="+", required=True)
    p = sub.add_parser("multiplicity", help="multiplicity report and inequality checks for a family")
    common(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--constants", default=None, help="JSON file overriding scenario constants")
    p = sub.add_parser("verify", help="run the invariant suite")
    common(p, set_required=False)
    p.add_argument("--deltas", type=float, nargs="+", default=[0.1])
    return ap


def _threads(arg) -> int:
    if arg is not None:
        return int(arg)
    env = os.environ.get("KKY_THREADS")
    return int(env) if env else 1


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    try:
        params = json.loads(ns.params)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"--params is not valid JSON: {exc}") from exc
    constants = {}
    if getattr(ns, "constants", None):
        with open(ns.constants) as fh:
            constants = json.load(fh)
    deltas = [ns.delta] if hasattr(ns, "delta") else list(ns.deltas)
    name = getattr(ns, "set", None) or "ball"
    return RunConfig(ns.command, ns.dim, deltas, {"name": name, "params": params, "seed": ns.seed},
                     ns.p, ns.q, ns.lam, ns.eps, ns.factor, constants, ns.seed, ns.out,
                     _threads(ns.threads))


def main(argv=None) -> int:
    ap = _parser()
    ns = ap.parse_args(argv)
    try:
        cfg = config_from_args(ns)
        cfg.validate()
    except (ConfigurationError, ParameterError, OSError, ValueError) as exc:
        ap.print_usage(sys.stderr)
        print(f"kakeyalab: error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(cfg.out, exist_ok=True)
    out = _Outputs(cfg.out)
    try:
        code = COMMANDS[cfg.command](cfg, out)
    except (ConfigurationError, ParameterError, UnsupportedError) as exc:
        out.discard()
        print(f"kakeyalab: error: {exc}", file=sys.stderr)
        return 2
    except (InvariantViolation, PreconditionError, DegenerateGeometryError, AssertionError) as exc:
        out.discard()
        print(f"kakeyalab: invariant failure: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        out.discard()
        raise
    out.commit()
    return code


if __name__ == "__main__":
    sys.exit(main())
