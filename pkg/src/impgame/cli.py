"""Command-line front end: ``impgame {validate,solve,crosscheck,report}``.

Every file written carries the config hash and master seed.  Wall-clock
timings go to ``timings.json`` so that the remaining payloads are
byte-identical between runs with the same configuration.

Exit codes: 0 success, 1 failed checks or solver error, 2 bad input.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import plotting
from .config import ConfigError, load_config, problem_from_dict
from .discretize import SpatialGrid, TimeGrid
from .dp_solver import (
    _nodes_for,
    convergence_study,
    default_partitions,
    extract,
    order_gap,
    solve,
)
from .model import BUILTIN_NAMES, UnknownInstanceError
from .qvi_solver import PenaltyConfig, SchemeConfig, SchemeError, cross_check, solve_penalized, solve_qvi
from .randomized import saddle_check
from .sde_sim import play_feedback
from .validation import validate_all

log = logging.getLogger("impgame")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


@dataclass
class RunConfig:
    """Resolved run parameters (defaults, then config file, then flags)."""

    problem: dict = field(default_factory=lambda: {"builtin": "contraction-game"})
    eps: float = 1 / 16
    nodes: list | None = None
    quad_order: int = 3
    safety: float = 0.9
    k_max: int = 3
    l_max: int = 3
    penalty_levels: list = field(default_factory=lambda: [1, 4, 16, 64])
    paths: int = 20000
    mesh: int | None = None
    seed: int = 0
    probes: list | None = None
    trials: int = 20
    convergence_budgets: list = field(default_factory=lambda: [1, 2, 4, 8])
    validation_samples: int = 1000
    out: str = "impgame-out"

    def payload(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def stamp(self) -> str:
        return f"config_hash={self.config_hash} seed={self.seed}"


_SECTION_KEYS = {
    "discretization": ("eps", "nodes", "quad_order", "safety"),
    "budgets": ("k_max", "l_max"),
    "monte_carlo": ("paths", "mesh", "seed", "trials"),
}


def resolve(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        data = load_config(args.config)
        if "problem" in data:
            cfg.problem = data["problem"]
        for section, keys in _SECTION_KEYS.items():
            sub = data.get(section) or {}
            if not isinstance(sub, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            for key in keys:
                if key in sub:
                    setattr(cfg, key, sub[key])
        for key in ("penalty_levels", "probes", "convergence_budgets", "validation_samples", "out"):
            if key in data:
                setattr(cfg, key, data[key])
    if args.problem:
        cfg.problem = {"builtin": args.problem}
    for flag, key in (
        ("eps", "eps"),
        ("kmax", "k_max"),
        ("lmax", "l_max"),
        ("paths", "paths"),
        ("seed", "seed"),
        ("out", "out"),
        ("trials", "trials"),
        ("nodes", "nodes"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "penalty_levels", None):
        cfg.penalty_levels = [int(v) for v in args.penalty_levels.split(",")]
    if getattr(args, "probe", None):
        cfg.probes = [_parse_probe(p) for p in args.probe]
    if cfg.nodes is not None:
        cfg.nodes = [int(v) for v in np.atleast_1d(cfg.nodes)]
    cfg.eps = float(cfg.eps)
    if not 0 < cfg.eps <= 1:
        raise ConfigError("eps must lie in (0, 1]")
    return cfg


def _parse_probe(text: str) -> dict:
    try:
        t, xs = text.split(":")
        return {"t": float(t), "x": [float(v) for v in xs.split(",")]}
    except ValueError:
        raise ConfigError(f"probe {text!r} is not of the form t:x1,x2") from None


# ---------------------------------------------------------------- shared plumbing


class Run:
    """Output directory, manifest and timings for one command."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.dir = Path(cfg.out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list = []
        self.checks: dict = {}
        self.timings: dict = {}
        self.spec = problem_from_dict(cfg.problem)

    def timed(self, label, fn, *a, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*a, **kw)
        finally:
            self.timings[label] = round(time.perf_counter() - t0, 6)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def write_json(self, name: str, obj) -> None:
        payload = {"config_hash": self.cfg.config_hash, "seed": self.cfg.seed, **obj}
        self.path(name).write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n")

    def finish(self) -> None:
        (self.dir / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True) + "\n")
        self.write_json(
            "manifest.json",
            {
                "command": self.command,
                "instance": self.spec.name,
                "params": self.cfg.payload(),
                "files": sorted(self.files),
                "checks": self.checks,
                "timings_file": "timings.json",
            },
        )

    # resolution helpers

    @property
    def probes(self) -> list:
        if self.cfg.probes is None:
            centre = 0.5 * (self.spec.box_lo + self.spec.box_hi)
            return [(0.0, centre)]
        return [(float(p["t"]), np.asarray(p["x"], dtype=float)) for p in self.cfg.probes]

    def sgrid(self, eps: float | None = None) -> SpatialGrid:
        eps = self.cfg.eps if eps is None else eps
        if self.cfg.nodes is not None and eps == self.cfg.eps:
            return SpatialGrid.for_spec(self.spec, self.cfg.nodes)
        return SpatialGrid.for_spec(self.spec, _nodes_for(self.spec, eps))

    def parts(self, eps: float | None = None):
        return default_partitions(self.spec, self.cfg.eps if eps is None else eps)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def _solve_dp(run: Run, ordering: str, eps: float | None = None):
    eps = run.cfg.eps if eps is None else eps
    tg = TimeGrid.from_eps(run.spec.horizon, eps)
    return run.timed(
        f"dp_{ordering}_eps{eps:g}",
        solve,
        run.spec,
        tg,
        run.sgrid(eps),
        run.cfg.k_max,
        run.cfg.l_max,
        ordering,
        run.parts(eps),
        run.cfg.quad_order,
    )


def _solve_qvi(run: Run, ordering: str, eps: float | None = None):
    eps = run.cfg.eps if eps is None else eps
    sc = SchemeConfig(run.sgrid(eps), safety=run.cfg.safety, variant=ordering)
    return run.timed(f"qvi_{ordering}_eps{eps:g}", solve_qvi, run.spec, sc, *run.parts(eps))


def _solve_penalized(run: Run, eps: float | None = None):
    eps = run.cfg.eps if eps is None else eps
    sc = SchemeConfig(run.sgrid(eps), safety=run.cfg.safety)
    pen = PenaltyConfig(tuple(run.cfg.penalty_levels), run.cfg.k_max)
    return run.timed(f"penalized_eps{eps:g}", solve_penalized, run.spec, sc, pen, *run.parts(eps))


def _budget_monotonicity(fam) -> dict:
    v = fam.values
    dk = float(np.max(v[:-1] - v[1:], initial=0.0))  # > 0 means a decrease in k
    dl = float(np.max(v[:, 1:] - v[:, :-1], initial=0.0))  # > 0 means an increase in l
    spread = float(np.max(v.max(axis=(0, 1)) - v.min(axis=(0, 1))))
    return {"max_decrease_in_k": dk, "max_increase_in_l": dl, "budget_spread": spread}


def _penalty_monotonicity(fam) -> dict:
    v = fam.values
    up_n = float(np.max(v[1:] - v[:-1], initial=0.0)) if len(fam.levels) > 1 else 0.0
    down_k = float(np.max(v[:, :-1] - v[:, 1:], initial=0.0)) if fam.k_max > 0 else 0.0
    return {"max_increase_in_n": up_n, "max_decrease_in_k": down_k}


def _saddle_level(fam) -> int:
    # the reference check runs at n=16 when that level was solved
    return 16 if 16 in fam.levels else fam.levels[-1]


def _orderings(args) -> tuple:
    return ("minmax", "maxmin") if args.ordering == "both" else (args.ordering,)


# ---------------------------------------------------------------- commands


def cmd_validate(args) -> int:
    cfg = resolve(args)
    run = Run("validate", cfg)
    # the loop search starts from a sampled state unless probes are given
    x0 = run.probes[0][1] if cfg.probes else None
    rep = run.timed("validate", validate_all, run.spec, cfg.validation_samples, cfg.seed, x0)
    run.write_json("validation.json", {"passed": rep.passed, "checks": rep.to_dict()})
    run.checks["validation"] = {"passed": rep.passed, "failures": [f.check for f in rep.failures]}
    run.finish()
    for r in rep.checks:
        print(f"{r.check:<28} {r.status:<5} residual={r.residual:.3g}")
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_solve(args) -> int:
    cfg = resolve(args)
    run = Run("solve", cfg)
    header = run.cfg.stamp
    if args.solver == "dp":
        fams = {}
        for ordering in _orderings(args):
            fam = _solve_dp(run, ordering)
            fams[ordering] = fam
            fam.to_csv(run.path(f"dp_{ordering}.csv"), header)
            for player in (1, 2):
                strat = extract(fam, player)
                run.write_json(f"strategy_p{player}_{ordering}.json", strat.to_dict())
            run.checks[f"dp_{ordering}"] = {**_budget_monotonicity(fam), "crossings": fam.crossings}
        if len(fams) == 2:
            gap = order_gap(fams["minmax"], fams["maxmin"])
            run.checks["order_gap"] = {"max_violation": gap["max_violation"], "ordered": gap["ordered"]}
    elif args.solver == "qvi":
        sols = {}
        for ordering in _orderings(args):
            sol = _solve_qvi(run, ordering)
            sols[ordering] = sol
            sol.to_csv(run.path(f"qvi_{ordering}.csv"), header)
            run.checks[f"qvi_{ordering}"] = {"dt": sol.dt, "crossings": sol.crossings, "max_iterations": sol.max_iterations}
        if len(sols) == 2:
            probes = [
                {"t": t, "x": x, "minmax": float(sols["minmax"](t, x)), "maxmin": float(sols["maxmin"](t, x))}
                for t, x in run.probes
            ]
            for p in probes:
                p["gap"] = abs(p["minmax"] - p["maxmin"])
            sup = float(np.max(np.abs(sols["minmax"].values - sols["maxmin"].values)))
            run.write_json("qvi_gap.json", {"probes": probes, "sup_gap": sup})
            run.checks["qvi_gap"] = {"sup_gap": sup}
    else:
        fam = _solve_penalized(run)
        for n in fam.levels:
            for k in range(fam.k_max + 1):
                fam.to_csv(run.path(f"penalized_k{k}_n{n}.csv"), k, n, header)
        rows = [
            {"t": t, "x": x, "n": n, "k": k, "value": float(fam.function(k, n)(t, x))}
            for t, x in run.probes
            for n in fam.levels
            for k in range(fam.k_max + 1)
        ]
        run.write_json("penalized_probes.json", {"rows": rows, "dt": fam.dt})
        run.checks["penalized"] = _penalty_monotonicity(fam)
    run.finish()
    print(json.dumps(_plain(run.checks), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_crosscheck(args) -> int:
    cfg = resolve(args)
    run = Run("crosscheck", cfg)
    spec, probes = run.spec, run.probes
    verdicts = {}

    rep = run.timed("validate", validate_all, spec, cfg.validation_samples, cfg.seed, probes[0][1] if cfg.probes else None)
    verdicts["validators"] = {"pass": rep.passed, "failures": [f.check for f in rep.failures]}

    dp = {o: _solve_dp(run, o) for o in ("minmax", "maxmin")}
    qvi = {o: _solve_qvi(run, o) for o in ("minmax", "maxmin")}
    pen = _solve_penalized(run)
    mono = _budget_monotonicity(dp["minmax"])
    pmono = _penalty_monotonicity(pen)
    verdicts["ordering_invariants"] = {
        "pass": mono["max_decrease_in_k"] <= 1e-10
        and mono["max_increase_in_l"] <= 1e-10
        and pmono["max_increase_in_n"] <= 1e-10
        and pmono["max_decrease_in_k"] <= 1e-10,
        **mono,
        **pmono,
    }
    gaps = [abs(float(qvi["minmax"](t, x)) - float(qvi["maxmin"](t, x))) for t, x in probes]
    verdicts["value_coincidence"] = {"pass": max(gaps, default=0.0) <= 1e-2, "probe_gaps": gaps}

    # self-refinement error from one coarser resolution of each solver
    coarse = 2 * cfg.eps
    c_dp = _solve_dp(run, "minmax", coarse)
    c_qvi = _solve_qvi(run, "minmax", coarse)
    c_pen = _solve_penalized(run, coarse)
    k, n = cfg.k_max, pen.levels[-1]
    cauchy = 0.0
    for t, x in probes:
        cauchy = max(
            cauchy,
            abs(float(dp["minmax"].value(k, cfg.l_max, _on_grid(dp["minmax"], t), x)) - float(c_dp.value(k, cfg.l_max, _on_grid(c_dp, t), x))),
            abs(float(qvi["minmax"](t, x)) - float(c_qvi(t, x))),
            abs(float(pen.function(k, n)(t, x)) - float(c_pen.function(k, n)(t, x))),
        )
    tol = max(3 * cauchy, 1e-10)
    cc = cross_check(dp["minmax"], qvi["minmax"], pen, [(_on_grid(dp["minmax"], t), x) for t, x in probes], tol, qvi["maxmin"])
    agree = all(
        max(r["gaps"].get("dp_vs_qvi", 0.0), r["gaps"].get("penalized_vs_qvi", 0.0), r["gaps"].get("dp_vs_penalized", 0.0)) <= tol
        for r in cc["rows"]
    )
    verdicts["solver_agreement"] = {"pass": agree, "tol": tol, "cauchy": cauchy, "rows": cc["rows"]}

    if cfg.paths > 0:
        fam = dp["minmax"]
        rows = []
        ok = True
        for t, x in probes:
            t = _on_grid(fam, t)
            est = run.timed(
                f"playback_t{t:g}",
                play_feedback,
                spec,
                t,
                x,
                extract(fam, 1),
                extract(fam, 2),
                cfg.paths,
                cfg.mesh,
                cfg.seed,
            )
            lo = float(dp["minmax"].value(k, cfg.l_max, t, x))
            hi = float(dp["maxmin"].value(k, cfg.l_max, t, x))
            grid_slack = abs(lo - float(c_dp.value(k, cfg.l_max, _on_grid(c_dp, t), x)))
            slack = 3 * est.stderr + grid_slack
            inside = lo - slack <= est.mean <= hi + slack
            ok &= inside
            rows.append({"t": t, "x": x, "mc": est.to_dict(), "lower": lo, "upper": hi, "slack": slack, "inside": inside})
        verdicts["monte_carlo_sandwich"] = {"pass": ok, "rows": rows}
        if probes and pen.k_max >= 0:
            t, x = probes[0]
            ks, ns = min(2, pen.k_max), _saddle_level(pen)
            slack = abs(float(pen.function(ks, ns)(0.0, x)) - float(c_pen.function(ks, ns)(0.0, x)))
            rep_s = run.timed("saddle", saddle_check, spec, pen, 0.0, x, cfg.trials, cfg.paths, ns, ks, slack, cfg.seed)
            run.write_json("saddle.json", rep_s)
            verdicts["saddle"] = {"pass": rep_s["all_hold"], "value_margin": rep_s["value_margin"]}

    run.write_json("crosscheck.json", {"verdicts": verdicts})
    run.checks = {name: v["pass"] for name, v in verdicts.items()}
    run.finish()
    for name, v in verdicts.items():
        print(f"{'PASS' if v['pass'] else 'FAIL'}  {name}")
    return EXIT_OK if all(v["pass"] for v in verdicts.values()) else EXIT_FAIL


def _on_grid(fam, t: float) -> float:
    pts = fam.tgrid.points
    return float(pts[int(np.argmin(np.abs(pts - t)))])


def cmd_report(args) -> int:
    cfg = resolve(args)
    run = Run("report", cfg)
    spec, probes = run.spec, run.probes
    comments = [cfg.stamp, f"instance={spec.name}"]

    fam = _solve_dp(run, "minmax")
    sg = fam.sgrid
    nodes = sg.nodes
    centre = 0.5 * (spec.box_lo + spec.box_hi)
    line = np.ones(sg.size, dtype=bool)
    for j in range(1, sg.dim):
        axis = sg.axes[j]
        line &= nodes[:, j] == axis[np.argmin(np.abs(axis - centre[j]))]
    cols = ["k", "l"] + [f"x{j + 1}" for j in range(sg.dim)] + ["value"]
    rows = [
        [k, l, *nodes[g], fam.values[k, l, 0, g]]
        for k in range(fam.k_max + 1)
        for l in range(fam.l_max + 1)
        for g in np.nonzero(line)[0]
    ]
    plotting.write_dat(run.path("value_slice_dp.dat"), cols, rows, comments + ["t=0, other coordinates at the box centre"])

    eps_list = [4 * cfg.eps, 2 * cfg.eps, cfg.eps]
    budgets = sorted({int(b) for b in cfg.convergence_budgets})
    xcols = [f"x{j + 1}" for j in range(spec.dim)]
    if len(budgets) >= 3:
        study = run.timed("convergence", convergence_study, spec, budgets, eps_list, probes, cfg.l_max, "minmax", cfg.quad_order)
        rows = [
            [res["eps"], int(k), p, pr["t"], *pr["x"], pr["by_k"][str(k)]]
            for res in study["resolutions"]
            for p, pr in enumerate(res["probes"])
            for k in budgets
        ]
        run.write_json("convergence.json", study)
    else:
        rows = []
    plotting.write_dat(run.path("convergence.dat"), ["eps", "k", "probe", "t", *xcols, "value"], rows, comments)

    pen = _solve_penalized(run)
    rows = [
        [n, k, p, t, *x, float(pen.function(k, n)(t, x))]
        for p, (t, x) in enumerate(probes)
        for n in pen.levels
        for k in range(pen.k_max + 1)
    ]
    plotting.write_dat(run.path("penalty.dat"), ["n", "k", "probe", "t", *xcols, "value"], rows, comments)

    if cfg.paths > 0 and probes:
        ks = min(2, pen.k_max)
        rep = run.timed("saddle", saddle_check, spec, pen, 0.0, probes[0][1], cfg.trials, cfg.paths, _saddle_level(pen), ks, 0.0, cfg.seed)
        rows = [
            [i, 1 if m["side"] == "player1" else 2, m["margin"], m["difference"], m["stderr"]]
            for i, m in enumerate(rep["perturbation_margins"])
        ]
    else:
        rows = []
    plotting.write_dat(run.path("saddle_margins.dat"), ["trial", "side", "margin", "difference", "stderr"], rows, comments)

    if not args.no_plots:
        for png in run.timed("plots", plotting.render_all, run.dir):
            run.files.append(Path(png).name)
    run.finish()
    print(f"wrote {len(run.files)} files to {run.dir}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", help=f"built-in instance ({', '.join(BUILTIN_NAMES)})")
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--eps", type=float, help="time/partition mesh size")
    common.add_argument("--nodes", type=int, nargs="+", help="spatial nodes per axis")
    common.add_argument("--kmax", type=int, help="player 1 budget")
    common.add_argument("--lmax", type=int, help="player 2 budget")
    common.add_argument("--penalty-levels", help="comma-separated penalty levels, e.g. 1,4,16,64")
    common.add_argument("--paths", type=int, help="Monte Carlo paths (0 disables simulation)")
    common.add_argument("--trials", type=int, help="saddle perturbations per side")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--probe", action="append", help="probe point t:x1,x2 (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="impgame", description="Impulse game solvers and checks.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="run the model validators")
    s = sub.add_parser("solve", parents=[common], help="solve and write value tables")
    s.add_argument("--solver", choices=("dp", "qvi", "penalized"), default="dp")
    s.add_argument("--ordering", choices=("minmax", "maxmin", "both"), default="both")
    sub.add_parser("crosscheck", parents=[common], help="compare solvers, playback and saddle check")
    r = sub.add_parser("report", parents=[common], help="write plot-ready column files and figures")
    r.add_argument("--no-plots", action="store_true", help="skip rendering PNGs")
    return p


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "crosscheck": cmd_crosscheck, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ConfigError, UnknownInstanceError) as err:
        print(f"impgame: {err}", file=sys.stderr)
        return EXIT_INPUT
    except SchemeError as err:
        print(f"impgame: qvi_solver: {err}", file=sys.stderr)
        return EXIT_FAIL
    except (ValueError, FloatingPointError) as err:
        print(f"impgame: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
