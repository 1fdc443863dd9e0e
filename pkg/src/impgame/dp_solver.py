"""Backward dynamic programming for the budgeted discrete game.

At each decision time the continuation value (one Euler step of the
uncontrolled diffusion, integrated with a Gauss-Hermite tensor rule) is passed
through the budget-indexed intervention recursions.  Two compositions are
available: ``minmax`` lets player 1's chain act on player 2's chain (the lower
value) and ``maxmin`` is the reverse.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.hermite_e import hermegauss

from .discretize import (
    InterventionStencil,
    Partition,
    SpatialGrid,
    TimeGrid,
    _inf_chain,
    _sup_chain,
    build_partition,
    project_time,
)
from .model import ProblemSpec
from .sde_sim import FeedbackRule

log = logging.getLogger(__name__)

ORDERINGS = ("minmax", "maxmin")


class GridMismatchError(ValueError):
    pass


def tie_tol(v) -> np.ndarray:
    return 1e-9 * (1.0 + np.abs(v))


# ---------------------------------------------------------------- kernel


@dataclass
class TransitionKernel:
    """One-step transition operators, one per time slab.

    ``matrices[i]`` maps node values at ``t_{i+1}`` to expected values from
    each node at ``t_i``; ``running[i]`` is the left-endpoint running cost.
    """

    abscissae: np.ndarray
    weights: np.ndarray
    matrices: list
    running: list

    def expectation(self, i: int, values: np.ndarray) -> np.ndarray:
        return self.matrices[i] @ values


def gauss_hermite(order: int, dim: int):
    """Tensor Gauss-Hermite rule for the standard normal in ``dim`` dimensions."""
    if order < 1:
        raise ValueError("quad_order must be >= 1")
    z, w = hermegauss(order)
    w = w / w.sum()
    grids = np.meshgrid(*([z] * dim), indexing="ij")
    wgrid = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrid], axis=-1), axis=-1)
    return nodes, weights


def build_kernel(spec: ProblemSpec, tgrid: TimeGrid, sgrid: SpatialGrid, quad_order: int = 3) -> TransitionKernel:
    """Gauss-Hermite quadrature of the one-step Euler transition."""
    z, w = gauss_hermite(quad_order, spec.dim)
    x = sgrid.nodes
    dt = tgrid.step
    mats, runs = [], []
    cache = None
    for i in range(tgrid.n_steps):
        if spec.time_homogeneous and cache is not None:
            mats.append(cache[0])
            runs.append(cache[1])
            continue
        t = tgrid.points[i]
        a = spec.drift(t, x)
        sig = spec.diffusion(t, x)
        f = spec.running_cost(t, x)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(sig)) and np.all(np.isfinite(f))):
            raise ValueError(f"non-finite coefficients at t={t}")
        mean = x + a * dt
        mat = None
        for q in range(len(w)):
            pts = mean + np.sqrt(dt) * np.einsum("gij,j->gi", sig, z[q])
            term = sgrid.interp_matrix(pts) * w[q]
            mat = term if mat is None else mat + term
        mat = sp.csr_matrix(mat)
        mats.append(mat)
        runs.append(f * dt)
        cache = (mat, runs[-1])
    return TransitionKernel(z, w, mats, runs)


# ---------------------------------------------------------------- solve


@dataclass
class ValueFamily:
    """Value tables ``values[k, l, i, g]`` with the data needed for extraction.

    ``inner`` holds the recursion fed into the outer operator (player 2's
    chain for ``minmax``, player 1's for ``maxmin``) and ``cont`` the
    continuation values; both are indexed by decision time ``i < n``.
    """

    spec: ProblemSpec
    tgrid: TimeGrid
    sgrid: SpatialGrid
    part_U: Partition
    part_A: Partition
    ordering: str
    values: np.ndarray
    inner: np.ndarray
    cont: np.ndarray
    arg_p1: np.ndarray
    arg_p2: np.ndarray
    crossings: int = 0
    params: dict = field(default_factory=dict)

    @property
    def k_max(self) -> int:
        return self.values.shape[0] - 1

    @property
    def l_max(self) -> int:
        return self.values.shape[1] - 1

    def time_index(self, t: float) -> int:
        pts = self.tgrid.points
        i = int(np.argmin(np.abs(pts - t)))
        if abs(pts[i] - t) > 1e-9 * (1 + abs(t)):
            raise ValueError(f"t={t} is not a grid time")
        return i

    def value(self, k: int, l: int, t: float, x) -> np.ndarray:
        return self.sgrid.interpolate(self.values[k, l, self.time_index(t)], x)

    def to_csv(self, path, header_comment: str | None = None) -> None:
        nodes = self.sgrid.nodes
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            wr = csv.writer(fh)
            wr.writerow(["k", "l", "t"] + [f"x{j + 1}" for j in range(self.sgrid.dim)] + ["value"])
            for k in range(self.k_max + 1):
                for l in range(self.l_max + 1):
                    for i, t in enumerate(self.tgrid.points):
                        for g in range(self.sgrid.size):
                            wr.writerow([k, l, repr(float(t))] + [repr(float(v)) for v in nodes[g]] + [repr(float(self.values[k, l, i, g]))])


def default_partitions(spec: ProblemSpec, eps: float):
    return (
        build_partition(spec.actions_p1, eps),
        build_partition(spec.actions_p2, eps, spec.mark_mass),
    )


def solve(
    spec: ProblemSpec,
    tgrid: TimeGrid,
    sgrid: SpatialGrid,
    k_max: int,
    l_max: int,
    ordering: str = "minmax",
    parts: tuple | None = None,
    quad_order: int = 3,
    kernel: TransitionKernel | None = None,
) -> ValueFamily:
    """Backward induction over decision times for all budgets up to ``(k_max, l_max)``."""
    if ordering not in ORDERINGS:
        raise ValueError(f"ordering must be one of {ORDERINGS}")
    if k_max < 0 or l_max < 0:
        raise ValueError("budgets must be nonnegative")
    part_U, part_A = parts if parts is not None else default_partitions(spec, tgrid.step)
    kernel = kernel or build_kernel(spec, tgrid, sgrid, quad_order)
    n, G = tgrid.n_steps, sgrid.size
    K, L = k_max + 1, l_max + 1
    values = np.empty((K, L, n + 1, G))
    inner = np.empty((K, L, n, G))
    cont = np.empty((K, L, n, G))
    arg1 = np.full((K, L, n, G), -1, dtype=np.int32)
    arg2 = np.full((K, L, n, G), -1, dtype=np.int32)
    values[:, :, n] = spec.terminal(sgrid.nodes)
    stencils = None
    crossings = 0
    for i in range(n - 1, -1, -1):
        t = tgrid.points[i]
        if stencils is None or not spec.time_homogeneous:
            stencils = (
                InterventionStencil(spec, sgrid, part_U, 1, t),
                InterventionStencil(spec, sgrid, part_A, 2, t),
            )
        sup_st, inf_st = stencils
        nxt = values[:, :, i + 1].reshape(K * L, G)
        w = (kernel.expectation(i, nxt.T).T + kernel.running[i]).reshape(K, L, G)
        cont[:, :, i] = w
        if ordering == "minmax":
            inn, a2 = _inf_chain(w, inf_st)
            out, a1 = _sup_chain(inn, sup_st)
        else:
            inn, a1 = _sup_chain(w, sup_st)
            out, a2 = _inf_chain(inn, inf_st)
        inner[:, :, i] = inn
        values[:, :, i] = out
        arg1[:, :, i] = a1
        arg2[:, :, i] = a2
        if K > 1 and L > 1:
            lower, _ = sup_st.apply(out[K - 2, L - 1])
            upper, _ = inf_st.apply(out[K - 1, L - 2])
            crossings += int(np.sum(lower > upper + tie_tol(upper)))
    if crossings:
        log.info("%s solve: %d obstacle crossings at the top budget", ordering, crossings)
    return ValueFamily(
        spec,
        tgrid,
        sgrid,
        part_U,
        part_A,
        ordering,
        values,
        inner,
        cont,
        arg1,
        arg2,
        crossings,
        {"k_max": k_max, "l_max": l_max, "quad_order": quad_order, "nodes": list(sgrid.counts), "level": tgrid.level},
    )


def check_same_grid(a, b, what=("a", "b")) -> None:
    """Raise :class:`GridMismatchError` naming the first differing field."""
    ga, gb = a.sgrid, b.sgrid
    for name, va, vb in (
        ("spatial counts", ga.counts, gb.counts),
        ("box lower corner", tuple(ga.lo), tuple(gb.lo)),
        ("box upper corner", tuple(ga.hi), tuple(gb.hi)),
    ):
        if va != vb:
            raise GridMismatchError(f"grid mismatch in {name}: {what[0]}={va} vs {what[1]}={vb}")


def order_gap(fam_minmax: ValueFamily, fam_maxmin: ValueFamily, tol: float = 1e-10) -> dict:
    """Per-budget ordering violation and sup-norm gap between the two orderings."""
    check_same_grid(fam_minmax, fam_maxmin, ("minmax", "maxmin"))
    if fam_minmax.tgrid != fam_maxmin.tgrid:
        raise GridMismatchError(f"grid mismatch in time grid: {fam_minmax.tgrid} vs {fam_maxmin.tgrid}")
    if fam_minmax.values.shape != fam_maxmin.values.shape:
        raise GridMismatchError("grid mismatch in budgets")
    diff = fam_minmax.values - fam_maxmin.values
    rows = []
    for k in range(diff.shape[0]):
        for l in range(diff.shape[1]):
            dk = diff[k, l]
            rows.append(
                {
                    "k": k,
                    "l": l,
                    "violation": float(np.max(np.maximum(dk, 0.0))),
                    "sup_gap": float(np.max(np.abs(dk))),
                }
            )
    worst = max(r["violation"] for r in rows)
    return {"rows": rows, "max_violation": worst, "ordered": worst <= tol, "tol": tol}


# ---------------------------------------------------------------- strategies


class FeedbackStrategy(FeedbackRule):
    """Feedback rule read off a value family.

    The rule compares, at the current state and remaining budgets, the best
    intervention against the value of not intervening; it acts only when the
    intervention is strictly better by more than the tie tolerance.
    """

    def __init__(self, fam: ValueFamily, player: int):
        if player not in (1, 2):
            raise ValueError("player must be 1 or 2")
        self.fam = fam
        self.player = player
        self.budget = fam.k_max if player == 1 else fam.l_max
        self.part = fam.part_U if player == 1 else fam.part_A
        self.actions = self.part.reps
        self.decision_times = fam.tgrid.points[:-1].copy()
        self.phase_order = (1, 2) if fam.ordering == "minmax" else (2, 1)
        self._jump = fam.spec.jump_p1 if player == 1 else fam.spec.jump_p2
        self._cost = fam.spec.cost_p1 if player == 1 else fam.spec.cost_p2

    def _tables(self, k: int, l: int, i: int):
        """(table after acting, table for not acting) at budgets (k, l)."""
        f = self.fam
        if f.ordering == "minmax":
            if self.player == 1:
                return f.values[k - 1, l, i], f.inner[k, l, i]
            return f.inner[k, l - 1, i], f.cont[k, l, i]
        if self.player == 2:
            return f.values[k, l - 1, i], f.inner[k, l, i]
        return f.inner[k - 1, l, i], f.cont[k, l, i]

    def _evaluate(self, t, x, after, stay):
        """Best intervention value and index at points ``x``, and the stay value."""
        sg = self.fam.sgrid
        reps = self.actions[:, None, :]
        xs = x[None]
        images = xs + self._jump(t, xs, reps)
        costs = np.broadcast_to(self._cost(t, xs, reps), images.shape[:-1])
        vals = sg.interpolate(after, images)
        if self.player == 1:
            cand = vals - costs
            j = np.argmax(cand, axis=0)
        else:
            cand = vals + costs
            j = np.argmin(cand, axis=0)
        best = np.take_along_axis(cand, j[None], 0)[0]
        return best, j, sg.interpolate(stay, x)

    def decide(self, t, x, own_used, opp_used):
        f = self.fam
        i = f.time_index(t)
        out = np.full(len(x), -1, dtype=int)
        if i >= f.tgrid.n_steps:
            return out
        own_left = self.budget - np.asarray(own_used)
        opp_max = f.l_max if self.player == 1 else f.k_max
        opp_left = np.clip(opp_max - np.asarray(opp_used), 0, opp_max)
        if self.player == 1:
            kk, ll = own_left, opp_left
        else:
            kk, ll = opp_left, own_left
        live = own_left > 0
        for k, l in set(zip(kk[live].tolist(), ll[live].tolist())):
            sel = live & (kk == k) & (ll == l)
            after, stay = self._tables(k, l, i)
            best, j, stay_v = self._evaluate(t, x[sel], after, stay)
            if self.player == 1:
                act = best > stay_v + tie_tol(stay_v)
            else:
                act = best < stay_v - tie_tol(stay_v)
            out[np.nonzero(sel)[0][act]] = j[act]
        return out

    def node_table(self, i: int, k: int, l: int) -> np.ndarray:
        """Action index per spatial node at time index ``i`` and budgets (k, l)."""
        own = k if self.player == 1 else l
        if own == 0 or i >= self.fam.tgrid.n_steps:
            return np.full(self.fam.sgrid.size, -1, dtype=int)
        used = np.full(self.fam.sgrid.size, self.budget - own)
        opp = np.full(self.fam.sgrid.size, (self.fam.l_max - l) if self.player == 1 else (self.fam.k_max - k))
        return self.decide(self.fam.tgrid.points[i], self.fam.sgrid.nodes, used, opp)

    def to_dict(self) -> dict:
        f = self.fam
        tables = {}
        for i in range(f.tgrid.n_steps):
            for k in range(f.k_max + 1):
                for l in range(f.l_max + 1):
                    tab = self.node_table(i, k, l)
                    if np.any(tab >= 0):
                        tables[f"{i}:{k}:{l}"] = {str(g): int(a) for g, a in enumerate(tab) if a >= 0}
        return {
            "player": self.player,
            "ordering": f.ordering,
            "times": f.tgrid.points[:-1].tolist(),
            "actions": self.actions.tolist(),
            "tables": tables,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def extract(fam: ValueFamily, player: int) -> FeedbackStrategy:
    return FeedbackStrategy(fam, player)


# ---------------------------------------------------------------- studies


def _nodes_for(spec: ProblemSpec, eps: float, cap: int = 201):
    width = spec.box_hi - spec.box_lo
    return tuple(int(min(cap, max(3, round(w / eps) + 1))) for w in width)


def convergence_study(
    spec: ProblemSpec,
    budgets,
    epsilons,
    probes,
    l_fixed: int | None = None,
    ordering: str = "minmax",
    quad_order: int = 3,
    base_paths: int = 0,
    rng_seed: int = 0,
    nodes_for=None,
) -> dict:
    """Tabulate probe values across resolutions and budgets (report only).

    ``budgets`` lists values of ``k`` (with ``l = l_fixed``, default the
    largest budget).  For each ``eps`` the spatial spacing is about ``eps``
    unless ``nodes_for(eps)`` says otherwise.  The increments in ``k`` at the
    finest resolution are fitted by ``log(increment) ~ slope * log(k)``.
    """
    budgets = sorted(int(k) for k in budgets)
    epsilons = sorted(epsilons, reverse=True)
    if len(budgets) < 3 or len(epsilons) < 3:
        raise ValueError("need at least three budgets and three resolutions")
    l_fixed = max(budgets) if l_fixed is None else l_fixed
    nodes_for = nodes_for or (lambda e: _nodes_for(spec, e))
    probes = [(float(t), np.asarray(x, dtype=float)) for t, x in probes]
    k_top = max(budgets)
    by_eps = []
    fams = []
    for eps in epsilons:
        tg = TimeGrid.from_eps(spec.horizon, eps)
        sg = SpatialGrid.for_spec(spec, nodes_for(eps))
        fam = solve(spec, tg, sg, k_top, l_fixed, ordering, default_partitions(spec, eps), quad_order)
        fams.append(fam)
        row = {"eps": eps, "level": tg.level, "nodes": list(sg.counts), "probes": []}
        for t, x in probes:
            ti = fam.time_index(project_time(tg, t))
            row["probes"].append(
                {
                    "t": t,
                    "x": x.tolist(),
                    "by_k": {str(k): float(sg.interpolate(fam.values[k, l_fixed, ti], x)) for k in budgets},
                }
            )
        by_eps.append(row)
    # Cauchy differences between successive resolutions at the top budget
    cauchy = []
    for a, b in zip(by_eps[:-1], by_eps[1:]):
        d = [abs(pa["by_k"][str(k_top)] - pb["by_k"][str(k_top)]) for pa, pb in zip(a["probes"], b["probes"])]
        cauchy.append({"eps": [a["eps"], b["eps"]], "max_diff": max(d) if d else 0.0})
    finest = by_eps[-1]
    fits = []
    for pr in finest["probes"]:
        vals = [pr["by_k"][str(k)] for k in budgets]
        inc = np.diff(vals)
        ks = np.asarray(budgets[1:], dtype=float)
        pos = inc > 1e-14
        slope = float(np.polyfit(np.log(ks[pos]), np.log(inc[pos]), 1)[0]) if pos.sum() >= 2 else None
        fits.append(
            {
                "t": pr["t"],
                "x": pr["x"],
                "increments": inc.tolist(),
                "nonnegative": bool(np.all(inc >= -1e-12)),
                "nonincreasing": bool(np.all(np.diff(inc) <= 1e-12)),
                "log_slope": slope,
            }
        )
    report = {
        "instance": spec.name,
        "ordering": ordering,
        "budgets": budgets,
        "l_fixed": l_fixed,
        "resolutions": by_eps,
        "cauchy": cauchy,
        "k_increments": fits,
    }
    if base_paths > 0:
        from .sde_sim import evaluate_J

        report["impulse_free_mc"] = [
            evaluate_J(spec, t, x, None, None, base_paths, 2 ** fams[-1].tgrid.level, rng_seed).to_dict() for t, x in probes
        ]
    return report

