"""Explicit monotone finite differences for the double-obstacle problem.

The generator is discretized with upwind drift and central diffusion on the
spatial grid, with constant extrapolation at the box boundary.  Each backward
step propagates the next slice explicitly and then projects onto the
intervention obstacles, iterating because the obstacles depend on the slice
being computed.

The penalized variant replaces player 2's obstacle by the penalty
``n * sum_e w_e * (v(x + jump) + cost - v(x))^-`` subtracted in the step, and
caps player 1 by reflection at the previous budget's intervention value.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .discretize import GridFunction, InterventionStencil, Partition, SpatialGrid, _candidates
from .dp_solver import GridMismatchError, ValueFamily
from .model import ProblemSpec

log = logging.getLogger(__name__)

VARIANTS = ("minmax", "maxmin", "penalized")


class SchemeError(RuntimeError):
    pass


class FixedPointError(SchemeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


class CFLError(SchemeError):
    pass


@dataclass
class SchemeConfig:
    """Explicit scheme parameters.

    ``dt=None`` picks the largest stable step times ``safety``; an explicit
    ``dt`` is checked against the stability bound before stepping.
    """

    grid: SpatialGrid
    dt: float | None = None
    safety: float = 0.9
    tol: float = 1e-12
    max_iter: int = 500
    variant: str = "minmax"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.safety <= 1:
            raise ValueError("safety must lie in (0, 1]")


@dataclass
class PenaltyConfig:
    levels: tuple = (1, 4, 16, 64)
    k_max: int = 2

    def __post_init__(self):
        levels = tuple(int(n) for n in self.levels)
        if not levels or min(levels) < 1 or list(levels) != sorted(levels):
            raise ValueError("penalty levels must be increasing integers >= 1")
        if self.k_max < 0:
            raise ValueError("k_max must be >= 0")
        self.levels = levels


# ---------------------------------------------------------------- generator


def generator_matrix(spec: ProblemSpec, grid: SpatialGrid, t: float) -> sp.csr_matrix:
    """Sparse discrete generator: upwind drift, central second differences.

    Off-diagonal diffusion uses the seven-point stencil oriented by the sign
    of the cross coefficient, which is monotone when the diffusion matrix is
    diagonally dominant relative to the spacing.
    """
    x = grid.nodes
    G, d = x.shape
    h = grid.spacing
    counts = np.asarray(grid.counts)
    strides = np.cumprod([1] + list(counts[::-1][:-1]))[::-1]
    multi = np.stack(np.unravel_index(np.arange(G), grid.counts), axis=-1)
    a = spec.drift(t, x)
    sig = spec.diffusion(t, x)
    cov = np.einsum("gij,gkj->gik", sig, sig)
    rows, cols, vals = [], [], []

    def shifted(offsets):
        m = np.clip(multi + offsets, 0, counts - 1)
        return np.sum(m * strides, axis=-1)

    def add(col, coef):
        rows.append(np.arange(G))
        cols.append(col)
        vals.append(coef)
        rows.append(np.arange(G))
        cols.append(np.arange(G))
        vals.append(-coef)

    for i in range(d):
        e = np.zeros(d, dtype=int)
        e[i] = 1
        up, dn = shifted(e), shifted(-e)
        add(up, np.maximum(a[:, i], 0.0) / h[i])
        add(dn, np.maximum(-a[:, i], 0.0) / h[i])
        cross = sum(np.abs(cov[:, i, j]) / (h[i] * h[j]) for j in range(d) if j != i)
        diag = cov[:, i, i] / h[i] ** 2 - (cross if d > 1 else 0.0)
        if np.any(diag < -1e-14):
            log.warning("diffusion not diagonally dominant on axis %d; scheme may not be monotone", i)
        add(up, 0.5 * diag)
        add(dn, 0.5 * diag)
    for i, j in combinations(range(d), 2):
        c = cov[:, i, j] / (h[i] * h[j])
        ei = np.zeros(d, dtype=int)
        ej = np.zeros(d, dtype=int)
        ei[i], ej[j] = 1, 1
        pos, neg = np.maximum(c, 0.0), np.maximum(-c, 0.0)
        add(shifted(ei + ej), 0.5 * pos)
        add(shifted(-ei - ej), 0.5 * pos)
        add(shifted(ei - ej), 0.5 * neg)
        add(shifted(-ei + ej), 0.5 * neg)
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(G, G)
    )
    mat.sum_duplicates()
    return mat


def max_rate(mat: sp.csr_matrix) -> float:
    return float(np.max(np.abs(mat.diagonal()))) if mat.shape[0] else 0.0


def _step_count(horizon: float, dt_max: float, dt: float | None, what: str) -> int:
    if dt is not None:
        if dt > dt_max * (1 + 1e-12):
            raise CFLError(f"{what}: dt={dt:.4g} exceeds the stability bound {dt_max:.4g}")
        return max(1, int(np.ceil(horizon / dt - 1e-9)))
    return max(1, int(np.ceil(horizon / dt_max)))


# ---------------------------------------------------------------- penalty


def apply_Kn(spec: ProblemSpec, part_A: Partition, v, t: float, n: float, x) -> np.ndarray:
    """Penalty ``n * sum_e w_e * (v(x + jump_e) + cost_e - v(x))^-`` at points ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    images, costs = _candidates(spec, part_A, 2, t, x)
    jumped = np.asarray(v(images.reshape(-1, spec.dim))).reshape(costs.shape)
    z = jumped + costs - np.asarray(v(x))[None]
    return n * np.sum(part_A.weights[:, None] * np.maximum(-z, 0.0), axis=0)


def _kn_nodes(stencil: InterventionStencil, weights: np.ndarray, values: np.ndarray, n: float) -> np.ndarray:
    cand = stencil.candidates(values)  # (m, G, ...)
    z = cand - values[None]
    w = weights.reshape((-1,) + (1,) * (values.ndim))
    return n * np.sum(w * np.maximum(-z, 0.0), axis=0)


# ---------------------------------------------------------------- solutions


@dataclass
class QviSolution(GridFunction):
    """Grid function with scheme diagnostics."""

    variant: str = "minmax"
    dt: float = 0.0
    crossings: int = 0
    max_iterations: int = 0
    params: dict = field(default_factory=dict)


def _stencils(spec, grid, part_U, part_A, t, cache):
    if cache.get("st") is None or not spec.time_homogeneous:
        cache["st"] = (
            InterventionStencil(spec, grid, part_U, 1, t),
            InterventionStencil(spec, grid, part_A, 2, t),
        )
    return cache["st"]


def _generator(spec, grid, t, cache):
    if cache.get("gen") is None or not spec.time_homogeneous:
        cache["gen"] = generator_matrix(spec, grid, t)
    return cache["gen"]


def solve_qvi(
    spec: ProblemSpec,
    config: SchemeConfig,
    part_U: Partition,
    part_A: Partition,
    obstacles: bool = True,
) -> QviSolution:
    """Backward explicit stepping with per-step obstacle fixed point.

    ``obstacles=False`` drops both projections (the plain linear PDE).
    """
    variant = config.variant
    if variant == "penalized":
        raise ValueError("use solve_penalized for the penalized variant")
    grid = config.grid
    T = spec.horizon
    cache: dict = {}
    gen0 = _generator(spec, grid, 0.0, cache)
    dt_max = config.safety / max(max_rate(gen0), 1e-300)
    n_steps = _step_count(T, dt_max, config.dt, "qvi")
    dt = T / n_steps
    times = T * np.arange(n_steps + 1) / n_steps
    x = grid.nodes
    values = np.empty((n_steps + 1, grid.size))
    values[-1] = spec.terminal(x)
    crossings = 0
    worst_iter = 0
    for i in range(n_steps - 1, -1, -1):
        t = times[i]
        gen = _generator(spec, grid, t, cache)
        if not spec.time_homogeneous and dt * max_rate(gen) > config.safety * (1 + 1e-12):
            raise CFLError(f"stability bound violated at t={t}")
        nxt = values[i + 1]
        w = nxt + dt * (gen @ nxt + spec.running_cost(t, x))
        if not obstacles:
            values[i] = w
            continue
        sup_st, inf_st = _stencils(spec, grid, part_U, part_A, t, cache)
        u = w
        for it in range(1, config.max_iter + 1):
            lower, _ = sup_st.apply(u)
            upper, _ = inf_st.apply(u)
            if variant == "minmax":
                new = np.minimum(np.maximum(w, lower), upper)
            else:
                new = np.maximum(np.minimum(w, upper), lower)
            res = float(np.max(np.abs(new - u)))
            u = new
            if res <= config.tol * (1.0 + float(np.max(np.abs(u)))):
                break
        else:
            raise FixedPointError(f"obstacle iteration did not converge at t={t:.6g}", res)
        worst_iter = max(worst_iter, it)
        lower, _ = sup_st.apply(u)
        upper, _ = inf_st.apply(u)
        crossings += int(np.sum(lower > upper + 1e-9 * (1 + np.abs(upper))))
        values[i] = u
    if crossings:
        log.info("qvi %s: %d obstacle crossings", variant, crossings)
    return QviSolution(
        times,
        grid,
        values,
        variant=variant if obstacles else "free",
        dt=dt,
        crossings=crossings,
        max_iterations=worst_iter,
        params={"nodes": list(grid.counts), "dt": dt, "steps": n_steps, "safety": config.safety},
    )


@dataclass
class PenalizedFamily:
    """Penalized tables ``values[level, k, i, g]`` on a common time grid.

    ``free[level, k, i]`` is the slice before reflection at player 1's
    intervention value, which is what the hitting-time rule compares against.
    """

    spec: ProblemSpec
    grid: SpatialGrid
    times: np.ndarray
    levels: tuple
    values: np.ndarray
    free: np.ndarray
    part_U: Partition
    part_A: Partition
    dt: float
    params: dict = field(default_factory=dict)

    @property
    def k_max(self) -> int:
        return self.values.shape[1] - 1

    @property
    def sgrid(self) -> SpatialGrid:
        return self.grid

    def level_index(self, n: int) -> int:
        try:
            return self.levels.index(int(n))
        except ValueError:
            raise KeyError(f"penalty level {n} not in {self.levels}") from None

    def function(self, k: int, n: int) -> GridFunction:
        return GridFunction(self.times, self.grid, self.values[self.level_index(n), k])

    def to_csv(self, path, k: int, n: int, header_comment: str | None = None) -> None:
        self.function(k, n).to_csv(path, header_comment)


def solve_penalized(
    spec: ProblemSpec,
    config: SchemeConfig,
    pen: PenaltyConfig,
    part_U: Partition,
    part_A: Partition,
) -> PenalizedFamily:
    """Solve the penalized family for all budgets ``0..k_max`` and all levels.

    All levels share one time step, sized for the largest level, so the
    nodewise ordering in the level is preserved exactly.  A requested step
    that is too large is refined automatically.
    """
    grid = config.grid
    T = spec.horizon
    cache: dict = {}
    gen0 = _generator(spec, grid, 0.0, cache)
    mass = float(part_A.weights.sum())
    n_top = max(pen.levels)
    dt_max = config.safety / (max_rate(gen0) + n_top * mass)
    if config.dt is not None and config.dt > dt_max:
        log.warning("penalized: dt=%.4g refined to %.4g for stability at n=%d", config.dt, dt_max, n_top)
        n_steps = _step_count(T, dt_max, None, "penalized")
    else:
        n_steps = _step_count(T, dt_max, config.dt, "penalized")
    dt = T / n_steps
    times = T * np.arange(n_steps + 1) / n_steps
    x = grid.nodes
    N, K = len(pen.levels), pen.k_max + 1
    levels = np.asarray(pen.levels, dtype=float).reshape(N, 1, 1)
    values = np.empty((N, K, n_steps + 1, grid.size))
    free = np.empty((N, K, n_steps, grid.size))
    values[:, :, -1] = spec.terminal(x)
    weights = part_A.weights
    for i in range(n_steps - 1, -1, -1):
        t = times[i]
        gen = _generator(spec, grid, t, cache)
        sup_st, inf_st = _stencils(spec, grid, part_U, part_A, t, cache)
        nxt = values[:, :, i + 1]  # (N, K, G)
        flat = nxt.reshape(N * K, -1).T  # (G, N*K)
        kn = _kn_nodes(inf_st, weights, flat, 1.0).T.reshape(N, K, -1) * levels
        lv = (gen @ flat).T.reshape(N, K, -1)
        step = nxt + dt * (lv + spec.running_cost(t, x) - kn)
        free[:, :, i] = step
        cur = step.copy()
        for k in range(1, K):
            obstacle, _ = sup_st.apply(cur[:, k - 1].T)
            cur[:, k] = np.maximum(cur[:, k], obstacle.T)
        values[:, :, i] = cur
    return PenalizedFamily(
        spec,
        grid,
        times,
        tuple(pen.levels),
        values,
        free,
        part_U,
        part_A,
        dt,
        {"nodes": list(grid.counts), "dt": dt, "steps": n_steps, "levels": list(pen.levels), "k_max": pen.k_max},
    )


# ---------------------------------------------------------------- cross check


def _grid_of(obj):
    return obj.sgrid if hasattr(obj, "sgrid") else obj.grid


def cross_check(
    dp: ValueFamily | None,
    qvi: GridFunction,
    pen_family: PenalizedFamily | None,
    probes,
    tol: float | None = None,
    qvi_other: GridFunction | None = None,
) -> dict:
    """Compare solver outputs at probe points.

    Raises :class:`GridMismatchError` when the spatial grids differ.  With
    ``tol`` given, each row records whether all gaps are within it.
    """
    ref = qvi.grid
    for name, obj in (("dp", dp), ("penalized", pen_family), ("qvi_maxmin", qvi_other)):
        if obj is None:
            continue
        g = _grid_of(obj)
        for field_name, a, b in (
            ("spatial counts", ref.counts, g.counts),
            ("box lower corner", tuple(ref.lo), tuple(g.lo)),
            ("box upper corner", tuple(ref.hi), tuple(g.hi)),
        ):
            if a != b:
                raise GridMismatchError(f"grid mismatch in {field_name} between qvi and {name}: {a} vs {b}")
    rows = []
    for t, xp in probes:
        xp = np.asarray(xp, dtype=float)
        row = {"probe": {"t": float(t), "x": xp.tolist()}, "qvi_minmax": float(qvi(t, xp))}
        if qvi_other is not None:
            row["qvi_maxmin"] = float(qvi_other(t, xp))
        if dp is not None:
            row["dp"] = float(dp.value(dp.k_max, dp.l_max, t, xp))
        if pen_family is not None:
            row["penalized"] = float(pen_family.function(pen_family.k_max, pen_family.levels[-1])(t, xp))
        gaps = {}
        for key in ("dp", "penalized", "qvi_maxmin"):
            if key in row:
                gaps[f"{key}_vs_qvi"] = abs(row[key] - row["qvi_minmax"])
        if "dp" in row and "penalized" in row:
            gaps["dp_vs_penalized"] = abs(row["dp"] - row["penalized"])
        row["gaps"] = gaps
        if tol is not None:
            row["agree"] = all(g <= tol for g in gaps.values())
        rows.append(row)
    out = {"rows": rows, "tol": tol}
    if tol is not None:
        out["agree"] = all(r["agree"] for r in rows)
    return out


def export_family_csv(fam: PenalizedFamily, directory, header_comment: str | None = None) -> list:
    paths = []
    for n in fam.levels:
        for k in range(fam.k_max + 1):
            p = f"{directory}/penalized_k{k}_n{n}.csv"
            fam.to_csv(p, k, n, header_comment)
            paths.append(p)
    return paths
