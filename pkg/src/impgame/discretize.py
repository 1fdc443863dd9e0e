"""Time grids, action partitions, spatial grids and intervention operators.

The intervention operators act on functions of the state.  Player 1's operator
takes the best single intervention net of its cost,

    sup_op v(x) = max_b [ v(x + jump_p1(t, x, b)) - cost_p1(t, x, b) ],

and player 2's operator is the mirror image with a min and ``+ cost_p2``.  Both
are restricted to the representative actions of a finite partition.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np
import scipy.sparse as sp

from .model import ActionSet, ProblemSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- time grid


@dataclass(frozen=True)
class TimeGrid:
    """Dyadic grid ``T * i / 2**level`` with ``2**-level * T <= eps``."""

    horizon: float
    level: int

    @classmethod
    def from_eps(cls, horizon: float, eps: float) -> "TimeGrid":
        if not eps > 0:
            raise ValueError("eps must be positive")
        level = 0
        while horizon * 2.0**-level > eps:
            level += 1
        return cls(float(horizon), level)

    @property
    def n_steps(self) -> int:
        return 2**self.level

    @property
    def step(self) -> float:
        return self.horizon / self.n_steps

    @property
    def points(self) -> np.ndarray:
        return self.horizon * np.arange(self.n_steps + 1) / self.n_steps


def project_time(grid: TimeGrid, s) -> np.ndarray | float:
    """Smallest grid point that is >= s."""
    pts = grid.points
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < -1e-12) or np.any(s_arr > grid.horizon + 1e-12):
        raise ValueError("time outside [0, T]")
    # tolerate rounding so grid points map to themselves
    idx = np.searchsorted(pts, s_arr - 1e-12 * grid.horizon, side="left")
    out = pts[np.clip(idx, 0, grid.n_steps)]
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- partitions


@dataclass(frozen=True)
class Partition:
    """Finite partition of an action box with one representative per cell.

    ``edges`` holds per-axis cell boundaries; cells are products of
    consecutive boundaries.  ``weights`` is the mark measure of each cell.
    """

    actions: ActionSet
    edges: tuple
    reps: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return self.reps.shape[0]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def diameter(self) -> float:
        widths = [np.max(np.diff(e)) for e in self.edges]
        return float(np.sqrt(np.sum(np.square(widths))))

    def index(self, a) -> np.ndarray:
        """Cell index of each action in ``a`` (shape ``(..., p)``)."""
        a = np.asarray(a, dtype=float)
        if a.ndim == 0:
            a = a[None]
        if a.shape[-1] != self.actions.dim:
            a = a[..., None]
        lo, hi = self.actions.lo, self.actions.hi
        tol = 1e-12 * (1.0 + np.abs(hi - lo))
        if np.any(a < lo - tol) or np.any(a > hi + tol):
            raise ValueError("action outside the partitioned set")
        flat = np.zeros(a.shape[:-1], dtype=int)
        for j, e in enumerate(self.edges):
            n = len(e) - 1
            ij = np.clip(np.searchsorted(e, a[..., j], side="right") - 1, 0, n - 1)
            flat = flat * n + ij
        return flat

    def project(self, a) -> np.ndarray:
        return self.reps[self.index(a)]

    def to_dict(self) -> dict:
        return {
            "representatives": self.reps.tolist(),
            "weights": self.weights.tolist(),
            "edges": [e.tolist() for e in self.edges],
            "diameter": self.diameter,
        }


def build_partition(actions: ActionSet, eps: float | None = None, mass: float = 1.0) -> Partition:
    """Partition an action set.

    With listed points the cells are their 1-d Voronoi cells; otherwise the box
    is cut uniformly so every cell has diameter <= eps and the cell centers
    are the representatives.  Mark weights are proportional to cell volume.
    """
    lo, hi = actions.lo, actions.hi
    if actions.points is not None:
        pts = actions.points[:, 0]
        mids = 0.5 * (pts[1:] + pts[:-1])
        edges = (np.concatenate([[lo[0]], mids, [hi[0]]]),)
        reps = actions.points.copy()
    else:
        if eps is None or not eps > 0:
            raise ValueError("a positive eps is needed to partition a continuous action set")
        p = actions.dim
        counts = [max(1, math.ceil((hi[j] - lo[j]) * math.sqrt(p) / eps)) for j in range(p)]
        edges = tuple(np.linspace(lo[j], hi[j], counts[j] + 1) for j in range(p))
        centers = [0.5 * (e[1:] + e[:-1]) for e in edges]
        reps = np.array(list(product(*centers)), dtype=float).reshape(-1, p)
    vols = np.array([np.prod(c) for c in product(*[np.diff(e) for e in edges])])
    total = actions.volume
    if total > 0:
        weights = mass * vols / total
    else:
        weights = np.full(len(vols), mass / len(vols))
    if mass > 0 and np.any(weights <= 0):
        raise ValueError("mark measure must charge every cell")
    return Partition(actions, edges, reps, weights)


# ---------------------------------------------------------------- spatial grid


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform tensor grid on a box, nodes flattened in C order."""

    lo: np.ndarray
    hi: np.ndarray
    counts: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if len(counts) != lo.size or min(counts) < 2:
            raise ValueError("need at least two nodes per axis")
        if lo.size > 3:
            raise ValueError("spatial grids support d <= 3")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def for_spec(cls, spec: ProblemSpec, nodes) -> "SpatialGrid":
        nodes = np.broadcast_to(np.atleast_1d(nodes), (spec.dim,))
        return cls(spec.box_lo, spec.box_hi, tuple(int(n) for n in nodes))

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.asarray(self.counts) - 1)

    @property
    def axes(self) -> list:
        return [np.linspace(self.lo[j], self.hi[j], self.counts[j]) for j in range(self.dim)]

    @property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def same_as(self, other: "SpatialGrid") -> bool:
        return (
            self.counts == other.counts
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def outside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        tol = 1e-9 * (self.hi - self.lo)
        return np.any((x < self.lo - tol) | (x > self.hi + tol), axis=-1)

    @cached_property
    def _layout(self):
        n = np.asarray(self.counts)
        strides = np.cumprod([1] + list(n[::-1][:-1]))[::-1]
        # corner j of the cell: bit a of j set means +1 along axis a (axis 0 slowest)
        offsets = np.array([sum(c * st for c, st in zip(corner, strides)) for corner in product((0, 1), repeat=self.dim)])
        return n - 2, self.spacing, strides, offsets

    def stencil(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Corner node indices and multilinear weights, shapes ``(..., 2**d)``.

        Points outside the box are clipped to it (constant extrapolation).
        """
        x = np.asarray(x, dtype=float)
        top, h, strides, offsets = self._layout
        pos = (np.minimum(np.maximum(x, self.lo), self.hi) - self.lo) / h
        base = np.minimum(pos.astype(np.int64), top)  # pos >= 0, so truncation is floor
        frac = np.minimum(pos - base, 1.0)
        flat = base[..., 0] * strides[0]
        for a in range(1, self.dim):
            flat = flat + base[..., a] * strides[a]
        idx = flat[..., None] + offsets
        wts = np.ones(x.shape[:-1] + (1,))
        for a in range(self.dim):
            f = frac[..., a : a + 1]
            wts = np.stack([wts * (1.0 - f), wts * f], axis=-1).reshape(x.shape[:-1] + (-1,))
        return idx, wts

    def interpolate(self, values, x) -> np.ndarray:
        """Evaluate node values (shape ``(..., G)``) at points ``x``."""
        values = np.asarray(values, dtype=float)
        idx, w = self.stencil(x)
        if values.ndim == 1:
            return np.sum(values[idx] * w, axis=-1)
        return np.sum(values[..., idx] * w, axis=-1)

    def interp_matrix(self, x) -> sp.csr_matrix:
        """Sparse ``(Q, G)`` matrix mapping node values to values at ``x``."""
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        idx, w = self.stencil(x)
        rows = np.repeat(np.arange(x.shape[0]), idx.shape[1])
        mat = sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(x.shape[0], self.size))
        mat.sum_duplicates()
        return mat


@dataclass
class GridFunction:
    """Values on a time grid times a spatial grid.

    Time is interpolated linearly between slices; space multilinearly with
    constant extrapolation outside the box.
    """

    times: np.ndarray
    grid: SpatialGrid
    values: np.ndarray  # (n_times, G)

    def slice_at(self, t: float) -> np.ndarray:
        times = self.times
        if t <= times[0]:
            return self.values[0]
        if t >= times[-1]:
            return self.values[-1]
        i = int(np.searchsorted(times, t, side="right") - 1)
        dt = times[i + 1] - times[i]
        th = (t - times[i]) / dt
        if th <= 1e-12:
            return self.values[i]
        return (1.0 - th) * self.values[i] + th * self.values[i + 1]

    def __call__(self, t: float, x) -> np.ndarray:
        return self.grid.interpolate(self.slice_at(t), x)

    def rows(self):
        nodes = self.grid.nodes
        for i, t in enumerate(self.times):
            for g in range(self.grid.size):
                yield [float(t), *nodes[g].tolist(), float(self.values[i, g])]

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            wr = csv.writer(fh)
            wr.writerow(["t"] + [f"x{j + 1}" for j in range(self.grid.dim)] + ["value"])
            for row in self.rows():
                wr.writerow([repr(v) for v in row])


# ---------------------------------------------------------------- operators


def _player(spec: ProblemSpec, player: int):
    if player == 1:
        return spec.jump_p1, spec.cost_p1
    if player == 2:
        return spec.jump_p2, spec.cost_p2
    raise ValueError("player must be 1 or 2")


def _candidates(spec, part: Partition, player: int, t: float, x: np.ndarray):
    """Jump images and costs for every representative: ``(m, Q, d)``, ``(m, Q)``."""
    jump, cost = _player(spec, player)
    reps = part.reps[:, None, :]
    xs = x[None, :, :]
    images = xs + jump(t, xs, reps)
    costs = np.broadcast_to(cost(t, xs, reps), images.shape[:-1])
    return images, np.asarray(costs, dtype=float)


def apply_supOP(spec: ProblemSpec, part_U: Partition, v, t: float, x):
    """Best single intervention for player 1 at points ``x``.

    ``v`` is a callable on states.  Returns ``(values, argmax)`` where
    ``argmax`` indexes ``part_U.reps``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    images, costs = _candidates(spec, part_U, 1, t, x)
    cand = np.asarray(v(images.reshape(-1, spec.dim))).reshape(costs.shape) - costs
    arg = np.argmax(cand, axis=0)
    return np.take_along_axis(cand, arg[None], 0)[0], arg


def apply_infOP(spec: ProblemSpec, part_A: Partition, v, t: float, x):
    """Cheapest single intervention for player 2; returns ``(values, argmin)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    images, costs = _candidates(spec, part_A, 2, t, x)
    cand = np.asarray(v(images.reshape(-1, spec.dim))).reshape(costs.shape) + costs
    arg = np.argmin(cand, axis=0)
    return np.take_along_axis(cand, arg[None], 0)[0], arg


class InterventionStencil:
    """Intervention operator of one player restricted to grid nodes.

    Precomputes, for each representative action, the sparse interpolation
    matrix of the jump images and the cost vector.  ``apply`` accepts node
    values of shape ``(G,)`` or ``(G, B)``.
    """

    def __init__(self, spec: ProblemSpec, grid: SpatialGrid, part: Partition, player: int, t: float):
        self.player = player
        self.part = part
        nodes = grid.nodes
        images, costs = _candidates(spec, part, player, t, nodes)
        clipped = grid.outside(images.reshape(-1, spec.dim))
        self.n_clipped = int(clipped.sum())
        if self.n_clipped:
            log.warning(
                "player %d: %d jump images outside the box were clipped", player, self.n_clipped
            )
        self.mats = [grid.interp_matrix(images[j]) for j in range(part.size)]
        self.costs = costs
        self.sign = 1.0 if player == 1 else -1.0

    def candidates(self, values: np.ndarray) -> np.ndarray:
        """``(m, G, ...)`` jump values net of cost, before extremization."""
        out = np.stack([m @ values for m in self.mats])
        c = self.costs.reshape(self.costs.shape + (1,) * (values.ndim - 1))
        return out - c if self.player == 1 else out + c

    def apply(self, values: np.ndarray):
        cand = self.candidates(values)
        if self.player == 1:
            arg = np.argmax(cand, axis=0)
        else:
            arg = np.argmin(cand, axis=0)
        return np.take_along_axis(cand, arg[None], 0)[0], arg


@dataclass
class BudgetedResult:
    """Outputs of :func:`budgeted_operators`, arrays indexed ``[k, l, node]``."""

    inf: np.ndarray
    sup: np.ndarray
    minmax: np.ndarray
    maxmin: np.ndarray
    inner_minmax: np.ndarray  # player 2 recursion feeding the minmax composition
    inner_maxmin: np.ndarray  # player 1 recursion feeding the maxmin composition
    arg_minmax_p1: np.ndarray
    arg_minmax_p2: np.ndarray
    arg_maxmin_p1: np.ndarray
    arg_maxmin_p2: np.ndarray


def _inf_chain(w, op: InterventionStencil):
    """Budget recursion ``I[:, l] = min(w[:, l], infOP I[:, l-1])``."""
    out = np.array(w, copy=True)
    arg = np.full(w.shape, -1, dtype=int)
    for l in range(1, w.shape[1]):
        jumped, a = op.apply(out[:, l - 1].T)  # (G, K)
        jumped, a = jumped.T, a.T
        take = jumped < out[:, l]
        out[:, l] = np.where(take, jumped, out[:, l])
        arg[:, l] = a
    return out, arg


def _sup_chain(w, op: InterventionStencil):
    """Budget recursion ``S[k] = max(w[k], supOP S[k-1])``."""
    out = np.array(w, copy=True)
    arg = np.full(w.shape, -1, dtype=int)
    for k in range(1, w.shape[0]):
        jumped, a = op.apply(out[k - 1].T)  # (G, L)
        jumped, a = jumped.T, a.T
        take = jumped > out[k]
        out[k] = np.where(take, jumped, out[k])
        arg[k] = a
    return out, arg


def budgeted_operators(
    w,
    sup_stencil: InterventionStencil,
    inf_stencil: InterventionStencil,
    k_max: int | None = None,
    l_max: int | None = None,
) -> BudgetedResult:
    """Apply the budget-indexed intervention recursions to a family ``w[k, l, node]``.

    Returns player 2's chain ``inf``, player 1's chain ``sup`` and both
    compositions: ``minmax`` (player 1's chain applied to player 2's chain) and
    ``maxmin`` (the reverse).  ``arg_*`` tables hold the extremizing action
    index of the last recursion step, ``-1`` at zero budget.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 3:
        raise ValueError("w must be indexed [k, l, node]")
    if k_max is not None and l_max is not None and w.shape[:2] != (k_max + 1, l_max + 1):
        raise KeyError(f"w has budgets {w.shape[:2]}, expected {(k_max + 1, l_max + 1)}")
    inf, arg_inf = _inf_chain(w, inf_stencil)
    sup, arg_sup = _sup_chain(w, sup_stencil)
    minmax, arg_mm1 = _sup_chain(inf, sup_stencil)
    maxmin, arg_mm2 = _inf_chain(sup, inf_stencil)
    return BudgetedResult(
        inf=inf,
        sup=sup,
        minmax=minmax,
        maxmin=maxmin,
        inner_minmax=inf,
        inner_maxmin=sup,
        arg_minmax_p1=arg_mm1,
        arg_minmax_p2=arg_inf,
        arg_maxmin_p1=arg_sup,
        arg_maxmin_p2=arg_mm2,
    )
