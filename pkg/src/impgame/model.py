"""Game data: coefficient functions, action sets and the built-in instances.

All coefficient callables are vectorized and broadcast over leading axes:

* ``drift(t, x) -> (..., d)``, ``diffusion(t, x) -> (..., d, d)``
* ``running_cost(t, x) -> (...)``, ``terminal(x) -> (...)``
* ``jump_p1(t, x, b) -> (..., d)``, ``cost_p1(t, x, b) -> (...)`` and the
  same for player 2 with marks ``e``.

Here ``t`` is a scalar or an array of shape ``(...)``, ``x`` has shape
``(..., d)`` and actions have shape ``(..., p)``.  Player 1 maximizes, player 2
minimizes.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

BUILTIN_NAMES = ("contraction-game", "no-op-game", "drift-duel-1d")


class UnknownInstanceError(KeyError):
    pass


@dataclass(frozen=True)
class ActionSet:
    """Compact box of admissible actions, optionally with listed representatives.

    ``points`` (shape ``(m, p)``) replaces the uniform partition of the box by
    the Voronoi cells of the listed points; only one-dimensional action sets
    support this.
    """

    lo: np.ndarray
    hi: np.ndarray
    points: np.ndarray | None = None

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("action set needs lo <= hi with matching shapes")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if self.points is not None:
            pts = np.asarray(self.points, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
            if pts.shape[1] != lo.size:
                raise ValueError("representative points have the wrong dimension")
            if pts.shape[1] > 1:
                raise ValueError("listed representatives are only supported for 1-d action sets")
            if np.any(pts < lo - 1e-12) or np.any(pts > hi + 1e-12):
                raise ValueError("representative point outside the action set")
            object.__setattr__(self, "points", np.sort(pts, axis=0))

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))

    def with_points(self, points) -> "ActionSet":
        return ActionSet(self.lo, self.hi, points)


@dataclass(frozen=True)
class ProblemSpec:
    """A finite-horizon zero-sum game of impulse control.

    The mark measure on player 2's action set is ``mark_mass`` times the
    normalized Lebesgue measure on the box; ``delta`` is the intervention cost
    floor, ``rho`` the polynomial growth exponent, ``k_jump`` the constant in
    the jump growth bound and ``lip_gamma``/``lip_a_sigma``/``c_growth`` the
    declared Lipschitz and growth constants.  ``box_lo``/``box_hi`` bound the
    region on which assumptions are sampled and grids are built.
    """

    name: str
    horizon: float
    dim: int
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal: Callable
    jump_p1: Callable
    jump_p2: Callable
    cost_p1: Callable
    cost_p2: Callable
    actions_p1: ActionSet
    actions_p2: ActionSet
    box_lo: np.ndarray
    box_hi: np.ndarray
    mark_mass: float = 1.0
    delta: float = 0.1
    rho: float = 2.0
    k_jump: float = 1.0
    lip_gamma: float = 1.0
    lip_a_sigma: float = 1.0
    c_growth: float = 1.0
    time_homogeneous: bool = True
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not self.delta > 0:
            raise ValueError("cost floor delta must be positive")
        if self.rho < 1:
            raise ValueError("growth exponent rho must be >= 1")
        if self.mark_mass < 0:
            raise ValueError("mark measure must be nonnegative")
        lo = np.atleast_1d(np.asarray(self.box_lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.box_hi, dtype=float))
        if lo.size != self.dim or hi.size != self.dim or np.any(hi <= lo):
            raise ValueError("box must be a nondegenerate d-dimensional box")
        object.__setattr__(self, "box_lo", lo)
        object.__setattr__(self, "box_hi", hi)

    def with_actions(self, p1=None, p2=None) -> "ProblemSpec":
        """Copy with listed representative actions for either player."""
        a1 = self.actions_p1 if p1 is None else self.actions_p1.with_points(p1)
        a2 = self.actions_p2 if p2 is None else self.actions_p2.with_points(p2)
        return replace(self, actions_p1=a1, actions_p2=a2)

    def evolve(self, **changes) -> "ProblemSpec":
        return replace(self, **changes)


def _first(b):
    return np.asarray(b, dtype=float)[..., 0]


def _const_diffusion(scale: float, d: int):
    eye = scale * np.eye(d)

    def diffusion(t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eye, x.shape[:-1] + (d, d))

    return diffusion


def _zero_drift(t, x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _contraction_game() -> ProblemSpec:
    delta = 0.1

    def running_cost(t, x):
        return x[..., 0] ** 2 - x[..., 1] ** 2

    def terminal(x):
        return np.sum(np.asarray(x) ** 2, axis=-1)

    def jump_p1(t, x, b):
        s = (_first(b) - 1.0) * x[..., 0]
        return np.stack([s, np.zeros_like(s)], axis=-1)

    def jump_p2(t, x, e):
        s = (_first(e) - 1.0) * x[..., 1]
        return np.stack([np.zeros_like(s), s], axis=-1)

    def cost_p1(t, x, b):
        return delta + (1.0 - _first(b) ** 2) * x[..., 0] ** 2

    def cost_p2(t, x, e):
        return delta + (1.0 - _first(e) ** 2) * x[..., 1] ** 2

    return ProblemSpec(
        name="contraction-game",
        horizon=1.0,
        dim=2,
        drift=_zero_drift,
        diffusion=_const_diffusion(0.2, 2),
        running_cost=running_cost,
        terminal=terminal,
        jump_p1=jump_p1,
        jump_p2=jump_p2,
        cost_p1=cost_p1,
        cost_p2=cost_p2,
        actions_p1=ActionSet([-1.0], [1.0]),
        actions_p2=ActionSet([-1.0], [1.0]),
        box_lo=np.array([-2.5, -2.5]),
        box_hi=np.array([2.5, 2.5]),
        mark_mass=1.0,
        delta=delta,
        rho=2.0,
        k_jump=1.0,
        lip_gamma=2.0,
        lip_a_sigma=0.0,
        c_growth=1.0,
    )


def _no_op_game() -> ProblemSpec:
    delta = 0.1

    def zero_jump(t, x, a):
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], np.shape(a)[:-1])
        return np.zeros(shape + (x.shape[-1],))

    def flat_cost(t, x, a):
        x = np.asarray(x, dtype=float)
        return np.full(np.broadcast_shapes(x.shape[:-1], np.shape(a)[:-1]), delta)

    return ProblemSpec(
        name="no-op-game",
        horizon=1.0,
        dim=1,
        drift=_zero_drift,
        diffusion=_const_diffusion(0.3, 1),
        running_cost=lambda t, x: x[..., 0],
        terminal=lambda x: np.asarray(x)[..., 0] ** 2,
        jump_p1=zero_jump,
        jump_p2=zero_jump,
        cost_p1=flat_cost,
        cost_p2=flat_cost,
        actions_p1=ActionSet([-1.0], [1.0]),
        actions_p2=ActionSet([-1.0], [1.0]),
        box_lo=np.array([-3.0]),
        box_hi=np.array([3.0]),
        mark_mass=1.0,
        delta=delta,
        rho=2.0,
        k_jump=1.0,
        lip_gamma=0.0,
        lip_a_sigma=0.0,
        c_growth=1.0,
    )


def _drift_duel_1d() -> ProblemSpec:
    # Player 1 collects the running reward x and can rescale x <- b x; player
    # 2 can rescale x <- e x.  Flat costs keep the jumps commuting.
    cost1, cost2 = 0.1, 0.15

    def scale_jump(t, x, a):
        return (_first(a) - 1.0)[..., None] * np.asarray(x, dtype=float)

    def flat(c):
        def cost(t, x, a):
            x = np.asarray(x, dtype=float)
            return np.full(np.broadcast_shapes(x.shape[:-1], np.shape(a)[:-1]), c)

        return cost

    return ProblemSpec(
        name="drift-duel-1d",
        horizon=1.0,
        dim=1,
        drift=_zero_drift,
        diffusion=_const_diffusion(0.5, 1),
        running_cost=lambda t, x: x[..., 0],
        terminal=lambda x: np.zeros(np.shape(x)[:-1]),
        jump_p1=scale_jump,
        jump_p2=scale_jump,
        cost_p1=flat(cost1),
        cost_p2=flat(cost2),
        actions_p1=ActionSet([-1.0], [1.0]),
        actions_p2=ActionSet([-1.0], [1.0]),
        box_lo=np.array([-3.0]),
        box_hi=np.array([3.0]),
        mark_mass=1.0,
        delta=min(cost1, cost2),
        rho=1.0,
        k_jump=1.0,
        lip_gamma=2.0,
        lip_a_sigma=0.0,
        c_growth=1.0,
        params={"cost_p1": cost1, "cost_p2": cost2},
    )


_BUILDERS = {
    "contraction-game": _contraction_game,
    "no-op-game": _no_op_game,
    "drift-duel-1d": _drift_duel_1d,
}


def builtin_instance(name: str) -> ProblemSpec:
    """Return one of the built-in games by name."""
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise UnknownInstanceError(
            f"unknown instance {name!r}; choose from {', '.join(BUILTIN_NAMES)}"
        ) from None


def as_time(t, x) -> np.ndarray:
    """Broadcast a scalar or per-point time to the leading shape of ``x``."""
    x = np.asarray(x)
    return np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
