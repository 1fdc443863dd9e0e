"""Euler-Maruyama simulation of the impulse-controlled SDE and payoff estimation.

One vectorized engine serves every use: open-loop impulse lists, feedback rules
evaluated at decision times, and (through :mod:`impgame.randomized`) Poisson
driven interventions of player 2.  Randomness is counter based and keyed by
path index, so a path is reproduced exactly whatever the batch it runs in.

Within a base mesh cell every event (impulse or Poisson atom) splits the
Euler step; the Brownian value at the event time is drawn from the bridge
between the cell endpoints.  Running cost uses the left-endpoint rule and
intervention costs the pre-jump state.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as crng
from .model import ProblemSpec

log = logging.getLogger(__name__)

CHUNK = 8192
_RANK_SLOTS = 1 << 16  # bridge counter slots per cell
KIND_P1, KIND_P2, KIND_POISSON = 1, 2, 3


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------- controls


@dataclass(frozen=True)
class ImpulseControl:
    """Timed actions of one player; ``owner`` is 1 or 2."""

    times: np.ndarray
    actions: np.ndarray
    owner: int
    start: float = 0.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        actions = np.asarray(self.actions, dtype=float)
        if actions.ndim == 1:
            actions = actions.reshape(len(times), -1) if len(times) else actions.reshape(0, 1)
        if len(actions) != len(times):
            raise ValueError("need one action per intervention time")
        if np.any(np.diff(times) < 0):
            raise ValueError("intervention times must be nondecreasing")
        if len(times) and times[0] < self.start:
            raise ValueError("intervention before the start time")
        if self.owner not in (1, 2):
            raise ValueError("owner must be 1 or 2")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "actions", actions)

    @classmethod
    def empty(cls, owner: int, start: float = 0.0, action_dim: int = 1) -> "ImpulseControl":
        return cls(np.zeros(0), np.zeros((0, action_dim)), owner, start)

    def __len__(self) -> int:
        return len(self.times)

    def truncate(self, k: int) -> "ImpulseControl":
        """The first ``k`` interventions."""
        return ImpulseControl(self.times[:k], self.actions[:k], self.owner, self.start)


@dataclass(frozen=True)
class CoupledControl:
    """Both players' interventions merged in time.

    ``p1_flags[j]`` is 1 when intervention ``j`` belongs to player 1.
    """

    times: np.ndarray
    p1_flags: np.ndarray
    actions: tuple
    start: float = 0.0

    def __len__(self) -> int:
        return len(self.times)


def couple(u: ImpulseControl, alpha: ImpulseControl) -> CoupledControl:
    """Merge two controls by time; player 1 goes first at equal times."""
    if u.start != alpha.start:
        raise ValueError("controls must share a start time")
    times, flags, acts = [], [], []
    i = j = 0
    while i < len(u) or j < len(alpha):
        take_u = j >= len(alpha) or (i < len(u) and u.times[i] <= alpha.times[j])
        if take_u:
            times.append(u.times[i]), flags.append(1), acts.append(u.actions[i])
            i += 1
        else:
            times.append(alpha.times[j]), flags.append(0), acts.append(alpha.actions[j])
            j += 1
    return CoupledControl(np.asarray(times, dtype=float), np.asarray(flags, dtype=int), tuple(acts), u.start)


# ---------------------------------------------------------------- results


@dataclass
class PathSample:
    """One simulated trajectory.

    ``times``/``states`` list every sub-step point; at an intervention the
    pre-jump state and the post-jump state both appear at the same time.
    """

    times: np.ndarray
    states: np.ndarray
    brownian: np.ndarray  # increments per base mesh cell
    impulses: list
    running_cost: float
    p1_cost: float
    p2_cost: float
    p1_cost_path: np.ndarray
    p2_cost_path: np.ndarray
    payoff: float


@dataclass
class McEstimate:
    mean: float
    stderr: float
    paths: int
    seed: int
    ess: float | None = None
    warnings: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "paths": self.paths,
            "seed": self.seed,
            "ess": self.ess,
            "warnings": list(self.warnings),
            **({"details": self.details} if self.details else {}),
        }


def mc_estimate(samples, seed: int, weights=None) -> McEstimate:
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    if weights is None:
        sd = samples.std(ddof=1) if n > 1 and np.ptp(samples) > 0 else 0.0
        return McEstimate(float(samples.mean()), float(sd / np.sqrt(n)), n, seed)
    z = samples * weights
    sd = z.std(ddof=1) if n > 1 else 0.0
    wsum = weights.sum()
    ess = float(wsum**2 / np.sum(weights**2)) if wsum > 0 else 0.0
    est = McEstimate(float(z.mean()), float(sd / np.sqrt(n)), n, seed, ess)
    if ess < 0.01 * n:
        est.warnings.append(f"weight degeneracy: effective sample size {ess:.1f} of {n}")
        log.warning(est.warnings[-1])
    return est


# ---------------------------------------------------------------- feedback rules


class FeedbackRule:
    """Maps (decision time, state, budgets used) to an optional action.

    Subclasses implement :meth:`decide`, returning an action index per path
    (``-1`` for no action) into ``self.actions``.
    """

    player: int = 1
    budget: int = 0
    actions: np.ndarray = np.zeros((1, 1))
    decision_times: np.ndarray = np.zeros(0)

    def acts_at(self, t: float) -> bool:
        dt = self.decision_times
        return bool(len(dt)) and bool(np.any(np.abs(dt - t) <= 1e-12 * (1 + abs(t))))

    def decide(self, t: float, x: np.ndarray, own_used: np.ndarray, opp_used: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class NeverAct(FeedbackRule):
    def __init__(self, player: int, action_dim: int = 1):
        self.player = player
        self.budget = 0
        self.actions = np.zeros((1, action_dim))
        self.decision_times = np.zeros(0)

    def decide(self, t, x, own_used, opp_used):
        return np.full(len(x), -1, dtype=int)


# ---------------------------------------------------------------- engine


@dataclass
class _Events:
    time: np.ndarray  # (B, E), +inf padding
    kind: np.ndarray  # (B, E), 0 padding
    act: np.ndarray  # (B, E, p)
    mark: np.ndarray  # (B, E), index into the mark partition or -1


def _open_loop_events(coupled: CoupledControl | None, B: int, p: int) -> _Events:
    if coupled is None or len(coupled) == 0:
        return _Events(np.full((B, 0), np.inf), np.zeros((B, 0), int), np.zeros((B, 0, p)), np.zeros((B, 0), int))
    L = len(coupled)
    act = np.zeros((L, p))
    for j, a in enumerate(coupled.actions):
        a = np.atleast_1d(a)
        act[j, : a.size] = a
    kind = np.where(coupled.p1_flags == 1, KIND_P1, KIND_P2)
    return _Events(
        np.broadcast_to(coupled.times, (B, L)).copy(),
        np.broadcast_to(kind, (B, L)).copy(),
        np.broadcast_to(act, (B, L, p)).copy(),
        np.full((B, L), -1, dtype=int),
    )


def _merge(a: _Events, b: _Events) -> _Events:
    time = np.concatenate([a.time, b.time], axis=1)
    kind = np.concatenate([a.kind, b.kind], axis=1)
    act = np.concatenate([a.act, b.act], axis=1)
    mark = np.concatenate([a.mark, b.mark], axis=1)
    order = np.lexsort((np.where(kind == 0, 9, kind), time), axis=-1)
    take = lambda arr: np.take_along_axis(arr, order, axis=1)
    return _Events(take(time), take(kind), np.take_along_axis(act, order[..., None], axis=1), take(mark))


@dataclass
class PoissonDrive:
    """Poisson atoms driving player 2 in the randomized game.

    ``times``/``marks`` are ``(B, E)`` padded arrays (``inf``/``-1``).  With
    ``method="importance"`` every atom is a jump and the path carries the
    weight ``kappa``; with ``method="thinning"`` atoms are candidates from a
    process with ``bound`` times the base intensity, accepted with
    probability ``density / bound`` using ``accept_u``, the density being
    read at the candidate's pre-jump state.
    """

    times: np.ndarray
    marks: np.ndarray
    reps: np.ndarray
    weights: np.ndarray
    density: object
    method: str = "importance"
    bound: float = 1.0
    accept_u: np.ndarray | None = None


@dataclass
class _Out:
    payoff: np.ndarray
    running: np.ndarray
    p1_cost: np.ndarray
    p2_cost: np.ndarray
    final: np.ndarray
    log_kappa: np.ndarray
    n_p1: np.ndarray
    n_p2: np.ndarray
    sup_norm: np.ndarray
    trace: dict | None = None


def _diffusion_step(sig: np.ndarray, dw: np.ndarray) -> np.ndarray:
    # explicit loop keeps the summation order fixed
    out = sig[..., :, 0] * dw[..., 0:1]
    for j in range(1, dw.shape[-1]):
        out = out + sig[..., :, j] * dw[..., j : j + 1]
    return out


def _run(
    spec: ProblemSpec,
    t0: float,
    x0,
    path_ids: np.ndarray,
    mesh: int,
    seed: int,
    coupled: CoupledControl | None = None,
    rules: tuple = (None, None),
    phase_order: tuple = (1, 2),
    poisson: PoissonDrive | None = None,
    negate: bool = False,
    record: bool = False,
) -> _Out:
    B, d = len(path_ids), spec.dim
    T = spec.horizon
    if mesh < 1:
        raise ValueError("mesh must be >= 1")
    if not t0 <= T:
        raise ValueError("start time beyond the horizon")
    p = max(spec.actions_p1.dim, spec.actions_p2.dim)
    p1d, p2d = spec.actions_p1.dim, spec.actions_p2.dim
    grid = t0 + (T - t0) * np.arange(mesh + 1) / mesh
    sign = -1.0 if negate else 1.0

    ev = _open_loop_events(coupled, B, p)
    if coupled is not None and len(coupled) and (coupled.times[0] < t0 - 1e-12):
        raise ValueError("impulse before the start time")
    if poisson is not None:
        pm = poisson.marks
        pev = _Events(
            poisson.times,
            np.where(pm >= 0, KIND_POISSON, 0),
            np.zeros(pm.shape + (p,)),
            pm,
        )
        valid = pm >= 0
        pev.act[valid, :p2d] = poisson.reps[pm[valid]]
        ev = _merge(ev, pev)
    # events at or after T never happen
    ev.kind = np.where(ev.time < T, ev.kind, 0)
    ev.time = np.where(ev.kind > 0, ev.time, np.inf)
    cell = np.clip(np.searchsorted(grid, ev.time, side="right") - 1, 0, mesh)
    cell = np.where(ev.kind > 0, cell, mesh)  # padding lands in a phantom cell
    E = ev.time.shape[1]
    accept_counter = np.zeros(B, dtype=int)

    x = np.broadcast_to(np.asarray(x0, dtype=float).reshape(d), (B, d)).copy()
    running = np.zeros(B)
    lam = np.zeros(B)
    theta = np.zeros(B)
    log_kappa = np.zeros(B)
    n_p1 = np.zeros(B, dtype=int)
    n_p2 = np.zeros(B, dtype=int)
    sup_norm = np.linalg.norm(x, axis=1)
    ptr = np.zeros(B, dtype=int)
    rows = np.arange(B)
    trace = {"t": [], "x": [], "lam": [], "theta": [], "mask": [], "dw": [], "imp": []} if record else None
    lam_mass = float(poisson.weights.sum()) if poisson is not None else 0.0

    def snap(t, mask):
        if record:
            trace["t"].append(np.broadcast_to(np.asarray(t, dtype=float), (B,)).copy())
            trace["x"].append(x.copy())
            trace["lam"].append(lam.copy())
            trace["theta"].append(theta.copy())
            trace["mask"].append(np.broadcast_to(mask, (B,)).copy())

    def check_finite(where):
        if not np.all(np.isfinite(x)):
            i = int(np.argmax(~np.all(np.isfinite(x), axis=1)))
            raise SimulationError(
                f"non-finite state on path {int(path_ids[i])} at {where}; growth assumptions likely violated"
            )

    def jump(player, t, mask, act):
        nonlocal x, lam, theta
        tt = np.full(B, t) if np.ndim(t) == 0 else t
        if player == 1:
            dx = spec.jump_p1(tt, x, act[:, :p1d])
            c = spec.cost_p1(tt, x, act[:, :p1d])
            lam = np.where(mask, lam + c, lam)
        else:
            dx = spec.jump_p2(tt, x, act[:, :p2d])
            c = spec.cost_p2(tt, x, act[:, :p2d])
            theta = np.where(mask, theta + c, theta)
        if record:
            for i in np.nonzero(mask)[0]:
                trace["imp"].append(
                    (i, float(tt[i]), player, act[i, : (p1d if player == 1 else p2d)].copy(), x[i].copy(), float(c[i]))
                )
        snap(tt, mask)
        x = np.where(mask[:, None], x + dx, x)
        snap(tt, mask)

    def density_now(t_now):
        vals = poisson.density(t_now, x, n_p1)
        return np.asarray(vals, dtype=float)  # (B, m)

    snap(np.full(B, t0), np.ones(B, bool))
    for m in range(mesh):
        c, b = grid[m], grid[m + 1]
        h = b - c
        # feedback decisions at the cell start
        if rules[0] is not None or rules[1] is not None:
            for player in phase_order:
                rule = rules[player - 1]
                if rule is None or rule.budget <= 0 or not rule.acts_at(c):
                    continue
                for _ in range(rule.budget):
                    own = n_p1 if player == 1 else n_p2
                    opp = n_p2 if player == 1 else n_p1
                    idx = rule.decide(c, x, own, opp)
                    acting = (idx >= 0) & (own < rule.budget)
                    if not acting.any():
                        break
                    act = np.zeros((B, p))
                    act[acting, : rule.actions.shape[1]] = rule.actions[idx[acting]]
                    jump(player, np.full(B, c), acting, act)
                    if player == 1:
                        n_p1 += acting
                    else:
                        n_p2 += acting
                    sup_norm = np.maximum(sup_norm, np.linalg.norm(x, axis=1))
                check_finite(f"t={c}")
        dw_cell = sign * np.sqrt(h) * crng.normals(
            seed, crng.BROWNIAN, path_ids[:, None], m * d + np.arange(d)[None, :]
        )
        if record:
            trace["dw"].append(dw_cell.copy())
        w_rel = np.zeros((B, d))
        cur = np.full(B, c)
        in_cell = cell == m
        n_here = in_cell.sum(axis=1)
        importance = poisson is not None and poisson.method == "importance"
        nu_now = density_now(cur) if importance else None
        for r in range(int(n_here.max()) if E else 0):
            active = n_here > r
            k = np.minimum(ptr + r, E - 1)
            s = np.where(active, ev.time[rows, k], cur)
            kind = np.where(active, ev.kind[rows, k], 0)
            # Brownian bridge from (cur, w_rel) to (b, dw_cell)
            span = b - cur
            frac = np.where(span > 0, (s - cur) / np.where(span > 0, span, 1.0), 0.0)
            var = np.where(span > 0, (s - cur) * (b - s) / np.where(span > 0, span, 1.0), 0.0)
            z = sign * crng.normals(
                seed,
                crng.BRIDGE,
                path_ids[:, None],
                (m * _RANK_SLOTS + r) * d + np.arange(d)[None, :],
            )
            w_s = w_rel + frac[:, None] * (dw_cell - w_rel) + np.sqrt(np.maximum(var, 0.0))[:, None] * z
            w_s = np.where(active[:, None], w_s, w_rel)
            dt = s - cur
            if importance:
                comp = lam_mass - nu_now @ poisson.weights
                log_kappa = log_kappa + comp * dt
            sig = spec.diffusion(cur, x)
            running = running + spec.running_cost(cur, x) * dt
            x = x + spec.drift(cur, x) * dt[:, None] + _diffusion_step(sig, w_s - w_rel)
            w_rel, cur = w_s, s
            snap(s, active)
            sup_norm = np.maximum(sup_norm, np.linalg.norm(x, axis=1))
            act = ev.act[rows, k]
            is1 = active & (kind == KIND_P1)
            is2 = active & (kind == KIND_P2)
            isp = active & (kind == KIND_POISSON)
            if is1.any():
                jump(1, s, is1, act)
                n_p1 += is1
            if is2.any():
                jump(2, s, is2, act)
                n_p2 += is2
            if isp.any():
                mk = np.maximum(ev.mark[rows, k], 0)
                if importance:
                    nu_e = nu_now[rows, mk]
                    with np.errstate(divide="ignore"):
                        log_kappa = np.where(isp, log_kappa + np.log(nu_e), log_kappa)
                    take = isp
                else:
                    # thinning reads the density at the candidate's pre-jump state
                    nu_e = np.zeros(B)
                    nu_e[isp] = np.asarray(poisson.density(s[isp], x[isp], n_p1[isp]), dtype=float)[
                        np.arange(int(isp.sum())), mk[isp]
                    ]
                    u = poisson.accept_u[rows, np.minimum(accept_counter, poisson.accept_u.shape[1] - 1)]
                    accept_counter = accept_counter + isp
                    take = isp & (u * poisson.bound < nu_e)
                if take.any():
                    jump(2, s, take, act)
                    n_p2 += take
            sup_norm = np.maximum(sup_norm, np.linalg.norm(x, axis=1))
            check_finite(f"t in [{c}, {b})")
            if importance and active.any():
                # only rows that moved need a fresh density
                nu_now = nu_now.copy()
                nu_now[active] = poisson.density(cur[active], x[active], n_p1[active])
        ptr = ptr + n_here
        # final sub-step to the cell end
        dt = b - cur
        if importance:
            log_kappa = log_kappa + (lam_mass - nu_now @ poisson.weights) * dt
        sig = spec.diffusion(cur, x)
        running = running + spec.running_cost(cur, x) * dt
        x = x + spec.drift(cur, x) * dt[:, None] + _diffusion_step(sig, dw_cell - w_rel)
        check_finite(f"t={b}")
        sup_norm = np.maximum(sup_norm, np.linalg.norm(x, axis=1))
        snap(np.full(B, b), np.ones(B, bool))

    payoff = spec.terminal(x) + running - lam + theta
    return _Out(payoff, running, lam, theta, x, log_kappa, n_p1, n_p2, sup_norm, trace)


def _chunks(paths: int, start: int = 0):
    for lo in range(0, paths, CHUNK):
        yield np.arange(start + lo, start + min(paths, lo + CHUNK), dtype=np.int64)


def _gather(outs: list) -> _Out:
    cat = lambda name: np.concatenate([getattr(o, name) for o in outs])
    return _Out(*(cat(n) for n in ("payoff", "running", "p1_cost", "p2_cost", "final", "log_kappa", "n_p1", "n_p2", "sup_norm")))


def run_paths(spec, t, x, paths, mesh, rng_seed, **kw) -> _Out:
    """Simulate ``paths`` paths in chunks; keyword arguments go to the engine.

    ``poisson_factory(path_ids)`` may be supplied to build the Poisson drive
    for each chunk.
    """
    factory = kw.pop("poisson_factory", None)
    outs = []
    for ids in _chunks(paths):
        pk = dict(kw)
        if factory is not None:
            pk["poisson"] = factory(ids)
        outs.append(_run(spec, t, x, ids, mesh, rng_seed, **pk))
    return _gather(outs)


# ---------------------------------------------------------------- public API


def _refined_mesh(spec, t, mesh):
    if mesh < 1:
        raise ValueError("mesh must be >= 1")
    return mesh


def simulate_path(
    spec: ProblemSpec,
    t: float,
    x,
    coupled: CoupledControl | None = None,
    mesh: int = 64,
    rng_seed: int = 0,
    path_id: int = 0,
) -> PathSample:
    """Simulate one path under a merged open-loop control."""
    if coupled is not None and len(coupled) and (coupled.times[-1] > spec.horizon + 1e-12):
        raise ValueError("impulse after the horizon")
    out = _run(spec, t, x, np.array([path_id], dtype=np.int64), _refined_mesh(spec, t, mesh), rng_seed, coupled=coupled, record=True)
    return _path_from_trace(out, 0)


def _path_from_trace(out: _Out, i: int) -> PathSample:
    tr = out.trace
    mask = np.array([m[i] for m in tr["mask"]])
    times = np.array([t[i] for t in tr["t"]])[mask]
    states = np.array([x[i] for x in tr["x"]])[mask]
    lam = np.array([v[i] for v in tr["lam"]])[mask]
    theta = np.array([v[i] for v in tr["theta"]])[mask]
    imps = [
        {"time": tm, "owner": ow, "action": a.tolist(), "pre_state": pre.tolist(), "cost": cst}
        for (j, tm, ow, a, pre, cst) in tr["imp"]
        if j == i
    ]
    return PathSample(
        times=times,
        states=states,
        brownian=np.array([dw[i] for dw in tr["dw"]]),
        impulses=imps,
        running_cost=float(out.running[i]),
        p1_cost=float(out.p1_cost[i]),
        p2_cost=float(out.p2_cost[i]),
        p1_cost_path=lam,
        p2_cost_path=theta,
        payoff=float(out.payoff[i]),
    )


def evaluate_J(
    spec: ProblemSpec,
    t: float,
    x,
    u: ImpulseControl | None,
    alpha: ImpulseControl | None,
    paths: int,
    mesh: int = 64,
    rng_seed: int = 0,
    antithetic: bool = False,
) -> McEstimate:
    """Monte Carlo estimate of the payoff under two open-loop controls."""
    if paths < 1:
        raise ValueError("paths must be >= 1")
    u = u if u is not None else ImpulseControl.empty(1, t, spec.actions_p1.dim)
    alpha = alpha if alpha is not None else ImpulseControl.empty(2, t, spec.actions_p2.dim)
    coupled = couple(u, alpha)
    if not antithetic:
        out = run_paths(spec, t, x, paths, mesh, rng_seed, coupled=coupled)
        return mc_estimate(out.payoff, rng_seed)
    half = max(1, paths // 2)
    a = run_paths(spec, t, x, half, mesh, rng_seed, coupled=coupled)
    b = run_paths(spec, t, x, half, mesh, rng_seed, coupled=coupled, negate=True)
    pair = 0.5 * (a.payoff + b.payoff)
    est = mc_estimate(pair, rng_seed)
    est.paths = 2 * half
    return est


def empirical_moment_check(
    spec: ProblemSpec,
    t: float,
    x,
    p: float,
    controls: list,
    paths: int = 2000,
    mesh: int = 64,
    rng_seed: int = 0,
) -> dict:
    """Estimate ``E[sup_s |X_s|**p] / (1 + |x|**p)`` for each merged control."""
    if p < 1:
        raise ValueError("p must be >= 1")
    xn = float(np.linalg.norm(np.asarray(x, dtype=float)))
    ratios, errs = [], []
    for cc in controls:
        out = run_paths(spec, t, x, paths, mesh, rng_seed, coupled=cc)
        vals = out.sup_norm**p / (1.0 + xn**p)
        est = mc_estimate(vals, rng_seed)
        ratios.append(est.mean)
        errs.append(est.stderr)
    return {
        "p": p,
        "ratios": ratios,
        "stderrs": errs,
        "max_ratio": max(ratios) if ratios else None,
        "paths": paths,
        "seed": rng_seed,
    }


def play_feedback(
    spec: ProblemSpec,
    t: float,
    x,
    strategy_p1: FeedbackRule | None,
    strategy_p2: FeedbackRule | None,
    paths: int,
    mesh: int | None = None,
    rng_seed: int = 0,
    phase_order: tuple | None = None,
) -> McEstimate:
    """Play two feedback rules against each other by simulation.

    Rules are consulted at their decision times, which must lie on the
    simulation mesh; by default the mesh is the coarsest one containing them.
    Player 1 moves first at a common decision time unless ``phase_order``
    (or the rules' ``phase_order`` attribute) says otherwise.
    """
    rules = (strategy_p1 or NeverAct(1, spec.actions_p1.dim), strategy_p2 or NeverAct(2, spec.actions_p2.dim))
    mesh = _feedback_mesh(spec, t, rules, mesh)
    if phase_order is None:
        phase_order = getattr(rules[0], "phase_order", None) or getattr(rules[1], "phase_order", None) or (1, 2)
    out = run_paths(spec, t, x, paths, mesh, rng_seed, rules=rules, phase_order=phase_order)
    return mc_estimate(out.payoff, rng_seed)


def _feedback_mesh(spec, t, rules, mesh):
    steps = [len(r.decision_times) for r in rules if len(r.decision_times)]
    if not steps:
        return mesh or 64
    base = max(steps)
    span = spec.horizon - t
    m = mesh or base
    m = int(np.ceil(m / base) * base)
    grid = t + span * np.arange(m + 1) / m
    for r in rules:
        for dt in r.decision_times:
            if dt >= t - 1e-12 and dt < spec.horizon and not np.any(np.abs(grid - dt) <= 1e-12 * (1 + abs(dt))):
                raise ValueError("decision times do not lie on the simulation mesh")
    return m


# ---------------------------------------------------------------- dumps


def dump_paths(samples: list, path, header_comment: str | None = None) -> None:
    """CSV with columns path_id, s, x1..xd, p1_cost, p2_cost."""
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        wr = csv.writer(fh)
        d = samples[0].states.shape[1] if samples else 0
        wr.writerow(["path_id", "s"] + [f"x{j + 1}" for j in range(d)] + ["p1_cost", "p2_cost"])
        for pid, ps in enumerate(samples):
            for k in range(len(ps.times)):
                wr.writerow([pid, repr(float(ps.times[k]))] + [repr(float(v)) for v in ps.states[k]] + [repr(float(ps.p1_cost_path[k])), repr(float(ps.p2_cost_path[k]))])


def dump_impulses(samples: list, path, header_comment: str | None = None) -> None:
    """CSV with columns path_id, time, owner, action, cost."""
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        wr = csv.writer(fh)
        wr.writerow(["path_id", "time", "owner", "action", "cost"])
        for pid, ps in enumerate(samples):
            for imp in ps.impulses:
                wr.writerow([pid, repr(imp["time"]), imp["owner"], " ".join(repr(a) for a in imp["action"]), repr(imp["cost"])])


# ---------------------------------------------------------------- reference


def reference_path(spec: ProblemSpec, t: float, x, u: ImpulseControl, alpha: ImpulseControl, mesh: int, rng_seed: int, path_id: int = 0):
    """Plain-loop simulator reading the two controls directly, for cross-checks.

    Returns ``(final_state, p1_cost, p2_cost, running_cost)``.
    """
    d = spec.dim
    T = spec.horizon
    grid = t + (T - t) * np.arange(mesh + 1) / mesh
    xs = np.asarray(x, dtype=float).reshape(1, d).copy()
    lam = theta = run = 0.0
    i = j = 0
    pid = np.array([path_id], dtype=np.int64)
    for m in range(mesh):
        c, b = grid[m], grid[m + 1]
        dw = np.sqrt(b - c) * crng.normals(rng_seed, crng.BROWNIAN, pid[:, None], m * d + np.arange(d)[None, :])
        w_rel = np.zeros((1, d))
        cur = c
        r = 0
        while True:
            # next event of either list inside this cell, player 1 first on ties
            tu = u.times[i] if i < len(u) else np.inf
            ta = alpha.times[j] if j < len(alpha) else np.inf
            s = min(tu, ta)
            if not (s < b and s < T):
                break
            frac = (s - cur) / (b - cur) if b > cur else 0.0
            var = (s - cur) * (b - s) / (b - cur) if b > cur else 0.0
            z = crng.normals(rng_seed, crng.BRIDGE, pid[:, None], (m * _RANK_SLOTS + r) * d + np.arange(d)[None, :])
            w_s = w_rel + frac * (dw - w_rel) + np.sqrt(max(var, 0.0)) * z
            ts = np.array([cur])
            run = run + float(spec.running_cost(ts, xs)[0]) * (s - cur)
            xs = xs + spec.drift(ts, xs) * (s - cur) + _diffusion_step(spec.diffusion(ts, xs), w_s - w_rel)
            w_rel, cur = w_s, s
            tt = np.array([s])
            if tu <= ta:
                a = u.actions[i : i + 1]
                lam += float(spec.cost_p1(tt, xs, a)[0])
                xs = xs + spec.jump_p1(tt, xs, a)
                i += 1
            else:
                a = alpha.actions[j : j + 1]
                theta += float(spec.cost_p2(tt, xs, a)[0])
                xs = xs + spec.jump_p2(tt, xs, a)
                j += 1
            r += 1
        ts = np.array([cur])
        run = run + float(spec.running_cost(ts, xs)[0]) * (b - cur)
        xs = xs + spec.drift(ts, xs) * (b - cur) + _diffusion_step(spec.diffusion(ts, xs), dw - w_rel)
    return xs[0], lam, theta, run
