"""Declarative problem definitions.

A problem is either a built-in (``builtin: contraction-game``) or assembled from
polynomial coefficient templates.  A scalar polynomial is a list of monomial
terms ``{coef: c, x: [..], a: [..], t: k}`` (missing exponents are zero) or a
bare number.  Vector fields are lists of scalar polynomials or the affine
shorthand ``{affine: {matrix: [[..]], offset: [..]}}``.  Example::

    problem:
      name: shifted-duel
      dim: 1
      horizon: 1.0
      box: {lo: [-3], hi: [3]}
      delta: 0.1
      rho: 1
      drift: {affine: {matrix: [[0.0]], offset: [0.0]}}
      diffusion: [[0.3]]
      running_cost: [{coef: 1.0, x: [1]}]
      terminal: 0.0
      player1:
        actions: {lo: [-1], hi: [1], points: [-1, 0, 1]}
        jump: [[{coef: 1.0, a: [1]}]]
        cost: 0.1
      player2:
        actions: {lo: [-1], hi: [1]}
        jump: [[{coef: 1.0, a: [1]}]]
        cost: 0.1
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .model import ActionSet, ProblemSpec, builtin_instance


class ConfigError(ValueError):
    pass


class Polynomial:
    """Scalar polynomial in time, state and (optionally) action."""

    def __init__(self, terms):
        if isinstance(terms, (int, float)):
            terms = [{"coef": float(terms)}]
        self.terms = []
        for term in terms:
            if isinstance(term, (int, float)):
                term = {"coef": float(term)}
            unknown = set(term) - {"coef", "x", "a", "t"}
            if unknown:
                raise ConfigError(f"unknown monomial keys {sorted(unknown)}")
            self.terms.append(
                (
                    float(term.get("coef", 1.0)),
                    [int(k) for k in term.get("x", [])],
                    [int(k) for k in term.get("a", [])],
                    int(term.get("t", 0)),
                )
            )

    def __call__(self, t, x, a=None):
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        if a is not None:
            shape = np.broadcast_shapes(shape, np.shape(a)[:-1])
        out = np.zeros(shape)
        for coef, xe, ae, te in self.terms:
            val = np.full(shape, coef)
            for j, k in enumerate(xe):
                if k:
                    val = val * x[..., j] ** k
            for j, k in enumerate(ae):
                if k:
                    if a is None:
                        raise ConfigError("action exponent used in an action-free coefficient")
                    val = val * np.asarray(a, dtype=float)[..., j] ** k
            if te:
                val = val * np.asarray(t, dtype=float) ** te
            out = out + val
        return out

    @property
    def max_state_degree(self) -> int:
        return max((sum(xe) for _, xe, _, _ in self.terms), default=0)


def _vector_field(spec, d: int):
    if isinstance(spec, dict) and "affine" in spec:
        aff = spec["affine"]
        mat = np.asarray(aff.get("matrix", np.zeros((d, d))), dtype=float).reshape(d, d)
        off = np.asarray(aff.get("offset", np.zeros(d)), dtype=float).reshape(d)

        def field(t, x, a=None):
            x = np.asarray(x, dtype=float)
            return x @ mat.T + off

        return field
    if not isinstance(spec, list):
        raise ConfigError(f"vector field must be a list of {d} components or an affine map")
    comps = [Polynomial(c) for c in spec]
    if len(comps) != d:
        raise ConfigError(f"vector field needs {d} components, got {len(comps)}")

    def field(t, x, a=None):
        return np.stack([c(t, x, a) for c in comps], axis=-1)

    return field


def _matrix_field(spec, d: int):
    rows = [[Polynomial(c) for c in row] for row in spec]
    if len(rows) != d or any(len(r) != d for r in rows):
        raise ConfigError(f"diffusion must be a {d}x{d} matrix")

    def field(t, x):
        return np.stack([np.stack([c(t, x) for c in row], axis=-1) for row in rows], axis=-2)

    return field


def _actions(spec) -> ActionSet:
    try:
        return ActionSet(spec["lo"], spec["hi"], spec.get("points"))
    except (KeyError, TypeError) as err:
        raise ConfigError(f"bad action set {spec!r}: {err}") from None


def problem_from_dict(cfg: dict) -> ProblemSpec:
    """Build a :class:`ProblemSpec` from a parsed ``problem`` section."""
    if not isinstance(cfg, dict):
        raise ConfigError("problem section must be a mapping")
    if "builtin" in cfg:
        spec = builtin_instance(cfg["builtin"])
        extra = {k: v for k, v in cfg.items() if k != "builtin"}
        p1 = extra.pop("actions_p1", None)
        p2 = extra.pop("actions_p2", None)
        if p1 is not None or p2 is not None:
            spec = spec.with_actions(p1, p2)
        allowed = {"delta", "mark_mass", "horizon"}
        if set(extra) - allowed:
            raise ConfigError(f"cannot override {sorted(set(extra) - allowed)} on a built-in")
        return spec.evolve(**{k: float(v) for k, v in extra.items()}) if extra else spec

    try:
        d = int(cfg["dim"])
        p1, p2 = cfg["player1"], cfg["player2"]
        running = Polynomial(cfg.get("running_cost", 0.0))
        terminal = Polynomial(cfg.get("terminal", 0.0))
        c1, c2 = Polynomial(p1["cost"]), Polynomial(p2["cost"])
        box = cfg["box"]
        spec = ProblemSpec(
            name=str(cfg.get("name", "custom")),
            horizon=float(cfg.get("horizon", 1.0)),
            dim=d,
            drift=_vector_field(cfg.get("drift", [0.0] * d), d),
            diffusion=_matrix_field(cfg.get("diffusion", np.zeros((d, d)).tolist()), d),
            running_cost=lambda t, x: running(t, x),
            terminal=lambda x: terminal(0.0, x),
            jump_p1=_vector_field(p1["jump"], d),
            jump_p2=_vector_field(p2["jump"], d),
            cost_p1=lambda t, x, b: c1(t, x, b),
            cost_p2=lambda t, x, e: c2(t, x, e),
            actions_p1=_actions(p1["actions"]),
            actions_p2=_actions(p2["actions"]),
            box_lo=box["lo"],
            box_hi=box["hi"],
            mark_mass=float(cfg.get("mark_mass", 1.0)),
            delta=float(cfg["delta"]),
            rho=float(cfg.get("rho", 2.0)),
            k_jump=float(cfg.get("k_jump", 1.0)),
            lip_gamma=float(cfg.get("lip_gamma", 1.0)),
            lip_a_sigma=float(cfg.get("lip_a_sigma", 1.0)),
            c_growth=float(cfg.get("c_growth", 1.0)),
            time_homogeneous=not bool(cfg.get("time_dependent", False)),
        )
    except KeyError as err:
        raise ConfigError(f"missing problem key {err}") from None
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None
    return spec


def load_config(path) -> dict:
    """Read a YAML config file into a dict."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise FileNotFoundError(f"cannot read config {path}: {err.strerror}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data
