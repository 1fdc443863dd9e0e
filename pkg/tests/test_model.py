import json

import numpy as np
import pytest

from impgame.config import ConfigError, load_config, problem_from_dict
from impgame.model import BUILTIN_NAMES, ActionSet, UnknownInstanceError, builtin_instance
from impgame.validation import (
    check_commutativity,
    check_no_free_loop,
    check_terminal_consistency,
    commutativity_residuals,
    terminal_gaps,
    validate_all,
    validate_regularity,
)


def test_builtins_construct():
    for name in BUILTIN_NAMES:
        spec = builtin_instance(name)
        assert spec.name == name
        assert spec.delta > 0


def test_unknown_builtin():
    with pytest.raises(UnknownInstanceError):
        builtin_instance("no-such-game")


def test_contraction_jumps_and_costs():
    spec = builtin_instance("contraction-game")
    x = np.array([[2.0, 1.0]])
    b = np.array([[0.0]])
    assert np.allclose(x + spec.jump_p1(0.0, x, b), [[0.0, 1.0]])
    assert spec.cost_p1(0.0, x, b)[0] == pytest.approx(4.1)
    assert np.allclose(x + spec.jump_p2(0.0, x, np.array([[0.5]])), [[2.0, 0.5]])


def test_action_set_rejects_bad_points():
    with pytest.raises(ValueError):
        ActionSet([-1.0], [1.0], [2.0])
    with pytest.raises(ValueError):
        ActionSet([1.0], [-1.0])


def test_spec_rejects_zero_floor():
    spec = builtin_instance("no-op-game")
    with pytest.raises(ValueError):
        spec.evolve(delta=0.0)


# ---------------------------------------------------------------- config


def test_config_builtin_overrides():
    spec = problem_from_dict({"builtin": "no-op-game", "delta": 0.2, "actions_p1": [-1, 0, 1]})
    assert spec.delta == 0.2
    assert spec.actions_p1.points.ravel().tolist() == [-1.0, 0.0, 1.0]
    with pytest.raises(ConfigError):
        problem_from_dict({"builtin": "no-op-game", "drift": 1})


def test_config_full_definition(tmp_path):
    text = """
problem:
  name: shifted
  dim: 1
  box: {lo: [-2], hi: [2]}
  delta: 0.1
  drift: {affine: {matrix: [[-1.0]], offset: [0.5]}}
  diffusion: [[0.3]]
  running_cost: [{coef: 2.0, x: [1]}]
  terminal: [{coef: 1.0, x: [2]}]
  player1:
    actions: {lo: [-1], hi: [1], points: [-1, 0, 1]}
    jump: [[{coef: 1.0, a: [1]}]]
    cost: 0.1
  player2:
    actions: {lo: [-1], hi: [1]}
    jump: [[{coef: 0.5, a: [1]}]]
    cost: [{coef: 0.1}, {coef: 1.0, a: [2]}]
"""
    path = tmp_path / "p.yaml"
    path.write_text(text)
    spec = problem_from_dict(load_config(path)["problem"])
    x = np.array([[1.5]])
    assert spec.drift(0.0, x)[0, 0] == pytest.approx(-1.0)
    assert spec.diffusion(0.0, x)[0, 0, 0] == pytest.approx(0.3)
    assert spec.running_cost(0.0, x)[0] == pytest.approx(3.0)
    assert spec.terminal(x)[0] == pytest.approx(2.25)
    assert spec.jump_p2(0.0, x, np.array([[0.4]]))[0, 0] == pytest.approx(0.2)
    assert spec.cost_p2(0.0, x, np.array([[0.5]]))[0] == pytest.approx(0.35)


def test_config_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("problem: [1, 2")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        problem_from_dict({"dim": 1})


# ---------------------------------------------------------------- validators


def test_regularity_constant_coefficients(spec_factory):
    spec = spec_factory(dim=2, sigma=1.0, lip_a_sigma=1.0, c_growth=2.0, k_jump=10.0)
    rep = validate_regularity(spec, 200, 0)
    assert rep.passed, rep.failures
    assert rep["lipschitz_drift_diffusion"].residual <= 0.0


def test_regularity_quadratic_drift_fails(spec_factory):
    spec = spec_factory(
        drift=lambda t, x: x**2,
        lip_a_sigma=1.0,
        c_growth=10.0,
        box=2.0,
    )
    rep = validate_regularity(spec, 500, 0)
    lip = rep["lipschitz_drift_diffusion"]
    assert lip.status == "fail"
    # witness near the edge of the box, where the slope 2|x| is largest
    wx = np.abs(np.asarray(lip.witness["x"])).max()
    assert wx > 1.0


def test_regularity_nonfinite_is_hard_failure(spec_factory):
    spec = spec_factory(running=lambda t, x: np.where(x[..., 0] > 2.5, np.nan, 0.0))
    rep = validate_regularity(spec, 500, 0)
    assert rep["finite_coefficients"].status == "fail"
    assert rep["finite_coefficients"].witness is not None


def test_contraction_passes_all_validators():
    rep = validate_all(builtin_instance("contraction-game"), 1000, 0)
    assert rep.passed, [r.check for r in rep.failures]


def test_commutativity_contraction_residuals_zero():
    rep = check_commutativity(builtin_instance("contraction-game"), 2000, 1e-12, 3)
    for name in ("commute_final_state", "commute_cost_p1", "commute_cost_p2"):
        assert rep[name].residual == 0.0


def test_commutativity_additive_literal(spec_factory):
    spec = spec_factory(jump_p1=lambda t, x, b: np.broadcast_to(b, np.broadcast_shapes(x.shape, b.shape)),
                        jump_p2=lambda t, x, e: np.broadcast_to(e, np.broadcast_shapes(x.shape, e.shape)))
    x = np.array([[0.3]])
    res = commutativity_residuals(spec, 0.0, x, np.array([[0.5]]), np.array([[-0.25]]))
    assert res["final_state"][0] == 0.0
    assert res["literal"][0] == pytest.approx(0.75)


def test_no_op_commutes():
    rep = check_commutativity(builtin_instance("no-op-game"), 500, 1e-12, 0)
    assert rep.passed
    assert rep["commute_literal"].residual == 0.0


def test_terminal_consistency_contraction_slack():
    spec = builtin_instance("contraction-game")
    sup_gap, inf_gap, _, _ = terminal_gaps(spec, np.zeros((1, 2)))
    # at the origin every jump is a fixed point and costs exactly delta
    assert sup_gap[0] == pytest.approx(-0.1)
    assert inf_gap[0] == pytest.approx(0.1)
    assert check_terminal_consistency(spec, 1000, 1e-9, 0).passed


def test_terminal_consistency_upward_jump_fails(spec_factory):
    spec = spec_factory(
        terminal=lambda x: x[..., 0],
        jump_p1=lambda t, x, b: np.ones(np.broadcast_shapes(x.shape, b.shape)),
    )
    rep = check_terminal_consistency(spec, 200, 1e-9, 0)
    assert rep["terminal_sup_side"].status == "fail"
    assert rep["terminal_sup_side"].residual == pytest.approx(0.9)


def test_terminal_consistency_huge_costs(spec_factory):
    big = 1e6
    spec = spec_factory(
        terminal=lambda x: np.sin(x[..., 0]),
        jump_p1=lambda t, x, b: np.broadcast_to(b, np.broadcast_shapes(x.shape, b.shape)),
        jump_p2=lambda t, x, e: np.broadcast_to(e, np.broadcast_shapes(x.shape, e.shape)),
        cost_p1=lambda t, x, b: np.full(np.broadcast_shapes(x.shape[:-1], b.shape[:-1]), big),
        cost_p2=lambda t, x, e: np.full(np.broadcast_shapes(x.shape[:-1], e.shape[:-1]), big),
    )
    assert check_terminal_consistency(spec, 300, 1e-9, 0).passed


def test_no_free_loop_single_step_bounded_by_floor():
    spec = builtin_instance("contraction-game")
    rep = check_no_free_loop(spec, 0.0, np.zeros(2), max_cycle=1)
    assert rep["no_free_loop"].residual >= spec.delta - 1e-12


def test_no_free_loop_no_op_fails_with_witness():
    spec = builtin_instance("no-op-game")
    rep = check_no_free_loop(spec, 0.0, np.zeros(1), max_cycle=2)
    res = rep["no_free_loop"]
    assert res.status == "fail"
    assert res.residual == 0.0
    assert sorted(res.witness["owners"]) == [1, 2]


def test_no_free_loop_contraction_origin_is_a_free_loop():
    # at the origin both players' jumps are fixed points costing delta each
    rep = check_no_free_loop(builtin_instance("contraction-game"), 0.0, np.zeros(2), max_cycle=2)
    assert rep["no_free_loop"].status == "fail"


def test_no_free_loop_reports_candidate():
    rep = check_no_free_loop(builtin_instance("contraction-game"), 0.0, np.array([0.0, 1.0]), max_cycle=2, h2=0.05)
    res = rep["no_free_loop"]
    assert res.detail["returning_chains"] > 0
    assert res.detail["candidate_h2"] == pytest.approx(res.residual)


def test_failures_reproduce_from_witness(spec_factory):
    spec = spec_factory(drift=lambda t, x: x**2, lip_a_sigma=1.0, c_growth=10.0, box=2.0)
    a = validate_regularity(spec, 300, 5)
    b = validate_regularity(spec, 300, 5)
    assert a.to_json() == b.to_json()
    json.loads(a.to_json())
