import numpy as np
import pytest

from impgame.discretize import SpatialGrid, build_partition
from impgame.dp_solver import default_partitions
from impgame.model import ActionSet, builtin_instance
from impgame.qvi_solver import PenaltyConfig, SchemeConfig, solve_penalized
from impgame.randomized import (
    ConstantDensity,
    IndicatorDensity,
    NuStar,
    _PerturbedRule,
    count_law_test,
    dump_poisson,
    evaluate_JR,
    girsanov_weight,
    nu_star,
    poisson_arrays,
    sample_poisson,
    saddle_check,
    simulate_dual,
    u_star,
)
from impgame.sde_sim import ImpulseControl, couple, evaluate_J, simulate_path


def family(spec, nodes=41, levels=(1, 4), k_max=2, eps=0.25):
    pU, pA = default_partitions(spec, eps)
    return solve_penalized(spec, SchemeConfig(SpatialGrid.for_spec(spec, nodes)), PenaltyConfig(levels, k_max), pU, pA)


@pytest.fixture(scope="module")
def duel():
    spec = builtin_instance("drift-duel-1d")
    return spec, family(spec, levels=(1, 4, 16))


@pytest.fixture(scope="module")
def duel_part():
    spec = builtin_instance("drift-duel-1d")
    return spec, default_partitions(spec, 0.25)[1]


# ---------------------------------------------------------------- Poisson samples


def test_zero_intensity_is_empty():
    part = build_partition(ActionSet([-1.0], [1.0]), 0.5, mass=0.0)
    smp = sample_poisson(part, 0.0, 1.0, 3, 0)
    assert smp.count == 0 and len(smp.as_control()) == 0
    times, marks = poisson_arrays(np.zeros(3), 0.0, 1.0, 3, np.arange(5))
    assert times.shape == (5, 0) and marks.shape == (5, 0)


def test_mean_count_matches_intensity():
    counts = (poisson_arrays([0.25, 0.75], 0.0, 1.0, 11, np.arange(100_000))[1] >= 0).sum(axis=1)
    assert abs(counts.mean() - 1.0) <= 0.01
    rep = count_law_test(counts, 1.0)
    assert rep["p_value"] > 1e-3
    assert count_law_test(counts, 1.3)["p_value"] < 1e-6


def test_single_mark_sample():
    part = build_partition(ActionSet([0.5], [0.5]), 1.0, mass=3.0)
    for pid in range(20):
        smp = sample_poisson(part, 0.2, 1.0, 5, pid)
        assert np.all(smp.marks == 0)
        assert np.all(smp.mark_values == 0.5)
        assert np.all(np.diff(smp.times) > 0)
        assert np.all((smp.times >= 0.2) & (smp.times <= 1.0))


def test_mark_frequencies_follow_weights():
    _, marks = poisson_arrays([1.0, 3.0], 0.0, 1.0, 2, np.arange(20_000))
    m = marks[marks >= 0]
    share = np.mean(m == 1)
    se = np.sqrt(0.75 * 0.25 / len(m))
    assert abs(share - 0.75) <= 4 * se


def test_sample_reproducible():
    part = default_partitions(builtin_instance("drift-duel-1d"), 0.25)[1]
    a = sample_poisson(part, 0.0, 1.0, 9, 4)
    b = sample_poisson(part, 0.0, 1.0, 9, 4)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.marks, b.marks)


def test_dump_poisson(tmp_path):
    part = default_partitions(builtin_instance("drift-duel-1d"), 0.25)[1]
    samples = [sample_poisson(part, 0.0, 1.0, 1, pid) for pid in range(5)]
    dump_poisson(samples, tmp_path / "atoms.csv")
    lines = (tmp_path / "atoms.csv").read_text().splitlines()
    assert lines[0] == "path,time,mark,value"
    assert len(lines) == 1 + sum(s.count for s in samples)


# ---------------------------------------------------------------- weights


def _find(part, seed, count):
    for pid in range(1000):
        smp = sample_poisson(part, 0.0, 1.0, seed, pid)
        if smp.count == count:
            return pid, smp
    raise AssertionError("no such sample")


@pytest.mark.parametrize("value,count,expected", [(1.0, 0, 1.0), (1.0, 2, 1.0), (2.0, 0, np.exp(-1)), (2.0, 1, 2 * np.exp(-1))])
def test_kappa_constant_density(duel_part, value, count, expected):
    spec, part = duel_part
    assert part.total_mass == pytest.approx(1.0)
    pid, smp = _find(part, 4, count)
    alpha = smp.as_control()
    path = simulate_path(spec, 0.0, [0.2], couple(ImpulseControl.empty(1), alpha), 8, 4, pid)
    w = girsanov_weight(ConstantDensity(value, part.size), smp, path)
    assert w.kappa == pytest.approx(expected, rel=1e-12)


def test_unit_density_is_pathwise_open_loop(duel_part):
    spec, part = duel_part
    out = simulate_dual(spec, 0.0, [0.2], None, ConstantDensity(1.0, part.size), part, 30, 8, 6)
    assert np.all(out.log_kappa == 0.0)
    for pid in range(30):
        smp = sample_poisson(part, 0.0, 1.0, 6, pid)
        path = simulate_path(spec, 0.0, [0.2], couple(ImpulseControl.empty(1), smp.as_control()), 8, 6, pid)
        assert out.payoff[pid] == pytest.approx(path.payoff, abs=1e-12)
        assert out.n_p2[pid] == smp.count


def test_tiny_density_recovers_jump_free_payoff(duel_part):
    spec, part = duel_part
    x = [0.3]
    jr = evaluate_JR(spec, 0.0, x, None, ConstantDensity(1e-8, part.size), 40_000, 8, 3, part)
    j = evaluate_J(spec, 0.0, x, None, None, 40_000, 8, 5)
    assert not jr.warnings
    assert abs(jr.mean - j.mean) <= 4 * np.hypot(jr.stderr, j.stderr)


def test_no_op_cost_is_delta_times_count():
    spec = builtin_instance("no-op-game")
    part = default_partitions(spec, 0.25)[1]
    out = simulate_dual(spec, 0.0, [0.1], None, ConstantDensity(1.5, part.size), part, 4000, 8, 2)
    assert np.allclose(out.p2_cost, spec.delta * out.n_p2, atol=1e-12)
    kappa = np.exp(out.log_kappa)
    assert np.mean(kappa * out.p2_cost) == pytest.approx(spec.delta * np.mean(kappa * out.n_p2), rel=1e-12)


def test_thinning_agrees_with_weighting(duel_part):
    spec, part = duel_part
    # weighting freezes the density per sub-step, so the mesh must be fine
    nu = IndicatorDensity(2.0, 0.5, 0.0, part.size)
    a = evaluate_JR(spec, 0.0, [0.1], None, nu, 40_000, 64, 1, part, "importance")
    b = evaluate_JR(spec, 0.0, [0.1], None, nu, 40_000, 64, 2, part, "thinning")
    assert abs(a.mean - b.mean) <= 4 * np.hypot(a.stderr, b.stderr)
    with pytest.raises(ValueError):
        evaluate_JR(spec, 0.0, [0.1], None, nu, 10, 8, 1, part, "rejection")


def test_weight_degeneracy_warns(duel_part):
    spec, part = duel_part
    est = evaluate_JR(spec, 0.0, [0.0], None, ConstantDensity(10.0, part.size), 2000, 8, 1, part)
    assert any("degeneracy" in w for w in est.warnings)


@pytest.mark.parametrize("which", ["constant", "indicator", "nu_star"])
def test_weights_have_unit_mean(duel, which):
    spec, fam = duel
    m = fam.part_A.size
    nu = {
        "constant": ConstantDensity(2.0, m),
        "indicator": IndicatorDensity(3.0, 0.5, 0.0, m),
        "nu_star": NuStar(fam, 4, 2),
    }[which]
    out = simulate_dual(spec, 0.0, [0.0], None, nu, fam.part_A, 40_000, 16, 8)
    kappa = np.exp(out.log_kappa)
    assert abs(kappa.mean() - 1.0) <= 4 * kappa.std(ddof=1) / np.sqrt(len(kappa))


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_weighted_count_law(duel_part, c):
    spec, part = duel_part
    out = simulate_dual(spec, 0.0, [0.0], None, ConstantDensity(c, part.size), part, 40_000, 4, 12)
    rep = count_law_test(out.n_p2, c * part.total_mass, np.exp(out.log_kappa))
    assert rep["p_value"] > 1e-3
    thin = simulate_dual(spec, 0.0, [0.0], None, ConstantDensity(c, part.size), part, 40_000, 4, 13, "thinning")
    assert count_law_test(thin.n_p2, c * part.total_mass)["p_value"] > 1e-3


def test_count_bounded_by_rate_budget(duel):
    spec, fam = duel
    n = 4
    out = simulate_dual(spec, 0.0, [0.0], u_star(fam, spec, n=n, k=2), NuStar(fam, n, 2), fam.part_A, 4000, 16, 3, "thinning")
    bound = n * fam.part_A.total_mass * spec.horizon
    assert out.n_p2.mean() <= bound + 4 * out.n_p2.std(ddof=1) / np.sqrt(len(out.n_p2))


# ---------------------------------------------------------------- optimal density


def test_nu_star_zero_on_no_op():
    spec = builtin_instance("no-op-game")
    fam = family(spec, 21, (1, 4), 1)
    nu = nu_star(fam, spec, 4, 1)
    x = fam.grid.nodes
    for t in (0.0, 0.4, 0.9):
        assert np.all(nu(t, x, np.zeros(len(x), int)) == 0.0)


def test_nu_star_zero_on_contraction():
    # an x2 contraction always costs more than it lowers the value
    spec = builtin_instance("contraction-game")
    fam = family(spec, 21, (1, 4), 1)
    nu = nu_star(fam, spec, 4, 1)
    x = fam.grid.nodes
    assert np.all(nu(0.0, x, np.zeros(len(x), int)) == 0.0)


def test_nu_star_matches_table_scan(duel):
    spec, fam = duel
    n, k = 16, 2
    nu = nu_star(fam, spec, n, k)
    nodes = fam.grid.nodes[:, 0]
    reps = fam.part_A.reps
    li = fam.level_index(n)
    seen = 0
    for i in (0, len(fam.times) // 2):
        t = float(fam.times[i])
        for used in range(k + 1):
            table = fam.values[li, k - used, i]
            got = nu(t, fam.grid.nodes, np.full(len(nodes), used))
            for j, e in enumerate(reps):
                xe = fam.grid.nodes + spec.jump_p2(t, fam.grid.nodes, np.broadcast_to(e, (len(nodes), len(e))))
                cost = spec.cost_p2(t, fam.grid.nodes, np.broadcast_to(e, (len(nodes), len(e))))
                z = np.interp(xe[:, 0], nodes, table) + cost - table
                clear = np.abs(z) > 1e-6
                want = np.where(z < 0, float(n), 0.0)
                assert np.array_equal(got[clear, j], want[clear])
                seen += int(np.sum(clear & (z < 0)))
    assert seen > 0
    assert np.all((got == 0.0) | (got == float(n)))


def test_nu_star_rejects_other_instance(duel):
    _, fam = duel
    with pytest.raises(ValueError):
        nu_star(fam, builtin_instance("no-op-game"))


# ---------------------------------------------------------------- hitting rule


def test_u_star_idle_on_no_op():
    spec = builtin_instance("no-op-game")
    fam = family(spec, 21, (1, 4), 2)
    rule = u_star(fam, spec, n=4, k=2)
    x = fam.grid.nodes
    for t in rule.decision_times:
        assert np.all(rule.decide(t, x, np.zeros(len(x), int), np.zeros(len(x), int)) == -1)


def test_u_star_zero_budget_never_acts(duel):
    spec, fam = duel
    rule = u_star(fam, spec, n=16, k=0)
    x = fam.grid.nodes
    assert np.all(rule.decide(0.0, x, np.zeros(len(x), int), np.zeros(len(x), int)) == -1)


def test_u_star_forced_binding():
    # reflecting x1 pays off at once and every instant after
    base = builtin_instance("contraction-game").with_actions(p1=[-1, 0, 1], p2=[-1, 0, 1])
    d = base.dim
    spec = base.evolve(
        drift=lambda t, x: np.zeros(np.shape(x)),
        diffusion=lambda t, x: np.zeros(np.shape(x)[:-1] + (d, d)),
        running_cost=lambda t, x: x[..., 0],
        terminal=lambda x: x[..., 0],
    )
    fam = family(spec, 13, (1, 4), 1)
    rule = u_star(fam, spec, n=4, k=1)
    a = rule.decide(0.0, np.array([[-2.0, 0.0]]), np.zeros(1, int), np.zeros(1, int))
    assert a[0] >= 0 and rule.actions[a[0], 0] == -1.0
    assert rule.decision_times[0] == 0.0


def test_identity_perturbation_is_exact(duel):
    spec, fam = duel
    base = u_star(fam, spec, n=4, k=2)
    pert = _PerturbedRule(base, "identity", np.random.default_rng(0))
    nu = NuStar(fam, 4, 2)
    a = simulate_dual(spec, 0.0, [0.0], base, nu, fam.part_A, 500, 16, 4, "thinning")
    b = simulate_dual(spec, 0.0, [0.0], pert, nu, fam.part_A, 500, 16, 4, "thinning")
    assert np.array_equal(a.payoff, b.payoff)


def test_random_perturbation_differs_across_chunks(duel):
    spec, fam = duel
    base = u_star(fam, spec, n=4, k=2)
    pert = _PerturbedRule(base, "random", np.random.default_rng(1))
    x = np.zeros((4, 1))
    a = pert.decide(0.0, x, np.zeros(4, int), np.zeros(4, int))
    b = [pert.decide(0.0, x, np.zeros(4, int), np.zeros(4, int)) for _ in range(50)]
    assert any(not np.array_equal(a, r) for r in b) or pert.prob < 0.02


def test_saddle_no_op():
    spec = builtin_instance("no-op-game")
    fam = family(spec, 41, (1, 4), 1)
    rep = saddle_check(spec, fam, 0.0, [0.2], trials=4, paths=4000, n=4, k=1, grid_slack=0.02, rng_seed=3)
    assert rep["all_hold"], rep
    assert rep["mean_p1_impulses"] == 0.0 and rep["mean_p2_jumps"] == 0.0
    assert all(m["difference"] >= -1e-12 for m in rep["perturbation_margins"])
