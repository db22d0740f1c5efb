"""Monte Carlo engine: moment oracles, determinism, decay fits, cost reports."""

import numpy as np
import pytest

import affinelq as alq
from affinelq.errors import GridMismatch

DIMS1 = alq.Dimensions(n=1, k=1, d=1)
X1 = np.array([1.0])


def _grid(T, dt):
    return np.linspace(0.0, T, int(round(T / dt)) + 1)


def test_geometric_second_moment():
    # zero control: E|X_t|^2 = |x|^2 exp((2a + c^2) t)
    m = alq.CoefficientModel.constant(
        DIMS1, [[-0.5]], [[0.0]], [[[0.3]]], [[[0.0]]], [[1.0]], [0.0]
    )
    grid = _grid(2.0, 0.01)
    mc = alq.MCSpec(paths=20000, seed=13, time_step=0.01, workers=2)
    batch = alq.simulate(m, None, X1, grid, mc)
    m2 = float(np.mean(batch.X[:, -1, 0] ** 2))
    oracle = np.exp((2 * (-0.5) + 0.09) * 2.0)
    assert abs(m2 / oracle - 1.0) < 0.03
    assert batch.increment_sanity() <= 1.0


def test_bitwise_determinism_across_workers(scalar_forced):
    grid = _grid(1.0, 0.01)
    runs = []
    for workers in (1, 3, 7):
        mc = alq.MCSpec(paths=257, seed=3, time_step=0.01, workers=workers)
        runs.append(alq.simulate(scalar_forced, None, X1, grid, mc))
    for other in runs[1:]:
        assert np.array_equal(runs[0].X, other.X)
        assert np.array_equal(runs[0].dW, other.dW)


def test_same_seed_same_paths_different_seed_differs(scalar_forced):
    grid = _grid(0.5, 0.01)
    mc_a = alq.MCSpec(paths=64, seed=5, time_step=0.01, workers=1)
    mc_b = alq.MCSpec(paths=64, seed=6, time_step=0.01, workers=1)
    a1 = alq.simulate(scalar_forced, None, X1, grid, mc_a)
    a2 = alq.simulate(scalar_forced, None, X1, grid, mc_a)
    b = alq.simulate(scalar_forced, None, X1, grid, mc_b)
    assert np.array_equal(a1.X, a2.X)
    assert not np.array_equal(a1.dW, b.dW)


def test_path_count_extension_preserves_prefix(scalar_forced):
    # the path RNG is keyed per path index, so adding paths never reshuffles
    grid = _grid(0.5, 0.01)
    small = alq.simulate(
        scalar_forced, None, X1, grid, alq.MCSpec(paths=50, seed=9, time_step=0.01)
    )
    big = alq.simulate(
        scalar_forced, None, X1, grid, alq.MCSpec(paths=80, seed=9, time_step=0.01)
    )
    assert np.array_equal(small.X, big.X[:50])


def test_closed_loop_decay_matches_stationary_rate(benchmark_plain):
    inf = alq.solve_infinite(benchmark_plain)
    grid = _grid(2.0, 0.01)
    mc = alq.MCSpec(paths=2000, seed=11, time_step=0.01, workers=1)
    dec = alq.closed_loop_decay(benchmark_plain, inf.stationary, X1, grid, mc)
    assert abs(dec.a_hat / (2 * np.sqrt(2.0)) - 1.0) < 0.05
    assert dec.r_squared >= 0.99
    assert dec.certificate


def test_zero_control_decay_on_dissipative_model(factor_model):
    grid = _grid(2.0, 0.01)
    mc = alq.MCSpec(paths=2000, seed=5, time_step=0.01, workers=1)
    dec = alq.closed_loop_decay(factor_model, None, X1, grid, mc)
    lat = alq.FiltrationLattice(depth=10, step=0.75, d=1)
    margin = alq.dissipativity_margin(factor_model, lattice=lat)
    assert dec.a_hat >= 2.0 * margin * 0.9
    assert dec.certificate


def test_cost_report_against_prediction(scalar_forced):
    T = 2.0
    ricc = alq.solve_finite_deterministic(scalar_forced, T, np.zeros((1, 1)))
    fb = alq.feedback_quadratic(ricc, scalar_forced)
    dual = alq.solve_dual_finite(scalar_forced, fb, ricc)
    law = alq.assemble_feedback(ricc, dual, scalar_forced)
    pred = alq.predicted_cost(ricc, dual, X1, scalar_forced)
    grid = _grid(T, 0.01)
    mc = alq.MCSpec(paths=4000, seed=7, time_step=0.01, workers=2)
    batch = alq.simulate(scalar_forced, law, X1, grid, mc)
    report = alq.evaluate_cost(batch, scalar_forced, predicted=pred.value)
    assert abs(report.z_score) < 4.0
    assert report.std_error < 0.05


def test_discounted_cost_decreases_in_alpha(scalar_forced):
    grid = _grid(1.0, 0.01)
    mc = alq.MCSpec(paths=500, seed=2, time_step=0.01, workers=1)
    batch = alq.simulate(scalar_forced, None, X1, grid, mc)
    costs = [
        alq.evaluate_cost(batch, scalar_forced, alpha=a).estimate
        for a in (0.0, 0.3, 1.0)
    ]
    assert costs[0] > costs[1] > costs[2] > 0.0


def test_rademacher_increments(scalar_forced):
    grid = _grid(0.5, 0.05)
    mc = alq.MCSpec(paths=400, seed=4, time_step=0.05, workers=1)
    batch = alq.simulate(scalar_forced, None, X1, grid, mc, increments="rademacher")
    vals = np.unique(np.round(np.abs(batch.dW), 12))
    np.testing.assert_allclose(vals, [np.sqrt(0.05)], rtol=1e-10)


def test_stabilizability_evidence_bounded_tails(benchmark_plain):
    inf = alq.solve_infinite(benchmark_plain)
    grid = _grid(4.0, 0.02)
    mc = alq.MCSpec(paths=500, seed=8, time_step=0.02, workers=1)
    report = alq.stabilizability_evidence(benchmark_plain, inf.stationary, X1, grid, mc)
    assert not report.divergent
    assert report.max_bound < 10.0
    assert len(report.tail_costs) == 4


def test_simulate_grid_must_increase(scalar_forced):
    mc = alq.MCSpec(paths=10, seed=1, time_step=0.01, workers=1)
    with pytest.raises(GridMismatch):
        alq.simulate(scalar_forced, None, X1, np.array([0.0, 0.5, 0.5]), mc)


def test_factor_model_rejects_feedback_policy(factor_model, benchmark_plain):
    inf = alq.solve_infinite(benchmark_plain)
    mc = alq.MCSpec(paths=10, seed=1, time_step=0.01, workers=1)
    with pytest.raises(ValueError):
        alq.simulate(factor_model, inf.stationary, X1, _grid(0.5, 0.01), mc)
