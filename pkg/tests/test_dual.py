"""Affine costate solvers: linear decay oracle, linearity, duality identity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import affinelq as alq
from affinelq.errors import GridMismatch, UnstableClosedLoop

ZERO1 = np.zeros((1, 1))


def _lattice_pair(model, depth, T, scheme="implicit", terminal=None):
    lat = alq.FiltrationLattice(depth=depth, step=T / depth, d=model.dims.d)
    ricc = alq.solve_finite_lattice(
        model, lat, ZERO1 if terminal is None else terminal, scheme=scheme
    )
    fb = alq.feedback_quadratic(ricc, model)
    dual = alq.solve_dual_finite(model, fb, ricc, scheme=scheme)
    return ricc, fb, dual


def test_linear_decay_oracle():
    # A=B=C=D=0, S=0, P_T=I keeps P constant at I; with f = v the costate
    # integrates to r(t) = (T - t) v
    dims = alq.Dimensions(n=2, k=1, d=1)
    v = np.array([0.4, -0.2])
    m = alq.CoefficientModel.constant(
        dims, np.zeros((2, 2)), np.zeros((2, 1)), [np.zeros((2, 2))],
        [np.zeros((2, 1))], np.zeros((2, 2)), v,
    )
    T = 1.0
    ricc = alq.solve_finite_deterministic(m, T, np.eye(2))
    fb = alq.feedback_quadratic(ricc, m)
    dual = alq.solve_dual_finite(m, fb, ricc)
    for t in (0.0, 0.25, 0.75):
        np.testing.assert_allclose(dual.dense(t), (T - t) * v, atol=1e-9)
    lat = alq.FiltrationLattice(depth=8, step=T / 8, d=1)
    ricc2 = alq.solve_finite_lattice(m, lat, np.eye(2))
    dual2 = alq.solve_dual_finite(m, alq.feedback_quadratic(ricc2, m), ricc2)
    np.testing.assert_allclose(dual2.r0, T * v, atol=1e-12)


def test_zero_forcing_gives_zero_costate(benchmark_plain):
    ricc, _, dual = _lattice_pair(benchmark_plain, 6, 1.5)
    assert dual.max_r() == 0.0
    assert dual.max_g() == 0.0


@settings(max_examples=15, deadline=None)
@given(
    st.floats(-2.0, 2.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0),
)
def test_costate_linear_in_forcing(f1, f2, scale):
    # the costate equation is affine: r[f1 + scale f2] = r[f1] + scale r[f2]
    dims = alq.Dimensions(n=1, k=1, d=1)

    def with_f(value):
        return alq.CoefficientModel.constant(
            dims, [[-1.0]], [[1.0]], [[[0.5]]], [[[0.2]]], [[1.0]], [value]
        )

    T, depth = 1.0, 5
    lat = alq.FiltrationLattice(depth=depth, step=T / depth, d=1)
    ricc = alq.solve_finite_lattice(with_f(0.0), lat, ZERO1)
    fb = alq.feedback_quadratic(ricc, with_f(0.0))
    r_a = alq.solve_dual_finite(with_f(f1), fb, ricc).r0
    r_b = alq.solve_dual_finite(with_f(f2), fb, ricc).r0
    r_ab = alq.solve_dual_finite(with_f(f1 + scale * f2), fb, ricc).r0
    np.testing.assert_allclose(r_ab, r_a + scale * r_b, atol=1e-12)


def test_duality_identity_explicit_scheme(scalar_forced):
    # the discrete product rule telescopes exactly for the explicit costate
    for depth in (6, 10):
        ricc, fb, dual = _lattice_pair(scalar_forced, depth, 2.0, scheme="explicit")
        res = alq.duality_residual(dual, scalar_forced, fb, x=np.array([0.7]))
        assert res <= 1e-12


def test_duality_identity_first_order_on_implicit(scalar_forced):
    ricc8, fb8, dual8 = _lattice_pair(scalar_forced, 8, 2.0)
    ricc16, fb16, dual16 = _lattice_pair(scalar_forced, 16, 2.0)
    res8 = alq.duality_residual(dual8, scalar_forced, fb8, x=np.array([0.7]))
    res16 = alq.duality_residual(dual16, scalar_forced, fb16, x=np.array([0.7]))
    assert 0.0 < res16 < 0.7 * res8


def test_duality_with_eta_and_terminal(scalar_forced):
    G = np.array([[0.4]])
    T, depth = 1.5, 8
    lat = alq.FiltrationLattice(depth=depth, step=T / depth, d=1)
    ricc = alq.solve_finite_lattice(scalar_forced, lat, G, scheme="explicit")
    fb = alq.feedback_quadratic(ricc, scalar_forced)
    xi = np.array([0.3])
    dual = alq.solve_dual_finite(scalar_forced, fb, ricc, terminal=xi, scheme="explicit")
    eta = [0.2 * np.ones((lat.n_nodes(level), 1)) for level in range(depth + 1)]
    res = alq.duality_residual(dual, scalar_forced, fb, x=np.array([0.5]), eta=eta, xi=xi)
    assert res <= 1e-12
    # xi must be the dual solution's own terminal datum
    with pytest.raises(GridMismatch):
        alq.duality_residual(
            dual, scalar_forced, fb, x=np.array([0.5]), xi=np.array([9.0])
        )


def test_infinite_costate_scalar_oracle(benchmark_plain):
    # f_t = e^{-t}: stationary loop H = -sqrt(2), B = 1 gives
    # r(0) = 1/(1 + sqrt(2))^2 = 3 - 2 sqrt(2)
    m = benchmark_plain.with_damped_forcing(1.0)
    # forcing provider is zero for this fixture; rebuild with f = 1
    m = alq.CoefficientModel.constant(
        alq.Dimensions(n=1, k=1, d=1), [[-1.0]], [[1.0]], [[[0.0]]], [[[0.0]]],
        [[1.0]], [1.0],
    ).with_damped_forcing(1.0)
    inf = alq.solve_infinite(m)
    dual_inf = alq.solve_dual_infinite(m, inf.stationary, inf)
    np.testing.assert_allclose(dual_inf.r_bar0[0], 3.0 - 2.0 * np.sqrt(2.0), atol=1e-9)
    assert dual_inf.converged
    # horizon-uniform bound: no increase beyond roundoff
    increments = np.diff(dual_inf.bound_log)
    assert increments.max(initial=0.0) <= 1e-8
    assert np.all(np.diff(dual_inf.tail_sq) < 0.0)


def test_infinite_costate_requires_square_integrable_forcing(benchmark_plain):
    m = alq.CoefficientModel.constant(
        alq.Dimensions(n=1, k=1, d=1), [[-1.0]], [[1.0]], [[[0.0]]], [[[0.0]]],
        [[1.0]], [1.0],
    )
    inf = alq.solve_infinite(m)
    with pytest.raises(UnstableClosedLoop):
        alq.solve_dual_infinite(m, inf.stationary, inf)


def test_grid_mismatch_between_riccati_and_feedback(scalar_forced):
    T = 1.0
    lat_a = alq.FiltrationLattice(depth=4, step=T / 4, d=1)
    lat_b = alq.FiltrationLattice(depth=5, step=T / 5, d=1)
    ricc_a = alq.solve_finite_lattice(scalar_forced, lat_a, ZERO1)
    ricc_b = alq.solve_finite_lattice(scalar_forced, lat_b, ZERO1)
    fb_b = alq.feedback_quadratic(ricc_b, scalar_forced)
    with pytest.raises(GridMismatch):
        alq.solve_dual_finite(scalar_forced, fb_b, ricc_a)


def test_sup_norm_report(scalar_forced):
    ricc, fb, dual = _lattice_pair(scalar_forced, 6, 2.0)
    norms = alq.feedback_sup_norms(fb)
    assert set(norms) == {"C_H", "C_K"}
    assert 1.0 <= norms["C_H"] <= 2.0
    np.testing.assert_allclose(norms["C_K"], 0.5, atol=0.1)
