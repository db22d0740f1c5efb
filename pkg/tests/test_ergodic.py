"""Vanishing-discount machinery: the transform, the family, the limit."""

import numpy as np
import pytest

import affinelq as alq
from affinelq.errors import GridMismatch, InsufficientGrid, NonPositiveAlpha

DIMS1 = alq.Dimensions(n=1, k=1, d=1)
X1 = np.array([1.0])


def _plain(f):
    return alq.CoefficientModel.constant(
        DIMS1, [[-1.0]], [[1.0]], [[[0.0]]], [[[0.0]]], [[1.0]], [f]
    )


def test_discount_transform_shifts_and_damps():
    m = _plain(1.0)
    t = alq.discount_transform(m, 0.3)
    np.testing.assert_allclose(t.at(0.0, None).A[0], [[-1.3]], rtol=1e-14)
    np.testing.assert_allclose(t.at(2.0, None).f[0], [np.exp(-0.6)], rtol=1e-14)
    assert t.forcing.tag == "decaying"
    with pytest.raises(NonPositiveAlpha):
        alq.discount_transform(m, 0.0)
    with pytest.raises(NonPositiveAlpha):
        alq.discount_transform(m, -0.1)


def test_scaling_identity_residual_shrinks_with_step():
    m = alq.CoefficientModel.constant(
        DIMS1, [[-1.0]], [[1.0]], [[[0.4]]], [[[0.0]]], [[1.0]], [1.0]
    )
    residuals = []
    for steps in (25, 100):
        grid = np.linspace(0.0, 2.0, steps + 1)
        mc = alq.MCSpec(paths=1000, seed=7, time_step=2.0 / steps, workers=1)
        residuals.append(alq.scaling_identity_check(m, None, X1, 0.3, grid, mc))
    assert residuals[1] < residuals[0]
    assert residuals[1] < 0.02


def test_scaling_identity_rejects_feedback(benchmark_plain):
    inf = alq.solve_infinite(benchmark_plain)
    grid = np.linspace(0.0, 1.0, 11)
    mc = alq.MCSpec(paths=50, seed=1, time_step=0.1, workers=1)
    with pytest.raises(GridMismatch):
        alq.scaling_identity_check(
            benchmark_plain, inf.stationary, X1, 0.3, grid, mc
        )


def test_family_rows_and_gaps():
    report = alq.solve_discounted_family(_plain(1.0), [0.4, 0.2, 0.1])
    assert [r.alpha for r in report.rows] == [0.4, 0.2, 0.1]
    w = [r.term1 - r.term2 for r in report.rows]
    # the alpha-scaled values climb toward the ergodic constant 1/4
    assert w[0] < w[1] < w[2] < 0.25
    assert all(b < a for a, b in zip(report.gaps_P, report.gaps_P[1:]))
    assert all(b < a for a, b in zip(report.gaps_r, report.gaps_r[1:]))


def test_limit_extrapolates_to_quarter():
    report = alq.solve_discounted_family(_plain(1.0), [0.4, 0.2, 0.1, 0.05])
    lim = alq.ergodic_limit(report)
    assert abs(lim.limit - 0.25) < 0.005
    assert lim.x_independent
    assert lim.error_bar > abs(lim.limit - lim.last_raw) * 0.5


def test_zero_forcing_limit_is_zero():
    report = alq.solve_discounted_family(_plain(0.0), [0.4, 0.2, 0.1])
    lim = alq.ergodic_limit(report)
    assert abs(lim.limit) <= 1e-10


def test_transient_forcing_limit_within_error_bar():
    m = _plain(1.0).with_damped_forcing(1.0)
    report = alq.solve_discounted_family(m, [0.4, 0.2, 0.1, 0.05])
    lim = alq.ergodic_limit(report)
    assert abs(lim.limit) <= lim.error_bar


def test_insufficient_grid():
    report = alq.solve_discounted_family(_plain(1.0), [0.4, 0.2])
    with pytest.raises(InsufficientGrid):
        alq.ergodic_limit(report)


def test_limit_independent_of_initial_state():
    report = alq.solve_discounted_family(
        _plain(1.0), [0.4, 0.2, 0.1], x0_pair=(np.array([2.0]), np.array([-3.0]))
    )
    lim = alq.ergodic_limit(report)
    assert lim.x_independent
    assert lim.x_gap < 0.05
