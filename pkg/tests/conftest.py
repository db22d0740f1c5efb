"""Shared benchmark models for the test suite."""

import numpy as np
import pytest

import affinelq as alq
from affinelq.model import FactorSpec

DIMS1 = alq.Dimensions(n=1, k=1, d=1)

# closed-form stationary values for the two scalar benchmarks
P_BAR_PLAIN = np.sqrt(2.0) - 1.0  # a=-1, b=1, c=0, d=0, s=1
P_BAR_CONTROL_NOISE = (-1.0 + np.sqrt(13.0)) / 6.0  # same but d=1


@pytest.fixture(scope="session")
def benchmark_plain():
    return alq.CoefficientModel.constant(
        DIMS1, [[-1.0]], [[1.0]], [[[0.0]]], [[[0.0]]], [[1.0]], [0.0]
    )


@pytest.fixture(scope="session")
def benchmark_control_noise():
    return alq.CoefficientModel.constant(
        DIMS1, [[-1.0]], [[1.0]], [[[0.0]]], [[[1.0]]], [[1.0]], [0.0]
    )


@pytest.fixture(scope="session")
def scalar_forced():
    """Every coefficient active: state and control noise plus forcing."""
    return alq.CoefficientModel.constant(
        DIMS1, [[-1.0]], [[1.0]], [[[0.5]]], [[[0.2]]], [[1.0]], [0.3]
    )


@pytest.fixture(scope="session")
def factor_model():
    """Scalar model whose drift is modulated by the Brownian factor."""
    factor = FactorSpec(targets=frozenset({"A"}), amplitude=0.3, kappa=1.0, weights=(1.0,))
    base = alq.CoefficientModel.factor_driven(
        DIMS1, [[-1.0]], [[1.0]], [[[0.5]]], [[[0.0]]], [[1.0]], [1.0], factor=factor
    )
    return base.with_damped_forcing(2.0)


@pytest.fixture(scope="session")
def matrix_model():
    """2x2 deterministic time-varying instance."""
    dims = alq.Dimensions(n=2, k=1, d=1)
    A = lambda t: np.array([[-1.0, 0.3 * np.sin(t)], [0.0, -0.8]])
    return alq.CoefficientModel.time_varying(
        dims, A, [[1.0], [0.5]], [0.3 * np.eye(2)],
        [np.array([[0.1], [0.0]])], np.eye(2), [0.2, -0.1], bounds={"A": 1.3},
    )
