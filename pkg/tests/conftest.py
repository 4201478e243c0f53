import pytest

from probsafe import (
    GridSpec,
    HorizonSpec,
    MarginSpec,
    affine_barrier,
    linear_1d,
    solve_cde,
)
from probsafe.controllers import NominalPolicy


@pytest.fixture(scope="session")
def benchmark_system():
    # dX = (2 X + u) dt + 2 dW
    return linear_1d(2.0, 1.0, 2.0)


@pytest.fixture(scope="session")
def driftless_system():
    # dX = 2 dW, control ineffective
    return linear_1d(0.0, 0.0, 2.0)


@pytest.fixture(scope="session")
def barrier():
    # phi(x) = x - 1
    return affine_barrier([1.0], -1.0)


@pytest.fixture(scope="session")
def fixed_horizon():
    return HorizonSpec("fixed", 10.0)


@pytest.fixture(scope="session")
def zero_margin():
    return MarginSpec(0.0)


@pytest.fixture(scope="session")
def small_u0_field(benchmark_system, barrier, zero_margin):
    """Type-I field of the uncontrolled benchmark on a light grid."""
    grid = GridSpec.for_1d(-1.0, 7.0, 161, 2.0, 21)
    return solve_cde(benchmark_system, NominalPolicy.zero(1), barrier,
                     HorizonSpec("fixed", 2.0), zero_margin, "I", grid)


@pytest.fixture(scope="session")
def small_nominal_field(benchmark_system, barrier, zero_margin):
    """Type-I field of the proportionally stabilised benchmark on a light grid."""
    grid = GridSpec.for_1d(-1.0, 7.0, 161, 2.0, 21)
    return solve_cde(benchmark_system, NominalPolicy.linear(2.5, 1), barrier,
                     HorizonSpec("fixed", 2.0), zero_margin, "I", grid)
