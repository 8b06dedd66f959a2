import numpy as np
import pytest

from poisson_disorder import (
    BeliefPoint,
    ModelSpec,
    build_erlang,
    build_hyperexponential,
)


@pytest.fixture(scope="session")
def erlang_slow_model():
    """Two-stage chain, pre-disorder arrivals faster than post (lam0 > lam1)."""
    return ModelSpec(build_erlang(2, 3.0), lam0=6.0, lam1=5.0, c=1.0)


@pytest.fixture(scope="session")
def erlang_fast_model():
    """Two-stage chain, post-disorder arrivals faster (lam1 > lam0 + chain rate)."""
    return ModelSpec(build_erlang(2, 3.0), lam0=5.0, lam1=10.0, c=1.0)


@pytest.fixture(scope="session")
def hyper_fast_model():
    """Two-rate mixture prior, post-disorder arrivals faster."""
    return ModelSpec(build_hyperexponential([3.0, 2.0]), lam0=2.0, lam1=6.0, c=1.5)


@pytest.fixture(scope="session")
def hyper_slow_model():
    """Two-rate mixture prior, post-disorder arrivals slower (finite horizon bound)."""
    return ModelSpec(build_hyperexponential([3.0, 2.0]), lam0=2.0, lam1=1.0, c=1.5)


@pytest.fixture(scope="session")
def fresh_start():
    return BeliefPoint([1.0, 0.0, 0.0])


def random_belief(rng: np.random.Generator, n: int = 2) -> BeliefPoint:
    return BeliefPoint(rng.dirichlet(np.ones(n + 1)))
