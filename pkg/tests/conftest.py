import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from envq.env_core import EnvironmentSpec, ModelSpec, QueueSpec

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_env(rng: np.random.Generator, n: int, n_blocking: int, density: float = 0.5) -> EnvironmentSpec:
    """Random valid environment: every blocking state has a V-path back to K_W."""
    V = rng.uniform(0.1, 3.0, (n, n)) * (rng.random((n, n)) < density)
    n_w = n - n_blocking
    for k in range(n_w, n):
        # guarantee an exit towards a lower index, which ends in K_W
        V[k, rng.integers(0, k)] += rng.uniform(0.1, 2.0)
    np.fill_diagonal(V, 0.0)
    np.fill_diagonal(V, -V.sum(axis=1))
    R = rng.random((n, n)) * (rng.random((n, n)) < density)
    R[np.arange(n), rng.integers(0, n, n)] += 0.5
    R /= R.sum(axis=1, keepdims=True)
    return EnvironmentSpec(tuple(range(n)), frozenset(range(n_w, n)), V, R)


def wrap(env: EnvironmentSpec, lam=1.0, mu=2.0, capacity=None) -> ModelSpec:
    return ModelSpec(QueueSpec(tuple(np.atleast_1d(lam)), tuple(np.atleast_1d(mu)), capacity), env)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
