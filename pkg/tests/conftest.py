import numpy as np
import pytest

from instances import hard_instance_K, hard_instance_tau, tabular_to_linear


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def hard_k():
    """E.1-style family at gamma = 0.9, eps = 0.05 with three actions."""
    return hard_instance_K(3, 0.9, 0.05)


@pytest.fixture
def hard_tau():
    return hard_instance_tau(0.9, 0.1, 1.0, 0)


@pytest.fixture
def single_state():
    """One state, one action, reward 0.5."""
    return tabular_to_linear([[[1.0]]], [[0.5]], 0.9, nu0=[1.0])
