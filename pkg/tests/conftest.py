import numpy as np
import pytest

from cophase.experiments import GridPoint, draw_instance
from cophase.model import observe_partial


def make_instance(N, M, C, n=0.0, seed=0):
    """Random Gaussian instance: (op, xi, b, obs)."""
    op, xi, b = draw_instance(GridPoint(N=N, M=M, C=C, n=n), seed)
    return op, xi, b, observe_partial(op, b)


def true_psi(op, xi):
    """Unit reduced phase vector of the noise-free data, referenced to the anchor members."""
    obs = observe_partial(op, op.entries @ xi)
    ref = (op.entries @ xi).reshape(op.C, op.M)[obs.anchors, np.arange(op.M)]
    return ref / np.abs(ref)


def collinearity(u, v):
    return abs(np.vdot(u, v)) / (np.linalg.norm(u) * np.linalg.norm(v))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
