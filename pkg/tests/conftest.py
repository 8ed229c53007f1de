import numpy as np
import pytest

from lgt.operator import LieOperator, TransformChain


def random_diagonalizable(rng, n, scale=0.5):
    """Random real matrix; real matrices are diagonalizable almost surely."""
    return scale * rng.standard_normal((n, n))


def random_operator(rng, n, lam_scale=0.4):
    """Well-conditioned random complex operator."""
    u = np.eye(n) + 0.35 * (
        rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    ) / np.sqrt(n)
    lam = lam_scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return LieOperator.from_matrices(u, lam)


def random_chain(rng, n, k):
    return TransformChain(tuple(random_operator(rng, n) for _ in range(k)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
