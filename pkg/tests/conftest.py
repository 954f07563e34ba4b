"""Shared fixtures and oracles.

central_diff is the finite-difference oracle every analytic gradient in the
suite is checked against; graph helpers build small deterministic
connectomes without going through the synthetic generator.
"""

import numpy as np
import pytest

from trajmoe.graph import Connectome, build_operators


def central_diff(f, x, eps=1e-6):
    """Dense central-difference gradient of a scalar function of a flat
    float64 vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64).ravel()
    want = np.asarray(want, dtype=np.float64).ravel()
    denom = max(1e-12, float(np.linalg.norm(want)))
    return float(np.linalg.norm(got - want)) / denom


def ring_adjacency(n, weight=1.0):
    a = np.zeros((n, n))
    for i in range(n):
        j = (i + 1) % n
        a[i, j] = weight
        a[j, i] = weight
    return a


def ring_connectome(n, weight=1.0):
    names = tuple(f"r{i}" for i in range(n))
    return Connectome(region_names=names, adjacency=ring_adjacency(n, weight))


def random_connectome(n, rng, density=0.6):
    """Random symmetric nonnegative adjacency with at least one edge."""
    while True:
        u = rng.random((n, n))
        w = rng.random((n, n))
        a = np.triu((u < density) * w, k=1)
        a = a + a.T
        if a.sum() > 0:
            break
    names = tuple(f"r{i}" for i in range(n))
    return Connectome(region_names=names, adjacency=a)


@pytest.fixture
def ring8():
    return ring_connectome(8)


@pytest.fixture
def ring8_ops(ring8):
    return build_operators(ring8)
