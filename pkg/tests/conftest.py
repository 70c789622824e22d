import itertools

import numpy as np
import pytest

from homlab.gaussian import CoefficientField, CovarianceSpec, Link, sample_coefficient
from homlab.grid import TorusGrid


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid8():
    return TorusGrid(2, 8, 8.0)


def random_admissible(grid, rng, lam=0.25, kappa=0.2):
    """Cell-wise random nonsymmetric field: diagonal in [lam + kappa, 1 - kappa]
    plus a skew part of size at most kappa, so norm <= 1 and coercivity >= lam."""
    d = grid.dim
    m = np.zeros((d, d) + grid.shape)
    s = rng.uniform(lam + kappa, 1.0 - kappa, grid.shape)
    for i in range(d):
        m[i, i] = s
    pairs = [(j, k) for j in range(d) for k in range(j + 1, d)]
    for j, k in pairs:
        e = rng.uniform(-kappa, kappa, grid.shape) / np.sqrt(max(len(pairs), 1))
        m[j, k] = e
        m[k, j] = -e
    return CoefficientField(grid, m).check_admissible(lam)


@pytest.fixture
def random_field():
    return random_admissible


def loop_gradient(u, grid):
    """Forward differences by explicit index loops (oracle)."""
    d, n, h = grid.dim, grid.n, grid.spacing
    out = np.zeros((d,) + grid.shape)
    for idx in itertools.product(range(n), repeat=d):
        for i in range(d):
            nxt = list(idx)
            nxt[i] = (nxt[i] + 1) % n
            out[(i,) + idx] = (u[tuple(nxt)] - u[idx]) / h
    return out


def dense_operator(a):
    """``A[p, q] = h^d <G e_p, a G e_q>`` assembled from the quadratic form on
    basis vectors, then divided by ``h^d`` so that ``A u = -div(a grad u)``."""
    grid = a.grid
    size = grid.size
    grads = []
    for p in range(size):
        e = np.zeros(size)
        e[p] = 1.0
        grads.append(loop_gradient(e.reshape(grid.shape), grid))
    A = np.zeros((size, size))
    for q in range(size):
        flux = np.einsum("ij...,j...->i...", a.matrices, grads[q])
        for p in range(size):
            A[p, q] = np.sum(grads[p] * flux)
    return A


def dense_solve(A, rhs):
    """Mean-zero solution of the singular system via a bordered LU factorization."""
    import scipy.linalg

    n = A.shape[0]
    bordered = np.zeros((n + 1, n + 1))
    bordered[:n, :n] = A
    bordered[:n, n] = 1.0
    bordered[n, :n] = 1.0
    sol = scipy.linalg.lu_solve(scipy.linalg.lu_factor(bordered), np.append(rhs, 0.0))
    return sol[:n]


def small_sample(beta=4.0, n=32, extent=16.0, seed=3, link=None, sample=0):
    grid = TorusGrid(2, n, extent)
    spec = CovarianceSpec(beta, link=link or Link())
    return sample_coefficient(spec, grid, seed, sample)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    lines = getattr(test_acceptance, "LINES", None) if "test_acceptance" in __import__("sys").modules else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
