import numpy as np
import pytest
from conftest import dense_operator, dense_solve, loop_gradient, random_admissible

from homlab.errors import GridMismatchError, NoConvergenceError, SingularMatrixError
from homlab.gaussian import CoefficientField
from homlab.grid import TorusGrid
from homlab.operators import (
    apply_operator,
    div,
    dual_norm,
    grad,
    helmholtz_project,
    leray_project,
    solve_constant,
    solve_divergence_form,
)


def inner(grid, u, v):
    return float(np.sum(u * v)) * grid.cell_volume


def test_grad_of_constant_vanishes(grid8):
    assert not grad(np.full(grid8.shape, 7.0), grid8).any()


def test_grad_matches_loop_on_sine():
    grid = TorusGrid(2, 16, 8.0)
    x = np.arange(16) * grid.spacing
    u = np.sin(2 * np.pi * x / grid.extent)[:, None] * np.ones(16)[None, :]
    assert np.allclose(grad(u, grid), loop_gradient(u, grid), atol=1e-14)


def test_summation_by_parts(rng):
    grid = TorusGrid(2, 32, 16.0)
    u = rng.standard_normal(grid.shape)
    v = rng.standard_normal((2,) + grid.shape)
    lhs = inner(grid, div(v, grid), u) + inner(grid, v, grad(u, grid))
    assert abs(lhs) <= 1e-12 * grid.norm(u) * grid.norm(v)


def test_div_of_constant_vanishes(grid8):
    assert np.allclose(div(np.ones((2,) + grid8.shape), grid8), 0.0)


def test_div_grad_is_five_point_laplacian(rng):
    grid = TorusGrid(2, 16, 8.0)
    u = rng.standard_normal(grid.shape)
    h2 = grid.spacing**2
    stencil = (np.roll(u, 1, 0) + np.roll(u, -1, 0) + np.roll(u, 1, 1) + np.roll(u, -1, 1) - 4 * u) / h2
    assert np.allclose(div(grad(u, grid), grid), stencil, atol=1e-12)


def test_identity_coefficient_gives_negative_laplacian(rng, grid8):
    u = rng.standard_normal(grid8.shape)
    a = CoefficientField.constant(grid8, np.eye(2))
    assert np.allclose(apply_operator(a, u), -div(grad(u, grid8), grid8), atol=1e-13)


def test_operator_adjoint(rng):
    grid = TorusGrid(2, 32, 16.0)
    a = random_admissible(grid, rng)
    u, v = rng.standard_normal((2,) + grid.shape)
    lhs = inner(grid, v, apply_operator(a, u))
    rhs = inner(grid, apply_operator(a.T, v), u)
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_bilinear_form(rng):
    grid = TorusGrid(2, 16, 8.0)
    a = random_admissible(grid, rng)
    u, v = rng.standard_normal((2,) + grid.shape)
    lhs = inner(grid, v, apply_operator(a, u))
    rhs = inner(grid, grad(v, grid), a.apply(grad(u, grid)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_dense_assembly_matches_operator(rng, grid8):
    a = random_admissible(grid8, rng)
    A = dense_operator(a)
    for _ in range(5):
        u = rng.standard_normal(grid8.shape)
        assert np.allclose(A @ u.ravel(), apply_operator(a, u).ravel(), atol=1e-12)


def test_coercivity(rng):
    grid = TorusGrid(2, 32, 16.0)
    lam = 0.25
    a = random_admissible(grid, rng, lam=lam)
    for _ in range(20):
        u = rng.standard_normal(grid.shape)
        u -= u.mean()
        assert inner(grid, u, apply_operator(a, u)) >= lam * grid.norm(grad(u, grid)) ** 2


def test_grid_mismatch():
    a = CoefficientField.constant(TorusGrid(2, 8, 8.0), np.eye(2))
    with pytest.raises(GridMismatchError):
        apply_operator(a, np.zeros((16, 16)))


def test_zero_rhs_gives_zero(grid8):
    a = CoefficientField.constant(grid8, 0.5 * np.eye(2))
    u, report = solve_divergence_form(a, np.zeros((2,) + grid8.shape))
    assert not u.any() and report.converged and report.iterations == 0


def test_constant_coefficient_matches_spectral(rng):
    grid = TorusGrid(2, 32, 16.0)
    M = np.array([[0.7, 0.1], [-0.1, 0.5]])
    f = rng.standard_normal((2,) + grid.shape)
    u, report = solve_divergence_form(CoefficientField.constant(grid, M), f, tol=1e-10)
    exact = solve_constant(M, f, grid)
    assert report.iterations <= 2
    assert np.linalg.norm(u - exact) <= 1e-10 * np.linalg.norm(exact)


def test_krylov_matches_dense_lu(rng, grid8):
    tol = 1e-10
    a = random_admissible(grid8, rng)
    f = rng.standard_normal((2,) + grid8.shape)
    u, report = solve_divergence_form(a, f, tol=tol)
    exact = dense_solve(dense_operator(a), div(f, grid8).ravel()).reshape(grid8.shape)
    assert report.converged and report.residual <= tol
    assert np.linalg.norm(u - exact) <= 10 * tol * np.linalg.norm(exact)
    assert abs(u.mean()) < 1e-14


def test_report_residual_is_energy_dual(rng):
    grid = TorusGrid(2, 32, 16.0)
    a = random_admissible(grid, rng)
    f = rng.standard_normal((2,) + grid.shape)
    u, report = solve_divergence_form(a, f, tol=1e-6)
    rhs = div(f, grid)
    measured = dual_norm(apply_operator(a, u) - rhs, grid) / dual_norm(rhs, grid)
    assert measured == pytest.approx(report.residual, rel=1e-6)


def test_no_convergence_carries_report(rng):
    grid = TorusGrid(2, 32, 16.0)
    a = random_admissible(grid, rng)
    f = rng.standard_normal((2,) + grid.shape)
    with pytest.raises(NoConvergenceError) as info:
        solve_divergence_form(a, f, tol=1e-12, max_iter=2)
    assert info.value.report.iterations == 2 and not info.value.report.converged


def test_solve_constant_zero_and_recovery(rng):
    grid = TorusGrid(2, 32, 16.0)
    assert not solve_constant(np.eye(2), np.zeros((2,) + grid.shape), grid).any()
    u = rng.standard_normal(grid.shape)
    u -= u.mean()
    # -div(grad v) = div(grad u)  =>  v = -u
    v = solve_constant(np.eye(2), grad(u, grid), grid)
    assert np.allclose(v, -u, atol=1e-12)


def test_solve_constant_nonsymmetric_matches_dense(rng, grid8):
    M = np.array([[0.6, 0.3], [-0.2, 0.4]])
    f = rng.standard_normal((2,) + grid8.shape)
    exact = dense_solve(dense_operator(CoefficientField.constant(grid8, M)), div(f, grid8).ravel())
    assert np.allclose(solve_constant(M, f, grid8).ravel(), exact, atol=1e-12)


def test_singular_matrix(grid8):
    with pytest.raises(SingularMatrixError):
        solve_constant(np.array([[1.0, 0.0], [0.0, -0.1]]), np.zeros((2,) + grid8.shape), grid8)


def test_projection_fixes_gradients(rng):
    grid = TorusGrid(2, 32, 16.0)
    u = rng.standard_normal(grid.shape)
    g = grad(u, grid)
    assert np.linalg.norm(helmholtz_project(np.eye(2), g, grid) - g) <= 1e-10 * np.linalg.norm(g)


@pytest.mark.parametrize("transpose", [False, True])
def test_projection_algebra(rng, transpose):
    grid = TorusGrid(2, 32, 16.0)
    M = np.array([[0.8, 0.25], [-0.1, 0.5]])
    m = M.T if transpose else M
    v = rng.standard_normal((2,) + grid.shape)
    p = helmholtz_project(M, v, grid, transpose)
    pap = helmholtz_project(M, np.einsum("ij,j...->i...", m, p), grid, transpose)
    assert np.linalg.norm(pap - p) <= 1e-10 * np.linalg.norm(p)
    pl = leray_project(M, v, grid, transpose)
    assert np.linalg.norm(div(np.einsum("ij,j...->i...", m, pl), grid)) <= 1e-10 * np.linalg.norm(div(v, grid))


def test_leray_divergence_free_isotropic(rng):
    grid = TorusGrid(2, 32, 16.0)
    v = rng.standard_normal((2,) + grid.shape)
    pl = leray_project(0.6 * np.eye(2), v, grid)
    assert np.linalg.norm(div(pl, grid)) <= 1e-10 * np.linalg.norm(div(v, grid))


def test_projection_on_tensor_rows(rng):
    grid = TorusGrid(2, 16, 8.0)
    M = np.array([[0.8, 0.25], [-0.1, 0.5]])
    F = rng.standard_normal((2, 2) + grid.shape)
    stacked = helmholtz_project(M, F, grid, transpose=True)
    for i in range(2):
        assert np.allclose(stacked[i], helmholtz_project(M, F[i], grid, transpose=True), atol=1e-14)
