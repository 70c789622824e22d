"""Homogenization commutator and the fluctuation functionals at scale ``eps``.

Everything is evaluated in fast coordinates ``y = x / eps`` on the torus:
``int F(x) : G(x / eps) dx = eps^d * sum_y F(eps y) : G(y) h^d``.  Tensor
fields are indexed ``[i, j]`` with ``i`` the corrector direction and ``j``
the vector component; projections act on ``j``.

The heterogeneous solution is represented by ``v`` with
``-div(a grad v) = div f(eps .)`` so that ``grad u_eps(x) = grad v(x / eps)``;
the homogenized solution likewise by ``vbar`` (constant coefficient ``abar``),
and ``U = grad vbar`` plays the role of ``grad ubar`` at the slow points.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingCenteringError, ValidationError
from .operators import (
    apply_operator,
    backward,
    div,
    grad,
    helmholtz_project,
    leray_project,
    shift,
    solve_constant,
    solve_divergence_form,
)


def pi_star(t, beta, d):
    """Fluctuation scaling: ``(1+t)^beta``, ``(1+t)^d / log(2+t)`` or ``(1+t)^d``
    for ``beta`` below, at or above ``d``."""
    if beta < d:
        return (1.0 + t) ** beta
    if beta == d:
        return (1.0 + t) ** d / math.log(2.0 + t)
    return (1.0 + t) ** d


def mu_star(r, beta, d):
    """Growth scale of the two-scale expansion error (defined for ``d >= 2``)."""
    if d < 2:
        raise ValidationError("mu_star is only defined for d >= 2")
    if beta > 2:
        return 1.0 if d > 2 else math.log(2.0 + r) ** 0.5
    if beta == 2:
        return math.log(2.0 + r)
    return (1.0 + r) ** (1.0 - beta / 2.0)


def quadrature_weight(grid, eps):
    return eps**grid.dim * grid.cell_volume


def _bcast(matrix_column, grid):
    return np.asarray(matrix_column)[(slice(None),) + (None,) * grid.dim]


def matvec(m, v, grid):
    """Constant matrix ``m`` applied to a vector field ``v`` of shape ``(..., d, *grid)``."""
    return np.tensordot(m, v, axes=([1], [v.ndim - grid.dim - 1])).transpose(
        tuple(range(1, v.ndim - grid.dim)) + (0,) + tuple(range(v.ndim - grid.dim, v.ndim))
    )


def commutator_field(a, correctors, abar):
    """``Xi[i, j] = e_j . (a - abar)(grad phi_i + e_i)``."""
    grid = a.grid
    harmonic = correctors.harmonic_gradient()
    return correctors.q - matvec(np.asarray(abar), harmonic, grid)


def functional_integrand(kind, a, correctors, abar):
    """Field ``G`` paired with ``F`` by ``J_kind``."""
    if kind == 0:
        return commutator_field(a, correctors, abar)
    if kind == 1:
        return correctors.grad_phi()
    if kind == 2:
        grid = a.grid
        abar = np.asarray(abar)
        return np.stack([correctors.q[i] - _bcast(abar[:, i], grid) for i in range(grid.dim)])
    raise ValidationError(f"J functional kind must be 0, 1 or 2, got {kind}")


def pair(weighted_test, field_):
    """Plain sum of the pointwise contraction; the weight lives in the test array."""
    return float(np.sum(weighted_test * field_))


def weighted_sample(test, grid, eps):
    return quadrature_weight(grid, eps) * test.sample(grid, eps)


def eval_J(kind, F, eps, a, correctors, abar):
    """``int F(x) : G(x / eps) dx`` for ``G`` the commutator (0), corrector
    gradient (1) or centred corrector flux (2)."""
    grid = a.grid
    return pair(weighted_sample(F, grid, eps), functional_integrand(kind, a, correctors, abar))


def solve_heterogeneous(a, f, eps, tol=1e-10):
    """``v`` with ``-div(a grad v) = div f(eps .)`` on the fast torus."""
    return solve_divergence_form(a, f.sample(a.grid, eps), tol=tol)


def homogenized_solution(abar, f, eps, grid):
    """``vbar`` with ``-div(abar grad vbar) = div f(eps .)``; ``grad vbar(y)`` approximates ``grad ubar(eps y)``."""
    return solve_constant(abar, f.sample(grid, eps), grid)


@dataclass
class Centering:
    """Expectation fields of ``grad v``, ``a grad v`` and, optionally, of the
    commutator field ``Xi``.

    ``source`` is ``"ensemble-mean"`` when estimated from the run's samples,
    ``"precomputed"`` when supplied.  The exact ``Xi`` has zero expectation;
    with an ensemble ``abar`` only its spatial average vanishes, so the
    ensemble mean of ``Xi`` is carried along and removed from the two-scale
    term in the same way as the solution commutator is centred.
    """

    grad: np.ndarray
    flux: np.ndarray
    source: str = "precomputed"
    xi: np.ndarray = None

    def commutator(self, abar, grid):
        return self.flux - matvec(np.asarray(abar), self.grad, grid)

    @classmethod
    def from_ensemble(cls, coefficients, solutions, correctors=None, abar=None):
        grads = [grad(v, a.grid) for a, v in zip(coefficients, solutions)]
        fluxes = [a.apply(g) for a, g in zip(coefficients, grads)]
        xi = None
        if correctors is not None:
            xi = np.mean([commutator_field(a, c, abar) for a, c in zip(coefficients, correctors)], axis=0)
        return cls(np.mean(grads, axis=0), np.mean(fluxes, axis=0), "ensemble-mean", xi)


def _require(centering):
    if centering is None:
        raise MissingCenteringError("a centering (ensemble mean or precomputed field) is required")
    return centering


def eval_I(kind, g, eps, a, v, centering):
    """``int g . (grad u_eps - E grad u_eps)`` (kind 1) or the same for the flux (kind 2)."""
    centering = _require(centering)
    grid = a.grid
    gv = grad(v, grid)
    if kind == 1:
        centred = gv - centering.grad
    elif kind == 2:
        centred = a.apply(gv) - centering.flux
    else:
        raise ValidationError(f"I functional kind must be 1 or 2, got {kind}")
    return pair(weighted_sample(g, grid, eps), centred)


def solution_commutator(a, v, abar):
    gv = grad(v, a.grid)
    return a.apply(gv) - matvec(np.asarray(abar), gv, a.grid)


def eval_E(g, eps, a, v, correctors, abar, U, centering):
    """Two-scale expansion error of the centred solution commutator.

    ``U`` is the homogenized gradient on the fast grid (``grad vbar``).
    """
    centering = _require(centering)
    grid = a.grid
    gw = weighted_sample(g, grid, eps)
    centred = solution_commutator(a, v, abar) - centering.commutator(abar, grid)
    xi = commutator_field(a, correctors, abar)
    if centering.xi is not None:
        xi = xi - centering.xi
    expansion = np.einsum("i...,ij...->j...", U, xi)
    return pair(gw, centred) - pair(gw, expansion)


def two_scale_error_field(v, vbar, phi, U):
    """``v - vbar - phi_i U_i``, shifted to zero mean."""
    w = v - vbar - np.einsum("i...,i...->...", phi, U)
    return w - w.mean()


def shifted_product(phi, X, grid):
    """Discrete ``phi grad X``: ``phi(y + h e_k) * forward_k X``, the exact
    remainder in ``grad(phi X) = X grad phi + phi grad X``."""
    gx = grad(X, grid)
    return np.stack([shift(phi, k, +1) * gx[k] for k in range(grid.dim)])


def sigma_product(sigma_j, X, grid):
    """Discrete ``sigma_j grad X`` with ``sigma_j`` contracted on its last index:
    ``sum_k sigma_jlk(y - h e_k) * backward_k X``."""
    d = grid.dim
    return np.stack(
        [sum(shift(sigma_j[l, k], k, -1) * backward(X, k, grid) for k in range(d)) for l in range(d)]
    )


def corrector_weighted_flux(a, correctors, X, abar, grid):
    """``sum_j (phi_j a - sigma_j) grad X_j + X_j (abar_cell - abar) e_j``.

    This is the exact discrete divergence-form right-hand side for the
    two-scale error and for the auxiliary problems of the E-derivative;
    the last term vanishes when ``abar`` is the realization's own torus average.
    """
    d = grid.dim
    sigma = correctors.sigma()
    mismatch = np.asarray(correctors.abar) - np.asarray(abar)
    out = np.zeros((d,) + grid.shape)
    for j in range(d):
        out += a.apply(shifted_product(correctors.phi[j], X[j], grid))
        out -= sigma_product(sigma[j], X[j], grid)
        out += X[j] * _bcast(mismatch[:, j], grid)
    return out


def two_scale_residual(a, w, correctors, U, abar):
    """Relative mismatch between ``-div(a grad w)`` and the divergence of the
    corrector-weighted flux built from ``grad U``."""
    grid = a.grid
    lhs = apply_operator(a, w)
    rhs = div(corrector_weighted_flux(a, correctors, U, abar, grid), grid)
    return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny))


def _relative(x, y, magnitude=0.0):
    """``|x - y|`` relative to the larger value, floored at roundoff of the
    summed absolute contributions so that two vanishing quantities compare equal."""
    scale = max(abs(x), abs(y), 64 * np.finfo(float).eps * magnitude)
    return 0.0 if scale == 0.0 else abs(x - y) / scale


def _magnitude(w, field):
    return float(np.sum(np.abs(w) * np.abs(field)))


def project_rows(abar, F, grid, leray=False):
    """Adjoint Helmholtz (or Leray) projection applied to the second index of ``F``."""
    if leray:
        return leray_project(abar, F, grid, transpose=True)
    return helmholtz_project(abar, F, grid, transpose=True)


def identity_check_J(F, eps, a, correctors, abar):
    """Residuals of ``J1(F) + J0(P_H^* F)`` and ``J2(F) - J0(P_L^* F)``."""
    grid = a.grid
    Fw = weighted_sample(F, grid, eps)
    xi = commutator_field(a, correctors, abar)
    j1 = pair(Fw, functional_integrand(1, a, correctors, abar))
    j2 = pair(Fw, functional_integrand(2, a, correctors, abar))
    j0_h = pair(project_rows(abar, Fw, grid), xi)
    j0_l = pair(project_rows(abar, Fw, grid, leray=True), xi)
    mag = _magnitude(Fw, correctors.q) + _magnitude(Fw, xi)
    return _relative(j1, -j0_h, mag), _relative(j2, j0_l, mag)


def identity_check_I(g, eps, a, v, abar, centering):
    """Residuals of the recovery identities for the field and the flux:
    ``I1 = -int (P_H^* g) . C`` and ``I2 = int (P_L^* g) . C`` with ``C`` the
    centred solution commutator."""
    centering = _require(centering)
    grid = a.grid
    gw = weighted_sample(g, grid, eps)
    c = solution_commutator(a, v, abar) - centering.commutator(abar, grid)
    i1 = eval_I(1, g, eps, a, v, centering)
    i2 = eval_I(2, g, eps, a, v, centering)
    rhs1 = -pair(helmholtz_project(abar, gw, grid, transpose=True), c)
    rhs2 = pair(leray_project(abar, gw, grid, transpose=True), c)
    mag = _magnitude(gw, grad(v, grid)) + _magnitude(gw, a.apply(grad(v, grid)))
    return _relative(i1, rhs1, mag), _relative(i2, rhs2, mag)


@dataclass
class FunctionalSample:
    """All functionals for one ``(sample, eps)`` pair; hatted values carry the
    factor ``pi_star(1/eps)^(1/2)``."""

    sample_index: int
    eps: float
    beta: float
    j0: float = math.nan
    j1: float = math.nan
    j2: float = math.nan
    i1: float = math.nan
    i2: float = math.nan
    e_val: float = math.nan
    centering: str = "ensemble-mean"
    scale: float = field(default=math.nan, repr=False)

    @property
    def j0_hat(self):
        return self.j0 * self.scale

    @property
    def i1_hat(self):
        return self.i1 * self.scale

    @property
    def e_hat(self):
        return self.e_val * self.scale

    @classmethod
    def create(cls, sample_index, eps, beta, d, **values):
        scale = pi_star(1.0 / eps, beta, d) ** 0.5
        return cls(sample_index, eps, beta, scale=scale, **values)

    CSV_HEADER = "sample,eps,beta,j0,j1,j2,i1,i2,e,j0_hat,i1_hat,e_hat,centering"

    def csv_row(self):
        nums = [self.eps, self.beta, self.j0, self.j1, self.j2, self.i1, self.i2, self.e_val,
                self.j0_hat, self.i1_hat, self.e_hat]
        return ",".join([str(self.sample_index)] + [repr(float(x)) for x in nums] + [self.centering])

    @classmethod
    def from_csv_row(cls, row, d):
        parts = row.strip().split(",")
        sample, eps, beta, j0, j1, j2, i1, i2, e = parts[:9]
        return cls.create(int(sample), float(eps), float(beta), d, j0=float(j0), j1=float(j1),
                          j2=float(j2), i1=float(i1), i2=float(i2), e_val=float(e),
                          centering=parts[-1])
