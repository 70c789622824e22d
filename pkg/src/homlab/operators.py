"""Discrete divergence-form operators on the periodic grid.

All operators are built from the forward-difference gradient ``G`` (edge
differences collocated with the cell that owns the edge) and its negative
adjoint ``div = -G^T`` (backward differences).  With ``a`` applied per cell,

    A_a u = -div(a G u) = G^T a G u,

so ``<v, A_a u> = <G v, a G u>`` and ``A_{a^T} = A_a^T`` hold to rounding,
and the kernel of ``A_a`` is exactly the constants.  Constant-coefficient
problems are diagonal in Fourier space and are inverted exactly.
"""

from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .errors import NoConvergenceError, SingularMatrixError, ValidationError
from .gaussian import CoefficientField


def _axes(grid):
    return tuple(range(-grid.dim, 0))


def grad(u, grid):
    """Forward differences ``(u(y + h e_i) - u(y)) / h``, shape ``(d, *grid.shape)``."""
    u = grid.check(u)
    h = grid.spacing
    return np.stack([(np.roll(u, -1, axis=ax) - u) / h for ax in range(grid.dim)])


def div(v, grid):
    """Backward-difference divergence, the negative adjoint of :func:`grad`."""
    v = grid.check(v, leading=1)
    h = grid.spacing
    out = np.zeros(grid.shape)
    for i in range(grid.dim):
        out += (v[i] - np.roll(v[i], 1, axis=i)) / h
    return out


def shift(u, axis, step):
    """``u(y + step h e_axis)`` for ``step = +1`` or ``-1``."""
    return np.roll(u, -step, axis=axis)


def backward(u, axis, grid):
    return (u - np.roll(u, 1, axis=axis)) / grid.spacing


def forward(u, axis, grid):
    return (np.roll(u, -1, axis=axis) - u) / grid.spacing


def _matrices(a):
    return a.matrices if isinstance(a, CoefficientField) else np.asarray(a)


def _check_same_grid(a, grid):
    if isinstance(a, CoefficientField) and a.grid != grid:
        from .errors import GridMismatchError

        raise GridMismatchError(f"coefficient lives on {a.grid}, field on {grid}")


class _Stencil:
    """Matrix-free ``u -> -div(a grad u)`` specialised to diagonal fields when possible."""

    def __init__(self, a):
        self.grid = a.grid
        m = a.matrices
        d = self.grid.dim
        off = m.copy()
        for i in range(d):
            off[i, i] = 0.0
        self.diagonal = not off.any()
        self.m = m
        self.diag = [m[i, i] for i in range(d)]

    def __call__(self, u):
        grid = self.grid
        h = grid.spacing
        d = grid.dim
        g = [(np.roll(u, -1, axis=ax) - u) / h for ax in range(d)]
        out = np.zeros(grid.shape)
        for i in range(d):
            if self.diagonal:
                flux = self.diag[i] * g[i]
            else:
                flux = self.m[i, 0] * g[0]
                for j in range(1, d):
                    flux = flux + self.m[i, j] * g[j]
            out -= (flux - np.roll(flux, 1, axis=i)) / h
        return out


def apply_operator(a, u):
    """``-div(a grad u)`` for a :class:`CoefficientField` ``a``."""
    u = a.grid.check(u)
    return _Stencil(a)(u)


@lru_cache(maxsize=32)
def _spectral(grid):
    """Fourier symbols of the forward differences on the rfft half-spectrum."""
    freqs = [sfft.fftfreq(grid.n) for _ in range(grid.dim - 1)] + [sfft.rfftfreq(grid.n)]
    k = np.meshgrid(*freqs, indexing="ij")
    s = np.stack([(np.exp(2j * np.pi * ki) - 1.0) / grid.spacing for ki in k])
    lap = np.sum(np.abs(s) ** 2, axis=0)
    weights = np.full(lap.shape, 2.0)
    weights[..., 0] = 1.0
    weights[..., -1] = 1.0
    return s, lap, weights


def symbols(grid):
    """``(s, lap)``: forward-difference symbols ``s_i`` and ``|s|^2`` (zero at ``k = 0``)."""
    s, lap, _ = _spectral(grid)
    return s, lap


def constant_symbol(abar, grid):
    """Fourier symbol ``sum_ij conj(s_i) abar_ij s_j`` of ``-div(abar grad)``."""
    s, _ = symbols(grid)
    abar = np.asarray(abar, dtype=float)
    return np.einsum("i...,ij,j...->...", np.conj(s), abar, s)


def _check_abar(abar, grid):
    abar = np.asarray(abar, dtype=float)
    if abar.shape != (grid.dim, grid.dim):
        raise ValidationError(f"expected a {grid.dim}x{grid.dim} matrix, got shape {abar.shape}")
    sym_min = np.linalg.eigvalsh(0.5 * (abar + abar.T))[0]
    if not sym_min > 0:
        raise SingularMatrixError(f"symmetric part of the constant matrix is not positive definite ({sym_min:g})")
    return abar


def _fft(v, grid):
    return sfft.rfftn(v, axes=_axes(grid))


def _ifft(vh, grid):
    return sfft.irfftn(vh, s=grid.shape, axes=_axes(grid))


def _invert_symbol(symbol):
    inv = np.zeros_like(symbol)
    nz = symbol != 0
    inv[nz] = 1.0 / symbol[nz]
    return inv


def solve_constant(abar, rhs_flux, grid):
    """Mean-zero ``u`` with ``-div(abar grad u) = div(rhs_flux)``, solved exactly in Fourier space."""
    abar = _check_abar(abar, grid)
    rhs_flux = grid.check(rhs_flux, leading=1)
    s, _ = symbols(grid)
    fh = _fft(rhs_flux, grid)
    rhs = -np.sum(np.conj(s) * fh, axis=0)
    return _ifft(rhs * _invert_symbol(constant_symbol(abar, grid)), grid)


def solve_constant_scalar(abar, rhs, grid):
    """Mean-zero ``u`` with ``-div(abar grad u) = rhs`` for a mean-zero scalar ``rhs``."""
    abar = _check_abar(abar, grid)
    return _ifft(_fft(grid.check(rhs), grid) * _invert_symbol(constant_symbol(abar, grid)), grid)


def inverse_laplacian(rhs, grid):
    """Mean-zero ``u`` with ``-div grad u = rhs`` (the mean of ``rhs`` is discarded)."""
    _, lap = symbols(grid)
    return _ifft(_fft(rhs, grid) * _invert_symbol(lap), grid)


def helmholtz_project(abar, v, grid, transpose=False):
    """``grad (div abar grad)^-1 div v``; with ``transpose`` the matrix is replaced by its transpose."""
    abar = _check_abar(abar, grid)
    if transpose:
        abar = abar.T
    v = np.asarray(v, dtype=float)
    lead = v.shape[: v.ndim - grid.dim - 1]
    s, _ = symbols(grid)
    vh = _fft(v, grid)
    inv = _invert_symbol(constant_symbol(abar, grid))
    potential = np.sum(np.conj(s) * vh, axis=-grid.dim - 1) * inv
    out = _ifft(np.expand_dims(potential, -grid.dim - 1) * s, grid)
    return out.reshape(lead + (grid.dim,) + grid.shape)


def leray_project(abar, v, grid, transpose=False):
    """``v - P_H abar v``, or with ``transpose`` the adjoint ``v - P_H^* abar^T v``.

    Both act on the last component axis of ``v``; ``abar P_L v`` is
    divergence-free.
    """
    abar = _check_abar(abar, grid)
    m = abar.T if transpose else abar
    mv = np.einsum("ij,...j" + "xyzw"[: grid.dim] + "->...i" + "xyzw"[: grid.dim], m, v)
    return v - helmholtz_project(abar, mv, grid, transpose=transpose)


def dual_norm(r, grid):
    """Energy-dual norm ``<r, (-div grad)^-1 r>^(1/2)`` of a scalar field."""
    _, lap, weights = _spectral(grid)
    rh = _fft(r, grid)
    inv = _invert_symbol(lap)
    return float(np.sqrt(np.sum(weights * np.abs(rh) ** 2 * inv) / grid.size * grid.cell_volume))


@dataclass
class SolveReport:
    iterations: int
    residual: float
    converged: bool
    tol: float

    def to_dict(self):
        return asdict(self)


def solve_divergence_form(a, rhs_flux, tol=1e-10, max_iter=None, restart=40, x0=None):
    """Mean-zero ``u`` with ``-div(a grad u) = div(rhs_flux)``.

    Restarted GMRES on the right-preconditioned system, run in the
    ``(-div grad)^-1`` metric so that the monitored residual is the relative
    energy-dual residual.  The preconditioner is the exact Fourier inverse of
    the constant-coefficient operator at the cell-averaged matrix of ``a``.
    Raises :class:`NoConvergenceError` after ``max_iter`` (default ``10 n``)
    operator applications.
    """
    grid = a.grid
    rhs_flux = grid.check(rhs_flux, leading=1)
    return solve_scalar(a, div(rhs_flux, grid), tol=tol, max_iter=max_iter, restart=restart, x0=x0)


def solve_scalar(a, rhs, tol=1e-10, max_iter=None, restart=40, x0=None):
    """Mean-zero ``u`` with ``-div(a grad u) = rhs``; see :func:`solve_divergence_form`."""
    if not 1e-15 < tol < 1:
        raise ValidationError(f"tolerance must lie in (1e-15, 1), got {tol}")
    grid = a.grid
    rhs = grid.check(rhs)
    max_iter = 10 * grid.n if max_iter is None else max_iter
    stencil = _Stencil(a)
    _, lap, weights = _spectral(grid)
    root_w = np.sqrt(weights)
    sqrt_lap = np.sqrt(lap)
    inv_sqrt_lap = _invert_symbol(sqrt_lap)
    pre = sqrt_lap * _invert_symbol(constant_symbol(a.mean(), grid)) / root_w
    post = inv_sqrt_lap * root_w

    def to_u(z):
        return _ifft(pre * z, grid)

    def op(z):
        return post * _fft(stencil(to_u(z)), grid)

    target = post * _fft(rhs, grid)
    target_norm = _vnorm(target)
    if target_norm == 0.0:
        return np.zeros(grid.shape), SolveReport(0, 0.0, True, tol)

    if x0 is None:
        z = np.zeros_like(target)
        r = target.copy()
    else:
        z = _fft(x0 - x0.mean(), grid) / pre_safe(pre)
        r = target - op(z)
    total = 0
    residual = _vnorm(r) / target_norm
    while residual > tol and total < max_iter:
        z, steps = _gmres_cycle(op, r, z, tol * target_norm, min(restart, max_iter - total))
        total += steps
        r = target - op(z)
        new_residual = _vnorm(r) / target_norm
        stalled = steps > 0 and new_residual > 0.999 * residual and total >= restart
        residual = new_residual
        if stalled:
            break
    report = SolveReport(total, float(residual), bool(residual <= tol), tol)
    if not report.converged:
        raise NoConvergenceError(report)
    return to_u(z), report


def pre_safe(pre):
    out = pre.copy()
    out[out == 0] = 1.0
    return out


def _vnorm(z):
    return float(np.sqrt(np.vdot(z, z).real))


def _gmres_cycle(op, r, z, abs_tol, m):
    """One GMRES(m) cycle from residual ``r``; vectors are real-valued in the
    weighted Fourier representation, so all Krylov coefficients are real."""
    shape = r.shape
    beta = _vnorm(r)
    basis = np.empty((m + 1, r.size * 2))
    basis[0] = (r / beta).view(float).ravel()
    hess = np.zeros((m + 1, m))
    cs = np.zeros(m)
    sn = np.zeros(m)
    g = np.zeros(m + 1)
    g[0] = beta
    steps = 0
    for j in range(m):
        w = op(basis[j].view(complex).reshape(shape)).view(float).ravel()
        before = np.linalg.norm(w)
        h = basis[: j + 1] @ w
        w -= basis[: j + 1].T @ h
        hn = np.linalg.norm(w)
        if hn < 0.7 * before:
            # second Gram-Schmidt pass only when cancellation was severe
            h2 = basis[: j + 1] @ w
            w -= basis[: j + 1].T @ h2
            h += h2
            hn = np.linalg.norm(w)
        hess[: j + 1, j] = h
        hess[j + 1, j] = hn
        for i in range(j):
            t = cs[i] * hess[i, j] + sn[i] * hess[i + 1, j]
            hess[i + 1, j] = -sn[i] * hess[i, j] + cs[i] * hess[i + 1, j]
            hess[i, j] = t
        rho = np.hypot(hess[j, j], hess[j + 1, j])
        cs[j] = hess[j, j] / rho
        sn[j] = hess[j + 1, j] / rho
        hess[j, j] = rho
        hess[j + 1, j] = 0.0
        g[j + 1] = -sn[j] * g[j]
        g[j] = cs[j] * g[j]
        steps = j + 1
        if abs(g[j + 1]) <= abs_tol or hn == 0.0:
            break
        basis[j + 1] = w / hn
    y = np.linalg.solve(np.triu(hess[:steps, :steps]), g[:steps])
    update = (basis[:steps].T @ y).view(complex).reshape(shape)
    return z + update, steps
