"""Functional derivatives of ``J0`` and ``E`` with respect to the coefficient
field, their finite-difference check, and the weighted-norm diagnostic.

A derivative field ``D`` is a density on the fast grid: the first variation
in direction ``b`` is ``h^d * sum_cells D : b``.  All expectation-type inputs
(``abar``, the centering fields, the homogenized gradient ``U``) are held
fixed under perturbation.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .corrector import compute_correctors
from .errors import ValidationError
from .functionals import (
    corrector_weighted_flux,
    matvec,
    shifted_product,
    weighted_sample,
)
from .gaussian import CoefficientField
from .operators import grad, solve_divergence_form

T_LADDER = (1e-2, 5e-3, 2.5e-3)


@dataclass
class Perturbation:
    """Tensor field ``b`` supported on ``support`` with ``sup |b| <= 1``."""

    b: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.support = np.asarray(self.support, dtype=bool)
        if np.any(self.b[..., ~self.support] != 0.0):
            raise ValidationError("perturbation is nonzero outside its support")
        d = self.b.shape[0]
        cells = np.moveaxis(self.b.reshape(d, d, -1), 2, 0)
        if cells.size and np.linalg.norm(cells, ord=2, axis=(1, 2)).max() > 1.0 + 1e-12:
            raise ValidationError("perturbation exceeds unit operator norm in some cell")

    @classmethod
    def single_cell(cls, grid, cell, matrix):
        b = np.zeros((grid.dim, grid.dim) + grid.shape)
        b[(slice(None), slice(None)) + tuple(cell)] = matrix
        support = np.zeros(grid.shape, dtype=bool)
        support[tuple(cell)] = True
        return cls(b, support)

    @classmethod
    def random_cell(cls, a, lam, rng):
        """Symmetric single-cell bump of size ``min(0.5 * margin, 0.1)`` at a random cell."""
        grid = a.grid
        cell = tuple(int(rng.integers(grid.n)) for _ in range(grid.dim))
        m = rng.standard_normal((grid.dim, grid.dim))
        m = m + m.T
        m /= np.linalg.norm(m, 2)
        margin = float(a.margin(lam)[cell])
        return cls.single_cell(grid, cell, min(0.5 * margin, 0.1) * m)


def pairing(derivative, perturbation, grid):
    return float(np.sum(derivative * perturbation.b)) * grid.cell_volume


def _outer(u, v):
    return np.einsum("i...,j...->ij...", u, v)


def _density(test, grid, eps):
    """Test function as seen in the fast variable: ``eps^d * test(eps y)``."""
    return eps**grid.dim * test.sample(grid, eps)


def _transpose_correctors(a, correctors, tol):
    if a.is_symmetric():
        return correctors
    return compute_correctors(a.T, tol=tol)


def functional_derivative_J0(a, F, eps, correctors, abar, tol=1e-13):
    """``sum_i (F_i + grad S_i) (x) (grad phi_i + e_i)`` with
    ``-div(a^* grad S_i) = div((a^* - abar^*) F_i)``."""
    grid = a.grid
    Ft = _density(F, grid, eps)
    at = a.T
    harmonic = correctors.harmonic_gradient()
    out = np.zeros((grid.dim, grid.dim) + grid.shape)
    for i in range(grid.dim):
        rhs = at.apply(Ft[i]) - matvec(np.asarray(abar).T, Ft[i], grid)
        S, _ = solve_divergence_form(at, rhs, tol=tol)
        out += _outer(Ft[i] + grad(S, grid), harmonic[i])
    return out


def functional_derivative_E(a, g, eps, v, correctors, abar, U, adjoint_correctors=None, tol=1e-13):
    """Derivative of ``E`` as three outer products.

    With ``phi^*, sigma^*`` the correctors of ``a^T`` and ``g`` read in the fast
    variable, the field is
    ``g_j (grad phi^*_j + e_j) (x) (grad v - U_i (grad phi_i + e_i))
    + (phi^*_j grad g_j + grad r) (x) grad v
    - (phi^*_j grad(g_j U_i) + grad R_i) (x) (grad phi_i + e_i)``,
    where ``r`` and ``R_i`` solve the adjoint two-scale problems driven by
    ``g`` and ``g U_i``.  The middle factor of the first term equals the
    gradient of the two-scale error plus ``phi_i grad U_i``.
    """
    grid = a.grid
    d = grid.dim
    star = adjoint_correctors or _transpose_correctors(a, correctors, tol)
    at = a.T
    abar_t = np.asarray(abar).T
    gt = _density(g, grid, eps)
    gv = grad(v, grid)
    harmonic = correctors.harmonic_gradient()
    harmonic_star = star.harmonic_gradient()

    def adjoint_part(X):
        """``phi^*_j grad X_j + grad r_X`` for a vector field ``X``."""
        shifted = sum(shifted_product(star.phi[j], X[j], grid) for j in range(d))
        r, _ = solve_divergence_form(at, corrector_weighted_flux(at, star, X, abar_t, grid), tol=tol)
        return shifted + grad(r, grid)

    def lifted(X):
        """``X_j (grad phi^*_j + e_j)``."""
        return np.einsum("j...,jk...->k...", X, harmonic_star)

    expansion = gv - np.einsum("i...,ij...->j...", U, harmonic)
    out = _outer(lifted(gt), expansion) + _outer(adjoint_part(gt), gv)
    for i in range(d):
        out -= _outer(adjoint_part(gt * U[i]), harmonic[i])
    return out


# ---------------------------------------------------------------- differences


def _perturbed(a, b, t, lam):
    return CoefficientField(a.grid, a.matrices + t * b).check_admissible(lam)


def _delta_J0(a, F, eps, correctors, abar, b, t, lam, tol):
    """``J0(a + t b) - J0(a)`` computed through the corrector increment so
    that the O(t) difference carries no cancellation error."""
    grid = a.grid
    ap = _perturbed(a, b, t, lam)
    Fw = weighted_sample(F, grid, eps)
    harmonic = correctors.harmonic_gradient()
    total = 0.0
    for i in range(grid.dim):
        tbh = np.einsum("jk...,k...->j...", t * b, harmonic[i])
        dphi, _ = solve_divergence_form(ap, tbh, tol=tol)
        gd = grad(dphi, grid)
        change = np.einsum("jk...,k...->j...", t * b, harmonic[i] + gd)
        change += a.apply(gd) - matvec(np.asarray(abar), gd, grid)
        total += float(np.sum(Fw[i] * change))
    return total


def _delta_E(a, g, eps, v, correctors, abar, U, b, t, lam, tol):
    grid = a.grid
    ap = _perturbed(a, b, t, lam)
    gw = weighted_sample(g, grid, eps)
    abar = np.asarray(abar)
    gv = grad(v, grid)
    tb = t * b

    def increment(base):
        """Change of ``(a - abar) base`` when ``base`` is the gradient of a solution."""
        dsol, _ = solve_divergence_form(ap, np.einsum("jk...,k...->j...", tb, base), tol=tol)
        gd = grad(dsol, grid)
        return np.einsum("jk...,k...->j...", tb, base + gd) + a.apply(gd) - matvec(abar, gd, grid)

    harmonic = correctors.harmonic_gradient()
    total = float(np.sum(gw * increment(gv)))
    for i in range(grid.dim):
        total -= float(np.sum(gw * U[i] * increment(harmonic[i])))
    return total


def directional_derivative_fd(functional, a, b, t, lam, tol=1e-13, **inputs):
    """Central quotient ``(X(a + t b) - X(a - t b)) / (2 t)`` for
    ``functional`` in ``{"J0", "E"}``; ``inputs`` carries the fixed fields
    (``F, eps, correctors, abar`` and, for ``E``, ``g, v, U``)."""
    b = b.b if isinstance(b, Perturbation) else np.asarray(b)
    if not np.any(b):
        return 0.0
    if functional == "J0":
        delta = lambda s: _delta_J0(a, inputs["F"], inputs["eps"], inputs["correctors"],
                                    inputs["abar"], b, s, lam, tol)
    elif functional == "E":
        delta = lambda s: _delta_E(a, inputs["g"], inputs["eps"], inputs["v"], inputs["correctors"],
                                   inputs["abar"], inputs["U"], b, s, lam, tol)
    else:
        raise ValidationError(f"unknown functional {functional!r}; expected 'J0' or 'E'")
    return (delta(t) - delta(-t)) / (2.0 * t)


def richardson_slope(errors, ts=T_LADDER):
    """Mean of ``log(e_k / e_{k+1}) / log(t_k / t_{k+1})`` along the ladder."""
    slopes = [math.log(errors[k] / errors[k + 1]) / math.log(ts[k] / ts[k + 1])
              for k in range(len(ts) - 1)]
    return float(np.mean(slopes))


@dataclass
class DerivativeCheck:
    functional: str
    pairing: float
    quotients: dict
    errors: dict
    slope: float
    relative_error: float
    passed: bool

    def to_dict(self):
        return {
            "functional": self.functional,
            "pairing": self.pairing,
            "quotients": {repr(t): q for t, q in self.quotients.items()},
            "errors": {repr(t): e for t, e in self.errors.items()},
            "richardson_slope": self.slope,
            "relative_error": self.relative_error,
            "pass": self.passed,
        }


def check_derivative(functional, derivative, perturbation, a, lam, ts=T_LADDER, probe_t=1e-4,
                     rel_tol=1e-5, slope_band=(1.8, 2.2), tol=1e-13, **inputs):
    """Compare the formula pairing with central quotients along ``ts``.

    Passes when the quotient at ``probe_t`` agrees to ``rel_tol`` and the
    Richardson slope lies in ``slope_band``.
    """
    grid = a.grid
    p = pairing(derivative, perturbation, grid)
    quotients = {t: directional_derivative_fd(functional, a, perturbation, t, lam, tol, **inputs)
                 for t in tuple(ts) + (probe_t,)}
    errors = {t: abs(q - p) for t, q in quotients.items()}
    slope = richardson_slope([errors[t] for t in ts], ts)
    rel = errors[probe_t] / max(abs(p), np.finfo(float).tiny)
    passed = rel <= rel_tol and slope_band[0] <= slope <= slope_band[1]
    return DerivativeCheck(functional, p, quotients, errors, slope, rel, bool(passed))


def write_report(checks, path):
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in checks], fh, indent=2, sort_keys=True)


# ------------------------------------------------------------- weighted norm


def box_integrals(density, grid, radius):
    """``int_{box_radius(z)} density`` for every cell ``z``, with the box the
    set of cells whose minimum-image offset has sup-norm at most ``radius``."""
    offsets = np.abs(grid.displacement()).max(axis=0)
    box = (offsets <= radius + 1e-12 * grid.spacing).astype(float)
    axes = tuple(range(grid.dim))
    conv = np.fft.irfftn(np.fft.rfftn(density, axes=axes) * np.fft.rfftn(box, axes=axes), s=grid.shape, axes=axes)
    return conv * grid.cell_volume


def weighted_norm_beta(G, beta, grid, simplified=False):
    """Squared weighted norm ``sum_k 2^(-beta k) sum_z (int_{B_{2^k}(z)} |G|)^2 h^d``
    over dyadic radii up to the torus half-width; ``simplified`` keeps only
    the unit radius (the integrable case ``beta > d``)."""
    G = np.asarray(G, dtype=float)
    lead = G.ndim - grid.dim
    mag = np.sqrt(np.sum(G.reshape((-1,) + grid.shape) ** 2, axis=0)) if lead else np.abs(G)
    radii = [1.0]
    if not simplified:
        while radii[-1] * 2 <= grid.extent / 2:
            radii.append(radii[-1] * 2)
    total = 0.0
    for k, radius in enumerate(radii):
        ints = box_integrals(mag, grid, radius)
        total += 2.0 ** (-beta * k) * float(np.sum(ints**2)) * grid.cell_volume
    return total
