"""Extended corrector ``(phi, sigma)``, fluxes and the homogenized matrix for
one coefficient realization on the torus."""

from dataclasses import dataclass, field

import numpy as np

from .gaussian import skew_pairs
from .operators import _fft, _ifft, _invert_symbol, backward, grad, solve_divergence_form, symbols


@dataclass
class CorrectorSet:
    """Correctors of one realization.

    ``phi[i]`` solves the cell problem in direction ``e_i``; ``q[i]`` is the
    flux ``a (grad phi_i + e_i)`` (shape ``(d, d, *grid)``, second axis the
    vector component); ``sigma_pairs[i, p]`` holds ``sigma_ijk`` for the
    ``p``-th pair ``j < k``.  All fields have zero torus mean.
    """

    grid: object
    phi: np.ndarray
    q: np.ndarray
    abar: np.ndarray
    sigma_pairs: np.ndarray = None
    reports: list = field(default_factory=list)

    def grad_phi(self):
        """``grad phi_i`` stacked as ``(d, d, *grid)``."""
        return np.stack([grad(p, self.grid) for p in self.phi])

    def harmonic_gradient(self):
        """``grad phi_i + e_i``."""
        g = self.grad_phi()
        for i in range(self.grid.dim):
            g[i, i] += 1.0
        return g

    def sigma(self):
        """Full skew tensor ``sigma[i, j, k]`` mirrored from the stored pairs."""
        d = self.grid.dim
        full = np.zeros((d, d, d) + self.grid.shape)
        for p, (j, k) in enumerate(skew_pairs(d)):
            full[:, j, k] = self.sigma_pairs[:, p]
            full[:, k, j] = -self.sigma_pairs[:, p]
        return full

    def sigma_divergence(self):
        """``(div sigma_i)_j = sum_k backward_k sigma_ijk``."""
        d = self.grid.dim
        s = self.sigma()
        out = np.zeros((d, d) + self.grid.shape)
        for i in range(d):
            for j in range(d):
                out[i, j] = sum(backward(s[i, j, k], k, self.grid) for k in range(d))
        return out

    def flux_corrector_residual(self):
        """``max_i |div sigma_i - (q_i - abar e_i)| / |q_i|`` in the discrete L2 norm."""
        dsig = self.sigma_divergence()
        worst = 0.0
        for i in range(self.grid.dim):
            target = self.q[i] - self.abar[:, i][(slice(None),) + (None,) * self.grid.dim]
            worst = max(worst, float(np.linalg.norm(dsig[i] - target) / np.linalg.norm(self.q[i])))
        return worst

    def energy(self):
        """Torus average of ``|grad phi_i|^2`` per direction."""
        gp = self.grad_phi()
        return np.array([float(np.mean(np.sum(gp[i] ** 2, axis=0))) for i in range(self.grid.dim)])


def solve_corrector(a, tol=1e-10, max_iter=None):
    """Mean-zero ``phi_i`` with ``-div a (grad phi_i + e_i) = 0``; returns ``(phi, reports)``."""
    d = a.grid.dim
    phi = np.zeros((d,) + a.grid.shape)
    reports = []
    for i in range(d):
        phi[i], report = solve_divergence_form(a, a.matrices[:, i], tol=tol, max_iter=max_iter)
        reports.append(report)
    return phi, reports


def compute_flux(a, phi):
    grid = a.grid
    out = np.empty((grid.dim, grid.dim) + grid.shape)
    for i in range(grid.dim):
        g = grad(phi[i], grid)
        g[i] += 1.0
        out[i] = a.apply(g)
    return out


def homogenized_coefficient(q):
    """Torus-average flux: column ``i`` of the result is the mean of ``q[i]``."""
    d = q.shape[0]
    return q.reshape(d, d, -1).mean(axis=2).T.copy()


def solve_flux_corrector(q, grid):
    """Skew potentials with ``-lap sigma_ijk = forward_j q_ik - forward_k q_ij``.

    Returns the ``j < k`` pairs, shape ``(d, n_pairs, *grid)``.  With backward
    differences as divergence, ``div sigma_i = q_i - mean(q_i)`` holds up to the
    divergence residual of ``q_i``.
    """
    d = grid.dim
    s, lap = symbols(grid)
    inv = _invert_symbol(lap)
    qh = _fft(q, grid)
    pairs = skew_pairs(d)
    out = np.empty((d, len(pairs)) + grid.shape)
    for i in range(d):
        for p, (j, k) in enumerate(pairs):
            out[i, p] = _ifft((s[j] * qh[i, k] - s[k] * qh[i, j]) * inv, grid)
    return out


def compute_correctors(a, tol=1e-10, with_sigma=True, max_iter=None):
    phi, reports = solve_corrector(a, tol=tol, max_iter=max_iter)
    q = compute_flux(a, phi)
    abar = homogenized_coefficient(q)
    sigma = solve_flux_corrector(q, a.grid) if with_sigma else None
    return CorrectorSet(a.grid, phi, q, abar, sigma, reports)
