"""
Checking the representation formulas
====================================

The functional derivative of J0 and of the two-scale error E is a field on
the torus. Pairing it with a single-cell perturbation must reproduce the
central finite difference of the functional itself.
"""

import numpy as np

from homlab.corrector import compute_correctors
from homlab.derivative import (Perturbation, check_derivative, functional_derivative_E,
                               functional_derivative_J0, weighted_norm_beta)
from homlab.functionals import homogenized_solution, solve_heterogeneous
from homlab.gaussian import CovarianceSpec, sample_coefficient
from homlab.grid import TorusGrid
from homlab.operators import grad
from homlab.testfunctions import tensor_bump, vector_bump

grid = TorusGrid(2, 32, 16.0)
eps, lam = 0.5, 0.2
a = sample_coefficient(CovarianceSpec(4.0), grid, seed=8)
c = compute_correctors(a, tol=1e-13)

F = tensor_bump(2, 1.5, [[0.25, 0.5], [0.75, 1.0]])
f = vector_bump(2, 1.5, 0)
v, _ = solve_heterogeneous(a, f, eps, 1e-13)
U = grad(homogenized_solution(c.abar, f, eps, grid), grid)

DJ = functional_derivative_J0(a, F, eps, c, c.abar)
DE = functional_derivative_E(a, f, eps, v, c, c.abar, U)

rng = np.random.default_rng(0)
for _ in range(3):
    p = Perturbation.random_cell(a, lam, rng)
    for name, D, kw in (("J0", DJ, dict(F=F)), ("E", DE, dict(g=f, v=v, U=U))):
        k = check_derivative(name, D, p, a, lam, eps=eps, correctors=c, abar=c.abar, **kw)
        print(f"{name:2s} pairing {k.pairing:+.4e}  rel. error {k.relative_error:.1e}  slope {k.slope:.3f}")

# the diagnostic weighted norm that controls the fluctuations
print("squared weighted norm of D J0:", weighted_norm_beta(DJ, 4.0, grid))
print("squared weighted norm of D E: ", weighted_norm_beta(DE, 4.0, grid))
