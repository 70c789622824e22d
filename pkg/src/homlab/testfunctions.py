"""Compactly supported test functions ``f``, ``g`` (vector) and ``F`` (tensor).

A test function lives in slow coordinates ``x``; it is sampled on the fast
grid at ``x = eps * (y - y_centre)`` using minimum-image displacements, so
the origin of the slow variable sits at the torus centre.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ResolutionError, ValidationError

KINDS = ("smooth-bump", "truncated-gaussian")


@dataclass(frozen=True)
class Bump:
    """``amplitude * profile(|x - center| / radius)`` with a constant amplitude
    of shape ``()``, ``(d,)`` or ``(d, d)``."""

    radius: float
    amplitude: tuple = 1.0
    center: tuple = None
    kind: str = "smooth-bump"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown test-function kind {self.kind!r}")
        if not self.radius > 0:
            raise ValidationError(f"radius must be positive, got {self.radius}")
        amp = np.asarray(self.amplitude, dtype=float)
        object.__setattr__(self, "amplitude", _freeze(amp))

    @property
    def amp(self):
        return np.asarray(self.amplitude, dtype=float)

    @property
    def terms(self):
        return (self,)

    def extent(self):
        c = np.zeros(1) if self.center is None else np.asarray(self.center, dtype=float)
        return float(np.max(np.abs(c))) + self.radius

    def profile(self, x):
        """Scalar profile at slow points ``x`` of shape ``(d, ...)``."""
        if self.center is not None:
            c = np.asarray(self.center, dtype=float).reshape((-1,) + (1,) * (x.ndim - 1))
            x = x - c
        rho2 = np.sum(x**2, axis=0) / self.radius**2
        out = np.zeros(rho2.shape)
        inside = rho2 < 1.0
        if self.kind == "smooth-bump":
            out[inside] = np.exp(1.0 - 1.0 / (1.0 - rho2[inside]))
        else:
            out[inside] = np.exp(-4.5 * rho2[inside])
        return out

    def sample(self, grid, eps=1.0):
        """Values on the fast grid, shape ``amplitude.shape + grid.shape``."""
        check_resolution(self, grid, eps)
        p = self.profile(eps * grid.centred_coordinates())
        amp = self.amp
        return amp[(...,) + (None,) * grid.dim] * p

    def __add__(self, other):
        return Superposition(self.terms + other.terms)

    def scaled(self, factor):
        return Bump(self.radius, _freeze(self.amp * factor), self.center, self.kind)


@dataclass(frozen=True)
class Superposition:
    """Sum of bumps sharing the same amplitude rank."""

    terms: tuple

    def extent(self):
        return max(t.extent() for t in self.terms)

    @property
    def radius(self):
        return min(t.radius for t in self.terms)

    def sample(self, grid, eps=1.0):
        return sum(t.sample(grid, eps) for t in self.terms)

    def __add__(self, other):
        return Superposition(self.terms + other.terms)

    def scaled(self, factor):
        return Superposition(tuple(t.scaled(factor) for t in self.terms))


def _freeze(array):
    array = np.asarray(array, dtype=float)
    if array.ndim == 0:
        return float(array)
    if array.ndim == 1:
        return tuple(float(v) for v in array)
    return tuple(tuple(float(v) for v in row) for row in array)


def check_resolution(test, grid, eps):
    """Support radius in fast units must span two cells and stay within a quarter torus."""
    if not 0 < eps <= 1:
        raise ResolutionError(f"scale eps must lie in (0, 1], got {eps}")
    fast_radius = test.radius / eps
    if fast_radius < 2 * grid.spacing:
        raise ResolutionError(
            f"support radius {fast_radius:g} (fast units) is below two cells of size {grid.spacing:g}"
        )
    if test.extent() / eps > grid.extent / 4 + 1e-12:
        raise ResolutionError(
            f"support reaches {test.extent() / eps:g} fast units from the centre; the torus "
            f"quarter-width is {grid.extent / 4:g}"
        )


def vector_bump(d, radius, direction=0, amplitude=1.0, **kw):
    amp = np.zeros(d)
    amp[direction] = amplitude
    return Bump(radius, _freeze(amp), **kw)


def tensor_bump(d, radius, amplitude=None, **kw):
    amp = np.eye(d) if amplitude is None else np.asarray(amplitude, dtype=float)
    return Bump(radius, _freeze(amp), **kw)
