"""Periodic grids and the small amount of geometry shared by all modules."""

from dataclasses import dataclass

import numpy as np

from .errors import GridMismatchError, ValidationError


@dataclass(frozen=True)
class TorusGrid:
    """Uniform cell grid on the torus ``[0, extent)^dim`` with ``n`` cells per side.

    Nodes sit at ``y = index * spacing``; the torus centre is the node ``n // 2``.
    """

    dim: int
    n: int
    extent: float = 16.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError(f"dimension must be >= 1, got {self.dim}")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValidationError(f"cells per side must be a power of two, got {self.n}")
        if not self.extent > 0:
            raise ValidationError(f"torus extent must be positive, got {self.extent}")
        if self.spacing > 1.0 + 1e-12:
            raise ValidationError(
                f"spacing {self.spacing:g} > 1 does not resolve the unit correlation length"
            )

    @property
    def spacing(self):
        return self.extent / self.n

    h = spacing

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def size(self):
        return self.n**self.dim

    @property
    def cell_volume(self):
        return self.spacing**self.dim

    @property
    def volume(self):
        return self.extent**self.dim

    def displacement(self):
        """Minimum-image displacement of every node from the origin, shape ``(dim, *shape)``."""
        idx = np.arange(self.n)
        idx = np.where(idx <= self.n // 2, idx, idx - self.n) * self.spacing
        return np.stack(np.meshgrid(*([idx] * self.dim), indexing="ij"))

    def centred_coordinates(self):
        """Minimum-image displacement of every node from the torus centre."""
        return np.roll(self.displacement(), self.n // 2, axis=tuple(range(1, self.dim + 1)))

    def distance(self):
        """Periodic distance of every node from the origin."""
        return np.sqrt(np.sum(self.displacement() ** 2, axis=0))

    def check(self, array, leading=0):
        """Raise unless the trailing axes of ``array`` match this grid."""
        array = np.asarray(array)
        if array.shape[array.ndim - self.dim :] != self.shape or array.ndim != leading + self.dim:
            raise GridMismatchError(
                f"array of shape {array.shape} does not live on a {self.shape} grid "
                f"with {leading} component axes"
            )
        return array

    def inner(self, u, v):
        """Quadrature ``∫ u·v`` summed over all components."""
        return float(np.sum(u * v)) * self.cell_volume

    def norm(self, u):
        return np.sqrt(self.inner(u, u))
