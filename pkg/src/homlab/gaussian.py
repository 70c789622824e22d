"""Stationary Gaussian fields with algebraically decaying covariance, and the
link maps turning them into admissible coefficient fields.

Fields are synthesized by circulant embedding of the periodized covariance
``c0 * (1 + |z|)^(-beta)`` (minimum-image distance).  Randomness comes from a
counter-based Philox stream keyed by ``(seed, sample, channel)`` so that any
single realization can be regenerated without replaying a shared stream.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.special import expit

from .errors import AdmissibilityError, ClippedSpectrumError, ValidationError
from .grid import TorusGrid

LINK_KINDS = ("scalar-sigmoid", "diagonal-sigmoid", "nonsymmetric")
ADMISSIBILITY_SLACK = 1e-12


@dataclass(frozen=True)
class Link:
    """Map from Gaussian channels to a coefficient matrix.

    ``lam`` is the coercivity floor, ``kappa`` the amplitude of the
    antisymmetric part (``nonsymmetric`` only).
    """

    kind: str = "scalar-sigmoid"
    lam: float = 0.2
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ValidationError(f"unknown link {self.kind!r}; expected one of {LINK_KINDS}")
        if not 0.0 < self.lam <= 1.0:
            raise ValidationError(f"ellipticity floor must lie in (0, 1], got {self.lam}")
        if self.kind == "nonsymmetric":
            if not 0.0 <= self.kappa <= (1.0 - self.lam) / 2:
                raise ValidationError(
                    f"antisymmetric amplitude must lie in [0, (1-lam)/2], got {self.kappa}"
                )
        elif self.kappa != 0.0:
            raise ValidationError(f"kappa is only meaningful for the nonsymmetric link")

    def n_channels(self, dim):
        if self.kind == "scalar-sigmoid":
            return 1
        if self.kind == "diagonal-sigmoid":
            return dim
        return 1 + dim * (dim - 1) // 2


@dataclass(frozen=True)
class CovarianceSpec:
    beta: float
    c0: float = 1.0
    dim: int = 2
    link: Link = field(default_factory=Link)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValidationError(f"decay exponent beta must be positive, got {self.beta}")
        if not self.c0 > 0:
            raise ValidationError(f"covariance prefactor must be positive, got {self.c0}")
        if self.dim < 1:
            raise ValidationError(f"dimension must be >= 1, got {self.dim}")


@dataclass
class GaussianField:
    grid: TorusGrid
    values: np.ndarray
    seed: int
    clipped_mass: float
    stream: tuple = ()


@dataclass
class CoefficientField:
    """Per-cell ``d x d`` matrices stored as ``matrices[i, j, *cell]``."""

    grid: TorusGrid
    matrices: np.ndarray

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=float)
        self.grid.check(self.matrices, leading=2)
        d = self.grid.dim
        if self.matrices.shape[:2] != (d, d):
            raise ValidationError(f"expected {d}x{d} matrices, got {self.matrices.shape[:2]}")

    @classmethod
    def constant(cls, grid, matrix):
        matrix = np.asarray(matrix, dtype=float).reshape(grid.dim, grid.dim)
        return cls(grid, np.broadcast_to(matrix[(...,) + (None,) * grid.dim],
                                         (grid.dim, grid.dim) + grid.shape).copy())

    @property
    def T(self):
        return CoefficientField(self.grid, np.swapaxes(self.matrices, 0, 1).copy())

    def mean(self):
        return self.matrices.reshape(self.grid.dim, self.grid.dim, -1).mean(axis=2)

    def apply(self, vector):
        return np.einsum("ij...,j...->i...", self.matrices, vector)

    def is_symmetric(self):
        return bool(np.array_equal(self.matrices, np.swapaxes(self.matrices, 0, 1)))

    def cell_bounds(self):
        """Per-cell operator norm and smallest eigenvalue of the symmetric part."""
        d = self.grid.dim
        stack = np.moveaxis(self.matrices.reshape(d, d, -1), 2, 0)
        gram = np.einsum("cki,ckj->cij", stack, stack)
        norm = np.sqrt(np.clip(_symmetric_eigenvalues(gram)[1], 0.0, None))
        coercivity = _symmetric_eigenvalues(0.5 * (stack + np.swapaxes(stack, 1, 2)))[0]
        return norm.reshape(self.grid.shape), coercivity.reshape(self.grid.shape)

    def check_admissible(self, lam):
        """Raise :class:`AdmissibilityError` if a cell breaks ``|a xi| <= |xi|`` or
        ``xi . a xi >= lam |xi|^2``."""
        norm, coercivity = self.cell_bounds()
        worst_norm = float(norm.max())
        worst_coercivity = float(coercivity.min())
        if worst_norm > 1.0 + ADMISSIBILITY_SLACK:
            raise AdmissibilityError(f"cell operator norm {worst_norm:.15g} exceeds 1")
        if worst_coercivity < lam - ADMISSIBILITY_SLACK:
            raise AdmissibilityError(
                f"smallest symmetric eigenvalue {worst_coercivity:.15g} below floor {lam:g}"
            )
        return self

    def margin(self, lam):
        """Per-cell distance to the boundary of the admissible set."""
        norm, coercivity = self.cell_bounds()
        return np.minimum(1.0 - norm, coercivity - lam)


def _symmetric_eigenvalues(stack):
    """Smallest and largest eigenvalue of each symmetric matrix in ``stack``
    (closed form up to 2x2, LAPACK otherwise)."""
    d = stack.shape[-1]
    if d == 1:
        return stack[:, 0, 0], stack[:, 0, 0]
    if d == 2:
        centre = 0.5 * (stack[:, 0, 0] + stack[:, 1, 1])
        radius = np.hypot(0.5 * (stack[:, 0, 0] - stack[:, 1, 1]), stack[:, 0, 1])
        return centre - radius, centre + radius
    eig = np.linalg.eigvalsh(stack)
    return eig[:, 0], eig[:, -1]


def build_covariance_kernel(spec, grid):
    if spec.dim != grid.dim:
        raise ValidationError(f"covariance is {spec.dim}-dimensional, grid is {grid.dim}-dimensional")
    return spec.c0 * (1.0 + grid.distance()) ** (-spec.beta)


def embedding_spectrum(spec, grid):
    """Eigenvalues of the circulant covariance (real, possibly slightly negative)
    and the fraction of absolute spectral mass carried by negative modes."""
    spectrum = sfft.fftn(build_covariance_kernel(spec, grid)).real
    negative = np.abs(spectrum[spectrum < 0]).sum()
    clipped_mass = float(negative / np.abs(spectrum).sum())
    return np.clip(spectrum, 0.0, None), clipped_mass


def rng_for(seed, *stream):
    """Counter-based generator for the stream ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def synthesize_gaussian(spec, grid, seed, stream=(), tolerance=1e-3, spectrum=None):
    """One realization of the centred stationary field.

    Real white noise is transformed, multiplied by the square root of the
    clipped spectrum and transformed back, which enforces Hermitian symmetry
    and yields an exactly real field with the embedded covariance.
    ``spectrum`` may be passed to reuse a precomputed ``embedding_spectrum``.
    """
    if spectrum is None:
        spectrum = embedding_spectrum(spec, grid)
    sqrt_eig, clipped_mass = np.sqrt(spectrum[0]), spectrum[1]
    if clipped_mass > tolerance:
        raise ClippedSpectrumError(clipped_mass, tolerance)
    noise = rng_for(seed, *stream).standard_normal(grid.shape)
    values = sfft.irfftn(sfft.rfftn(noise) * _half(sqrt_eig, grid), s=grid.shape)
    return GaussianField(grid, values, int(seed), clipped_mass, tuple(stream))


def _half(full, grid):
    return full[(Ellipsis, slice(0, grid.n // 2 + 1))]


def synthesize_channels(spec, grid, seed, sample=0, tolerance=1e-3, spectrum=None):
    """All independent channels needed by ``spec.link`` for one sample."""
    if spectrum is None:
        spectrum = embedding_spectrum(spec, grid)
    return [
        synthesize_gaussian(spec, grid, seed, (sample, channel), tolerance, spectrum)
        for channel in range(spec.link.n_channels(grid.dim))
    ]


def apply_link(spec, channels):
    """Coefficient field ``h(g)`` for the link of ``spec``.

    ``channels`` is a single field or a list of them, as many as
    ``spec.link.n_channels(d)``.
    """
    if isinstance(channels, GaussianField):
        channels = [channels]
    link = spec.link
    grid = channels[0].grid
    d = grid.dim
    if len(channels) != link.n_channels(d):
        raise ValidationError(f"{link.kind} link needs {link.n_channels(d)} channels, got {len(channels)}")
    lam = link.lam
    matrices = np.zeros((d, d) + grid.shape)
    if link.kind == "scalar-sigmoid":
        s = lam + (1.0 - lam) * expit(channels[0].values)
        for i in range(d):
            matrices[i, i] = s
    elif link.kind == "diagonal-sigmoid":
        for i in range(d):
            matrices[i, i] = lam + (1.0 - lam) * expit(channels[i].values)
    else:
        kappa = link.kappa
        s = lam + kappa + (1.0 - lam - 2.0 * kappa) * expit(channels[0].values)
        for i in range(d):
            matrices[i, i] = s
        # Entry scaling keeps the operator norm of the skew part below kappa in any dimension.
        n_pairs = d * (d - 1) // 2
        scale = kappa / np.sqrt(max(n_pairs, 1))
        for (j, k), ch in zip(skew_pairs(d), channels[1:]):
            entry = scale * np.tanh(ch.values)
            matrices[j, k] = entry
            matrices[k, j] = -entry
    return CoefficientField(grid, matrices).check_admissible(lam)


def skew_pairs(d):
    return [(j, k) for j in range(d) for k in range(j + 1, d)]


def sample_coefficient(spec, grid, seed, sample=0, tolerance=1e-3, spectrum=None):
    return apply_link(spec, synthesize_channels(spec, grid, seed, sample, tolerance, spectrum))
