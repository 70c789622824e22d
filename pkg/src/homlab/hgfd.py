"""Binary field files.

Layout: the magic bytes ``HGFD``, a little-endian ``uint32`` version, the
dimension ``d`` and ``d`` grid sizes (``uint32`` each), then the payload as
little-endian ``float64`` in row-major cell order with the components of a
vector or tensor field stored contiguously per cell.
"""

import struct

import numpy as np

from .errors import ValidationError

MAGIC = b"HGFD"
VERSION = 1


def encode(values, dim):
    """Bytes for an array of shape ``components + grid`` (``grid`` the last ``dim`` axes)."""
    values = np.asarray(values, dtype=float)
    if values.ndim < dim:
        raise ValidationError(f"array of rank {values.ndim} cannot hold a {dim}-dimensional field")
    grid_shape = values.shape[values.ndim - dim:]
    comp = values.ndim - dim
    per_cell = np.moveaxis(values, tuple(range(comp)), tuple(range(dim, values.ndim)))
    header = MAGIC + struct.pack(f"<{2 + dim}I", VERSION, dim, *grid_shape)
    return header + np.ascontiguousarray(per_cell).astype("<f8").tobytes()


def decode(data, components=()):
    """Inverse of :func:`encode`; ``components`` restores the leading axes."""
    if data[:4] != MAGIC:
        raise ValidationError("not an HGFD file (bad magic bytes)")
    version, dim = struct.unpack_from("<2I", data, 4)
    if version != VERSION:
        raise ValidationError(f"unsupported HGFD version {version}")
    grid_shape = struct.unpack_from(f"<{dim}I", data, 12)
    payload = np.frombuffer(data, dtype="<f8", offset=12 + 4 * dim).astype(float)
    comp = tuple(components)
    expected = int(np.prod(grid_shape)) * int(np.prod(comp, dtype=int))
    if payload.size != expected:
        raise ValidationError(
            f"HGFD payload holds {payload.size} values, expected {expected} for grid "
            f"{grid_shape} with components {comp}"
        )
    per_cell = payload.reshape(tuple(grid_shape) + comp)
    return np.moveaxis(per_cell, tuple(range(dim, dim + len(comp))), tuple(range(len(comp))))


def write(path, values, dim):
    with open(path, "wb") as fh:
        fh.write(encode(values, dim))


def read(path, components=()):
    with open(path, "rb") as fh:
        return decode(fh.read(), components)
