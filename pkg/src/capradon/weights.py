"""Sensitivity weights for electrode pairs of a coplanar array.

The weight for gap k is the negated dot product of the electrode potential
gradient with a copy of itself shifted k pitches along the array; it scores
how much a permittivity perturbation at (x, z) changes the k-gap
measurement.  Grids are sampled in pitch units on a window around the pair,
truncated below a cut height and rescaled to unit maximum before use.
"""

import struct
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .greenfn import eval_potential

__all__ = [
    "WeightGrid",
    "DepthProfile",
    "WeightFileError",
    "DegenerateWeightError",
    "synthesize_weight",
    "condition_weight",
    "depth_profile",
    "pack_weight",
    "save_weight",
    "load_weight",
]

_MAGIC = b"ECTW"
_VERSION = 1
_HEADER = struct.Struct("<4sH3I6d")


class WeightFileError(ValueError):
    """Weight file is not a well-formed ECTW payload."""


class DegenerateWeightError(ValueError):
    """Weight grid has no positive samples left to normalize."""


@dataclass(frozen=True)
class WeightGrid:
    """Sampled sensitivity weight for one electrode gap.

    values[iz, ix] sits at x = x_origin + ix*dx, z = z_origin + iz*dz,
    all in pitch units.  scale records the normalization constant divided
    out by conditioning (1.0 for a raw grid); z_cut the truncation height.
    """

    gap: int
    dx: float
    dz: float
    x_origin: float
    z_origin: float
    values: np.ndarray
    scale: float = 1.0
    z_cut: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-d (nz, nx) array")
        if self.gap < 1:
            raise ValueError(f"gap must be >= 1, got {self.gap}")
        if self.dx <= 0 or self.dz <= 0:
            raise ValueError("dx and dz must be positive")

    @property
    def nx(self):
        return self.values.shape[1]

    @property
    def nz(self):
        return self.values.shape[0]

    def x_coords(self):
        return self.x_origin + self.dx * np.arange(self.nx)

    def z_coords(self):
        return self.z_origin + self.dz * np.arange(self.nz)


class DepthProfile(NamedTuple):
    z: np.ndarray          # row heights, pitch units
    mass: np.ndarray       # sum_x |w| * dx per row
    barycenter: float      # mass-weighted mean height


def synthesize_weight(coeffs, gap, x_pad=4.0, z_max=8.0, dx=0.05, dz=0.05):
    """Sample the raw pair weight for `gap` on a regular window.

    The window spans x in [-x_pad, gap + x_pad] and z in (0, z_max], so it
    is symmetric about the pair midpoint x = gap/2.  Transmitting electrode
    sits at x = 0, receiving one at x = gap.
    """
    if gap < 1:
        raise ValueError(f"gap must be >= 1, got {gap}")
    if x_pad <= 0 or z_max <= dz or dx <= 0 or dz <= 0:
        raise ValueError("window parameters must be positive")
    nx = int(round((gap + 2 * x_pad) / dx)) + 1
    nz = int(round(z_max / dz))
    x = -x_pad + dx * np.arange(nx)
    z = dz * (1.0 + np.arange(nz))
    xg = x[None, :]
    zg = z[:, None]
    _, (g1a, g2a) = eval_potential(coeffs, xg, zg)
    _, (g1b, g2b) = eval_potential(coeffs, xg - gap, zg)
    values = -(g1a * g1b + g2a * g2b)
    return WeightGrid(gap=gap, dx=dx, dz=dz, x_origin=-x_pad, z_origin=dz,
                      values=values)


def condition_weight(grid, z_cut=1.0):
    """Zero rows below z_cut and rescale so the peak magnitude is 1.

    The recording constant c_k is the divided-out peak |value| (kept
    positive; signs are preserved, since for the closest gap the surviving
    sensitivity above the cut is entirely negative).  c_k accumulates into
    `scale`, so conditioning an already conditioned grid is a no-op.
    Raises DegenerateWeightError when truncation leaves an all-zero grid.
    """
    values = grid.values.copy()
    values[grid.z_coords() < z_cut, :] = 0.0
    peak = float(np.max(np.abs(values)))
    if peak == 0.0:
        raise DegenerateWeightError("grid is all zero above the cut height")
    return replace(grid, values=values / peak, scale=grid.scale * peak,
                   z_cut=z_cut)


def depth_profile(grid):
    """Per-row absolute mass and its barycentric height.

    mass(z) = sum_x |w(x, z)| * dx.  The barycenter locates the depth the
    gap responds to most; it moves outward with wider gaps.
    """
    z = grid.z_coords()
    mass = np.sum(np.abs(grid.values), axis=1) * grid.dx
    total = float(np.sum(mass))
    if total <= 0.0:
        raise DegenerateWeightError("grid has zero total mass")
    return DepthProfile(z=z, mass=mass, barycenter=float(np.sum(z * mass) / total))


def pack_weight(grid):
    """Serialize a conditioned grid to ECTW bytes (little-endian, f32 payload)."""
    if float(np.max(np.abs(grid.values))) != 1.0:
        raise ValueError("only conditioned grids (peak magnitude 1) are saved")
    header = _HEADER.pack(_MAGIC, _VERSION, grid.gap, grid.nx, grid.nz,
                          grid.dx, grid.dz, grid.x_origin, grid.z_origin,
                          grid.scale, grid.z_cut)
    return header + grid.values.astype("<f4").tobytes()


def save_weight(grid, path):
    """Write the grid to `path` in ECTW format."""
    with open(path, "wb") as fh:
        fh.write(pack_weight(grid))


def load_weight(path):
    """Read an ECTW file back into a WeightGrid (values promoted to f64)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise WeightFileError("file shorter than the ECTW header")
    magic, version, gap, nx, nz, dx, dz, x0, z0, scale, z_cut = \
        _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise WeightFileError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise WeightFileError(f"unsupported version {version}")
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * nx * nz:
        raise WeightFileError("payload length does not match nx*nz")
    values = np.frombuffer(payload, dtype="<f4").reshape(nz, nx)
    return WeightGrid(gap=gap, dx=dx, dz=dz, x_origin=x0, z_origin=z0,
                      values=values, scale=scale, z_cut=z_cut)
