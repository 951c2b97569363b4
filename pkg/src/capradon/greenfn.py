"""Periodic half-plane kernel and the interpolated electrode potential.

The kernel is the electrostatic potential of a unit line charge repeated
with period 1 along the array direction, written in pitch units (x1 along
the electrode plane, x2 height above it).  An (order+1)-point interpolation
system combines rescaled copies of the kernel into an approximate potential
that is 1 on the driven electrode and 0 on its neighbours; downstream
modules form sensitivity weights from products of its gradient.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SingularPointError",
    "SingularMatrixError",
    "GreenCoefficients",
    "eval_green",
    "eval_green_gradient",
    "build_system",
    "solve_coefficients",
    "potential_coefficients",
    "eval_potential",
]

# Pivot smaller than this times max|entry| means the system is numerically
# singular and the coefficients would be garbage.
PIVOT_RTOL = 1e-14


class SingularPointError(ValueError):
    """Kernel evaluated on a lattice singularity (x1 integer, x2 = 0)."""


class SingularMatrixError(ValueError):
    """Interpolation system has no usable pivot."""


def _lattice_singular(x1, x2):
    return (x2 == 0.0) & (x1 == np.rint(x1))


def eval_green(x1, x2):
    """Evaluate the periodic kernel G(x1, x2).

    G = -log(sinh^2(pi*x2) + sin^2(pi*x1)) / (4*pi) + |x2| / 2

    1-periodic and even in x1, even in x2, harmonic away from the lattice
    points (n, 0).  Accepts scalars or broadcastable arrays.  Raises
    SingularPointError if any point sits on a lattice singularity.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if np.any(_lattice_singular(x1, x2)):
        raise SingularPointError("kernel is singular at (integer, 0) points")
    base = np.sinh(np.pi * x2) ** 2 + np.sin(np.pi * x1) ** 2
    out = -np.log(base) / (4.0 * np.pi) + 0.5 * np.abs(x2)
    return out.item() if out.ndim == 0 else out


def eval_green_gradient(x1, x2):
    """Gradient (dG/dx1, dG/dx2) of the periodic kernel.

    Rejects x2 = 0 everywhere: the |x2|/2 term has a kink on the plane.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if np.any(x2 == 0.0):
        raise SingularPointError("gradient undefined on the plane x2 = 0")
    base = np.sinh(np.pi * x2) ** 2 + np.sin(np.pi * x1) ** 2
    g1 = -np.sin(2.0 * np.pi * x1) / (4.0 * base)
    g2 = -np.sinh(2.0 * np.pi * x2) / (4.0 * base) + 0.5 * np.sign(x2)
    if g1.ndim == 0:
        return g1.item(), g2.item()
    return g1, g2


def build_system(order, eps0):
    """Assemble the dense interpolation system for the electrode potential.

    Row i (0-based) pins the potential at electrode position x1 = i, sampled
    a small height eps0 above the plane; column j holds the kernel copy
    rescaled by 1/(j+1), evaluated consistently at (i/(j+1), eps0/(j+1)).
    Returns (matrix, rhs) with rhs = (1, 0, ..., 0): unit potential on the
    driven electrode, zero on the next `order` electrodes.
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if eps0 <= 0.0:
        raise ValueError(f"eps0 must be positive, got {eps0}")
    i = np.arange(order + 1, dtype=float)[:, None]
    j = np.arange(1, order + 2, dtype=float)[None, :]
    matrix = eval_green(i / j, eps0 / j)
    rhs = np.zeros(order + 1)
    rhs[0] = 1.0
    return matrix, rhs


def solve_coefficients(matrix, rhs):
    """Solve the interpolation system by Gauss elimination with row pivoting.

    Returns (alpha, residual) where residual = max|matrix @ alpha - rhs|.
    Raises SingularMatrixError when the best available pivot falls below
    PIVOT_RTOL * max|entry|.
    """
    a = np.array(matrix, dtype=float)
    b = np.array(rhs, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n) or b.shape != (n,):
        raise ValueError("matrix must be square and match rhs length")
    tiny = PIVOT_RTOL * np.max(np.abs(a))
    for col in range(n - 1):
        p = col + np.argmax(np.abs(a[col:, col]))
        if np.abs(a[p, col]) < tiny:
            raise SingularMatrixError(f"pivot {a[p, col]:.3e} below threshold")
        if p != col:
            a[[col, p]] = a[[p, col]]
            b[[col, p]] = b[[p, col]]
        factors = a[col + 1:, col] / a[col, col]
        a[col + 1:, col:] -= factors[:, None] * a[col, col:]
        b[col + 1:] -= factors * b[col]
    if np.abs(a[n - 1, n - 1]) < tiny:
        raise SingularMatrixError("matrix is numerically singular")
    alpha = np.zeros(n)
    for row in range(n - 1, -1, -1):
        alpha[row] = (b[row] - a[row, row + 1:] @ alpha[row + 1:]) / a[row, row]
    residual = float(np.max(np.abs(np.asarray(matrix) @ alpha - np.asarray(rhs))))
    return alpha, residual


@dataclass(frozen=True)
class GreenCoefficients:
    """Solved kernel weights defining the approximate electrode potential."""

    alpha: np.ndarray  # kernel weights, length order + 1
    eps0: float        # interpolation height above the plane, pitch units
    residual: float    # max-norm residual of the solved system

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        if self.alpha.ndim != 1 or self.alpha.size < 2:
            raise ValueError("alpha must be a 1-d vector of length >= 2")

    @property
    def order(self):
        return self.alpha.size - 1


def potential_coefficients(order=16, eps0=0.1):
    """Build and solve the interpolation system; returns GreenCoefficients."""
    matrix, rhs = build_system(order, eps0)
    alpha, residual = solve_coefficients(matrix, rhs)
    return GreenCoefficients(alpha=alpha, eps0=eps0, residual=residual)


def eval_potential(coeffs, x1, x2):
    """Approximate electrode potential and its gradient.

    f(x1, x2) = sum_k alpha_k * G(x1/(k+1), x2/(k+1)), with the gradient
    carrying the 1/(k+1) chain-rule factor per term.  Returns
    (value, (d/dx1, d/dx2)); all three broadcast like the inputs.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    value = np.zeros(np.broadcast(x1, x2).shape)
    g1 = np.zeros_like(value)
    g2 = np.zeros_like(value)
    for k, ak in enumerate(coeffs.alpha):
        scale = 1.0 / (k + 1)
        value += ak * eval_green(x1 * scale, x2 * scale)
        d1, d2 = eval_green_gradient(x1 * scale, x2 * scale)
        g1 += ak * scale * d1
        g2 += ak * scale * d2
    if value.ndim == 0:
        return value.item(), (g1.item(), g2.item())
    return value, (g1, g2)
