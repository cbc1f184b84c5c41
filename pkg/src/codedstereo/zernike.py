"""Noll-ordered Zernike polynomials sampled on a square pupil grid."""

from dataclasses import dataclass
from functools import lru_cache
from math import factorial

import numpy as np

from .errors import ConfigurationError


def noll_to_nm(j):
    """Return the radial order ``n`` and signed azimuthal frequency ``m`` of Noll index ``j``.

    Even ``j`` carry the cosine terms (``m > 0``), odd ``j`` the sine terms
    (``m < 0``).
    """
    if j < 1:
        raise ConfigurationError(f"Noll index must be >= 1, got {j}")
    n = int((np.sqrt(8 * (j - 1) + 1) - 1) // 2)
    p = j - n * (n + 1) // 2
    k = n % 2
    m = ((p + k) // 2) * 2 - k
    if m != 0 and j % 2 == 1:
        m = -m
    return n, m


def radial_polynomial(n, m, rho):
    m = abs(m)
    out = np.zeros_like(rho)
    for s in range((n - m) // 2 + 1):
        c = (-1) ** s * factorial(n - s) / (
            factorial(s) * factorial((n + m) // 2 - s) * factorial((n - m) // 2 - s)
        )
        out += c * rho ** (n - 2 * s)
    return out


def zernike_noll(j, rho, theta):
    """Noll-normalised Zernike polynomial (unit RMS over the unit disk)."""
    n, m = noll_to_nm(j)
    r = radial_polynomial(n, m, rho)
    if m == 0:
        return np.sqrt(n + 1) * r
    norm = np.sqrt(2 * (n + 1))
    if m > 0:
        return norm * r * np.cos(m * theta)
    return norm * r * np.sin(-m * theta)


def unit_disk_coords(grid_size):
    """Normalised pupil coordinates for an odd ``grid_size``.

    The unit disk is the circle inscribed in the grid, so its radius is
    ``grid_size / 2`` samples and the centre sample sits on the optical axis.
    Returns ``(x, y, inside)``; ``y`` grows downward with the row index.
    """
    c = (grid_size - 1) / 2
    idx = (np.arange(grid_size) - c) / (grid_size / 2)
    x, y = np.meshgrid(idx, idx)
    inside = x * x + y * y <= 1.0
    return x, y, inside


@dataclass(frozen=True)
class ZernikeBasis:
    count: int
    grid_size: int
    basis_maps: np.ndarray  # (count, grid_size, grid_size), zero outside the disk
    indexing_scheme: str = "noll"

    @property
    def inside(self):
        return unit_disk_coords(self.grid_size)[2]

    def synthesize(self, coefficients):
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (self.count,):
            raise ConfigurationError(
                f"expected {self.count} coefficients, got shape {coefficients.shape}"
            )
        return np.tensordot(coefficients, self.basis_maps, axes=1)


def _orthonormalize(vectors, tol=1e-10):
    # Gram-Schmidt in Noll order with unit mean-square normalisation.
    # Projections under ``tol`` are symmetry zeros and are skipped so that
    # parity of the low-order terms survives exactly.
    n = vectors.shape[1]
    out = np.empty_like(vectors)
    for j, v in enumerate(vectors):
        v = v.copy()
        for _ in range(2):
            for i in range(j):
                proj = v @ out[i] / n
                if abs(proj) > tol:
                    v -= proj * out[i]
        out[j] = v / np.sqrt(v @ v / n)
    return out


@lru_cache(maxsize=8)
def build_zernike_basis(grid_size=71, count=55):
    """Sample the first ``count`` Noll Zernike terms on a ``grid_size`` grid.

    Piston (``j = 1``) is included as map 0.  Point-sampled Zernikes lose
    orthogonality near the disk edge (a few percent at 71x71), so the sampled
    maps are re-orthonormalised over the in-disk samples in Noll order; every
    map keeps unit mean square on the disk.  Results are cached and read-only.
    """
    if not isinstance(grid_size, (int, np.integer)) or grid_size < 3 or grid_size % 2 == 0:
        raise ConfigurationError(f"grid_size must be an odd integer >= 3, got {grid_size!r}")
    if not isinstance(count, (int, np.integer)) or count < 1:
        raise ConfigurationError(f"count must be a positive integer, got {count!r}")
    x, y, inside = unit_disk_coords(grid_size)
    rho = np.sqrt(x * x + y * y)
    theta = np.arctan2(y, x)
    raw = np.array([zernike_noll(j + 1, rho[inside], theta[inside]) for j in range(count)])
    maps = np.zeros((count, grid_size, grid_size))
    maps[:, inside] = _orthonormalize(raw)
    maps.setflags(write=False)
    return ZernikeBasis(count=int(count), grid_size=int(grid_size), basis_maps=maps)
