"""Fourier-optics PSF model for a stereo camera with a phase mask in the aperture.

A pupil ``A * exp(i * (phi_mask + phi_defocus))`` is sampled on the mask grid,
zero padded and Fourier transformed; the squared magnitude is the intensity
PSF.  The mask pitch (88 um) is too coarse for the sensor pitch to be reached
by padding alone (the padded grid would be smaller than the pupil for green
and blue light), so the PSF is synthesised ``psf_supersample`` times finer
than the sensor and then integrated over each pixel's area.
"""

from dataclasses import dataclass, field, fields, replace
from functools import cached_property

import numpy as np
from scipy import fft as sfft

from .errors import ConfigurationError, DomainError
from .zernike import build_zernike_basis, unit_disk_coords

NUM_COEFFICIENTS = 55
PROVENANCES = ("learned", "cubic", "fisher", "flat", "loaded")


@dataclass(frozen=True)
class OpticalConfig:
    """Physical parameters of the stereo rig (SI units, disparities in pixels)."""

    focal_length: float = 0.050
    f_number: float = 8.0
    baseline: float = 0.022
    sensor_pixel_pitch: float = 4.8e-6
    focus_distance: float = 1.0
    wavelengths: tuple = (610e-9, 530e-9, 470e-9)
    mask_grid_size: int = 71
    mask_pitch: float = 88e-6
    refractive_index: float = 1.5
    disparity_min: float = 0.0
    disparity_max: float = 192.0
    num_disparity_levels: int = 21
    preshift: int = 134
    psf_kernel_size: int = 64
    psf_supersample: int = 3

    def __post_init__(self):
        object.__setattr__(self, "wavelengths", tuple(float(w) for w in self.wavelengths))
        positive = ("focal_length", "baseline", "sensor_pixel_pitch", "focus_distance", "mask_pitch")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if len(self.wavelengths) != 3 or min(self.wavelengths) <= 0:
            raise ConfigurationError(f"need three positive wavelengths, got {self.wavelengths!r}")
        if not self.f_number >= 1:
            raise ConfigurationError(f"f_number must be >= 1, got {self.f_number!r}")
        if not self.refractive_index > 1:
            raise ConfigurationError(f"refractive_index must be > 1, got {self.refractive_index!r}")
        if self.mask_grid_size < 3 or self.mask_grid_size % 2 == 0:
            raise ConfigurationError(f"mask_grid_size must be odd and >= 3, got {self.mask_grid_size}")
        if self.num_disparity_levels < 2:
            raise ConfigurationError("num_disparity_levels must be >= 2")
        if not self.disparity_min < self.disparity_max:
            raise ConfigurationError("disparity_min must be < disparity_max")
        if self.psf_kernel_size < 2 or self.psf_kernel_size % 2:
            raise ConfigurationError(f"psf_kernel_size must be even, got {self.psf_kernel_size}")
        if self.psf_supersample < 1 or self.psf_supersample % 2 == 0:
            raise ConfigurationError(f"psf_supersample must be odd, got {self.psf_supersample}")
        if self.preshift < 0:
            raise ConfigurationError("preshift must be >= 0")
        if not self.disparity_min <= self.d0 <= self.disparity_max:
            raise ConfigurationError(
                f"in-focus disparity d0={self.d0} lies outside "
                f"[{self.disparity_min}, {self.disparity_max}]; check focus_distance"
            )

    @property
    def d0(self):
        """In-focus disparity in pixels after the pre-shift."""
        raw = self.focal_length * self.baseline / (self.focus_distance * self.sensor_pixel_pitch)
        return int(np.round(raw)) - self.preshift

    @property
    def disparity_levels(self):
        return np.linspace(self.disparity_min, self.disparity_max, self.num_disparity_levels)

    @property
    def level_spacing(self):
        return (self.disparity_max - self.disparity_min) / (self.num_disparity_levels - 1)

    @property
    def aperture_diameter(self):
        return self.focal_length / self.f_number

    @property
    def aperture_radius_samples(self):
        # The stop can never be wider than the disk inscribed in the mask grid.
        return min(self.mask_grid_size / 2, self.aperture_diameter / (2 * self.mask_pitch))

    def with_(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True, eq=False)
class PhaseMask:
    """Mask surface height map in meters, optionally backed by Zernike coefficients."""

    height_map: np.ndarray
    coefficients: np.ndarray = field(default_factory=lambda: np.zeros(0))
    provenance: str = "learned"

    def __post_init__(self):
        h = np.array(self.height_map, dtype=float)
        c = np.array(self.coefficients, dtype=float).reshape(-1)
        if h.ndim != 2 or h.shape[0] != h.shape[1]:
            raise ConfigurationError(f"height map must be square, got shape {h.shape}")
        if self.provenance not in PROVENANCES:
            raise ConfigurationError(f"unknown provenance {self.provenance!r}")
        h.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "height_map", h)
        object.__setattr__(self, "coefficients", c)

    @property
    def grid_size(self):
        return self.height_map.shape[0]

    @classmethod
    def from_coefficients(cls, coefficients, grid_size=71, provenance="learned"):
        coefficients = np.asarray(coefficients, dtype=float)
        basis = build_zernike_basis(grid_size, len(coefficients))
        return cls(basis.synthesize(coefficients), coefficients, provenance)

    @classmethod
    def flat(cls, grid_size=71):
        return cls.from_coefficients(np.zeros(NUM_COEFFICIENTS), grid_size, "flat")

    def __eq__(self, other):
        if not isinstance(other, PhaseMask):
            return NotImplemented
        return (
            self.provenance == other.provenance
            and np.array_equal(self.height_map, other.height_map)
            and np.array_equal(self.coefficients, other.coefficients)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PSFStack:
    """Pixel-integrated PSFs indexed by ``[wavelength, disparity level]``."""

    kernels: np.ndarray  # (num_wavelengths, num_levels, K, K)
    disparity_levels: np.ndarray
    wavelengths: tuple = ()

    def __post_init__(self):
        self.kernels.setflags(write=False)

    @property
    def num_levels(self):
        return self.kernels.shape[1]

    @property
    def kernel_size(self):
        return self.kernels.shape[-1]

    def __len__(self):
        return self.kernels.shape[0] * self.kernels.shape[1]


def height_to_phase(height_map, wavelength, refractive_index):
    """Phase delay (rad) of a transmissive surface relief of ``height_map`` meters."""
    if not wavelength > 0:
        raise DomainError(f"wavelength must be > 0, got {wavelength!r}")
    if not refractive_index > 1:
        raise DomainError(f"refractive_index must be > 1, got {refractive_index!r}")
    return (2 * np.pi / wavelength) * (refractive_index - 1) * np.asarray(height_map, dtype=float)


def _pupil_coords(config):
    n = config.mask_grid_size
    idx = (np.arange(n) - (n - 1) / 2) * config.mask_pitch
    return np.meshgrid(idx, idx)


def _check_disparity(d, config):
    if not config.disparity_min <= d <= config.disparity_max:
        raise DomainError(
            f"disparity {d} outside [{config.disparity_min}, {config.disparity_max}]"
        )


def defocus_phase(d, config, wavelength):
    """Quadratic defocus phase (rad) on the mask plane for reduced disparity ``d``.

    The disparity offset is converted to sensor meters (``* pixel_pitch``) so
    that ``k / (2 f b) * delta * r^2`` is dimensionless.
    """
    _check_disparity(d, config)
    x, y = _pupil_coords(config)
    k = 2 * np.pi / wavelength
    delta = (d - config.d0) * config.sensor_pixel_pitch
    return k / (2 * config.focal_length * config.baseline) * delta * (x * x + y * y)


def aperture(config):
    """Hard-edged circular stop on the mask grid (1 inside, 0 outside)."""
    n = config.mask_grid_size
    c = (n - 1) / 2
    i = np.arange(n) - c
    r2 = i[None, :] ** 2 + i[:, None] ** 2
    return (r2 <= config.aperture_radius_samples ** 2).astype(float)


def padded_size(wavelength, config):
    """Even FFT size giving a PSF pitch of ``pixel_pitch / psf_supersample``."""
    exact = (
        config.psf_supersample * wavelength * config.focal_length
        / (config.mask_pitch * config.sensor_pixel_pitch)
    )
    m = int(2 * np.round(exact / 2))
    if m < config.mask_grid_size:
        need = config.mask_grid_size * config.mask_pitch * config.sensor_pixel_pitch / (
            wavelength * config.focal_length
        )
        raise ConfigurationError(
            f"padded grid of {m} samples cannot hold the {config.mask_grid_size}-sample pupil "
            f"at wavelength {wavelength:g} m; psf_supersample must be at least {need:.3f}"
        )
    return m


def _fine_psf(pupils, m):
    # pupils: (..., n, n) complex field; returns fftshifted |F|^2 on an m x m grid.
    n = pupils.shape[-1]
    buf = np.zeros(pupils.shape[:-2] + (m, m), dtype=complex)
    buf[..., :n, :n] = pupils
    spec = sfft.fft2(buf, axes=(-2, -1))
    return sfft.fftshift(np.abs(spec) ** 2, axes=(-2, -1))


def _bin_to_sensor(fine, config):
    # The optical axis (fine index m // 2) lands on the centre of sensor pixel K // 2.
    k = config.psf_supersample
    K = config.psf_kernel_size
    m = fine.shape[-1]
    size = k * K
    axis = k * (K // 2) + (k - 1) // 2
    lo = axis - m // 2
    src = max(0, -lo)
    dst = max(0, lo)
    span = min(m - src, size - dst)
    grid = np.zeros(fine.shape[:-2] + (size, size))
    grid[..., dst:dst + span, dst:dst + span] = fine[..., src:src + span, src:src + span]
    binned = grid.reshape(fine.shape[:-2] + (K, k, K, k)).sum(axis=(-3, -1))
    return binned / binned.sum(axis=(-2, -1), keepdims=True)


def _pupils(mask, levels, wavelength, config):
    if mask.grid_size != config.mask_grid_size:
        raise ConfigurationError(
            f"mask grid {mask.grid_size} does not match config grid {config.mask_grid_size}"
        )
    phi_m = height_to_phase(mask.height_map, wavelength, config.refractive_index)
    x, y = _pupil_coords(config)
    r2 = x * x + y * y
    k = 2 * np.pi / wavelength
    scale = k / (2 * config.focal_length * config.baseline) * config.sensor_pixel_pitch
    deltas = np.asarray(levels, dtype=float) - config.d0
    phase = phi_m[None] + scale * deltas[:, None, None] * r2[None]
    return aperture(config)[None] * np.exp(1j * phase)


def compute_psf(mask, d, wavelength, config, integrate=True):
    """Normalised ``psf_kernel_size``-square PSF for one disparity and wavelength.

    With ``integrate=False`` the un-binned intensity on the fine grid is
    returned instead (pitch ``pixel_pitch / psf_supersample``, optical axis at
    index ``m // 2``), normalised to unit sum.
    """
    _check_disparity(d, config)
    m = padded_size(wavelength, config)
    fine = _fine_psf(_pupils(mask, [d], wavelength, config), m)[0]
    if not integrate:
        return fine / fine.sum()
    return _bin_to_sensor(fine, config)


def compute_psf_stack(mask, config):
    levels = config.disparity_levels
    kernels = np.empty(
        (len(config.wavelengths), len(levels), config.psf_kernel_size, config.psf_kernel_size)
    )
    for i, lam in enumerate(config.wavelengths):
        m = padded_size(lam, config)
        kernels[i] = _bin_to_sensor(_fine_psf(_pupils(mask, levels, lam, config), m), config)
    return PSFStack(kernels, levels.copy(), tuple(config.wavelengths))


def first_dark_ring_radius(psf_fine, supersample):
    """Radius in sensor pixels of the first minimum of the azimuthally averaged PSF.

    ``psf_fine`` is the un-binned intensity from ``compute_psf(..., integrate=False)``.
    """
    m = psf_fine.shape[0]
    c = m // 2
    yy, xx = np.indices(psf_fine.shape)
    r = np.hypot(yy - c, xx - c)
    rbin = np.round(r).astype(int)
    counts = np.bincount(rbin.ravel())
    profile = np.bincount(rbin.ravel(), psf_fine.ravel()) / np.maximum(counts, 1)
    for i in range(1, len(profile) - 1):
        if profile[i] <= profile[i - 1] and profile[i] < profile[i + 1]:
            # Parabolic refinement of the minimum location.
            a, b, cc = profile[i - 1], profile[i], profile[i + 1]
            den = a - 2 * b + cc
            off = 0.5 * (a - cc) / den if den > 0 else 0.0
            return (i + off) / supersample
    raise ValueError("PSF profile has no local minimum")


def make_cubic_mask(alpha, config):
    """Cubic wavefront-coding mask whose peak-to-valley phase at green is ``2 * alpha`` rad."""
    if alpha < 0:
        raise DomainError(f"alpha must be >= 0, got {alpha!r}")
    x, y, inside = unit_disk_coords(config.mask_grid_size)
    lam_g = config.wavelengths[1]
    h = alpha * (x ** 3 + y ** 3) * lam_g / (2 * np.pi * (config.refractive_index - 1))
    return PhaseMask(np.where(inside, h, 0.0), np.zeros(0), "cubic")


def fisher_objective(stack, config, eps=1e-6):
    """Depth discriminability of a PSF stack.

    Sum over wavelengths, interior disparity levels and pixels of
    ``(dPSF/dd)^2 / (PSF + eps)`` with central differences in ``d``.
    """
    k = stack.kernels
    if k.shape[1] < 3:
        # Central differences need a neighbour on each side.
        if k.shape[1] < 2:
            raise ConfigurationError("fisher_objective needs at least 2 disparity levels")
        spacing = float(stack.disparity_levels[1] - stack.disparity_levels[0])
        deriv = (k[:, 1] - k[:, 0]) / spacing
        return float(np.sum(deriv ** 2 / (0.5 * (k[:, 0] + k[:, 1]) + eps)))
    levels = np.asarray(stack.disparity_levels, dtype=float)
    span = (levels[2:] - levels[:-2])[None, :, None, None]
    deriv = (k[:, 2:] - k[:, :-2]) / span
    return float(np.sum(deriv ** 2 / (k[:, 1:-1] + eps)))


def quantize_height(mask, step, levels):
    """Snap heights to a ``levels``-step staircase of ``step`` meters.

    The in-aperture minimum is shifted to zero first; out-of-disk samples stay 0.
    """
    if not step > 0:
        raise DomainError(f"step must be > 0, got {step!r}")
    if levels < 2:
        raise DomainError(f"levels must be >= 2, got {levels!r}")
    inside = unit_disk_coords(mask.grid_size)[2]
    h = mask.height_map
    shifted = h - h[inside].min()
    q = np.clip(np.round(shifted / step), 0, levels - 1) * step
    return PhaseMask(np.where(inside, q, 0.0), np.zeros(0), mask.provenance)


def kernel_second_moment(kernel):
    """RMS radius (pixels) of a kernel about its centroid."""
    kernel = np.asarray(kernel, dtype=float)
    total = kernel.sum()
    yy, xx = np.indices(kernel.shape)
    cy = (kernel * yy).sum() / total
    cx = (kernel * xx).sum() / total
    return float(np.sqrt((kernel * ((yy - cy) ** 2 + (xx - cx) ** 2)).sum() / total))


def normalized_correlation(a, b):
    """Zero-mean normalised cross-correlation of two equally shaped arrays."""
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))
