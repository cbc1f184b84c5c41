"""Depth/disparity conversion, the SNR model and depth-of-field tradeoff curves."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .optics import OpticalConfig

# SNR anchor: F/8, T = 1 s, unit light and noise, 50 mm lens -> 50 dB.
SNR_REFERENCE = dict(f_number=8.0, exposure=1.0, light=1.0, sigma_tot=1.0, focal_length=0.050, snr_db=50.0)


@dataclass(frozen=True)
class TradeoffPoint:
    f_number: float
    exposure: float
    snr_db: float
    dof: float
    dof_near: float
    dof_far: float
    dof_approx: float

    def as_row(self):
        return (self.exposure, self.f_number, self.snr_db, self.dof_near, self.dof_far, self.dof, self.dof_approx)


TRADEOFF_HEADER = "exposure_s,f_number,snr_db,dof_near_m,dof_far_m,dof_m,dof_approx_m"


def _raw_scale(config):
    return config.focal_length * config.baseline / config.sensor_pixel_pitch


def disparity_from_depth(z, config=OpticalConfig()):
    """Reduced (pre-shifted) disparity in pixels of a point at depth ``z`` meters."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= config.focal_length):
        raise DomainError(f"depth must exceed the focal length {config.focal_length} m")
    out = _raw_scale(config) / z - config.preshift
    return float(out) if out.ndim == 0 else out


def depth_from_disparity(d_reduced, config=OpticalConfig()):
    raw = np.asarray(d_reduced, dtype=float) + config.preshift
    if np.any(raw <= 0):
        raise DomainError("raw disparity (reduced + preshift) must be positive")
    out = _raw_scale(config) / raw
    return float(out) if out.ndim == 0 else out


def _snr_constant():
    r = SNR_REFERENCE
    ratio = r["light"] * r["exposure"] * r["focal_length"] ** 2 / (r["sigma_tot"] * r["f_number"] ** 2)
    return 10 ** (r["snr_db"] / 20) / ratio


def snr_db(light, exposure, f_number, sigma_tot=1.0, config=OpticalConfig()):
    """Image SNR in dB, proportional to ``L T f^2 / (sigma F#^2)``."""
    for name, v in (("light", light), ("exposure", exposure), ("f_number", f_number), ("sigma_tot", sigma_tot)):
        if not v > 0:
            raise DomainError(f"{name} must be > 0, got {v!r}")
    value = _snr_constant() * light * exposure * config.focal_length ** 2 / (sigma_tot * f_number ** 2)
    return 20 * math.log10(value)


def f_number_for_snr(snr_target, exposure, light=1.0, sigma_tot=1.0, config=OpticalConfig()):
    """Invert :func:`snr_db` for the f-number."""
    value = 10 ** (snr_target / 20)
    return math.sqrt(_snr_constant() * light * exposure * config.focal_length ** 2 / (sigma_tot * value))


def depth_of_field(config, coc, f_number=None, focus_distance=None):
    """Thin-lens near/far limits and total DOF in meters.

    Returns ``(near, far, dof)``; ``far`` and ``dof`` are ``inf`` beyond the
    hyperfocal distance.
    """
    if not coc > 0:
        raise DomainError(f"circle of confusion must be > 0, got {coc!r}")
    f = config.focal_length
    n = config.f_number if f_number is None else f_number
    z0 = config.focus_distance if focus_distance is None else focus_distance
    f2 = f * f
    term = n * coc * (z0 - f)
    near = z0 * f2 / (f2 + term)
    far = z0 * f2 / (f2 - term) if f2 > term else math.inf
    return near, far, far - near


def approx_depth_of_field(config, coc, f_number=None, focus_distance=None):
    """Small-blur approximation ``2 z0^2 F# c / f^2``."""
    n = config.f_number if f_number is None else f_number
    z0 = config.focus_distance if focus_distance is None else focus_distance
    return 2 * z0 * z0 * n * coc / config.focal_length ** 2


def tradeoff_curve(config, snr_target, exposure_samples, coc=None, light=1.0, sigma_tot=1.0):
    """Equal-SNR f-number and DOF for each exposure time."""
    exposure_samples = list(exposure_samples)
    if not exposure_samples:
        raise DomainError("exposure_samples must be non-empty")
    coc = config.sensor_pixel_pitch if coc is None else coc
    points = []
    for t in exposure_samples:
        n = f_number_for_snr(snr_target, t, light, sigma_tot, config)
        near, far, dof = depth_of_field(config, coc, f_number=n)
        points.append(
            TradeoffPoint(
                f_number=n,
                exposure=float(t),
                snr_db=snr_db(light, t, n, sigma_tot, config),
                dof=dof,
                dof_near=near,
                dof_far=far,
                dof_approx=approx_depth_of_field(config, coc, f_number=n),
            )
        )
    return points


def tradeoff_csv(points):
    lines = [TRADEOFF_HEADER]
    for p in points:
        lines.append(",".join(repr(float(v)) for v in p.as_row()))
    return "\n".join(lines) + "\n"
