"""Local stereo matching: ZNCC cost volume, winner-take-all, sub-pixel fit, L-R check."""

from dataclasses import dataclass

import numpy as np

from . import kernels
from ._zncc_py import box_sum
from .errors import ConfigurationError

MIN_WINDOW_STD = 1e-4


@dataclass(frozen=True, eq=False)
class StereoResult:
    disparity: np.ndarray
    confidence: np.ndarray
    disparity_right: np.ndarray  # right-view estimate, filled from the right
    raw_disparity: np.ndarray  # sub-pixel winner before the consistency fill
    valid: np.ndarray


def to_gray(img):
    img = np.asarray(img, dtype=float)
    return img.mean(axis=2) if img.ndim == 3 else img


def window_stats(gray, radius):
    """Per-pixel mean and standard deviation over (2r+1)^2 edge-replicated windows."""
    pad = np.pad(gray, radius, mode="edge")
    n = (2 * radius + 1) ** 2
    mu = box_sum(pad, radius) / n
    var = box_sum(pad * pad, radius) / n - mu * mu
    return pad, mu, np.sqrt(np.maximum(var, 0.0))


def subpixel_offsets(best, prev, nxt):
    """Vertex offset of the parabola through three scores, in [-0.5, 0.5].

    Missing neighbours (NaN) or a non-concave triple give offset 0.
    """
    den = prev - 2 * best + nxt
    with np.errstate(invalid="ignore", divide="ignore"):
        off = 0.5 * (prev - nxt) / den
    ok = np.isfinite(off) & (den < 0)
    return np.where(ok, np.clip(off, -0.5, 0.5), 0.0)


def fill_from_left(disparity, valid):
    """Replace invalid pixels by the nearest valid value to their left (background fill).

    Pixels with no valid pixel to their left take the nearest valid one to
    their right; rows with no valid pixel at all become 0.
    """
    h, w = disparity.shape
    cols = np.arange(w)[None, :].repeat(h, axis=0)
    left_idx = np.where(valid, cols, -1)
    np.maximum.accumulate(left_idx, axis=1, out=left_idx)
    right_idx = np.where(valid, cols, w)
    right_idx = np.minimum.accumulate(right_idx[:, ::-1], axis=1)[:, ::-1]
    src = np.where(left_idx >= 0, left_idx, right_idx)
    rows = np.arange(h)[:, None].repeat(w, axis=1)
    has = src < w
    out = np.zeros_like(disparity)
    out[has] = disparity[rows[has], src[has]]
    return np.where(valid, disparity, out)


def match_stereo(left, right, config=None, block_radius=4, max_disp=None, lr_threshold=1.0, backend=None):
    """Estimate the left-view disparity of a rectified pair.

    Parameters
    ----------
    left, right : ndarray
        H x W x 3 (or H x W) images; a left pixel at ``x`` matches right ``x - d``.
    config : OpticalConfig, optional
        Supplies ``max_disp`` (``disparity_max``) when it is not given.
    block_radius : int
        ZNCC window half-size.
    max_disp : int, optional
        Largest integer disparity searched.

    Returns
    -------
    StereoResult
        ``confidence`` is 0 where the left-right check fails or the window is
        textureless, otherwise the winning ZNCC score clipped to [0, 1].
    """
    gl, gr = to_gray(left), to_gray(right)
    if gl.shape != gr.shape:
        raise ConfigurationError(f"left/right shapes differ: {gl.shape} vs {gr.shape}")
    h, w = gl.shape
    if max_disp is None:
        max_disp = int(np.ceil(config.disparity_max)) if config is not None else w - 1
    max_disp = int(max_disp)
    if max_disp >= w:
        raise ConfigurationError(f"max_disp {max_disp} must be smaller than the image width {w}")
    if max_disp < 0:
        raise ConfigurationError("max_disp must be >= 0")
    r = int(block_radius)
    lp, mu_l, sd_l = window_stats(gl, r)
    rp, mu_r, sd_r = window_stats(gr, r)
    (kl, bl, pl, nl), (kr, br, pr, nr) = kernels.zncc_wta(
        np.ascontiguousarray(lp), np.ascontiguousarray(rp), mu_l, sd_l, mu_r, sd_r,
        r, max_disp, MIN_WINDOW_STD, backend=backend,
    )
    d_l = kl + subpixel_offsets(bl, pl, nl)
    d_r = kr + subpixel_offsets(br, pr, nr)

    textured = (sd_l >= MIN_WINDOW_STD)
    xs = np.arange(w)[None, :]
    xr = np.clip(np.round(xs - d_l).astype(int), 0, w - 1)
    back = np.take_along_axis(d_r, xr, axis=1)
    consistent = np.abs(d_l - back) <= lr_threshold
    in_range = (xs - d_l) >= 0
    valid = textured & consistent & in_range & np.isfinite(bl)
    confidence = np.where(valid, np.clip(bl, 0.0, 1.0), 0.0)
    filled = fill_from_left(d_l, valid)

    # Right view: occluded background sits to the right of its occluder.
    xl = np.clip(np.round(xs + d_r).astype(int), 0, w - 1)
    fwd = np.take_along_axis(d_l, xl, axis=1)
    valid_r = (sd_r >= MIN_WINDOW_STD) & (np.abs(d_r - fwd) <= lr_threshold) & ((xs + d_r) <= w - 1)
    filled_r = fill_from_left(d_r[:, ::-1], valid_r[:, ::-1])[:, ::-1]
    return StereoResult(filled, confidence, filled_r, d_l, valid)
