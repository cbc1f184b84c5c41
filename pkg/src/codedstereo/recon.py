"""Classical reconstruction (Wiener EDOF), evaluation metrics and the combined loss."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, UsageError
from .geometry import depth_from_disparity
from .render import _FFTConvolver, level_indices

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class LossWeights:
    """Disparity pyramid weights (full, 1/2, 1/4 resolution) and the RGB weight."""

    alpha: tuple = (1.0, 0.5, 0.25)
    gamma: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        if len(self.alpha) != 3:
            raise ConfigurationError(f"alpha needs 3 pyramid weights, got {self.alpha!r}")
        if self.gamma < 0 or min(self.alpha) < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.gamma == 0 and not any(self.alpha):
            raise ConfigurationError("at least one loss weight must be non-zero")


@dataclass(frozen=True, eq=False)
class ReconResult:
    edof_left: np.ndarray
    edof_right: np.ndarray
    disparity: np.ndarray
    confidence: np.ndarray


@dataclass(eq=False)
class MetricReport:
    psnr_db: float
    ssim: float
    epe_px: float
    bad3_pct: float
    per_disparity_psnr: np.ndarray
    per_disparity_epe: np.ndarray
    levels: np.ndarray = field(default_factory=lambda: np.zeros(0))
    psnr_left: float = float("nan")
    psnr_right: float = float("nan")
    ssim_left: float = float("nan")
    ssim_right: float = float("nan")

    def to_text(self):
        keys = ("psnr_db", "ssim", "epe_px", "bad3_pct", "psnr_left", "psnr_right", "ssim_left", "ssim_right")
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in keys)

    def curves_csv(self):
        lines = ["disparity_px,psnr_db,epe_px"]
        for d, p, e in zip(self.levels, self.per_disparity_psnr, self.per_disparity_epe):
            lines.append(f"{float(d)!r},{float(p)!r},{float(e)!r}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- Wiener


def estimate_nsr(coded, sigma, floor=1e-5):
    """Per-channel noise-to-signal power ratio ``sigma^2 / var(signal)``."""
    coded = np.asarray(coded, dtype=float)
    var = coded.reshape(-1, coded.shape[-1]).var(axis=0) if coded.ndim == 3 else np.array([coded.var()])
    signal = np.maximum(var - sigma ** 2, 1e-6)
    return np.maximum(sigma ** 2 / signal, floor)


def _per_channel(value, nc):
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        return np.full(nc, float(value))
    if value.shape != (nc,):
        raise UsageError(f"expected scalar or {nc} per-channel values, got shape {value.shape}")
    return value


def wiener_filters(kernels, shape, nsr, spectra=None):
    """Frequency responses ``H* / (|H|^2 + nsr)`` for kernels of shape (..., K, K).

    ``spectra`` short-circuits the kernel transforms when already known.
    """
    h = _FFTConvolver(shape, kernels.shape[-1]).kernel_spectrum(kernels) if spectra is None else spectra
    nsr = np.asarray(nsr, dtype=float)
    nsr = nsr.reshape(nsr.shape + (1, 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.conj(h) / (np.abs(h) ** 2 + nsr)
    return np.where(np.isfinite(g), g, 0.0)


def wiener_deconvolve(coded, kernel, nsr):
    """Wiener-deconvolve each channel of ``coded`` (H x W x C).

    ``kernel`` is one K x K kernel or a (C, K, K) stack; ``nsr`` is a scalar
    or a per-channel sequence.  The image is edge-padded by the kernel
    radius before the circular deconvolution and the result clipped to [0, 1].
    """
    coded = np.asarray(coded, dtype=float)
    squeeze = coded.ndim == 2
    if squeeze:
        coded = coded[..., None]
    h, w, nc = coded.shape
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim == 2:
        kernel = np.broadcast_to(kernel, (nc,) + kernel.shape)
    nsr = _per_channel(nsr, nc)
    if np.any(nsr < 0):
        raise UsageError("nsr must be >= 0")
    conv = _FFTConvolver((h, w), kernel.shape[-1])
    g = wiener_filters(kernel, (h, w), nsr)
    spec = conv.spectrum(conv.pad(coded).transpose(2, 0, 1))
    out = np.clip(conv.inverse(spec * g), 0.0, 1.0).transpose(1, 2, 0)
    return out[..., 0] if squeeze else out


def _soft_level_weights(hint, levels):
    # Linear weights on the two bracketing levels; exact at the levels themselves.
    levels = np.asarray(levels, dtype=float)
    h = np.clip(hint, levels[0], levels[-1])
    pos = np.interp(h, levels, np.arange(len(levels)))
    lo = np.minimum(np.floor(pos).astype(int), len(levels) - 2)
    t = pos - lo
    return lo, t


def _layered(coded, stack, hint, nsr, spectra=None):
    h, w, nc = coded.shape
    conv = _FFTConvolver((h, w), stack.kernel_size)
    spec = conv.spectrum(conv.pad(coded).transpose(2, 0, 1))  # (C, ...)
    lo, t = _soft_level_weights(hint, stack.disparity_levels)
    weights = np.zeros((stack.num_levels, h, w))
    np.add.at(weights, (lo, *np.indices((h, w))), 1.0 - t)
    np.add.at(weights, (lo + 1, *np.indices((h, w))), t)
    out = np.zeros((nc, h, w))
    for i in np.nonzero(weights.reshape(stack.num_levels, -1).any(axis=1))[0]:
        g = wiener_filters(stack.kernels[:, i], (h, w), nsr, None if spectra is None else spectra[:, i])
        out += weights[i][None] * np.clip(conv.inverse(spec * g), 0.0, 1.0)
    return out.transpose(1, 2, 0)


def edof_reconstruct(pair, stack, mode="single", disparity_hint=None, nsr=1e-3, kernel_spectra=None):
    """Recover all-in-focus textures for both views of a coded pair.

    ``single`` deconvolves with the per-channel mean kernel over all levels.
    ``layered`` deconvolves with every level's kernel and blends the results
    by the disparity hint, linearly between the two nearest levels.
    ``disparity_hint`` is one map (used for both views) or a (left, right) pair.
    ``kernel_spectra`` optionally supplies the stack's transforms at the pair's shape.
    """
    nc = stack.kernels.shape[0]
    nsr = _per_channel(nsr, nc)
    if mode == "single":
        mean_kernel = stack.kernels.mean(axis=1)
        return (wiener_deconvolve(pair.coded_left, mean_kernel, nsr),
                wiener_deconvolve(pair.coded_right, mean_kernel, nsr))
    if mode != "layered":
        raise UsageError(f"mode must be 'single' or 'layered', got {mode!r}")
    if disparity_hint is None:
        raise UsageError("layered EDOF reconstruction requires a disparity hint")
    if isinstance(disparity_hint, (tuple, list)):
        hint_l, hint_r = disparity_hint
    else:
        hint_l = hint_r = disparity_hint
    return (_layered(np.asarray(pair.coded_left, float), stack, np.asarray(hint_l, float), nsr, kernel_spectra),
            _layered(np.asarray(pair.coded_right, float), stack, np.asarray(hint_r, float), nsr, kernel_spectra))


# --------------------------------------------------------------------------- metrics


def _check_shapes(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(estimate, truth, mask=None):
    """PSNR in dB for images on [0, 1]; capped at 99 dB."""
    a, b = _check_shapes(estimate, truth)
    err = (a - b) ** 2
    if mask is not None:
        err = err[np.broadcast_to(mask if err.ndim == np.ndim(mask) else mask[..., None], err.shape)]
    mse = float(np.mean(err))
    if mse <= 10 ** (-PSNR_CAP_DB / 10):
        return PSNR_CAP_DB
    return 10 * math.log10(1.0 / mse)


def _gauss(img, sigma=1.5):
    # 11 x 11 window: radius 5 = truncate * sigma.
    return ndimage.gaussian_filter(img, sigma, truncate=5 / sigma, mode="reflect")


def ssim(estimate, truth, data_range=1.0):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a, b = _check_shapes(estimate, truth)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range) for c in range(a.shape[2])]))
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _gauss(a), _gauss(b)
    s_aa = _gauss(a * a) - mu_a ** 2
    s_bb = _gauss(b * b) - mu_b ** 2
    s_ab = _gauss(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def epe(d_est, d_true, mask=None):
    a, b = _check_shapes(d_est, d_true)
    e = np.abs(a - b)
    return float(np.mean(e if mask is None else e[mask]))


def bad3(d_est, d_true, mask=None, threshold=3.0):
    a, b = _check_shapes(d_est, d_true)
    e = np.abs(a - b) > threshold
    return float(100.0 * np.mean(e if mask is None else e[mask]))


def rmse(a, b, mask=None):
    a, b = _check_shapes(a, b)
    e = (a - b) ** 2
    if mask is not None:
        e = e[mask]
    return float(np.sqrt(np.mean(e))) if e.size else 0.0


def correspondence_mask(d_true, radius=0):
    """Left pixels whose true match lies inside the right image, minus a border."""
    h, w = d_true.shape
    xs = np.arange(w)[None, :]
    m = (xs - d_true) >= radius
    if radius:
        m[:radius] = m[-radius:] = False
        m[:, -radius:] = False
    return m


def per_disparity_curves(edof_pairs, truth_pairs, d_est, d_true, levels, masks=None):
    """PSNR (both views pooled) and EPE (left view) per ground-truth disparity level.

    Each argument except ``levels`` is a list with one entry per scene; levels
    with no pixels get NaN.
    """
    nl = len(levels)
    sq = np.zeros(nl)
    cnt = np.zeros(nl)
    err = np.zeros(nl)
    ecnt = np.zeros(nl)
    for i, ((el, er), (tl, tr), (dl_true, dr_true)) in enumerate(zip(edof_pairs, truth_pairs, d_true)):
        for est, tru, dt in ((el, tl, dl_true), (er, tr, dr_true)):
            idx = level_indices(dt, levels)
            pix = ((np.asarray(est) - np.asarray(tru)) ** 2).mean(axis=-1)
            sq += np.bincount(idx.ravel(), pix.ravel(), nl)
            cnt += np.bincount(idx.ravel(), minlength=nl)
        idx = level_indices(dl_true, levels)
        m = np.ones_like(dl_true, bool) if masks is None else masks[i]
        e = np.abs(np.asarray(d_est[i]) - dl_true)
        err += np.bincount(idx[m], e[m], nl)
        ecnt += np.bincount(idx[m], minlength=nl)
    with np.errstate(divide="ignore", invalid="ignore"):
        mse = sq / cnt
        curve_psnr = np.where(cnt > 0, np.minimum(10 * np.log10(1.0 / np.maximum(mse, 1e-300)), PSNR_CAP_DB), np.nan)
        curve_epe = np.where(ecnt > 0, err / ecnt, np.nan)
    return curve_psnr, curve_epe


# --------------------------------------------------------------------------- DOF from curves


@dataclass(frozen=True)
class DofSpan:
    disparity_lo: float
    disparity_hi: float
    depth_near: float
    depth_far: float

    @property
    def disparity_span(self):
        return self.disparity_hi - self.disparity_lo

    @property
    def depth_span(self):
        return self.depth_far - self.depth_near


def dof_from_curve(per_disparity_psnr, threshold_db, config, levels=None):
    """Largest contiguous run of levels with PSNR >= threshold, as disparity and depth spans.

    Each level stands for a bin of one level spacing centred on it, clipped
    to the configured disparity range.
    """
    curve = np.asarray(per_disparity_psnr, dtype=float)
    levels = config.disparity_levels if levels is None else np.asarray(levels, dtype=float)
    ok = np.nan_to_num(curve, nan=-np.inf) >= threshold_db
    best = (0, -1)
    start = None
    for i, flag in enumerate(list(ok) + [False]):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start > best[1] - best[0] + 1:
                best = (start, i - 1)
            start = None
    if best[1] < best[0]:
        z = depth_from_disparity(float(levels[0]), config)
        return DofSpan(float(levels[0]), float(levels[0]), z, z)
    half = 0.5 * config.level_spacing
    lo = max(config.disparity_min, levels[best[0]] - half)
    hi = min(config.disparity_max, levels[best[1]] + half)
    return DofSpan(float(lo), float(hi), depth_from_disparity(hi, config), depth_from_disparity(lo, config))


# --------------------------------------------------------------------------- loss


def _pool(a, f, reduce=np.mean):
    h, w = (a.shape[0] // f) * f, (a.shape[1] // f) * f
    return reduce(a[:h, :w].reshape(h // f, f, w // f, f), axis=(1, 3))


def disparity_pyramid(d, levels=3):
    """Full-resolution map plus 2x, 4x, ... average-pooled copies in their own pixel units."""
    return [d if i == 0 else _pool(d, 2 ** i) / 2 ** i for i in range(levels)]


def loss_terms(edof_pair, truth_pair, d_est, d_true, weights, mask=None):
    """Return ``(loss_disp, rgb_rmse_sum)`` so that loss = loss_disp + gamma * rgb_rmse_sum."""
    d_est = np.asarray(d_est, dtype=float)
    d_true = np.asarray(d_true, dtype=float)
    pe = disparity_pyramid(d_est, len(weights.alpha))
    pt = disparity_pyramid(d_true, len(weights.alpha))
    if mask is None:
        masks = [None] * len(pe)
    else:
        masks = [mask if i == 0 else _pool(mask, 2 ** i, np.all) for i in range(len(pe))]
    loss_disp = sum(a * rmse(e, t, m) for a, e, t, m in zip(weights.alpha, pe, pt, masks) if a)
    rgb = rmse(edof_pair[0], truth_pair[0]) + rmse(edof_pair[1], truth_pair[1])
    return float(loss_disp), float(rgb)


def combined_loss(edof_pair, truth_pair, d_est, d_true, weights, mask=None):
    """Weighted disparity-pyramid RMSE plus ``gamma`` times the RGB RMSE of both views."""
    ld, rgb = loss_terms(edof_pair, truth_pair, d_est, d_true, weights, mask)
    return ld + weights.gamma * rgb
