"""Layered RGB-disparity rendering of coded stereo pairs.

Each view is split into fronto-parallel layers by quantising its disparity
map to the PSF-stack levels.  Layers are blurred with their own PSF and
blended with normalised matting weights::

    I = sum_d (M_d * I) conv PSF_d  /  sum_d M_d conv PSF_d

The denominator is the per-pixel sum of the blurred layer masks, so a flat
field comes out flat whatever the layering.  All convolutions are linear,
"same" sized, with edge-replicated borders; the kernel centre is at index
``K // 2``.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .errors import ConfigurationError, DomainError
from .optics import compute_psf_stack

DENOM_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class Scene:
    """Ground-truth textures (H x W x 3 in [0, 1]) and reduced disparities (H x W)."""

    texture_left: np.ndarray
    texture_right: np.ndarray
    disparity_left: np.ndarray
    disparity_right: np.ndarray
    id: str = "scene"
    clamp_fraction: float = 0.0

    def __post_init__(self):
        shapes = {self.texture_left.shape[:2], self.texture_right.shape[:2],
                  self.disparity_left.shape, self.disparity_right.shape}
        if len(shapes) != 1:
            raise DomainError(f"scene {self.id!r}: textures and disparities differ in shape {shapes}")
        if self.texture_left.ndim != 3 or self.texture_left.shape[2] != 3:
            raise DomainError(f"scene {self.id!r}: textures must be H x W x 3")

    @property
    def shape(self):
        return self.disparity_left.shape

    def clamped(self, config):
        """Copy with disparities clipped to the configured range and the clipped fraction recorded."""
        lo, hi = config.disparity_min, config.disparity_max
        both = np.stack([self.disparity_left, self.disparity_right])
        frac = float(np.mean((both < lo) | (both > hi)))
        return Scene(
            self.texture_left, self.texture_right,
            np.clip(self.disparity_left, lo, hi), np.clip(self.disparity_right, lo, hi),
            self.id, frac,
        )


@dataclass(frozen=True, eq=False)
class LayerMasks:
    masks: np.ndarray  # (num_levels, H, W) of 0/1
    levels: np.ndarray
    clamp_count: int = 0

    @property
    def index_map(self):
        return np.argmax(self.masks, axis=0)


@dataclass(frozen=True, eq=False)
class CodedPair:
    coded_left: np.ndarray
    coded_right: np.ndarray
    noise_sigma: float = 0.0
    mask_id: str = ""
    scene_id: str = ""


def level_indices(disp, levels):
    """Index of the nearest level per pixel; ties go to the smaller level."""
    levels = np.asarray(levels, dtype=float)
    disp = np.clip(np.asarray(disp, dtype=float), levels[0], levels[-1])
    mids = 0.5 * (levels[1:] + levels[:-1])
    # side="left" puts a value equal to a midpoint below it.
    return np.searchsorted(mids, disp, side="left")


def quantize_disparity(disp, config):
    levels = config.disparity_levels
    disp = np.asarray(disp, dtype=float)
    clamp_count = int(np.count_nonzero((disp < levels[0]) | (disp > levels[-1])))
    idx = level_indices(disp, levels)
    masks = (idx[None] == np.arange(len(levels))[:, None, None]).astype(float)
    return LayerMasks(masks, levels, clamp_count)


class _FFTConvolver:
    """Edge-replicated "same" convolution of many images against many kernels.

    Kernel spectra are computed once per (kernel, image shape).
    """

    def __init__(self, shape, kernel_size):
        self.shape = shape
        self.r = kernel_size // 2
        h, w = shape
        self.padded = (h + 2 * self.r, w + 2 * self.r)

    def pad(self, img):
        r = self.r
        return np.pad(img, [(r, r), (r, r)] + [(0, 0)] * (img.ndim - 2), mode="edge")

    def kernel_spectrum(self, kernels):
        # kernels (..., K, K) -> (..., Hp, Wp//2+1); kernel centre moved to the origin.
        hp, wp = self.padded
        k = kernels.shape[-1]
        buf = np.zeros(kernels.shape[:-2] + (hp, wp))
        buf[..., :k, :k] = kernels
        buf = np.roll(buf, (-self.r, -self.r), axis=(-2, -1))
        return sfft.rfft2(buf, axes=(-2, -1))

    def spectrum(self, padded_img):
        return sfft.rfft2(padded_img, axes=(-2, -1))

    def inverse(self, spec):
        hp, wp = self.padded
        out = sfft.irfft2(spec, s=(hp, wp), axes=(-2, -1))
        r = self.r
        return out[..., r:hp - r, r:wp - r]


def convolve_same(image, kernel):
    """Edge-replicated same-size convolution of a 2-D image with one kernel."""
    image = np.asarray(image, dtype=float)
    conv = _FFTConvolver(image.shape, kernel.shape[-1])
    return conv.inverse(conv.spectrum(conv.pad(image)) * conv.kernel_spectrum(np.asarray(kernel, float)))


def render_coded_image(texture, layers, stack, kernel_spectra=None, return_weights=False):
    """Blur ``texture`` (H x W x 3) layer by layer with the wavelength-matched PSFs."""
    texture = np.asarray(texture, dtype=float)
    if len(layers.levels) != stack.num_levels or not np.allclose(layers.levels, stack.disparity_levels):
        raise ConfigurationError("layer levels do not match the PSF stack levels")
    h, w, nc = texture.shape
    if nc != stack.kernels.shape[0]:
        raise ConfigurationError(f"texture has {nc} channels, PSF stack has {stack.kernels.shape[0]}")
    conv = _FFTConvolver((h, w), stack.kernel_size)
    if kernel_spectra is None:
        kernel_spectra = conv.kernel_spectrum(stack.kernels)
    present = [i for i in range(stack.num_levels) if layers.masks[i].any()]
    pm = conv.pad(layers.masks[present].transpose(1, 2, 0)).transpose(2, 0, 1)  # (L, Hp, Wp)
    pt = conv.pad(texture).transpose(2, 0, 1)  # (C, Hp, Wp)
    mask_spec = conv.spectrum(pm)
    layer_spec = conv.spectrum(pm[None] * pt[:, None])  # (C, L, ...)
    ks = kernel_spectra[:, present]  # (C, L, ...)
    num = conv.inverse(np.einsum("clij,clij->cij", layer_spec, ks))
    den = conv.inverse(np.einsum("lij,clij->cij", mask_spec, ks))
    out = num / np.maximum(den, DENOM_FLOOR)
    out = out.transpose(1, 2, 0)
    if return_weights:
        return out, den.transpose(1, 2, 0)
    return out


def matting_weights(layers, stack):
    """Normalised blurred layer masks, shape (C, L, H, W); they sum to 1 per pixel."""
    h, w = layers.masks.shape[1:]
    conv = _FFTConvolver((h, w), stack.kernel_size)
    pm = conv.pad(layers.masks.transpose(1, 2, 0)).transpose(2, 0, 1)
    blurred = conv.inverse(conv.spectrum(pm)[None] * conv.kernel_spectrum(stack.kernels))
    return blurred / np.maximum(blurred.sum(axis=1, keepdims=True), DENOM_FLOOR)


def preshift_right(image_or_disp, config, is_disparity=False):
    """Translate a right-view grid ``preshift`` pixels to the right (edge replicated).

    Disparity maps are also reduced by ``preshift``.
    """
    a = np.asarray(image_or_disp)
    s = int(config.preshift)
    if a.shape[1] <= s:
        raise DomainError(f"image width {a.shape[1]} must exceed the pre-shift {s}")
    if s == 0:
        out = a.copy()
    else:
        out = np.empty_like(a)
        out[:, s:] = a[:, :-s]
        out[:, :s] = a[:, :1]
    if is_disparity:
        out = out - s
    return out


def add_noise(image, sigma, seed):
    """Add i.i.d. Gaussian noise of std ``sigma`` and clip to [0, 1]."""
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma!r}")
    image = np.asarray(image, dtype=float)
    if sigma == 0:
        return np.clip(image, 0.0, 1.0)
    rng = np.random.default_rng(seed)
    return np.clip(image + sigma * rng.standard_normal(image.shape), 0.0, 1.0)


NOISE_REFERENCE = (8.0, 1.0, 1.0, 0.02)


def noise_sigma_for(f_number, exposure=1.0, light_level=1.0, reference=NOISE_REFERENCE):
    """Noise std as a fraction of full scale, inversely proportional to collected light."""
    f_ref, t_ref, l_ref, s_ref = reference
    for name, v in (("f_number", f_number), ("exposure", exposure), ("light_level", light_level)):
        if not v > 0:
            raise DomainError(f"{name} must be > 0, got {v!r}")
    return s_ref * (f_number / f_ref) ** 2 * (t_ref * l_ref) / (exposure * light_level)


def view_seeds(seed):
    """Two independent child seeds (left, right) derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(2)
    return tuple(int(c.generate_state(1)[0]) for c in children)


def render_stereo_pair(scene, mask, config, sigma=0.0, seed=0, stack=None, mask_id="", kernel_spectra=None):
    """Render a noisy coded stereo pair of ``scene`` through ``mask``.

    ``stack`` and ``kernel_spectra`` (from ``_FFTConvolver.kernel_spectrum``
    at the scene's shape) may be passed in to reuse them across scenes.
    """
    if stack is None:
        stack = compute_psf_stack(mask, config)
    spectra = kernel_spectra
    if spectra is None:
        spectra = _FFTConvolver(scene.shape, stack.kernel_size).kernel_spectrum(stack.kernels)
    seed_l, seed_r = view_seeds(seed)
    out = []
    for tex, disp, s in ((scene.texture_left, scene.disparity_left, seed_l),
                         (scene.texture_right, scene.disparity_right, seed_r)):
        layers = quantize_disparity(disp, config)
        clean = render_coded_image(tex, layers, stack, kernel_spectra=spectra)
        out.append(add_noise(clean, sigma, s))
    return CodedPair(out[0], out[1], float(sigma), mask_id or mask.provenance, scene.id)
