"""Synthetic stereo scenes with exact ground truth.

Views follow the rectified convention used everywhere in the package: a
left pixel at column ``x`` with reduced disparity ``d`` appears in the
(pre-shifted) right view at column ``x - d``.  Disparities are integers so
both views sample the same texture canvas without interpolation.
"""

import numpy as np

from .errors import DomainError
from .render import Scene


def pink_noise_texture(shape, seed, exponent=1.0, channels=3):
    """Colour texture with a 1/f^exponent amplitude spectrum, scaled into [0.05, 0.95]."""
    h, w = shape
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.hypot(fy, fx)
    f[0, 0] = 1.0
    amp = f ** -exponent
    amp[0, 0] = 0.0
    out = np.empty((h, w, channels))
    base = rng.standard_normal((h, w // 2 + 1)) + 1j * rng.standard_normal((h, w // 2 + 1))
    for c in range(channels):
        own = rng.standard_normal((h, w // 2 + 1)) + 1j * rng.standard_normal((h, w // 2 + 1))
        spec = amp * (0.7 * base + 0.3 * own)
        img = np.fft.irfft2(spec, s=(h, w))
        img = (img - img.mean()) / (img.std() + 1e-12)
        out[..., c] = img
    lo, hi = np.percentile(out, [1, 99])
    return np.clip(0.05 + 0.9 * (out - lo) / (hi - lo), 0.0, 1.0)


def natural_texture(shape, name="astronaut", offset=(0, 0)):
    """Crop of a bundled scikit-image photograph, as floats in [0, 1]."""
    from skimage import data

    img = getattr(data, name)()
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img[..., :3].astype(float) / 255.0
    h, w = shape
    oy, ox = offset
    if oy + h > img.shape[0] or ox + w > img.shape[1]:
        reps = (-(-(oy + h) // img.shape[0]), -(-(ox + w) // img.shape[1]), 1)
        img = np.tile(img, reps)
    return img[oy:oy + h, ox:ox + w]


def _canvas(shape, margin, seed, texture):
    h, w = shape
    if texture is None:
        return pink_noise_texture((h, w + margin), seed)
    if texture.shape[1] < w + margin:
        raise DomainError("texture canvas narrower than width + max disparity")
    return texture[:h, :w + margin]


def plane_scene(shape, disparity, seed=0, texture=None, scene_id=None):
    """Fronto-parallel plane at a single integer disparity."""
    return band_scene(shape, [disparity], seed=seed, texture=texture,
                      scene_id=scene_id or f"plane_d{disparity}")


def band_scene(shape, disparities, seed=0, texture=None, scene_id=None):
    """Horizontal bands of constant disparity, one band per entry of ``disparities``.

    Rows never mix disparities, so there is no occlusion and every left pixel
    with ``x >= d`` has a true match.
    """
    h, w = shape
    disparities = [int(d) for d in disparities]
    margin = max(disparities)
    canvas = _canvas(shape, margin, seed, texture)
    edges = np.linspace(0, h, len(disparities) + 1).round().astype(int)
    left = canvas[:, :w].copy()
    right = np.empty_like(left)
    disp = np.empty((h, w))
    for d, a, b in zip(disparities, edges[:-1], edges[1:]):
        right[a:b] = canvas[a:b, d:d + w]
        disp[a:b] = d
    return Scene(left, right, disp, disp.copy(), scene_id or f"bands_{len(disparities)}")


def two_plane_scene(shape, d_background, d_foreground, rect=None, seed=0, scene_id=None):
    """Background plane with a nearer rectangular plane in front of it.

    ``rect = (y0, y1, x0, x1)`` is the foreground footprint in the left view.
    The right view is rendered with correct occlusion (foreground on top).
    """
    h, w = shape
    if d_foreground < d_background:
        raise DomainError("foreground must have the larger disparity")
    if rect is None:
        rect = (h // 4, 3 * h // 4, w // 2, w // 2 + w // 4)
    y0, y1, x0, x1 = rect
    margin = int(max(d_background, d_foreground))
    bg = pink_noise_texture((h, w + margin), seed)
    fg = pink_noise_texture((h, w + margin), seed + 7919)
    db, df = int(d_background), int(d_foreground)

    def view(shift_bg, shift_fg, in_fg):
        xs = np.arange(w)
        tex = np.empty((h, w, 3))
        disp = np.full((h, w), float(db))
        tex[:] = bg[:, xs + shift_bg]
        mask = in_fg(xs)
        rows = slice(y0, y1)
        cols = np.nonzero(mask)[0]
        tex[rows, cols] = fg[rows, cols + shift_fg]
        disp[rows, cols] = df
        return tex, disp

    # Left view: the foreground occupies [x0, x1); right view: shifted by -df.
    tl, dl = view(0, 0, lambda xs: (xs >= x0) & (xs < x1))
    tr, dr = view(db, df, lambda xs: (xs + df >= x0) & (xs + df < x1))
    return Scene(tl, tr, dl, dr, scene_id or f"twoplane_{db}_{df}")


def level_band_disparities(config):
    """Integer disparities closest to every configured level."""
    return [int(round(v)) for v in config.disparity_levels]


def toy_scene_set(config, shape=(128, 320), count=4, seed=0):
    """Small deterministic scene set that covers every disparity level once.

    Levels are dealt round-robin to ``count`` band scenes (scene ``i`` gets
    levels ``i, i + count, ...``), so each band is several matching windows
    tall and neighbouring bands differ by ``count`` level spacings.
    """
    ds = level_band_disparities(config)
    if not 1 <= count <= len(ds):
        raise DomainError(f"count must be in [1, {len(ds)}], got {count}")
    return [band_scene(shape, ds[i::count], seed=seed + i, scene_id=f"toy{i}") for i in range(count)]
