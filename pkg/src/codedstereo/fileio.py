"""File formats: PFM, mask height files, PNG images, PSF atlases and scene manifests.

Every writer is a pure function of its inputs (no timestamps), so identical
inputs give byte-identical files.
"""

import csv
import io
import logging
import re
from decimal import Decimal
from pathlib import Path

import numpy as np
import png

from .errors import DataError, ParseError
from .optics import PhaseMask, kernel_second_moment
from .render import Scene, preshift_right

log = logging.getLogger(__name__)

# --------------------------------------------------------------------------- PFM

_PFM_HEADER = re.compile(rb"(P[Ff])\n(\d+) (\d+)\n(\S+)\n")


def write_pfm(grid, scale=-1.0):
    """Encode an H x W (or H x W x 3) float grid as PFM bytes.

    Values are stored as float32, bottom row first; a negative ``scale``
    means little-endian.
    """
    a = np.asarray(grid)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise DataError(f"PFM grids are H x W or H x W x 3, got shape {a.shape}")
    scale = float(scale)
    if scale == 0 or not np.isfinite(scale):
        raise DataError(f"PFM scale must be finite and non-zero, got {scale!r}")
    h, w = a.shape[:2]
    if h == 0 or w == 0:
        raise DataError("PFM grid must be non-empty")
    dtype = np.dtype("<f4" if scale < 0 else ">f4")
    body = np.ascontiguousarray(a[::-1], dtype=dtype).tobytes()
    return b"%s\n%d %d\n%s\n" % (tag, w, h, repr(scale).encode()) + body


def read_pfm(data, channels=None):
    """Decode PFM bytes into ``(grid, scale)``; the grid is float32, top row first.

    ``channels=1`` rejects colour (``PF``) files, as needed for disparity maps.
    """
    data = bytes(data)
    m = _PFM_HEADER.match(data)
    if m is None:
        raise ParseError("malformed PFM header", _header_error_offset(data))
    tag, w, h, scale_tok = m.groups()
    nc = 1 if tag == b"Pf" else 3
    if channels is not None and nc != channels:
        raise ParseError(f"expected a {channels}-channel PFM, found {tag.decode()!r} header", 0)
    w, h = int(w), int(h)
    if w <= 0 or h <= 0:
        raise ParseError(f"PFM dimensions must be positive, got {w}x{h}", m.start(2))
    try:
        scale = float(scale_tok)
    except ValueError:
        raise ParseError(f"invalid PFM scale {scale_tok!r}", m.start(4)) from None
    if scale == 0 or not np.isfinite(scale):
        raise ParseError(f"PFM scale must be finite and non-zero, got {scale_tok!r}", m.start(4))
    start = m.end()
    need = w * h * nc * 4
    if len(data) - start < need:
        raise ParseError(f"truncated PFM payload: need {need} bytes, have {len(data) - start}",
                         len(data))
    if len(data) - start > need:
        raise ParseError(f"{len(data) - start - need} trailing bytes after PFM payload", start + need)
    flat = np.frombuffer(data, dtype="<f4" if scale < 0 else ">f4", count=w * h * nc, offset=start)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise ParseError("non-finite value in PFM payload", start + 4 * int(bad[0]))
    shape = (h, w) if nc == 1 else (h, w, 3)
    grid = flat.astype(np.float32).reshape(shape)[::-1].copy()
    return grid, scale


def _header_error_offset(data):
    # Offset of the first byte that cannot belong to a valid header.
    if not data.startswith(b"P"):
        return 0
    if data[1:2] not in (b"f", b"F"):
        return 1
    m = re.match(rb"P[Ff]\n(\d+ (\d+\n(\S+\n?)?)?)?", data)
    return m.end() if m else 2


def load_pfm(path, channels=None):
    return read_pfm(Path(path).read_bytes(), channels)


def save_pfm(path, grid, scale=-1.0):
    Path(path).write_bytes(write_pfm(grid, scale))


# --------------------------------------------------------------------------- mask files

MASK_MAGIC = "mask-height"
MASK_VERSION = "v1"


def _um(value):
    # Exact decimal text of a float in micrometers; parsing it back recovers the float.
    return str(Decimal(repr(float(value))).scaleb(6))


def _from_um(token, offset):
    try:
        return float(Decimal(token).scaleb(-6))
    except ArithmeticError:
        raise ParseError(f"invalid number {token!r}", offset) from None


def write_mask(mask):
    """Serialise a PhaseMask as text; heights and coefficients in micrometers."""
    n = mask.grid_size
    lines = [f"{MASK_MAGIC} {MASK_VERSION} {n}", f"provenance {mask.provenance}"]
    lines += [" ".join(_um(v) for v in row) for row in mask.height_map]
    if mask.coefficients.size:
        lines.append(f"coeffs: {mask.coefficients.size}")
        lines.append(" ".join(_um(v) for v in mask.coefficients))
    return ("\n".join(lines) + "\n").encode("ascii")


def read_mask(data):
    """Parse the text written by :func:`write_mask` back into an identical PhaseMask."""
    text = bytes(data).decode("ascii", errors="replace")
    lines = text.split("\n")
    offsets = np.cumsum([0] + [len(ln) + 1 for ln in lines]).tolist()

    def fail(msg, i):
        raise ParseError(msg, offsets[min(i, len(lines) - 1)])

    head = lines[0].split()
    if len(head) != 3 or head[0] != MASK_MAGIC:
        fail("missing 'mask-height <version> <N>' header", 0)
    if head[1] != MASK_VERSION:
        fail(f"unsupported mask file version {head[1]!r}", 0)
    if not head[2].isdigit() or int(head[2]) < 1:
        fail(f"invalid grid size {head[2]!r}", 0)
    n = int(head[2])
    prov = lines[1].split() if len(lines) > 1 else []
    if len(prov) != 2 or prov[0] != "provenance":
        fail("expected 'provenance <label>' on line 2", 1)

    def numbers(i, count):
        if i >= len(lines):
            fail("unexpected end of mask file", i)
        toks = lines[i].split()
        if len(toks) != count:
            fail(f"expected {count} values on line {i + 1}, found {len(toks)}", i)
        return [_from_um(t, offsets[i]) for t in toks]

    heights = np.array([numbers(2 + r, n) for r in range(n)])
    i = 2 + n
    coeffs = np.zeros(0)
    if i < len(lines) and lines[i].startswith("coeffs:"):
        tok = lines[i][len("coeffs:"):].strip()
        if not tok.isdigit():
            fail("invalid coefficient count", i)
        coeffs = np.array(numbers(i + 1, int(tok)))
        i += 2
    if any(ln.strip() for ln in lines[i:]):
        fail("unexpected trailing content", i)
    try:
        return PhaseMask(heights, coeffs, prov[1])
    except ValueError as exc:
        raise ParseError(str(exc), offsets[1]) from None


def load_mask(path):
    return read_mask(Path(path).read_bytes())


def save_mask(path, mask):
    Path(path).write_bytes(write_mask(mask))


# --------------------------------------------------------------------------- PNG


def read_png(path):
    """Read an 8- or 16-bit PNG as floats in [0, 1]: H x W (grey) or H x W x 3."""
    try:
        w, h, rows, info = png.Reader(filename=str(path)).asDirect()
        a = np.vstack([np.asarray(r, dtype=np.uint32) for r in rows])
    except (png.Error, OSError) as exc:
        raise DataError(f"cannot read PNG {path}: {exc}") from None
    planes = info["planes"]
    a = a.reshape(h, w, planes).astype(float) / (2 ** info["bitdepth"] - 1)
    if info.get("alpha"):
        a = a[..., :-1]
        planes -= 1
    return a[..., 0] if planes == 1 else a


def read_png_raw(path):
    """Integer sample values of a single-channel PNG (for scaled disparity maps)."""
    try:
        w, h, rows, info = png.Reader(filename=str(path)).asDirect()
        a = np.vstack([np.asarray(r, dtype=np.int64) for r in rows]).reshape(h, w, info["planes"])
    except (png.Error, OSError) as exc:
        raise DataError(f"cannot read PNG {path}: {exc}") from None
    if info["planes"] != 1:
        raise DataError(f"disparity PNG {path} must be single-channel")
    return a[..., 0]


def encode_png(image, bitdepth=8):
    """PNG bytes for a float image in [0, 1] (H x W or H x W x 3)."""
    a = np.asarray(image, dtype=float)
    if a.ndim not in (2, 3):
        raise DataError(f"cannot encode shape {a.shape} as PNG")
    top = 2 ** bitdepth - 1
    q = np.round(np.clip(a, 0.0, 1.0) * top).astype(np.uint16 if bitdepth == 16 else np.uint8)
    greyscale = q.ndim == 2
    h, w = q.shape[:2]
    buf = io.BytesIO()
    png.Writer(w, h, greyscale=greyscale, bitdepth=bitdepth).write(buf, q.reshape(h, -1))
    return buf.getvalue()


def write_png(path, image, bitdepth=8):
    Path(path).write_bytes(encode_png(image, bitdepth))


def write_psf_atlas(directory, stack):
    """One 16-bit PNG per kernel (peak-normalised) plus a CSV of sums and second moments.

    Returns the list of written paths.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    rows = []
    for c, wl in enumerate(stack.wavelengths):
        for i, level in enumerate(stack.disparity_levels):
            k = stack.kernels[c, i]
            p = d / f"psf_c{c}_d{i:02d}.png"
            write_png(p, k / k.max() if k.max() > 0 else k, 16)
            written.append(p)
            rows.append((c, float(wl), i, float(level), float(k.sum()), kernel_second_moment(k)))
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["channel", "wavelength_m", "level", "disparity_px", "sum", "second_moment_px2"])
    for r in rows:
        wr.writerow([r[0], repr(r[1]), r[2], repr(r[3]), repr(r[4]), repr(r[5])])
    p = d / "psf_moments.csv"
    p.write_text(buf.getvalue())
    written.append(p)
    return written


# --------------------------------------------------------------------------- scene manifests

MANIFEST_KEYS = ("left_rgb", "right_rgb", "left_disp", "right_disp", "disp_scale", "disp_offset",
                 "id", "preshift")
DEFAULT_CROP = (384, 768)
MAX_CLAMP_FRACTION = 0.5


def parse_manifest(text):
    """Parse manifest text into a list of dicts, one per non-comment line."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        entry = {}
        for tok in line.split():
            key, sep, value = tok.partition("=")
            if not sep or not value:
                raise DataError(f"manifest line {lineno}: expected key=value, got {tok!r}")
            if key not in MANIFEST_KEYS:
                raise DataError(f"manifest line {lineno}: unknown key {key!r}")
            if key in entry:
                raise DataError(f"manifest line {lineno}: duplicate key {key!r}")
            entry[key] = value
        missing = [k for k in MANIFEST_KEYS[:4] if k not in entry]
        if missing:
            raise DataError(f"manifest line {lineno}: missing {', '.join(missing)}")
        entry["_line"] = lineno
        entries.append(entry)
    return entries


def _load_disparity(path, scale, offset):
    if path.suffix.lower() == ".pfm":
        grid, _ = load_pfm(path, channels=1)
        raw = grid.astype(float)
    else:
        raw = read_png_raw(path).astype(float)
    return raw * scale + offset


def _crop_window(shape, crop, seed):
    h, w = shape
    ch, cw = crop
    if ch > h or cw > w:
        raise DataError(f"crop {ch}x{cw} larger than image {h}x{w}")
    if seed is None:
        return (h - ch) // 2, (w - cw) // 2
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))


def load_scene_manifest(path, config, crop=None, crop_seed=None, rejected=None):
    """Load every scene listed in a manifest file.

    Paths are relative to the manifest's directory and all are checked
    before any image is decoded.  Disparities become ``raw * disp_scale +
    disp_offset`` (for example ``disp_offset=-134`` for raw pre-shift
    data); ``preshift=yes`` also translates the right view by the pre-shift.
    Scenes with more than half of their disparities outside the configured
    range are skipped and their reasons appended to ``rejected``.  ``crop``
    is an ``(h, w)`` window, centred unless ``crop_seed`` is given.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    entries = parse_manifest(text)
    base = path.parent
    for e in entries:
        for k in MANIFEST_KEYS[:4]:
            p = base / e[k]
            if not p.is_file():
                raise DataError(f"manifest line {e['_line']}: {k} file not found: {p}")
    scenes = []
    for n, e in enumerate(entries):
        sid = e.get("id", f"scene{n}")
        try:
            scale = float(e.get("disp_scale", 1.0))
            offset = float(e.get("disp_offset", 0.0))
        except ValueError:
            raise DataError(f"manifest line {e['_line']}: disp_scale/disp_offset must be numbers") from None
        shift = e.get("preshift", "no").lower()
        if shift not in ("yes", "no"):
            raise DataError(f"manifest line {e['_line']}: preshift must be yes or no")
        tl = _as_rgb(read_png(base / e["left_rgb"]))
        tr = _as_rgb(read_png(base / e["right_rgb"]))
        dl = _load_disparity(base / e["left_disp"], scale, offset)
        dr = _load_disparity(base / e["right_disp"], scale, offset)
        shapes = {tl.shape[:2], tr.shape[:2], dl.shape, dr.shape}
        if len(shapes) != 1:
            raise DataError(f"scene {sid!r}: image and disparity shapes differ: {sorted(shapes)}")
        if shift == "yes":
            tr = preshift_right(tr, config)
            dr = preshift_right(dr, config)
        if crop is not None:
            y, x = _crop_window(dl.shape, crop, None if crop_seed is None else crop_seed + n)
            sl = (slice(y, y + crop[0]), slice(x, x + crop[1]))
            tl, tr, dl, dr = tl[sl], tr[sl], dl[sl], dr[sl]
        scene = Scene(tl, tr, dl, dr, sid).clamped(config)
        if scene.clamp_fraction > MAX_CLAMP_FRACTION:
            reason = f"scene {sid!r}: {100 * scene.clamp_fraction:.1f}% of disparities outside range"
            log.warning("rejected %s", reason)
            if rejected is not None:
                rejected.append(reason)
            continue
        scenes.append(scene)
    return scenes


def _as_rgb(img):
    return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img


def save_scene(directory, scene, stem=None):
    """Write a scene as PNG textures + PFM disparities and return its manifest line."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = stem or scene.id
    names = {
        "left_rgb": f"{stem}_left.png", "right_rgb": f"{stem}_right.png",
        "left_disp": f"{stem}_left_disp.pfm", "right_disp": f"{stem}_right_disp.pfm",
    }
    write_png(d / names["left_rgb"], scene.texture_left, 16)
    write_png(d / names["right_rgb"], scene.texture_right, 16)
    save_pfm(d / names["left_disp"], scene.disparity_left)
    save_pfm(d / names["right_disp"], scene.disparity_right)
    return " ".join(f"{k}={v}" for k, v in names.items()) + f" id={scene.id}"
