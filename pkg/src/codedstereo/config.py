"""Run configuration files: ``key = value`` lines grouped in ``[optical]``, ``[loss]`` and ``[run]``.

Unknown sections or keys, duplicates and badly typed values are rejected
with the offending line number.  :func:`dump_config` writes every value
back out in a normalised form that re-parses to an equal :class:`RunConfig`.
"""

import difflib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .optics import OpticalConfig
from .recon import LossWeights

_INT_FIELDS = {"mask_grid_size", "num_disparity_levels", "preshift", "psf_kernel_size", "psf_supersample"}
OPTICAL_KEYS = tuple(f.name for f in fields(OpticalConfig))
LOSS_KEYS = ("alpha", "gamma")
RUN_KEYS = ("sigma", "seed", "manifest", "mask", "output")
SECTIONS = {"optical": OPTICAL_KEYS, "loss": LOSS_KEYS, "run": RUN_KEYS}


@dataclass(frozen=True)
class RunConfig:
    optical: OpticalConfig = field(default_factory=OpticalConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    sigma: float = 0.02
    seed: int = 0
    manifest: str = ""
    mask: str = ""
    output: str = ""

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigurationError(f"sigma must be >= 0, got {self.sigma!r}")


def _float(value, key, lineno):
    try:
        return float(value)
    except ValueError:
        raise ConfigurationError(f"line {lineno}: {key} expects a number, got {value!r}") from None


def _int(value, key, lineno):
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"line {lineno}: {key} expects an integer, got {value!r}") from None


def _floats(value, key, lineno, count):
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != count:
        raise ConfigurationError(f"line {lineno}: {key} expects {count} comma-separated numbers, got {value!r}")
    return tuple(_float(p, key, lineno) for p in parts)


def _convert(section, key, value, lineno):
    if section == "optical":
        if key == "wavelengths":
            return _floats(value, key, lineno, 3)
        return _int(value, key, lineno) if key in _INT_FIELDS else _float(value, key, lineno)
    if section == "loss":
        return _floats(value, key, lineno, 3) if key == "alpha" else _float(value, key, lineno)
    if key == "sigma":
        return _float(value, key, lineno)
    if key == "seed":
        return _int(value, key, lineno)
    return value


def _unknown(key, section, lineno):
    close = difflib.get_close_matches(key, SECTIONS[section], n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    others = [s for s, keys in SECTIONS.items() if s != section and key in keys]
    if others:
        hint = f"; {key!r} belongs in [{others[0]}]"
    return ConfigurationError(f"line {lineno}: unknown key {key!r} in [{section}]{hint}")


def parse_config(text, base_dir=None, check_paths=True):
    """Parse configuration text into a :class:`RunConfig`.

    Relative paths in ``[run]`` are resolved against ``base_dir``; with
    ``check_paths`` the manifest and mask files (and the output
    directory's parent) must exist.
    """
    values = {s: {} for s in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigurationError(f"line {lineno}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                close = difflib.get_close_matches(section, SECTIONS, n=1)
                hint = f"; did you mean [{close[0]}]?" if close else ""
                raise ConfigurationError(f"line {lineno}: unknown section [{section}]{hint}")
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigurationError(f"line {lineno}: {key!r} appears before any section header")
        if key not in SECTIONS[section]:
            raise _unknown(key, section, lineno)
        if key in values[section]:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r} in [{section}]")
        values[section][key] = _convert(section, key, value, lineno)

    optical = OpticalConfig(**values["optical"])
    weights = LossWeights(**values["loss"])
    run = dict(values["run"])
    base = Path(base_dir) if base_dir is not None else None
    for key in ("manifest", "mask", "output"):
        if run.get(key) and base is not None and not Path(run[key]).is_absolute():
            run[key] = str(base / run[key])
    if check_paths:
        for key in ("manifest", "mask"):
            if run.get(key) and not Path(run[key]).is_file():
                raise ConfigurationError(f"[run] {key} file not found: {run[key]}")
        if run.get("output"):
            parent = Path(run["output"]).resolve().parent
            if not parent.is_dir():
                raise ConfigurationError(f"[run] output directory parent does not exist: {parent}")
    return RunConfig(optical, weights, **run)


def load_config(path, check_paths=True):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent, check_paths)


def _fmt(v):
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg):
    """Normalised text listing every value; ``parse_config(dump_config(c)) == c``."""
    lines = ["[optical]"]
    lines += [f"{k} = {_fmt(getattr(cfg.optical, k))}" for k in OPTICAL_KEYS]
    lines += ["", "[loss]"]
    lines += [f"{k} = {_fmt(getattr(cfg.weights, k))}" for k in LOSS_KEYS]
    lines += ["", "[run]"]
    lines += [f"{k} = {_fmt(getattr(cfg, k))}" for k in RUN_KEYS if getattr(cfg, k) != ""]
    return "\n".join(lines) + "\n"
