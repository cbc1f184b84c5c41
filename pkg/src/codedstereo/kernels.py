"""Backend selection for the hot stereo-matching kernel.

The compiled Cython module is used when it was built; otherwise, or when
``CODEDSTEREO_BACKEND=python`` is set, the NumPy implementation is used.
"""

import os

from . import _zncc_py

try:
    from . import _zncc as _compiled
except ImportError:  # extension not built
    _compiled = None

_IMPLS = {"python": _zncc_py.zncc_wta}
if _compiled is not None:
    _IMPLS["cython"] = _compiled.zncc_wta

_requested = os.environ.get("CODEDSTEREO_BACKEND", "").strip().lower()
if _requested and _requested not in ("python", "cython"):
    raise ImportError(f"CODEDSTEREO_BACKEND must be 'python' or 'cython', got {_requested!r}")
BACKEND = _requested if _requested in _IMPLS else ("cython" if "cython" in _IMPLS else "python")


def available_backends():
    return sorted(_IMPLS)


def zncc_wta(*args, backend=None, **kwargs):
    return _IMPLS[backend or BACKEND](*args, **kwargs)
