"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``SPECTPROJ_BACKEND=python`` (or ``compiled``) to force one.
"""

import os
import warnings

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def get(name: str | None = None):
    """Return the kernel module for ``name`` ('compiled', 'python' or 'auto')."""
    name = name or "auto"
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    if name == "auto":
        return _compiled if _compiled is not None else _fallback
    raise ValueError(f"unknown backend {name!r}")


def name_of(kernels) -> str:
    return "compiled" if kernels is _compiled else "python"


HAVE_COMPILED = _compiled is not None

_requested = os.environ.get("SPECTPROJ_BACKEND", "auto")
try:
    kernels = get(_requested)
except ImportError:
    warnings.warn("compiled kernels unavailable, using the numpy fallback", RuntimeWarning)
    kernels = _fallback
BACKEND = name_of(kernels)
