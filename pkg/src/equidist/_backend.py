"""Select the compiled kernels when available, else the Python fallback.

Set ``EQUIDIST_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None
else:
    BACKENDS["compiled"] = _compiled

if _compiled is not None and not os.environ.get("EQUIDIST_PURE_PYTHON"):
    kernels = _compiled
    BACKEND = "compiled"
else:
    kernels = _kernels_py
    BACKEND = "python"


def get(name=None):
    """Return the kernel module named ``name`` (default: the active one)."""
    if name is None:
        return kernels
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None
