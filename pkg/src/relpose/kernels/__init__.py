"""Hot numeric kernels with two interchangeable backends.

``RELPOSE_BACKEND=numpy`` selects the vectorized numpy path; the default
is the numba path when numba imports, otherwise numpy. Both modules expose
the same functions; :func:`get_backend` returns either explicitly.
"""

import importlib
import os

from . import _numpy_impl

_REQUESTED = os.environ.get("RELPOSE_BACKEND", "numba").strip().lower()
if _REQUESTED not in ("numpy", "numba"):
    raise ImportError(f"RELPOSE_BACKEND must be 'numba' or 'numpy', got {_REQUESTED!r}")


def _load_numba():
    try:
        return importlib.import_module(f"{__name__}._numba_impl")
    except ImportError:
        return None


_compiled = _load_numba() if _REQUESTED == "numba" else None
active = _compiled if _compiled is not None else _numpy_impl
BACKEND = "numba" if _compiled is not None else "numpy"


def get_backend(name: str | None = None):
    """Kernel module by name (``"numba"``/``"numpy"``); None gives the active one."""
    if name is None:
        return active
    if name == "numpy":
        return _numpy_impl
    if name == "numba":
        mod = _load_numba()
        if mod is None:
            raise ImportError("numba backend unavailable")
        return mod
    raise ValueError(f"unknown backend {name!r}")
