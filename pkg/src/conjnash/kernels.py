"""Kernel backend selection.

The compiled extension is used when it imports; set
``CONJNASH_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_compiled = None
if not os.environ.get("CONJNASH_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled

        BACKEND = "cython"
    except ImportError:
        _compiled = None


def get_backend(name=None):
    """Module exposing `margins_first` / `margins_logit` for `name`.

    `name` is "cython", "python" or None for the import-time default.
    """
    if name is None:
        name = BACKEND
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    return ["python"] + (["cython"] if _compiled is not None else [])
