"""Kernel backend selection.

The compiled ``_stencil`` extension is used when it imports; otherwise the
numpy/scipy fallback.  Set ``DILUTE_HOMOG_BACKEND=python`` to force the
fallback.
"""
from __future__ import annotations

import os

from . import _stencil_py

BACKEND = "python"
_impl = _stencil_py

if os.environ.get("DILUTE_HOMOG_BACKEND", "").lower() != "python":
    try:
        from . import _stencil as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"


def get(name: str | None = None):
    """Return the kernel module for ``name`` (``"compiled"``/``"python"``) or the default."""
    if name is None:
        return _impl
    if name == "python":
        return _stencil_py
    if name == "compiled":
        from . import _stencil
        return _stencil
    raise ValueError(f"unknown backend {name!r}")


def apply(*args):
    return _impl.apply(*args)


def pcg(*args):
    return _impl.pcg(*args)
