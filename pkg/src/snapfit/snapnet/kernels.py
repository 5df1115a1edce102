"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback. ``SNAPFIT_KERNELS=numpy`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _fallback

BACKEND = "numpy"
_impl = _fallback

if os.environ.get("SNAPFIT_KERNELS", "").lower() != "numpy":
    try:
        from . import _core as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

conv_forward = _impl.conv_forward
conv_backward = _impl.conv_backward
gru_forward = _impl.gru_forward
gru_backward = _impl.gru_backward


def get_backend(name: str):
    """Return the kernel module for ``name`` ('numpy' or 'cython')."""
    if name == "numpy":
        return _fallback
    if name == "cython":
        from . import _core
        return _core
    raise ValueError(f"unknown kernel backend {name!r}")
