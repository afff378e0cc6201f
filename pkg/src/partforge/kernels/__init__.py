"""Kernel backend selection.

The compiled Cython Sinkhorn kernel is used when available; set
PARTFORGE_PURE_PYTHON=1 to force the numpy fallback (the two implement
identical math in the same update order).
"""
import os

from . import sinkhorn_np as _np_impl

if os.environ.get("PARTFORGE_PURE_PYTHON"):
    _impl = _np_impl
    BACKEND = "numpy"
else:
    try:
        from . import _sinkhorn_cy as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _np_impl
        BACKEND = "numpy"

sinkhorn_forward = _impl.sinkhorn_forward
sinkhorn_backward = _impl.sinkhorn_backward
plan_from_potentials = _np_impl.plan_from_potentials

__all__ = ["BACKEND", "sinkhorn_forward", "sinkhorn_backward", "plan_from_potentials"]
