"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the pure-Python
twin is loaded.  Setting ``EADK_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
assignment_core = _pykernels.assignment_core
greedy_match = _pykernels.greedy_match

if os.environ.get("EADK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        assignment_core = _ckernels.assignment_core
        greedy_match = _ckernels.greedy_match

__all__ = ["BACKEND", "assignment_core", "greedy_match"]
