"""Backend selection for the box kernels.

The compiled extension is preferred; the numpy module is the fallback.
``BACKEND`` names whichever was loaded.
"""

import os

from . import _kernels_py

_force_py = os.environ.get("NODULE_DETECT_PURE_PYTHON", "").strip() not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-python backend requested")
    from . import _kernels_cy as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

iou_matrix = _impl.iou_matrix
nms = _impl.nms
greedy_match = _impl.greedy_match

BACKENDS = {"python": _kernels_py}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl
else:
    try:
        from . import _kernels_cy
        BACKENDS["cython"] = _kernels_cy
    except ImportError:
        pass

__all__ = ["BACKEND", "BACKENDS", "iou_matrix", "nms", "greedy_match"]
