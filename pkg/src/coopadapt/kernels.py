"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension (``coopadapt._ckernels``) is used when it was built
and importable; otherwise the pure numpy module is used. Setting
``COOPADAPT_PURE_PYTHON=1`` forces the fallback.
"""
import os

import numpy as np

from coopadapt import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("COOPADAPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from coopadapt import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def backends():
    """Available backend modules keyed by name."""
    out = {"python": _pykernels}
    try:
        from coopadapt import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


def raycast(origins, dirs, boxes, max_range, ground=False):
    origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 7))
    return _impl.raycast(origins, dirs, boxes, float(max_range), bool(ground))


def iou_matrix(a, b):
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 5))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 5))
    return _impl.iou_matrix(a, b)


def iou_pairs(a, b):
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 5))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 5))
    return _impl.iou_pairs(a, b)
