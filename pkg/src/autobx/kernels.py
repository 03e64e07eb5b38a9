"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when the
``AUTOBX_PURE_PYTHON`` environment variable is set) the numpy fallback is.
Both backends expose ``trilinear_sample`` and ``hough_center_votes``.
"""

import os

import numpy as np

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and not os.environ.get("AUTOBX_PURE_PYTHON"):
    _active = compiled_backend
    BACKEND = "cython"
else:
    _active = python_backend
    BACKEND = "python"



def trilinear_sample(volume, coords, fill=0.0):
    """Sample a uint8 volume at fractional (N, 3) voxel indices; outside -> ``fill``."""
    return _active.trilinear_sample(np.ascontiguousarray(volume, dtype=np.uint8),
                                    np.ascontiguousarray(coords, dtype=np.float64).reshape(-1, 3),
                                    float(fill))


def hough_center_votes(rows, cols, grad_rows, grad_cols, r_min, r_max, height, width,
                       both_directions=True):
    """(height, width) int32 vote counts; each edge votes at ``pixel +- r * unit gradient``."""
    f = lambda a: np.ascontiguousarray(a, dtype=np.float64).ravel()
    return _active.hough_center_votes(f(rows), f(cols), f(grad_rows), f(grad_cols), int(r_min),
                                      int(r_max), int(height), int(width), bool(both_directions))

__all__ = ["BACKEND", "trilinear_sample", "hough_center_votes",
           "python_backend", "compiled_backend"]
