"""Numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the environment variable
POSEKIT_BACKEND: "auto" (default; numba when importable), "numba", or
"numpy".
"""

import os

from . import _numpy

_REQUESTED = os.environ.get("POSEKIT_BACKEND", "auto").strip().lower()

if _REQUESTED not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"POSEKIT_BACKEND must be 'auto', 'numba' or 'numpy', got {_REQUESTED!r}"
    )

if _REQUESTED == "numpy":
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        if _REQUESTED == "numba":
            raise ImportError("POSEKIT_BACKEND=numba but numba is not importable")
        _impl = _numpy
        BACKEND = "numpy"


def backend_name() -> str:
    return BACKEND


knn_indices = _impl.knn_indices
gconv_forward = _impl.gconv_forward
gconv_backward = _impl.gconv_backward
chamfer_and_grad = _impl.chamfer_and_grad
min_dist_mean = _impl.min_dist_mean
box_pair_grid_counts = _impl.box_pair_grid_counts
