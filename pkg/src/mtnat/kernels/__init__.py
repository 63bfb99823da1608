"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``MTNAT_NUMBA=0`` to force
the numpy path (numba is also skipped automatically when it is not
importable). Results agree between backends to rounding, but runs are only
bit-reproducible within one backend.
"""
import os

from . import _numpy

BACKEND = "numpy"
_impl = _numpy

if os.environ.get("MTNAT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off"):
    try:
        from . import _numba

        _impl = _numba
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        pass

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
layer_norm_rows = _impl.layer_norm_rows
layer_norm_rows_backward = _impl.layer_norm_rows_backward
cross_entropy_rows = _impl.cross_entropy_rows
scatter_add_rows = _impl.scatter_add_rows
bootstrap_sums = _impl.bootstrap_sums

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_backward",
    "layer_norm_rows",
    "layer_norm_rows_backward",
    "cross_entropy_rows",
    "scatter_add_rows",
    "bootstrap_sums",
]
