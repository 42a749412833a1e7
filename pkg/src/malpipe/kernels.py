"""Backend selection for the hot loops.

The compiled extension is used when it was built; set ``MALPIPE_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MALPIPE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

build_histogram = _impl.build_histogram
find_best_split = _impl.find_best_split
predict_raw = _impl.predict_raw
predict_binned = _impl.predict_binned
byte_entropy_counts = _impl.byte_entropy_counts

__all__ = [
    "BACKEND",
    "build_histogram",
    "find_best_split",
    "predict_raw",
    "predict_binned",
    "byte_entropy_counts",
]
