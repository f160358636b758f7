"""Backend selection for the numerical hot loops.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``MANYIV_PURE_PYTHON`` is set to a non-empty value
other than ``0``, the pure-Python fallback is used. ``BACKEND`` records the
choice.
"""

import os

from . import _kernels_py

if os.environ.get("MANYIV_PURE_PYTHON", "0") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

wald_exceed_count = _impl.wald_exceed_count
ncx2_cdf = _impl.ncx2_cdf

__all__ = ["BACKEND", "wald_exceed_count", "ncx2_cdf"]
