"""Kernel backend selection.

The compiled extension is used when it imports; set ``HEARTLANG_PURE_PYTHON=1``
to force the fallback (the test-suite runs both).
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("HEARTLANG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _kernels_py

repair_lead = _impl.repair_lead
local_maxima = _impl.local_maxima
scan_peaks = _impl.scan_peaks
midranks = _impl.midranks
segment_sum = _impl.segment_sum
varint_encode = _impl.varint_encode
varint_decode = _impl.varint_decode

__all__ = [
    "BACKEND", "repair_lead", "local_maxima", "scan_peaks", "midranks",
    "segment_sum", "varint_encode", "varint_decode",
]
