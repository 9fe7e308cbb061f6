"""Hot-kernel dispatch.

The compiled extension is used when it imports; otherwise (or when the
environment variable ``MAEBENCH_PURE_PYTHON`` is set to a non-empty value
other than ``0``) the numpy fallback is used. ``BACKEND`` names the choice.
"""

import os

from . import _fallback

BACKENDS = {"python": _fallback}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels

if os.environ.get("MAEBENCH_PURE_PYTHON", "") not in ("", "0") or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "cython"

_impl = BACKENDS[BACKEND]
resize_bicubic = _impl.resize_bicubic
nms = _impl.nms
match_detections = _impl.match_detections
