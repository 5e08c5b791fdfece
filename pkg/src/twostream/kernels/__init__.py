"""Convolution kernel backend selection.

The compiled Cython backend is used when its extension module imported
cleanly; otherwise the numpy reference implementation takes over.  The
``TWOSTREAM_BACKEND`` environment variable forces a choice: ``compiled``,
``python`` or ``auto`` (default).
"""

import os

from . import reference

_choice = os.environ.get("TWOSTREAM_BACKEND", "auto")

if _choice == "python":
    _impl = reference
    BACKEND = "python"
elif _choice in ("auto", "compiled"):
    try:
        from . import _fastconv as _impl
        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = reference
        BACKEND = "python"
else:
    raise ValueError(f"unknown TWOSTREAM_BACKEND value: {_choice!r}")

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
conv1d_forward = _impl.conv1d_forward
conv1d_backward = _impl.conv1d_backward
