"""Hot-kernel backend selection.

The compiled Cython kernels are preferred; the numpy fallback is used when
the extension is missing or when ``EYEPAD_FORCE_NUMPY`` is set (which the
kernel benchmark uses to time both paths). ``BACKEND`` records the choice.
"""

import os

from . import numpy_backend

if os.environ.get("EYEPAD_FORCE_NUMPY"):
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    try:
        from . import _cykernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = numpy_backend
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
pairwise_sqdist = _impl.pairwise_sqdist

__all__ = ["BACKEND", "conv2d_forward", "conv2d_backward", "pairwise_sqdist"]
