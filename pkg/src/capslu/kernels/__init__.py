"""Kernel backend selection.

The hot numeric kernels (dilated convolution, capsule forward/backward,
SGD fit loop) exist twice: a numba @njit build and a pure-numpy
fallback with identical signatures.  The CAPSLU_BACKEND environment
variable picks one at import time:

    auto   (default) numba when importable, else numpy
    numba  require the compiled backend, fail if numba is missing
    numpy  force the pure-numpy fallback

Both backends are deterministic; results agree to floating-point
roundoff (summation order differs), not bit-for-bit.
"""

import os

_requested = os.environ.get("CAPSLU_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"CAPSLU_BACKEND={_requested!r} not recognised; "
        "expected 'auto', 'numba' or 'numpy'")

if _requested == "numpy":
    from . import numpy_impl as _impl
else:
    try:
        from . import numba_impl as _impl
    except ImportError:
        if _requested == "numba":
            raise
        from . import numpy_impl as _impl

BACKEND = _impl.NAME

conv_forward = _impl.conv_forward
conv_backward = _impl.conv_backward
route_forward = _impl.route_forward
caps_forward = _impl.caps_forward
caps_backward = _impl.caps_backward
margin_loss_grad = _impl.margin_loss_grad
caps_fit = _impl.caps_fit
caps_output = _impl.caps_output
