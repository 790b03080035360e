"""Backend selection for the hot kernels.

Two implementations with identical signatures live side by side:

* ``numba_backend`` -- @njit loops, used when numba imports cleanly
* ``numpy_backend`` -- vectorized fallback, always available

``SKO_BACKEND`` picks between them: ``auto`` (default) prefers numba,
``numba`` requires it, ``numpy`` forces the fallback.  The choice is made
once at import time; ``get_backend`` exposes both for benchmarks.
"""

import os

from . import numpy_backend

_FORCED = os.environ.get("SKO_BACKEND", "auto").strip().lower()
if _FORCED not in ("auto", "numba", "numpy"):
    raise ValueError(
        "SKO_BACKEND must be one of auto/numba/numpy, got %r" % _FORCED
    )

_impl = numpy_backend
_name = "numpy"
if _FORCED in ("auto", "numba"):
    try:
        from . import numba_backend
        _impl = numba_backend
        _name = "numba"
    except ImportError:
        if _FORCED == "numba":
            raise ImportError(
                "SKO_BACKEND=numba but numba is not importable"
            )

phi_rolling = _impl.phi_rolling
phi_stack = _impl.phi_stack
phi_backward = _impl.phi_backward
adamw_update = _impl.adamw_update
recurrence_coeffs_scalar = numpy_backend.recurrence_coeffs_scalar


def backend_name():
    """Name of the active backend: 'numba' or 'numpy'."""
    return _name


def get_backend(name):
    """Fetch a backend module by name regardless of the active choice."""
    if name == "numpy":
        return numpy_backend
    if name == "numba":
        from . import numba_backend
        return numba_backend
    raise ValueError("unknown backend %r" % name)
