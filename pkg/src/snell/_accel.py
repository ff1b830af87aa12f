"""Backend switch for the hot numeric kernels.

Every hot loop ships twice: an explicit-loop version compiled with numba
``@njit`` and a vectorized pure-numpy version. Set ``SNELL_DISABLE_NUMBA=1``
before import to force the numpy path (also used when numba is missing).
"""

import os

DISABLE_ENV = "SNELL_DISABLE_NUMBA"

_disabled = os.environ.get(DISABLE_ENV, "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _disabled:
        raise ImportError
    import numba

    HAS_NUMBA = True
except ImportError:
    numba = None
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def njit(func):
    """``numba.njit(cache=True)`` when available, identity otherwise.

    No ``fastmath``: results must be reproducible bit for bit.
    """
    if HAS_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func


def pick(jit_impl, numpy_impl):
    return jit_impl if HAS_NUMBA else numpy_impl
