"""Backend selection for the compiled kernels.

Hot scalar loops (Bessel series, continued fractions, the rejection sampler)
are written twice: a numba ``@njit`` kernel and a vectorised numpy fallback.
Set ``SPHEREPROD_NUMBA=0`` to force the numpy path; it is also used
automatically when numba cannot be imported.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _flag_enabled(value):
    return value.strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _flag_enabled(os.environ.get("SPHEREPROD_NUMBA", "1"))
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` with caching; identity decorator when numba is missing."""
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    kwargs.setdefault("nogil", True)
    return numba.njit(*args, **kwargs)


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
