"""Special functions behind the vMF normaliser and KL term.

``log_bessel_i`` sums the ascending power series of I_v(x) in log scale,
starting at the largest term and walking outwards with the term-ratio
recurrence. All terms are positive, so there is no cancellation, and scaling
by the peak term keeps x up to 1e4 (and well beyond) free of overflow.

``bessel_ratio`` evaluates A_m(k) = I_{m/2}(k) / I_{m/2-1}(k) with Gauss'
continued fraction (modified Lentz), which gives the ratio to a few ulp and
keeps ``bessel_ratio_grad`` accurate when A_m(k) is close to 1.
"""

import math

import numpy as np

from ._accel import njit, pick


class DomainError(ValueError):
    """Argument outside the domain of a special function."""


_TAIL_RTOL = 1e-17
_LENTZ_TINY = 1e-300
_LENTZ_EPS = 2.5e-16
_LENTZ_MAXIT = 10_000_000
# below this the first continued-fraction coefficient overflows; the leading
# series term x / (2(nu+1)) is then exact to double precision
_RATIO_SERIES_X = 1e-150


# --------------------------------------------------------------------------
# numba kernels


@njit
def _log_bessel_i_scalar(v, x):
    # returns (ln I_v(x), ln[I_v(x) * Gamma(v+1) / (x/2)^v])
    if x == 0.0:
        if v == 0.0:
            return 0.0, 0.0
        return -np.inf, 0.0
    half = 0.5 * x
    q = half * half
    lead0 = v * math.log(half) - math.lgamma(v + 1.0)
    jstar = int(math.floor(0.5 * (math.sqrt(v * v + x * x) - v)))
    if jstar == 0:
        lead = lead0
    else:
        lead = (
            (v + 2.0 * jstar) * math.log(half)
            - math.lgamma(jstar + 1.0)
            - math.lgamma(v + jstar + 1.0)
        )
    tail = 0.0
    t = 1.0
    j = jstar
    while j > 0:
        t *= j * (j + v) / q
        tail += t
        j -= 1
        if t < _TAIL_RTOL * (1.0 + tail):
            break
    t = 1.0
    j = jstar
    while True:
        t *= q / ((j + 1.0) * (j + v + 1.0))
        tail += t
        j += 1
        if t < _TAIL_RTOL * (1.0 + tail):
            break
    logsum = math.log1p(tail)
    if jstar == 0:
        norm = logsum
    else:
        norm = (lead - lead0) + logsum
    return lead + logsum, norm


@njit
def _log_bessel_i_numba(v, x):
    n = v.size
    out = np.empty(n)
    norm = np.empty(n)
    for i in range(n):
        out[i], norm[i] = _log_bessel_i_scalar(v[i], x[i])
    return out, norm


@njit
def _ratio_scalar(nu, x):
    if x == 0.0:
        return 0.0
    if x < _RATIO_SERIES_X:
        return x / (2.0 * (nu + 1.0))
    f = _LENTZ_TINY
    c = f
    d = 0.0
    k = 1
    while k < _LENTZ_MAXIT:
        b = 2.0 * (nu + k) / x
        d = b + d
        if d == 0.0:
            d = _LENTZ_TINY
        d = 1.0 / d
        c = b + 1.0 / c
        if c == 0.0:
            c = _LENTZ_TINY
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < _LENTZ_EPS:
            break
        k += 1
    return f


@njit
def _bessel_ratio_numba(nu, x):
    n = nu.size
    out = np.empty(n)
    for i in range(n):
        out[i] = _ratio_scalar(nu[i], x[i])
    return out


# --------------------------------------------------------------------------
# numpy fallbacks (same algorithms, vectorised across elements)


def _log_bessel_i_numpy(v, x):
    # subnormal x underflows (x/2)^2 to 0; the resulting infinities only feed
    # branches that np.where discards
    with np.errstate(divide="ignore", over="ignore", invalid="ignore", under="ignore"):
        return _log_bessel_i_numpy_impl(v, x)


def _log_bessel_i_numpy_impl(v, x):
    n = v.size
    out = np.zeros(n)
    norm = np.zeros(n)
    zero = x == 0.0
    out[zero & (v > 0.0)] = -np.inf
    live = ~zero
    if not live.any():
        return out, norm
    v = v[live]
    x = x[live]
    half = 0.5 * x
    q = half * half
    lead0 = v * np.log(half) - _lgamma(v + 1.0)
    jstar = np.floor(0.5 * (np.sqrt(v * v + x * x) - v))
    lead = np.where(
        jstar == 0,
        lead0,
        (v + 2.0 * jstar) * np.log(half) - _lgamma(jstar + 1.0) - _lgamma(v + jstar + 1.0),
    )
    width = int(10.0 * math.sqrt(jstar.max() + 1.0)) + 64
    k = np.arange(width, dtype=float)[None, :]
    jj = jstar[:, None] + k
    vv = v[:, None]
    qq = q[:, None]
    up = np.cumprod(qq / ((jj + 1.0) * (jj + vv + 1.0)), axis=1)
    jd = jstar[:, None] - k
    down = np.cumprod(np.where(jd >= 1.0, jd * (jd + vv) / qq, 0.0), axis=1)
    tail = up.sum(axis=1) + down.sum(axis=1)
    logsum = np.log1p(tail)
    out[live] = lead + logsum
    norm[live] = np.where(jstar == 0, logsum, (lead - lead0) + logsum)
    return out, norm


def _bessel_ratio_numpy(nu, x):
    out = np.zeros(nu.size)
    tiny = (x != 0.0) & (x < _RATIO_SERIES_X)
    out[tiny] = x[tiny] / (2.0 * (nu[tiny] + 1.0))
    live = x >= _RATIO_SERIES_X
    if not live.any():
        return out
    nu = nu[live]
    x = x[live]
    f = np.full(nu.size, _LENTZ_TINY)
    c = f.copy()
    d = np.zeros(nu.size)
    active = np.ones(nu.size, dtype=bool)
    k = 1
    while active.any() and k < _LENTZ_MAXIT:
        b = 2.0 * (nu + k) / x
        d = b + d
        d[d == 0.0] = _LENTZ_TINY
        d = 1.0 / d
        c = b + 1.0 / c
        c[c == 0.0] = _LENTZ_TINY
        delta = c * d
        f = np.where(active, f * delta, f)
        active &= np.abs(delta - 1.0) >= _LENTZ_EPS
        k += 1
    out[live] = f
    return out


_lgamma = np.vectorize(math.lgamma, otypes=[float])

_log_bessel_i_kernel = pick(_log_bessel_i_numba, _log_bessel_i_numpy)
_bessel_ratio_kernel = pick(_bessel_ratio_numba, _bessel_ratio_numpy)


# --------------------------------------------------------------------------
# public API


def _as_float_array(value, name):
    arr = np.asarray(value, dtype=float)
    if np.isnan(arr).any():
        raise DomainError(f"{name} contains NaN")
    return arr


def _check_dimension(m, minimum):
    arr = np.asarray(m)
    if arr.dtype.kind == "f":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise DomainError(f"dimension must be an integer, got {m!r}")
        arr = arr.astype(np.int64)
    elif arr.dtype.kind not in "iu":
        raise DomainError(f"dimension must be an integer, got {m!r}")
    if np.any(arr < minimum):
        raise DomainError(f"dimension must be >= {minimum}, got {m!r}")
    return arr


def _scalar_or_array(result, *inputs):
    if all(np.ndim(a) == 0 for a in inputs):
        return float(result.reshape(-1)[0])
    return result


def _log_bessel_parts(v, x):
    v_arr = _as_float_array(v, "order v")
    x_arr = _as_float_array(x, "argument x")
    if np.any(v_arr < 0) or not np.all(np.isfinite(v_arr)):
        raise DomainError("order v must be finite and >= 0")
    if np.any(x_arr < 0) or not np.all(np.isfinite(x_arr)):
        raise DomainError("argument x must be finite and >= 0")
    vb, xb = np.broadcast_arrays(v_arr, x_arr)
    shape = vb.shape
    logi, norm = _log_bessel_i_kernel(
        np.array(vb, dtype=float).ravel(),
        np.array(xb, dtype=float).ravel(),
    )
    return logi.reshape(shape), norm.reshape(shape)


def log_bessel_i(v, x):
    """Natural log of the modified Bessel function of the first kind, ln I_v(x).

    Parameters
    ----------
    v : float or array_like
        Order, ``v >= 0``.
    x : float or array_like
        Argument, ``x >= 0``. Broadcast against ``v``.

    Returns
    -------
    float or ndarray
        ``ln I_v(x)``. At ``x = 0`` this is ``0`` for ``v = 0`` and ``-inf``
        otherwise.
    """
    logi, _ = _log_bessel_parts(v, x)
    return _scalar_or_array(logi, v, x)


def log_bessel_i_normalized(v, x):
    """ln[I_v(x) * Gamma(v+1) / (x/2)^v], which is exactly 0 at x = 0.

    Used where ln I_v cancels against its leading power term, e.g. the vMF
    KL divergence at small concentration.
    """
    _, norm = _log_bessel_parts(v, x)
    return _scalar_or_array(norm, v, x)


def bessel_ratio(m, kappa):
    """Mean resultant length A_m(kappa) = I_{m/2}(kappa) / I_{m/2-1}(kappa)."""
    m_arr = _check_dimension(m, 2)
    k_arr = _as_float_array(kappa, "kappa")
    if np.any(k_arr < 0) or not np.all(np.isfinite(k_arr)):
        raise DomainError("kappa must be finite and >= 0")
    mb, kb = np.broadcast_arrays(m_arr, k_arr)
    nu = np.ascontiguousarray(mb, dtype=float).ravel() / 2.0 - 1.0
    out = _bessel_ratio_kernel(nu, np.array(kb, dtype=float).ravel())
    return _scalar_or_array(out.reshape(mb.shape), m, kappa)


def bessel_ratio_grad(m, kappa):
    """Derivative of A_m with respect to kappa: 1 - A^2 - (m-1) A / kappa."""
    k_arr = _as_float_array(kappa, "kappa")
    if np.any(k_arr <= 0):
        raise DomainError("bessel_ratio_grad needs kappa > 0")
    m_arr = _check_dimension(m, 2)
    a = np.asarray(bessel_ratio(m_arr, k_arr), dtype=float)
    out = 1.0 - a * a - (m_arr - 1.0) * a / k_arr
    return _scalar_or_array(np.asarray(out), m, kappa)


def log_unit_sphere_area(m):
    """Log surface area of the unit sphere S^{m-1} embedded in R^m."""
    m_arr = _check_dimension(m, 1).astype(float)
    out = math.log(2.0) + 0.5 * m_arr * math.log(math.pi) - _lgamma(0.5 * m_arr)
    return _scalar_or_array(np.asarray(out, dtype=float), m)
