"""von Mises-Fisher distribution on S^{m-1}.

Sampling follows Wood's rejection scheme for the component w = mu^T z:
propose eps ~ Beta((m-1)/2, (m-1)/2), map it to w, accept with Wood's
log-ratio test, then place the tangent part uniformly and rotate e1 onto mu
with a Householder reflection.

Gradients are pathwise only: the accepted eps is frozen and w is
differentiated through the proposal map. The score-function correction for
the accept/reject step is deliberately not implemented.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit, pick
from .special import (
    DomainError,
    bessel_ratio,
    log_bessel_i_normalized,
    log_unit_sphere_area,
)
from .sphere import householder_apply, normalize, sample_uniform

UNIT_TOL = 1e-6


def _kappa_array(kappa, allow_zero=True):
    k = np.asarray(kappa, dtype=float)
    if np.isnan(k).any() or not np.all(np.isfinite(k)):
        raise DomainError("kappa must be finite")
    if allow_zero and np.any(k < 0):
        raise DomainError("kappa must be >= 0")
    if not allow_zero and np.any(k <= 0):
        raise DomainError("kappa must be > 0")
    return k


def _check_m(m):
    if int(m) != m or m < 2:
        raise DomainError(f"ambient dimension m must be an integer >= 2, got {m!r}")
    return int(m)


def _ret(out, *inputs):
    if all(np.ndim(a) == 0 for a in inputs):
        return float(np.asarray(out).reshape(-1)[0])
    return out


# --------------------------------------------------------------------------
# closed forms


def log_normalizer(m, kappa):
    """ln C_m(kappa); at kappa = 0 this is minus the log sphere area."""
    m = _check_m(m)
    k = _kappa_array(kappa)
    out = -log_unit_sphere_area(m) - np.asarray(log_bessel_i_normalized(m / 2.0 - 1.0, k))
    return _ret(out, kappa)


def kl_to_uniform(m, kappa):
    """KL(vMF(mu, kappa) || Uniform(S^{m-1})), independent of mu."""
    m = _check_m(m)
    k = _kappa_array(kappa)
    a = np.asarray(bessel_ratio(m, k))
    out = k * a - np.asarray(log_bessel_i_normalized(m / 2.0 - 1.0, k))
    return _ret(out, kappa)


def kl_grad_kappa(m, kappa):
    """d KL / d kappa = kappa * A'_m(kappa), written without the 1/kappa."""
    m = _check_m(m)
    k = _kappa_array(kappa)
    a = np.asarray(bessel_ratio(m, k))
    out = k - k * a * a - (m - 1.0) * a
    return _ret(out, kappa)


def entropy(m, kappa):
    m = _check_m(m)
    k = _kappa_array(kappa)
    a = np.asarray(bessel_ratio(m, k))
    out = -k * a - np.asarray(log_normalizer(m, k))
    return _ret(out, kappa)


# --------------------------------------------------------------------------
# Wood rejection sampler


@dataclass(frozen=True)
class WoodConstants:
    b: np.ndarray
    a: np.ndarray
    d: np.ndarray


def wood_constants(m, kappa):
    m = _check_m(m)
    k = _kappa_array(kappa)
    mm1 = m - 1.0
    s = np.sqrt(4.0 * k * k + mm1 * mm1)
    # (-2k + s)/(m-1) rewritten to avoid cancellation at large kappa
    b = mm1 / (2.0 * k + s)
    a = (mm1 + 2.0 * k + s) / 4.0
    d = 4.0 * a * b / (1.0 + b) - mm1 * math.log(mm1)
    return WoodConstants(b=b, a=a, d=d)


def wood_one_minus_w(m, kappa, eps):
    """1 - w for proposal ``eps``; exact form 2 b eps / (1 - (1-b) eps)."""
    b = wood_constants(m, kappa).b
    eps = np.asarray(eps, dtype=float)
    return 2.0 * b * eps / (1.0 - (1.0 - b) * eps)


def wood_w(m, kappa, eps):
    return _ret(1.0 - wood_one_minus_w(m, kappa, eps), kappa, eps)


def wood_w_grad(m, kappa, eps):
    """Pathwise dw/dkappa with eps held fixed."""
    m = _check_m(m)
    k = _kappa_array(kappa)
    eps = np.asarray(eps, dtype=float)
    mm1 = m - 1.0
    s = np.sqrt(4.0 * k * k + mm1 * mm1)
    b = mm1 / (2.0 * k + s)
    den = 1.0 - (1.0 - b) * eps
    # dw/db = -2 eps (1-eps) / den^2 and db/dkappa = -2 b / s
    out = 4.0 * b * eps * (1.0 - eps) / (s * den * den)
    return _ret(out, kappa, eps)


@njit
def _wood_eps_numba(m, kappa, rng):
    n = kappa.size
    eps = np.empty(n)
    trials = np.empty(n, dtype=np.int64)
    mm1 = m - 1.0
    alpha = 0.5 * mm1
    log_mm1 = math.log(mm1)
    for i in range(n):
        k = kappa[i]
        s = math.sqrt(4.0 * k * k + mm1 * mm1)
        b = mm1 / (2.0 * k + s)
        a = (mm1 + 2.0 * k + s) / 4.0
        d = 4.0 * a * b / (1.0 + b) - mm1 * log_mm1
        count = 0
        while True:
            count += 1
            g1 = rng.standard_gamma(alpha)
            g2 = rng.standard_gamma(alpha)
            tot = g1 + g2
            if tot <= 0.0:
                continue
            e = g1 / tot
            t = 2.0 * a * b / (1.0 - (1.0 - b) * e)
            u = rng.random()
            if mm1 * math.log(t) - t + d >= math.log(u):
                break
        eps[i] = e
        trials[i] = count
    return eps, trials


def _wood_eps_numpy(m, kappa, rng):
    n = kappa.size
    eps = np.empty(n)
    trials = np.zeros(n, dtype=np.int64)
    mm1 = m - 1.0
    alpha = 0.5 * mm1
    s = np.sqrt(4.0 * kappa * kappa + mm1 * mm1)
    b = mm1 / (2.0 * kappa + s)
    a = (mm1 + 2.0 * kappa + s) / 4.0
    d = 4.0 * a * b / (1.0 + b) - mm1 * math.log(mm1)
    pending = np.arange(n)
    while pending.size:
        trials[pending] += 1
        g1 = rng.standard_gamma(alpha, pending.size)
        g2 = rng.standard_gamma(alpha, pending.size)
        u = rng.random(pending.size)
        tot = g1 + g2
        ok = tot > 0.0
        e = np.divide(g1, tot, out=np.full(pending.size, 0.5), where=ok)
        bp, ap = b[pending], a[pending]
        t = 2.0 * ap * bp / (1.0 - (1.0 - bp) * e)
        with np.errstate(divide="ignore"):
            accept = ok & (mm1 * np.log(t) - t + d[pending] >= np.log(u))
        eps[pending[accept]] = e[accept]
        pending = pending[~accept]
    return eps, trials


_wood_eps_kernel = pick(_wood_eps_numba, _wood_eps_numpy)


def sample_eps(m, kappa, rng):
    """Accepted Beta proposals for each entry of ``kappa`` and the number of
    proposals each one took."""
    m = _check_m(m)
    k = _kappa_array(kappa)
    eps, trials = _wood_eps_kernel(float(m), np.ascontiguousarray(k.ravel()), rng)
    return eps.reshape(k.shape), trials.reshape(k.shape)


def sample_tangent(rng, m, size):
    """Uniform direction on S^{m-2} (the sphere orthogonal to e1).

    For m = 2 this is the zero-sphere {-1, +1}.
    """
    if m == 2:
        return np.where(rng.random((size, 1)) < 0.5, -1.0, 1.0)
    return sample_uniform(rng, m - 1, size)


def frame_vector(one_minus_w, v):
    """(w, sqrt(1-w^2) v): the sample expressed in the frame where mu = e1."""
    omw = np.asarray(one_minus_w, dtype=float)
    radial = np.sqrt(np.clip(omw * (2.0 - omw), 0.0, None))
    return np.concatenate([(1.0 - omw)[..., None], radial[..., None] * v], axis=-1)


def assemble(mu, one_minus_w, v):
    """Rotate (w, sqrt(1-w^2) v) from the e1 frame onto ``mu``."""
    return householder_apply(mu, frame_vector(one_minus_w, v))


def sample_w_pathwise(m, kappa, rng):
    """Draw w = mu^T z and its pathwise derivative dw/dkappa.

    The accepted proposal is frozen; no score-function term is added.
    """
    m = _check_m(m)
    k = _kappa_array(kappa, allow_zero=False)
    eps, _ = sample_eps(m, k, rng)
    w = 1.0 - wood_one_minus_w(m, k, eps)
    dw = wood_w_grad(m, k, eps)
    if np.ndim(kappa) == 0:
        return float(w), float(dw)
    return w, dw


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VmfDistribution:
    """vMF(mu, kappa) on the unit sphere in R^m, m = len(mu)."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 1 or mu.size < 2:
            raise DomainError("mu must be a vector of length >= 2")
        if abs(np.linalg.norm(mu) - 1.0) > UNIT_TOL:
            raise DomainError("mu must be unit-norm")
        mu = normalize(mu)
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        kappa = float(self.kappa)
        if not math.isfinite(kappa) or kappa < 0:
            raise DomainError("kappa must be finite and >= 0")
        object.__setattr__(self, "kappa", kappa)

    @property
    def m(self):
        return self.mu.size

    def log_normalizer(self):
        return log_normalizer(self.m, self.kappa)

    def log_prob(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.m:
            raise DomainError(f"z has dimension {z.shape[-1]}, expected {self.m}")
        if np.any(np.abs(np.linalg.norm(z, axis=-1) - 1.0) > UNIT_TOL):
            raise DomainError("z must be unit-norm")
        out = self.log_normalizer() + self.kappa * (z @ self.mu)
        return float(out) if np.ndim(out) == 0 else out

    def sample(self, rng, n):
        """Return ``(samples, acceptance_rate)`` with samples of shape (n, m)."""
        if self.kappa == 0.0:
            return sample_uniform(rng, self.m, n), 1.0
        eps, trials = sample_eps(self.m, np.full(n, self.kappa), rng)
        omw = wood_one_minus_w(self.m, self.kappa, eps)
        v = sample_tangent(rng, self.m, n)
        z = assemble(np.broadcast_to(self.mu, (n, self.m)), omw, v)
        return z, n / float(trials.sum())

    def mean_resultant_length(self):
        return bessel_ratio(self.m, self.kappa)

    def entropy(self):
        return entropy(self.m, self.kappa)

    def kl_to_uniform(self):
        return kl_to_uniform(self.m, self.kappa)
