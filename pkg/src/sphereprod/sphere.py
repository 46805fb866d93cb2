"""Unit-hypersphere geometry: normalisation, uniform draws, Householder
reflection and great-circle interpolation.

Vectors live along the last axis; leading axes are treated as a batch.
"""

import numpy as np

NORM_EPS = 1e-12


class DegenerateVectorError(ValueError):
    """Raised when a vector is too short to define a direction."""


class DimensionMismatchError(ValueError):
    pass


class AntipodalError(ValueError):
    """Great circle through two antipodal points is not unique."""


def normalize(v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0 or v.shape[-1] < 2:
        raise DimensionMismatchError("need an ambient dimension >= 2")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    bad = norm[..., 0] <= NORM_EPS
    if np.any(bad):
        idx = np.argwhere(np.atleast_1d(bad))[0]
        raise DegenerateVectorError(f"vector norm <= {NORM_EPS} at index {tuple(int(i) for i in idx)}")
    return v / norm


def sample_uniform(rng, m, size=None):
    """Uniform draw(s) on S^{m-1}: normalised standard-normal vectors.

    ``size`` is the batch shape; ``None`` returns a single vector.
    """
    if m < 2:
        raise DimensionMismatchError("ambient dimension must be >= 2")
    shape = (() if size is None else tuple(np.atleast_1d(size))) + (m,)
    g = rng.standard_normal(shape)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    # all-zero draw has probability zero, but redraw rather than divide by 0
    while np.any(norm == 0.0):
        bad = norm[..., 0] == 0.0
        g[bad] = rng.standard_normal((int(bad.sum()), m))
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norm


def householder_vector(mu):
    """Unit u with (I - 2uu^T) e1 = mu, plus a mask of rows where mu ~ e1.

    Rows flagged in the mask have u = 0 so the reflection is the identity.
    """
    mu = np.asarray(mu, dtype=float)
    r = -mu.copy()
    r[..., 0] += 1.0
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    identity = n[..., 0] < NORM_EPS
    u = np.divide(r, n, out=np.zeros_like(r), where=~identity[..., None])
    return u, n, identity


def householder_apply(mu, x):
    """Apply the reflection taking e1 to ``mu`` to ``x`` (batched)."""
    mu = np.asarray(mu, dtype=float)
    x = np.asarray(x, dtype=float)
    if mu.shape[-1] != x.shape[-1]:
        raise DimensionMismatchError(f"mu has dim {mu.shape[-1]}, x has dim {x.shape[-1]}")
    u, _, _ = householder_vector(mu)
    return x - 2.0 * u * np.sum(u * x, axis=-1, keepdims=True)


def slerp(a, b, t):
    """Great-circle interpolation from ``a`` (t=0) to ``b`` (t=1)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shapes {a.shape} and {b.shape} differ")
    cos = float(np.clip(np.dot(a, b), -1.0, 1.0))
    if np.allclose(a, b, rtol=0.0, atol=1e-15):
        return a.copy()
    if abs(cos) >= 1.0 - 1e-9:
        if cos > 0:
            # sin(theta) ~ 0: chord interpolation is exact to first order
            out = (1.0 - t) * a + t * b
            return out / np.linalg.norm(out)
        raise AntipodalError("slerp endpoints are antipodal")
    theta = np.arccos(cos)
    s = np.sin(theta)
    out = (np.sin((1.0 - t) * theta) * a + np.sin(t * theta) * b) / s
    return out / np.linalg.norm(out)
