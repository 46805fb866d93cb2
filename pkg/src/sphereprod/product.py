"""Products of independent hyperspheres S^{k_1} x ... x S^{k_n}.

A latent vector is the concatenation of one unit vector per factor ("shell"),
in the written order of the composition. With a product prior and a
posterior that factorises over shells, the KL term is the sum of per-shell
vMF-to-uniform divergences.

Composition strings use ``s`` followed by ``x``-separated sphere dimensions,
each optionally repeated with ``*count``::

    s20x10x6x1   ->  [20, 10, 6, 1]
    s10x9*3      ->  [10, 9, 9, 9]
    s1*20        ->  twenty S^1 factors (a torus)
"""

import re
from dataclasses import dataclass

import numpy as np

from . import vmf
from .special import log_unit_sphere_area
from .sphere import householder_apply, householder_vector


class CompositionError(ValueError):
    """Malformed composition string; ``position`` is the 0-based offset."""

    def __init__(self, message, text, position):
        super().__init__(f"{message} at position {position} in {text!r}")
        self.text = text
        self.position = position


_INT = re.compile(r"[0-9]+")


def parse_composition(text):
    """Parse a composition string into a :class:`CompositionSpec`."""
    s = text.strip()
    if not s.startswith("s"):
        raise CompositionError("expected leading 's'", text, 0)
    pos = 1
    dims = []
    while True:
        match = _INT.match(s, pos)
        if match is None:
            raise CompositionError("expected sphere dimension", text, pos)
        dim = int(match.group())
        if dim < 1:
            raise CompositionError("sphere dimension must be >= 1", text, pos)
        pos = match.end()
        count = 1
        if pos < len(s) and s[pos] == "*":
            match = _INT.match(s, pos + 1)
            if match is None:
                raise CompositionError("expected repetition count", text, pos + 1)
            count = int(match.group())
            if count < 1:
                raise CompositionError("repetition count must be >= 1", text, pos + 1)
            pos = match.end()
        dims.extend([dim] * count)
        if pos == len(s):
            break
        if s[pos] != "x":
            raise CompositionError(f"unexpected {s[pos]!r}", text, pos)
        pos += 1
    return CompositionSpec(tuple(dims))


@dataclass(frozen=True)
class CompositionSpec:
    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise ValueError("a composition needs at least one shell")
        if any(d < 1 for d in dims):
            raise ValueError(f"sphere dimensions must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def parse(cls, text):
        return parse_composition(text)

    @property
    def n_shells(self):
        return len(self.dims)

    @property
    def ambient_dims(self):
        return tuple(k + 1 for k in self.dims)

    @property
    def ambient_dim(self):
        return sum(self.ambient_dims)

    @property
    def dof(self):
        return sum(self.dims)

    @property
    def slices(self):
        out = []
        start = 0
        for m in self.ambient_dims:
            out.append(slice(start, start + m))
            start += m
        return tuple(out)

    def format(self):
        """Canonical string: runs of equal dimensions collapse to ``k*count``."""
        parts = []
        i = 0
        while i < len(self.dims):
            j = i
            while j < len(self.dims) and self.dims[j] == self.dims[i]:
                j += 1
            run = j - i
            parts.append(f"{self.dims[i]}" if run == 1 else f"{self.dims[i]}*{run}")
            i = j
        return "s" + "x".join(parts)

    def __str__(self):
        return self.format()

    def latex(self):
        return " \\times ".join(f"S^{{{k}}}" for k in self.dims)


def ambient_dim(spec):
    return spec.ambient_dim


def dof(spec):
    return spec.dof


# --------------------------------------------------------------------------
# single-datum product distribution


@dataclass(frozen=True)
class ProductSample:
    coords: np.ndarray
    shell_slices: tuple

    def shell(self, i):
        return self.coords[..., self.shell_slices[i]]


@dataclass(frozen=True)
class ProductVmf:
    """Product of independent vMF factors, one per composition entry."""

    spec: CompositionSpec
    shells: tuple

    def __post_init__(self):
        shells = tuple(self.shells)
        if len(shells) != self.spec.n_shells:
            raise ValueError(f"{len(shells)} shells for a {self.spec.n_shells}-shell composition")
        for i, (shell, m) in enumerate(zip(shells, self.spec.ambient_dims)):
            if shell.m != m:
                raise ValueError(f"shell {i} has ambient dim {shell.m}, expected {m}")
        object.__setattr__(self, "shells", shells)

    @classmethod
    def from_params(cls, spec, mus, kappas):
        shells = tuple(vmf.VmfDistribution(mu, k) for mu, k in zip(mus, kappas))
        return cls(spec, shells)

    @classmethod
    def uniform(cls, spec):
        """The product-of-uniforms prior (all kappa = 0)."""
        mus = [np.eye(m)[0] for m in spec.ambient_dims]
        return cls.from_params(spec, mus, [0.0] * spec.n_shells)

    @property
    def kappas(self):
        return np.array([s.kappa for s in self.shells])


def product_sample(q, rng, n=None):
    """Sample each shell independently and concatenate in composition order.

    Returns a single :class:`ProductSample` whose ``coords`` has shape
    ``(ambient,)`` or ``(n, ambient)``, plus the per-shell acceptance rates.
    """
    count = 1 if n is None else n
    parts = []
    rates = []
    for shell in q.shells:
        z, rate = shell.sample(rng, count)
        parts.append(z)
        rates.append(rate)
    coords = np.concatenate(parts, axis=-1)
    if n is None:
        coords = coords[0]
    return ProductSample(coords, q.spec.slices), np.array(rates)


def product_log_prob(q, z):
    coords = z.coords if isinstance(z, ProductSample) else np.asarray(z, dtype=float)
    if coords.shape[-1] != q.spec.ambient_dim:
        raise ValueError(f"sample has dim {coords.shape[-1]}, composition needs {q.spec.ambient_dim}")
    total = 0.0
    for shell, sl in zip(q.shells, q.spec.slices):
        total = total + shell.log_prob(coords[..., sl])
    return total


def product_kl(q):
    """KL(q || product of uniforms) as ``(total, per_shell)``."""
    per_shell = np.array(
        [vmf.kl_to_uniform(m, s.kappa) for m, s in zip(q.spec.ambient_dims, q.shells)]
    )
    return float(per_shell.sum()), per_shell


def prior_log_prob(spec):
    """Log density of the product-of-uniforms prior (constant on the product)."""
    return -float(sum(log_unit_sphere_area(m) for m in spec.ambient_dims))


# --------------------------------------------------------------------------
# batched posterior used by the VAE


@dataclass
class ProductPosterior:
    """Per-datum product posterior for a batch.

    ``mus[i]`` has shape (B, k_i + 1); ``kappas`` has shape (B, n_shells).
    """

    spec: CompositionSpec
    mus: list
    kappas: np.ndarray

    @property
    def batch_size(self):
        return self.kappas.shape[0]

    def datum(self, b):
        return ProductVmf.from_params(self.spec, [mu[b] for mu in self.mus], self.kappas[b])

    def kl(self):
        """Per-datum totals (B,) and per-shell values (B, n)."""
        per_shell = np.stack(
            [vmf.kl_to_uniform(m, self.kappas[:, i]) for i, m in enumerate(self.spec.ambient_dims)],
            axis=1,
        )
        return per_shell.sum(axis=1), per_shell

    def kl_grad_kappa(self):
        return np.stack(
            [vmf.kl_grad_kappa(m, self.kappas[:, i]) for i, m in enumerate(self.spec.ambient_dims)],
            axis=1,
        )

    def log_prob(self, z):
        """log q(z | x) for z of shape (B, ambient) or (S, B, ambient)."""
        z = np.asarray(z, dtype=float)
        total = 0.0
        for i, (m, sl) in enumerate(zip(self.spec.ambient_dims, self.spec.slices)):
            k = self.kappas[:, i]
            dot = np.sum(z[..., sl] * self.mus[i], axis=-1)
            total = total + vmf.log_normalizer(m, k) + k * dot
        return total

    def draw_noise(self, rng, samples=None):
        """Freeze the randomness of one reparameterised draw per datum.

        With ``samples=S`` every array gains a leading axis of size S.
        """
        return ShellNoise.draw(self, rng, samples)

    def reparameterize(self, noise):
        """Deterministic map from frozen noise to a latent sample.

        Returns ``(z, cache)``; ``cache`` carries intermediates for backward.
        """
        parts = []
        cache = []
        for i, m in enumerate(self.spec.ambient_dims):
            k = self.kappas[:, i]
            eps = noise.eps[i]
            omw = vmf.wood_one_minus_w(m, k, eps)
            mu = np.broadcast_to(self.mus[i], omw.shape + (m,))
            frame = vmf.frame_vector(omw, noise.tangent[i])
            parts.append(householder_apply(mu, frame))
            cache.append((omw, frame))
        return np.concatenate(parts, axis=-1), cache

    def sample(self, rng, samples=None):
        noise = self.draw_noise(rng, samples)
        z, _ = self.reparameterize(noise)
        return z, noise


@dataclass
class ShellNoise:
    """Accepted Beta proposals, tangent directions and trial counts per shell."""

    eps: list
    tangent: list
    trials: list

    @classmethod
    def draw(cls, posterior, rng, samples=None):
        eps_all, tan_all, trials_all = [], [], []
        batch = posterior.batch_size
        for i, m in enumerate(posterior.spec.ambient_dims):
            k = posterior.kappas[:, i]
            if samples is not None:
                k = np.broadcast_to(k, (samples, batch))
            eps, trials = vmf.sample_eps(m, k, rng)
            size = int(np.prod(k.shape))
            tangent = vmf.sample_tangent(rng, m, size).reshape(k.shape + (m - 1,))
            eps_all.append(eps)
            tan_all.append(tangent)
            trials_all.append(trials)
        return cls(eps_all, tan_all, trials_all)

    def acceptance_rates(self):
        return np.array([t.size / float(t.sum()) for t in self.trials])


def householder_backward(mu, x, grad_z):
    """Gradients of z = H(mu) x with respect to mu and x.

    Rows where mu ~ e1 use the identity map, so their mu-gradient is zero.
    """
    u, n, identity = householder_vector(mu)
    s = np.sum(u * x, axis=-1, keepdims=True)
    gu_dot = np.sum(grad_z * u, axis=-1, keepdims=True)
    grad_x = grad_z - 2.0 * u * gu_dot
    grad_u = -2.0 * (grad_z * s + gu_dot * x)
    proj = grad_u - u * np.sum(u * grad_u, axis=-1, keepdims=True)
    grad_r = np.divide(proj, n, out=np.zeros_like(proj), where=~identity[..., None])
    return -grad_r, grad_x
