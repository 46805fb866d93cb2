"""Product-space hyperspherical VAE: model, objective, training and evaluation.

The encoder is an MLP trunk with two heads: one emits the concatenated,
unnormalised mean directions of every shell, the other one raw concentration
per shell (softplus, clamped to ``kappa_max``). The decoder mirrors the trunk
and outputs Bernoulli logits.

Reported ELBO is always -(RE + KL) at beta = 1. The training loss uses the
annealed weight beta * min(1, epoch / warmup_epochs), optionally per shell.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import vmf
from .data import batches, train_val_split
from .nn import (
    Adam,
    Dense,
    DivergenceError,
    bernoulli_nll_logits,
    check_finite,
    load_checkpoint,
    relu_backward,
    relu_forward,
    save_checkpoint,
    sigmoid,
    softplus,
)
from .product import (
    CompositionSpec,
    ProductPosterior,
    householder_backward,
    parse_composition,
    prior_log_prob,
)
from .sphere import normalize

log = logging.getLogger(__name__)

KAPPA_MAX = 5e3
KAPPA_MIN = 1e-12
IGNORED_KL_THRESHOLD = 0.1


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    composition: CompositionSpec
    beta: float = 1.0
    beta_per_shell: tuple = None
    warmup_epochs: int = 100
    max_epochs: int = 300
    lookahead: int = 50
    seeds: tuple = (0, 1, 2)
    iwae_samples: int = 500
    batch_size: int = 100
    lr: float = 1e-3
    hidden: tuple = (512, 256)
    kappa_max: float = KAPPA_MAX
    val_fraction: float = 0.1

    def __post_init__(self):
        if isinstance(self.composition, str):
            self.composition = parse_composition(self.composition)
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.beta_per_shell is not None:
            self.beta_per_shell = tuple(float(b) for b in self.beta_per_shell)
            if len(self.beta_per_shell) != self.composition.n_shells:
                raise ConfigError(
                    f"{len(self.beta_per_shell)} per-shell betas for "
                    f"{self.composition.n_shells} shells"
                )
            if any(b < 0 for b in self.beta_per_shell):
                raise ConfigError("per-shell betas must be >= 0")
        if self.max_epochs < 1 or self.warmup_epochs < 0 or self.lookahead < 0:
            raise ConfigError("epoch counts must be non-negative (max_epochs >= 1)")
        if self.warmup_epochs > self.max_epochs:
            raise ConfigError("warmup_epochs must not exceed max_epochs")
        if self.batch_size < 1 or self.iwae_samples < 1:
            raise ConfigError("batch_size and iwae_samples must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.hidden = tuple(int(h) for h in self.hidden)


def warmup_factor(epoch, warmup_epochs):
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, epoch / warmup_epochs)


def shell_weights(config, epoch):
    """Effective KL weight per shell at ``epoch``."""
    ramp = warmup_factor(epoch, config.warmup_epochs)
    n = config.composition.n_shells
    if config.beta_per_shell is not None:
        return ramp * np.asarray(config.beta_per_shell, dtype=float)
    return np.full(n, ramp * config.beta)


# --------------------------------------------------------------------------
# model


class ProductVAE:
    def __init__(
        self,
        spec,
        input_dim,
        hidden=(512, 256),
        rng=None,
        dtype=np.float32,
        kappa_max=KAPPA_MAX,
        image_shape=None,
    ):
        self.spec = spec
        self.input_dim = int(input_dim)
        self.hidden = tuple(hidden)
        self.kappa_max = float(kappa_max)
        self.image_shape = image_shape
        rng = np.random.default_rng(0) if rng is None else rng
        widths = (self.input_dim,) + self.hidden
        self.encoder = [
            Dense(widths[i], widths[i + 1], rng, dtype, f"enc{i}") for i in range(len(self.hidden))
        ]
        top = widths[-1]
        self.head_mu = Dense(top, spec.ambient_dim, rng, dtype, "head_mu")
        # a blank image gives all-zero hidden units; a constant offset keeps
        # the mean direction defined there instead of hitting the zero vector
        for sl in spec.slices:
            width = sl.stop - sl.start
            self.head_mu.b[sl] = 0.01 / np.sqrt(width)
        self.head_kappa = Dense(top, spec.n_shells, rng, dtype, "head_kappa")
        dec_widths = (spec.ambient_dim,) + self.hidden[::-1] + (self.input_dim,)
        self.decoder = [
            Dense(dec_widths[i], dec_widths[i + 1], rng, dtype, f"dec{i}")
            for i in range(len(dec_widths) - 1)
        ]

    @property
    def layers(self):
        return self.encoder + [self.head_mu, self.head_kappa] + self.decoder

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def state(self):
        return [(name, p.copy()) for name, p, _ in self.params()]

    def load_state(self, state):
        for (name, p, _), (sname, value) in zip(self.params(), state):
            if name != sname or p.shape != value.shape:
                raise ValueError(f"state mismatch at {name}: {sname} {value.shape}")
            p[...] = value

    # -- forward pieces ----------------------------------------------------

    def _encode(self, x):
        acts = []
        h = x
        for layer in self.encoder:
            a = layer.forward(h)
            acts.append((h, a))
            h = relu_forward(a)
        direction = self.head_mu.forward(h)
        raw = self.head_kappa.forward(h)
        kappa_sp = softplus(raw)
        kappa = np.clip(kappa_sp, KAPPA_MIN, self.kappa_max)
        mus = []
        for i, sl in enumerate(self.spec.slices):
            try:
                mus.append(normalize(direction[:, sl]))
            except ValueError as exc:
                raise DivergenceError(f"degenerate direction for shell {i}: {exc}") from exc
        posterior = ProductPosterior(self.spec, mus, kappa)
        cache = dict(acts=acts, top=h, direction=direction, raw=raw, kappa_sp=kappa_sp)
        return posterior, cache

    def encode(self, x):
        """Posterior q(z|x) for a batch of inputs."""
        posterior, _ = self._encode(np.asarray(x, dtype=float))
        return posterior

    def _decode(self, z):
        acts = []
        h = z
        for layer in self.decoder[:-1]:
            a = layer.forward(h)
            acts.append((h, a))
            h = relu_forward(a)
        logits = self.decoder[-1].forward(h)
        return logits, (acts, h)

    def decode(self, z):
        logits, _ = self._decode(np.asarray(z, dtype=float))
        return logits

    # -- objective ---------------------------------------------------------

    def loss(self, x, weights, rng=None, noise=None, backward=False):
        """One-sample objective on a batch.

        Either ``rng`` (fresh noise) or frozen ``noise`` must be given.
        With ``backward=True`` parameter gradients of the mean weighted loss
        are accumulated into the layers.
        """
        x = np.asarray(x, dtype=float)
        batch = x.shape[0]
        posterior, enc = self._encode(x)
        if noise is None:
            noise = posterior.draw_noise(rng)
        z, frames = posterior.reparameterize(noise)
        logits, dec = self._decode(z)
        check_finite("decoder logits", logits)
        re, dlogits = bernoulli_nll_logits(logits, x)
        kl_total, per_shell = posterior.kl()
        weights = np.asarray(weights, dtype=float)
        objective = float(np.mean(re + per_shell @ weights))
        out = dict(
            loss=objective,
            re=re,
            kl=kl_total,
            per_shell_kl=per_shell,
            kappa=posterior.kappas,
            accept=noise.acceptance_rates(),
            posterior=posterior,
            noise=noise,
        )
        if backward:
            self._backward(x, posterior, noise, frames, enc, dec, dlogits / batch, weights)
        return out

    def _backward(self, x, posterior, noise, frames, enc, dec, dlogits, weights):
        batch = x.shape[0]
        acts, h = dec
        g = self.decoder[-1].backward(h, dlogits)
        for layer, (inp, a) in zip(reversed(self.decoder[:-1]), reversed(acts)):
            g = layer.backward(inp, relu_backward(a, g))
        grad_z = g

        grad_dir = np.zeros_like(enc["direction"])
        grad_kappa = posterior.kl_grad_kappa() * weights / batch
        for i, (m, sl) in enumerate(zip(self.spec.ambient_dims, self.spec.slices)):
            omw, frame = frames[i]
            mu = posterior.mus[i]
            grad_mu, grad_frame = householder_backward(mu, frame, grad_z[:, sl])
            w = 1.0 - omw
            radial = np.sqrt(np.clip(omw * (2.0 - omw), 0.0, None))
            v = noise.tangent[i]
            tangential = np.sum(grad_frame[:, 1:] * v, axis=-1)
            slope = np.divide(w, radial, out=np.zeros_like(w), where=radial > 0.0)
            grad_w = grad_frame[:, 0] - slope * tangential
            kappa = posterior.kappas[:, i]
            grad_kappa[:, i] += grad_w * vmf.wood_w_grad(m, kappa, noise.eps[i])
            d = enc["direction"][:, sl]
            norm = np.linalg.norm(d, axis=-1, keepdims=True)
            grad_dir[:, sl] = (grad_mu - mu * np.sum(mu * grad_mu, axis=-1, keepdims=True)) / norm

        sp = enc["kappa_sp"]
        passthrough = (sp > KAPPA_MIN) & (sp < self.kappa_max)
        grad_raw = np.where(passthrough, grad_kappa * sigmoid(enc["raw"]), 0.0)
        top = enc["top"]
        g = self.head_mu.backward(top, grad_dir) + self.head_kappa.backward(top, grad_raw)
        for layer, (inp, a) in zip(reversed(self.encoder), reversed(enc["acts"])):
            g = layer.backward(inp, relu_backward(a, g))

    def elbo(self, x, epoch, rng, config=None):
        """Reported ELBO (beta = 1) plus the annealed training loss at ``epoch``."""
        n = self.spec.n_shells
        weights = np.ones(n) if config is None else shell_weights(config, epoch)
        out = self.loss(x, weights, rng=rng)
        elbo = -(out["re"] + out["kl"])
        return dict(
            elbo=float(np.mean(elbo)),
            loss=out["loss"],
            re=float(np.mean(out["re"])),
            kl=float(np.mean(out["kl"])),
            per_shell_kl=out["per_shell_kl"].mean(axis=0),
        )

    def evaluate(self, images, rng, batch_size=500):
        """Dataset-mean ELBO, RE, KL and per-shell diagnostics (one sample/datum)."""
        sums = None
        count = 0
        accept_num = np.zeros(self.spec.n_shells)
        accept_den = np.zeros(self.spec.n_shells)
        for start in range(0, images.shape[0], batch_size):
            xb = images[start : start + batch_size].astype(float)
            out = self.loss(xb, np.ones(self.spec.n_shells), rng=rng)
            part = np.concatenate(
                [
                    [out["re"].sum(), out["kl"].sum()],
                    out["per_shell_kl"].sum(axis=0),
                    out["kappa"].sum(axis=0),
                ]
            )
            sums = part if sums is None else sums + part
            count += xb.shape[0]
            for i, t in enumerate(out["noise"].trials):
                accept_num[i] += t.size
                accept_den[i] += t.sum()
        means = sums / count
        n = self.spec.n_shells
        re, kl = means[0], means[1]
        return dict(
            elbo=-(re + kl),
            re=re,
            kl=kl,
            per_shell_kl=means[2 : 2 + n],
            shell_kappa=means[2 + n :],
            accept=accept_num / accept_den,
        )

    def iwae_log_likelihood(self, images, K=500, rng=None, max_rows=20000, per_datum=False):
        """Importance-weighted estimate of log p(x) with K posterior samples."""
        if K < 1:
            raise ValueError("K must be >= 1")
        rng = np.random.default_rng(0) if rng is None else rng
        images = np.asarray(images, dtype=float)
        log_prior = prior_log_prob(self.spec)
        chunk = max(1, max_rows // K)
        out = []
        for start in range(0, images.shape[0], chunk):
            xb = images[start : start + chunk]
            posterior = self.encode(xb)
            # split the K samples so decoder batches stay under max_rows
            sub = max(1, min(K, max_rows // xb.shape[0]))
            log_w = []
            done = 0
            while done < K:
                s = min(sub, K - done)
                noise = posterior.draw_noise(rng, samples=s)
                z, _ = posterior.reparameterize(noise)
                logits = self.decode(z.reshape(-1, z.shape[-1])).reshape(s, xb.shape[0], -1)
                nll, _ = bernoulli_nll_logits(logits, np.broadcast_to(xb, logits.shape))
                log_w.append(-nll + log_prior - posterior.log_prob(z))
                done += s
            log_w = np.concatenate(log_w, axis=0)
            peak = log_w.max(axis=0)
            out.append(peak + np.log(np.mean(np.exp(log_w - peak), axis=0)))
        ll = np.concatenate(out)
        return ll if per_datum else float(np.mean(ll))

    # -- persistence -------------------------------------------------------

    def metadata(self):
        meta = dict(
            composition=self.spec.format(),
            input_dim=str(self.input_dim),
            hidden=",".join(str(h) for h in self.hidden),
            kappa_max=repr(self.kappa_max),
        )
        if self.image_shape is not None:
            meta["height"], meta["width"] = (str(v) for v in self.image_shape)
        return meta

    def save(self, path, **extra):
        meta = self.metadata()
        meta.update({k: str(v) for k, v in extra.items()})
        save_checkpoint(path, meta, self.state())

    @classmethod
    def load(cls, path):
        meta, arrays = load_checkpoint(path)
        spec = parse_composition(meta["composition"])
        hidden = tuple(int(h) for h in meta["hidden"].split(",") if h)
        shape = None
        if "height" in meta:
            shape = (int(meta["height"]), int(meta["width"]))
        model = cls(
            spec,
            int(meta["input_dim"]),
            hidden,
            kappa_max=float(meta["kappa_max"]),
            image_shape=shape,
        )
        model.load_state(arrays)
        return model, meta


# --------------------------------------------------------------------------
# training


class EarlyStopper:
    """Track the best validation score; stop once more than ``lookahead``
    epochs have passed without improvement."""

    def __init__(self, lookahead):
        self.lookahead = lookahead
        self.best = -np.inf
        self.best_epoch = None

    def update(self, epoch, value):
        """Record ``value``; returns True when it is a new best."""
        if self.best_epoch is None or value > self.best:
            self.best = value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch):
        return self.best_epoch is not None and epoch - self.best_epoch > self.lookahead


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    elbo: float
    re: float
    kl: float
    shell_kls: tuple
    shell_kappas: tuple
    shell_accept: tuple
    ll: float = None

    FIELDS = ("epoch", "split", "elbo", "re", "kl", "ll", "shell_kls", "shell_kappas", "shell_accept")

    @classmethod
    def from_eval(cls, epoch, split, ev, ll=None):
        return cls(
            epoch=epoch,
            split=split,
            elbo=float(ev["elbo"]),
            re=float(ev["re"]),
            kl=float(ev["kl"]),
            shell_kls=tuple(float(v) for v in ev["per_shell_kl"]),
            shell_kappas=tuple(float(v) for v in ev["shell_kappa"]),
            shell_accept=tuple(float(v) for v in ev["accept"]),
            ll=ll,
        )

    def row(self):
        def join(vals):
            return "|".join(repr(float(v)) for v in vals)

        return [
            str(self.epoch),
            self.split,
            repr(self.elbo),
            repr(self.re),
            repr(self.kl),
            "" if self.ll is None else repr(float(self.ll)),
            join(self.shell_kls),
            join(self.shell_kappas),
            join(self.shell_accept),
        ]


class MetricsFormatError(ValueError):
    pass


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EpochMetrics.FIELDS)
        for m in history:
            writer.writerow(m.row())


def read_metrics_csv(path):
    def split_floats(text):
        return tuple(float(v) for v in text.split("|")) if text else ()

    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != EpochMetrics.FIELDS:
                raise MetricsFormatError(f"unexpected header {header}")
            out = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(EpochMetrics.FIELDS):
                    raise MetricsFormatError(f"line {lineno}: expected 9 fields, got {len(row)}")
                rec = dict(zip(EpochMetrics.FIELDS, row))
                out.append(
                    EpochMetrics(
                        epoch=int(rec["epoch"]),
                        split=rec["split"],
                        elbo=float(rec["elbo"]),
                        re=float(rec["re"]),
                        kl=float(rec["kl"]),
                        ll=float(rec["ll"]) if rec["ll"] else None,
                        shell_kls=split_floats(rec["shell_kls"]),
                        shell_kappas=split_floats(rec["shell_kappas"]),
                        shell_accept=split_floats(rec["shell_accept"]),
                    )
                )
    except (StopIteration, ValueError, KeyError) as exc:
        if isinstance(exc, MetricsFormatError):
            raise
        raise MetricsFormatError(f"{path}: {exc}") from exc
    return out


@dataclass
class SeedResult:
    seed: int
    model: ProductVAE = None
    history: list = field(default_factory=list)
    best_epoch: int = None
    final: EpochMetrics = None
    error: str = None


def eval_rng(seed):
    """Generator used for the reported best-checkpoint validation metrics."""
    return np.random.default_rng([seed, 5])


def iwae_rng(seed):
    return np.random.default_rng([seed, 6])


def train_seed(config, dataset, seed, on_epoch=None):
    """Train one seed; a divergence ends the run and is recorded in ``error``."""
    train, val = train_val_split(dataset, seed, config.val_fraction)
    model = ProductVAE(
        config.composition,
        dataset.dim,
        config.hidden,
        rng=np.random.default_rng([seed, 2]),
        kappa_max=config.kappa_max,
        image_shape=(dataset.height, dataset.width),
    )
    optimizer = Adam(model.params(), lr=config.lr)
    stopper = EarlyStopper(config.lookahead)
    result = SeedResult(seed=seed, model=model)
    best_state = model.state()
    n = config.composition.n_shells
    try:
        for epoch in range(config.max_epochs):
            weights = shell_weights(config, epoch)
            rng = np.random.default_rng([seed, 3, epoch])
            sums = np.zeros(2 + 3 * n)
            count = 0
            for xb in batches(train.images, config.batch_size, seed, epoch):
                model.zero_grad()
                try:
                    out = model.loss(xb.astype(float), weights, rng=rng, backward=True)
                    optimizer.step()
                except DivergenceError as exc:
                    raise DivergenceError(f"epoch {epoch}, batch {count // config.batch_size}: {exc}")
                b = xb.shape[0]
                sums += np.concatenate(
                    [
                        [out["re"].sum(), out["kl"].sum()],
                        out["per_shell_kl"].sum(axis=0),
                        out["kappa"].sum(axis=0),
                        out["accept"] * b,
                    ]
                )
                count += b
            means = sums / count
            train_ev = dict(
                elbo=-(means[0] + means[1]),
                re=means[0],
                kl=means[1],
                per_shell_kl=means[2 : 2 + n],
                shell_kappa=means[2 + n : 2 + 2 * n],
                accept=means[2 + 2 * n :],
            )
            val_ev = model.evaluate(val.images, np.random.default_rng([seed, 4, epoch]))
            result.history.append(EpochMetrics.from_eval(epoch, "train", train_ev))
            result.history.append(EpochMetrics.from_eval(epoch, "val", val_ev))
            if not np.isfinite(val_ev["elbo"]):
                raise DivergenceError(f"epoch {epoch}: non-finite validation ELBO")
            if stopper.update(epoch, val_ev["elbo"]):
                best_state = model.state()
            if on_epoch is not None:
                on_epoch(seed, epoch, train_ev, val_ev)
            if stopper.should_stop(epoch):
                break
    except DivergenceError as exc:
        result.error = str(exc)
        log.warning("seed %d diverged: %s", seed, exc)
    model.load_state(best_state)
    result.best_epoch = stopper.best_epoch
    if result.error is None:
        final = model.evaluate(val.images, eval_rng(seed))
        ll = model.iwae_log_likelihood(val.images, config.iwae_samples, iwae_rng(seed))
        best = -1 if stopper.best_epoch is None else stopper.best_epoch
        result.final = EpochMetrics.from_eval(best, "best", final, ll=ll)
        result.history.append(result.final)
    return result


def train(config, dataset, on_epoch=None):
    """Train every seed in ``config.seeds`` sequentially."""
    return [train_seed(config, dataset, seed, on_epoch) for seed in config.seeds]


# --------------------------------------------------------------------------
# diagnostics


@dataclass
class ShellReport:
    statuses: tuple
    effective_dof: int
    shell_kls: tuple
    shell_kappas: tuple = ()


def diagnose_shells(shell_kls, dims, shell_kappas=(), threshold=IGNORED_KL_THRESHOLD):
    """Flag shells whose KL stays under ``threshold`` nats as ignored."""
    kls = tuple(float(v) for v in shell_kls)
    dims = tuple(dims)
    if len(kls) != len(dims):
        raise ValueError(f"{len(kls)} per-shell KLs for {len(dims)} shells")
    statuses = tuple("ignored" if kl < threshold else "active" for kl in kls)
    eff = sum(k for k, s in zip(dims, statuses) if s == "active")
    return ShellReport(statuses, eff, kls, tuple(shell_kappas))
