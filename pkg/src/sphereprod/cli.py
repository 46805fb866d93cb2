"""Command-line entry point: ``sphereprod {train,eval,kl-surface,interpolate,diagnose}``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 divergence.
"""

import argparse
import concurrent.futures as cf
import hashlib
import logging
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import _accel, vmf
from .data import DataError, IdxError, load_dataset, train_val_split
from .nn import CheckpointError, sigmoid
from .product import CompositionError, parse_composition
from .sphere import normalize, slerp
from .vae import (
    ConfigError,
    MetricsFormatError,
    ProductVAE,
    TrainConfig,
    diagnose_shells,
    eval_rng,
    iwae_rng,
    read_metrics_csv,
    train_seed,
    write_metrics_csv,
)

log = logging.getLogger("sphereprod")

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

MANIFEST = "manifest.txt"
SUMMARY_HEADER = ("run", "a", "kappa_count", "composition", "LL", "ELBO", "RE", "KL")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    """Bad flag value; maps to exit code 1."""


def _fail(code, message):
    print(f"sphereprod: {message}", file=sys.stderr)
    return code


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def code_hash():
    """sha256 over the package sources, in sorted path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for key, value in entries:
            fh.write(f"{key}={value}\n")


def read_manifest(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition("=")
                out[key] = value
    return out


def _worker_count(requested, n_seeds):
    cap = os.environ.get("SPHEREPROD_THREADS")
    workers = requested
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, min(workers, n_seeds))


def _format_row(run, spec, ll, elbo, re, kl):
    def num(v):
        return "nan" if v is None else f"{v:.2f}"

    return (run, str(spec.ambient_dim), str(spec.n_shells), spec.format(), num(ll), num(elbo), num(re), num(kl))


# --------------------------------------------------------------------------
# train


def _train_one(args):
    config, dataset, seed = args
    return train_seed(config, dataset, seed)


def cmd_train(ns):
    if ns.manifest:
        manifest = read_manifest(ns.manifest)
        for key in ("data", "composition", "beta", "beta_per_shell", "epochs", "warmup",
                    "lookahead", "batch", "lr", "hidden", "iwae_k", "kappa_max", "val_fraction",
                    "synthetic_seed"):
            if key in manifest:
                setattr(ns, key, manifest[key])
        seeds = _ints(manifest["seeds"])
    else:
        seeds = tuple(range(ns.seed, ns.seed + int(ns.seeds)))
    try:
        composition = parse_composition(str(ns.composition))
        beta_per_shell = _floats(ns.beta_per_shell) if ns.beta_per_shell else None
        config = TrainConfig(
            composition=composition,
            beta=float(ns.beta),
            beta_per_shell=beta_per_shell,
            warmup_epochs=int(ns.warmup),
            max_epochs=int(ns.epochs),
            lookahead=int(ns.lookahead),
            seeds=seeds,
            iwae_samples=int(ns.iwae_k),
            batch_size=int(ns.batch),
            lr=float(ns.lr),
            hidden=_ints(str(ns.hidden)),
            kappa_max=float(ns.kappa_max),
            val_fraction=float(ns.val_fraction),
        )
    except (CompositionError, ConfigError, UsageError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    try:
        dataset = load_dataset(ns.data, synthetic_seed=int(ns.synthetic_seed))
    except (DataError, IdxError, OSError) as exc:
        return _fail(EXIT_DATA, str(exc))

    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(
        out / MANIFEST,
        [
            ("composition", composition.format()),
            ("data", ns.data),
            ("synthetic_seed", ns.synthetic_seed),
            ("seeds", ",".join(str(s) for s in seeds)),
            ("beta", config.beta),
            ("beta_per_shell", ",".join(repr(b) for b in beta_per_shell) if beta_per_shell else ""),
            ("epochs", config.max_epochs),
            ("warmup", config.warmup_epochs),
            ("lookahead", config.lookahead),
            ("batch", config.batch_size),
            ("lr", config.lr),
            ("hidden", ",".join(str(h) for h in config.hidden)),
            ("iwae_k", config.iwae_samples),
            ("kappa_max", config.kappa_max),
            ("val_fraction", config.val_fraction),
            ("backend", _accel.BACKEND),
            ("code_hash", code_hash()),
            ("out", str(out)),
        ],
    )

    workers = _worker_count(int(ns.workers), len(seeds))
    jobs = [(config, dataset, s) for s in seeds]
    if workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with cf.ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(job) for job in jobs]

    print(",".join(SUMMARY_HEADER))
    finals = []
    diverged = False
    for res in results:
        seed_dir = out / f"seed{res.seed}"
        seed_dir.mkdir(exist_ok=True)
        write_metrics_csv(seed_dir / "metrics.csv", res.history)
        res.model.save(
            seed_dir / "model.ckpt",
            seed=res.seed,
            val_fraction=repr(config.val_fraction),
            data=ns.data,
            synthetic_seed=ns.synthetic_seed,
            best_epoch=res.best_epoch,
        )
        if res.error is not None:
            diverged = True
            print(f"sphereprod: seed {res.seed} diverged: {res.error}", file=sys.stderr)
            print(",".join(_format_row(f"seed{res.seed}", composition, None, None, None, None)))
            continue
        f = res.final
        finals.append(f)
        print(",".join(_format_row(f"seed{res.seed}", composition, f.ll, f.elbo, f.re, f.kl)))
    if finals:
        mean = [float(np.mean([getattr(f, k) for f in finals])) for k in ("ll", "elbo", "re", "kl")]
        row = _format_row("mean", composition, *mean)
        print(",".join(row))
        with open(out / "summary.csv", "w") as fh:
            fh.write(",".join(SUMMARY_HEADER) + "\n")
            for f, res in zip(finals, [r for r in results if r.error is None]):
                vals = (f.ll, f.elbo, f.re, f.kl)
                fh.write(",".join(_format_row(f"seed{res.seed}", composition, *vals)) + "\n")
            fh.write(",".join(row) + "\n")
    return EXIT_DIVERGED if diverged else 0


# --------------------------------------------------------------------------
# eval


def _load_model(path):
    try:
        return ProductVAE.load(path)
    except (CheckpointError, OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def _eval_split(ns, meta, dataset):
    seed = int(ns.seed) if ns.seed is not None else int(meta.get("seed", 0))
    if ns.split == "all":
        return dataset.images, seed
    frac = float(meta.get("val_fraction", "0.1"))
    train, val = train_val_split(dataset, seed, frac)
    return (val if ns.split == "val" else train).images, seed


def cmd_eval(ns):
    try:
        model, meta = _load_model(ns.checkpoint)
        if ns.composition:
            requested = parse_composition(ns.composition)
            if requested != model.spec:
                raise UsageError(
                    f"checkpoint composition {model.spec.format()} does not match "
                    f"requested {requested.format()}"
                )
    except (UsageError, CompositionError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    source = ns.data or meta.get("data")
    if not source:
        return _fail(EXIT_CONFIG, "no --data given and checkpoint records none")
    try:
        dataset = load_dataset(source, synthetic_seed=int(meta.get("synthetic_seed", 0)))
    except (DataError, IdxError, OSError) as exc:
        return _fail(EXIT_DATA, str(exc))
    if dataset.dim != model.input_dim:
        return _fail(
            EXIT_CONFIG,
            f"data has {dataset.dim} pixels per image ({dataset.height}x{dataset.width}) but "
            f"checkpoint {model.spec.format()} expects {model.input_dim}",
        )
    images, seed = _eval_split(ns, meta, dataset)
    ev = model.evaluate(images, eval_rng(seed))
    ll = model.iwae_log_likelihood(images, int(ns.iwae_k), iwae_rng(seed))
    print("LL,ELBO,RE,KL,shell_kls")
    shells = "|".join(f"{v:.6f}" for v in ev["per_shell_kl"])
    print(f"{ll:.6f},{ev['elbo']:.6f},{ev['re']:.6f},{ev['kl']:.6f},{shells}")
    return 0


# --------------------------------------------------------------------------
# kl-surface


def _parse_range(text, cast):
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise UsageError(f"expected lo:hi[:step], got {text!r}")
    try:
        vals = [cast(p) for p in parts]
    except ValueError as exc:
        raise UsageError(f"bad range {text!r}") from exc
    return vals


def cmd_kl_surface(ns):
    try:
        if ns.m_values:
            ms = list(_ints(ns.m_values))
        else:
            lo, hi, *step = _parse_range(ns.m_range, int)
            ms = list(range(lo, hi + 1, step[0] if step else 1))
        klo, khi = _parse_range(ns.kappa_range, float)[:2]
        steps = int(ns.steps)
        if not ms or min(ms) < 2:
            raise UsageError("m values must be >= 2")
        if klo < 0 or khi < klo or steps < 1:
            raise UsageError("need 0 <= kappa_lo <= kappa_hi and steps >= 1")
    except UsageError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    kappas = np.linspace(klo, khi, steps) if steps > 1 else np.array([klo])
    lines = ["m,kappa,kl"]
    for m in ms:
        kls = vmf.kl_to_uniform(m, kappas)
        lines.extend(f"{m},{repr(float(k))},{repr(float(v))}" for k, v in zip(kappas, kls))
    text = "\n".join(lines) + "\n"
    if ns.out == "-":
        sys.stdout.write(text)
    else:
        Path(ns.out).write_text(text)
    return 0


# --------------------------------------------------------------------------
# interpolate


def write_pgm(path, pixels):
    """Binary greyscale PGM (P5) from a uint8 (height, width) array."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError("not a P5 file")
    w, h, maxval = (int(t) for t in tokens[1:])
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w), maxval


def shell_sweep(mu, steps, rng):
    """Points along a great circle through ``mu``.

    S^1 shells get a full turn; higher spheres slerp from ``mu`` to a
    seeded direction orthogonal to it.
    """
    m = mu.size
    if steps == 1:
        return mu[None, :].copy()
    if m == 2:
        angles = 2.0 * np.pi * np.arange(steps) / steps
        c, s = np.cos(angles), np.sin(angles)
        return np.stack([c * mu[0] - s * mu[1], s * mu[0] + c * mu[1]], axis=1)
    g = rng.standard_normal(m)
    target = normalize(g - mu * (g @ mu))
    return np.stack([slerp(mu, target, t) for t in np.linspace(0.0, 1.0, steps)])


def cmd_interpolate(ns):
    try:
        model, meta = _load_model(ns.checkpoint)
        if model.image_shape is None:
            raise UsageError("checkpoint has no image shape")
        shell = int(ns.shell)
        if not 0 <= shell < model.spec.n_shells:
            raise UsageError(f"shell {shell} out of range for {model.spec.format()}")
        steps = int(ns.steps)
        if steps < 1:
            raise UsageError("steps must be >= 1")
    except UsageError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    rng = np.random.default_rng(int(ns.seed))
    if ns.anchor == "sample":
        anchors = [vmf.VmfDistribution(np.eye(m)[0], 0.0).sample(rng, 1)[0][0]
                   for m in model.spec.ambient_dims]
    else:
        source = ns.data or meta.get("data")
        try:
            dataset = load_dataset(source, synthetic_seed=int(meta.get("synthetic_seed", 0)))
            index = int(ns.anchor)
            x = dataset.images[index : index + 1].astype(float)
            if x.shape[0] != 1:
                raise IndexError(index)
        except (DataError, IdxError, OSError, TypeError) as exc:
            return _fail(EXIT_DATA, str(exc))
        except (ValueError, IndexError):
            return _fail(EXIT_CONFIG, f"bad anchor {ns.anchor!r}")
        posterior = model.encode(x)
        anchors = [mu[0] for mu in posterior.mus]
    sweep = shell_sweep(anchors[shell], steps, rng)
    z = np.tile(np.concatenate(anchors), (steps, 1))
    z[:, model.spec.slices[shell]] = sweep
    logits = model.decode(z)
    if not np.all(np.isfinite(logits)):
        return _fail(EXIT_DIVERGED, "decoder produced non-finite output")
    probs = sigmoid(logits)
    h, w = model.image_shape
    frames = probs.reshape(steps, h, w)
    strip = np.concatenate(list(frames), axis=1)
    write_pgm(ns.out, np.rint(strip * 255.0).astype(np.uint8))
    variation = float(np.abs(np.diff(frames, axis=0)).sum(axis=(1, 2)).mean()) if steps > 1 else 0.0
    print(f"shell={shell} dims=S^{model.spec.dims[shell]} steps={steps} l1_variation={variation:.4f}")
    return 0


# --------------------------------------------------------------------------
# diagnose


def _find_composition(metrics_path):
    here = Path(metrics_path).resolve().parent
    for directory in (here, here.parent):
        manifest = directory / MANIFEST
        if manifest.exists():
            comp = read_manifest(manifest).get("composition")
            if comp:
                return parse_composition(comp)
    return None


def cmd_diagnose(ns):
    try:
        history = read_metrics_csv(ns.metrics)
    except (MetricsFormatError, OSError) as exc:
        return _fail(EXIT_DATA, f"cannot read metrics: {exc}")
    rows = [m for m in history if m.split == "best"] or [m for m in history if m.split == "val"]
    if not rows:
        return _fail(EXIT_DATA, "metrics file has no validation rows")
    final = rows[-1]
    try:
        spec = parse_composition(ns.composition) if ns.composition else _find_composition(ns.metrics)
    except CompositionError as exc:
        return _fail(EXIT_CONFIG, str(exc))
    dims = spec.dims if spec is not None else (0,) * len(final.shell_kls)
    if len(dims) != len(final.shell_kls):
        return _fail(EXIT_DATA, f"{len(final.shell_kls)} shells in metrics, composition has {len(dims)}")
    report = diagnose_shells(final.shell_kls, dims, final.shell_kappas, float(ns.threshold))
    print("shell,dim,kl,kappa,status")
    kappas = final.shell_kappas or (float("nan"),) * len(dims)
    for i, (k, kl, kap, status) in enumerate(zip(dims, report.shell_kls, kappas, report.statuses)):
        dim = f"S^{k}" if spec is not None else "?"
        print(f"{i},{dim},{kl:.4f},{kap:.3f},{status}")
    if spec is not None:
        print(f"effective_dof={report.effective_dof} of {spec.dof} ({spec.format()})")
    else:
        print("effective_dof=unknown (no composition found)")
    return 0


# --------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="sphereprod", description="Hyperspherical product-space VAE toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one composition over several seeds")
    p.add_argument("--data", default="synthetic", help="IDX file, .u8 matrix, or synthetic[:N:H:W]")
    p.add_argument("--composition", default="s10*4")
    p.add_argument("--beta", default=1.0)
    p.add_argument("--beta-per-shell", default=None)
    p.add_argument("--epochs", default=300)
    p.add_argument("--warmup", default=100)
    p.add_argument("--lookahead", default=50)
    p.add_argument("--seeds", default=3, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--batch", default=100)
    p.add_argument("--lr", default=1e-3)
    p.add_argument("--hidden", default="512,256")
    p.add_argument("--iwae-k", default=500)
    p.add_argument("--kappa-max", default=vmf_kappa_max())
    p.add_argument("--val-fraction", default=0.1)
    p.add_argument("--synthetic-seed", default=0)
    p.add_argument("--workers", default=1, help="parallel seed runs (capped by SPHEREPROD_THREADS)")
    p.add_argument("--manifest", default=None, help="re-run the configuration recorded in a manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--composition", default=None)
    p.add_argument("--iwae-k", default=500)
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--seed", default=None, help="split seed (defaults to the checkpoint's)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("kl-surface", help="KL(vMF || uniform) over an (m, kappa) grid")
    p.add_argument("--m-range", default="2:100")
    p.add_argument("--m-values", default=None, help="explicit comma-separated m values")
    p.add_argument("--kappa-range", default="0:100")
    p.add_argument("--steps", default=101)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_kl_surface)

    p = sub.add_parser("interpolate", help="decode a sweep of one shell")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shell", required=True)
    p.add_argument("--steps", default=10)
    p.add_argument("--anchor", default="0", help="'sample' or a data index")
    p.add_argument("--data", default=None)
    p.add_argument("--seed", default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("diagnose", help="flag ignored shells from a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--composition", default=None)
    p.add_argument("--threshold", default=0.1)
    p.set_defaults(func=cmd_diagnose)
    return parser


def vmf_kappa_max():
    from .vae import KAPPA_MAX

    return KAPPA_MAX


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if ns.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
    )
    try:
        return ns.func(ns)
    except UsageError as exc:
        return _fail(EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    sys.exit(main())
